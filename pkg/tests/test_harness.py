import csv
import io
import json
import math

import numpy as np
import pytest

from pdmpsplit import cli, harness
from pdmpsplit.harness import (
    RunSummary,
    experiment_accept,
    experiment_bias_sweep,
    experiment_f2,
    experiment_grid_check,
    experiment_order,
    experiment_particles,
    experiment_skewdb_check,
    experiment_tvterm,
    parse_grid,
    replicate_fanout,
    run_replicates,
    write_table,
)
from pdmpsplit.samplers import SamplerConfig
from pdmpsplit.targets import Gaussian1D, Quartic1D
from pdmpsplit.util import fit_loglog


def _uniform_worker(rng, r):
    return float(rng.uniform())


def _flaky_worker(rng, r):
    if r == 1:
        raise RuntimeError("boom")
    return r


# ----------------------------------------------------------------------------
# Fan-out and summaries
# ----------------------------------------------------------------------------

def test_fanout_serial_equals_parallel():
    cfg = SamplerConfig(family="bps", scheme="RDBDR", delta=0.5, lambda_r=1.0, iters=300)
    a = run_replicates(cfg, Gaussian1D(), "x2", seed=9, replicates=4, batched=False)
    b = run_replicates(cfg, Gaussian1D(), "x2", seed=9, replicates=4, jobs=2, batched=False)
    c = run_replicates(cfg, Gaussian1D(), "x2", seed=9, replicates=4)
    assert a.to_json(timing=False) == b.to_json(timing=False) == c.to_json(timing=False)


def test_fanout_seed_changes_values_not_schema():
    a = replicate_fanout(_uniform_worker, 1, 3)
    b = replicate_fanout(_uniform_worker, 2, 3)
    assert sorted(a.results) == sorted(b.results) == [0, 1, 2]
    assert a.ordered != b.ordered


def test_fanout_collects_failures():
    out = replicate_fanout(_flaky_worker, 0, 3)
    assert out.ordered == [0, 2]
    assert "boom" in out.failures[1]


def test_fanout_needs_one_replicate():
    with pytest.raises(ValueError):
        replicate_fanout(_uniform_worker, 0, 0)


def test_summary_standard_error_and_roundtrip():
    cfg = SamplerConfig(family="zzs", scheme="DBD", delta=0.4, iters=200)
    s = run_replicates(cfg, Gaussian1D(), "x2", seed=1, replicates=5)
    vals = np.array(s.per_replicate)
    assert s.stat_se == pytest.approx(vals.std(ddof=1) / math.sqrt(5), rel=1e-12)
    back = RunSummary.from_json(s.to_json())
    assert back == s and back.config_hash == s.config_hash
    assert "wall_clock" not in json.loads(s.to_json(timing=False))


def test_single_replicate_has_nan_se():
    cfg = SamplerConfig(family="zzs", scheme="DBD", delta=0.4, iters=50)
    s = run_replicates(cfg, Gaussian1D(), "x2", seed=1, replicates=1)
    assert math.isnan(s.stat_se)


def test_aggregation_order_independent():
    vals = list(np.random.default_rng(0).normal(size=17))
    m1, s1 = harness._mean_se(vals)
    m2, s2 = harness._mean_se(vals[::-1])
    assert abs(m1 - m2) <= 1e-12 and abs(s1 - s2) <= 1e-12


def test_grid_point_streams_are_disjoint():
    assert harness._stream_id(1, 0) != harness._stream_id(0, 1)
    assert harness._stream_id(3, 7) == (3 << 32) | 7


# ----------------------------------------------------------------------------
# Experiments
# ----------------------------------------------------------------------------

def test_bias_sweep_analytic_columns():
    rows = experiment_bias_sweep(Gaussian1D(), ["RDBDR", "DBRBD"], [0.0, 1.0, 2.0], 0.5,
                                 iters=200, replicates=1)
    rd = [r for r in rows if r["scheme"] == "RDBDR"]
    assert all(r["tv2"] == 0.0 and r["pred_bias"] == 0.0 for r in rd)
    db = {r["lambda_r"]: r["tv2"] for r in rows if r["scheme"] == "DBRBD"}
    assert db[0.0] == 0.0 and db[2.0] == pytest.approx(2 * db[1.0], rel=1e-6)
    assert all(math.isnan(r["se"]) for r in rows)


def test_bias_sweep_rejects_other_schemes():
    with pytest.raises(ValueError):
        experiment_bias_sweep(Gaussian1D(), ["DBD"], [0.0], 0.5, 10, 1)


def test_order_fit_on_exact_square_law():
    fit = fit_loglog([0.1, 0.2], [3 * 0.01, 3 * 0.04])
    assert fit.slope == pytest.approx(2.0, abs=1e-12)


def test_order_unbiased_verdict_and_exclusion_flags():
    res = experiment_order([0.8, 0.4, 0.2], horizon=2000, replicates=20, seed=3,
                           schemes=("DBD",), family="zzs")
    assert res.fits["DBD"] is None
    assert res.verdict("DBD").startswith("unbiased")
    assert all(r["in_fit"] == (r["abs_bias"] > 2 * r["se"]) for r in res.rows)
    assert sum(r["in_fit"] for r in res.rows) < 2


def test_order_needs_three_steps():
    with pytest.raises(ValueError):
        experiment_order([0.4, 0.2], 100, 2)


def test_accept_diagonal_exact_and_rho_monotone():
    rows = experiment_accept("diagonal", [0.1, 1.0], dim=20, iters=2000, replicates=2,
                             samplers=("zzs",))
    assert all(r["reject_frac"] == 0.0 for r in rows)
    rows = experiment_accept("equicorrelated", [0.0, 0.5, 0.9], dim=20, iters=2000,
                             replicates=4, samplers=("zzs",))
    fr = [r["reject_frac"] for r in rows]
    assert fr[0] == 0.0 and fr[0] < fr[1] < fr[2]


def test_accept_zero_iterations_empty():
    assert experiment_accept("equicorrelated", [0.0, 0.5], iters=0) == []


def test_particles_coincident_pair_without_coupling():
    rows = experiment_particles(2, 0.0, 0.05, 2000, seed=0, every=500, x0=np.zeros(2))
    assert all(r["sampler"] == "zzs-sub" for r in rows)
    assert ParticleVariance.at(np.zeros(2)) == 0.0
    assert rows[-1]["v_est"] < 1.0


class ParticleVariance:
    @staticmethod
    def at(x):
        from pdmpsplit.targets import ParticleChain
        return ParticleChain.empirical_variance(x)


def test_particles_translation_invariant_trace():
    x0 = np.random.default_rng(1).normal(size=6)
    a = experiment_particles(6, 1.0, 0.05, 1500, seed=4, every=500, x0=x0)
    b = experiment_particles(6, 1.0, 0.05, 1500, seed=4, every=500, x0=x0 + 5.0)
    for ra, rb in zip(a, b):
        assert ra["grad_evals"] == rb["grad_evals"]
        assert ra["v_est"] == pytest.approx(rb["v_est"], rel=1e-9)


def test_particles_cost_linear_in_n():
    a = experiment_particles(10, 1.0, 0.05, 500, seed=0, every=500)
    b = experiment_particles(20, 1.0, 0.05, 500, seed=0, every=500)
    ratio = b[-1]["grad_evals"] / a[-1]["grad_evals"]
    assert 1.6 <= ratio <= 2.4


def test_particles_ula_baseline_cost_model():
    rows = experiment_particles(5, 1.0, 0.05, 200, seed=0, every=100, ula_delta=0.001)
    ula = [r for r in rows if r["sampler"] == "ula"]
    assert ula[-1]["grad_evals"] == 200 * (5 + 5 * 4)


def test_grid_and_skewdb_checks_pass():
    rows = experiment_grid_check(Quartic1D(), 0.5, 6.0, [0.0, 1.0])
    assert all(r["status"] == "PASS" for r in rows)
    assert all(r["residual"] <= 1e-8 for r in rows)
    rows = experiment_skewdb_check(Gaussian1D(), 0.5, 6.0)
    assert rows[0]["status"] == "PASS" and rows[0]["residual"] <= 1e-12


def test_grid_check_warns_on_leakage():
    with pytest.warns(RuntimeWarning):
        rows = experiment_grid_check(Gaussian1D(), 1.5, 2.0, [0.0])
    assert rows[0]["status"] == "FAIL"


def test_f2_and_tvterm_tables():
    rows = experiment_f2("RDBDR", Gaussian1D(), 1.0, [-1.0, 0.0, 1.0])
    assert list(rows[0]) == ["x", "f2_plus", "f2_minus", "closed_form_plus", "closed_form_minus"]
    rows = experiment_tvterm(Gaussian1D(), [0.0, 1.0], schemes=("RDBDR",))
    assert list(rows[0]) == ["lambda_r", "scheme", "tv2"]


# ----------------------------------------------------------------------------
# Tables, grids and the command line
# ----------------------------------------------------------------------------

def test_parse_grid():
    assert parse_grid("0:3:0.5") == [0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
    assert parse_grid("0.8,0.4,0.2") == [0.8, 0.4, 0.2]
    for bad in ("0,1,0.5", "1:0:1", "", "0:1"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_write_table_csv_columns():
    text = write_table([{"b": 1, "a": 2.5}], None, "csv", ["a", "b"])
    assert text.splitlines() == ["a,b", "2.5,1"]
    assert json.loads(write_table([{"a": np.float64(1.0)}], None, "json")) == [{"a": 1.0}]


GOLDEN_HEADERS = {
    ("f2", "--xs=-1:1:1"): "x,f2_plus,f2_minus,closed_form_plus,closed_form_minus",
    ("tvterm", "--sweep-lambda", "0:1:0.5"): "lambda_r,scheme,tv2",
    ("grid-check",): "lambda_r,delta,n_max,residual,leakage,status",
    ("skewdb-check",): "delta,n_max,residual,status",
    ("accept", "--values", "0,0.5", "--iters", "20", "--replicates", "1"):
        "structure,param,dim,sampler,reject_frac,se,radius2,radius2_truth",
    ("order", "--deltas", "0.4,0.2,0.1", "--horizon", "20", "--replicates", "2"):
        "scheme,delta,iters,bias,abs_bias,se,in_fit",
    ("bias-sweep", "--schemes", "RDBDR", "--sweep-lambda", "0,1", "--iters", "20",
     "--replicates", "2"):
        "scheme,lambda_r,delta,statistic,stat_mean,truth,bias,abs_bias,se,pred_bias,tv2,replicates",
    ("particles", "--iters", "20", "--every", "10"): "sampler,iter,grad_evals,wall,v_est",
    ("run", "--iters", "10"): "seed,replicates,stat_mean,stat_se,reject_frac,grad_evals,count,config_hash",
}


@pytest.mark.parametrize("argv", list(GOLDEN_HEADERS))
def test_cli_csv_headers(argv, tmp_path):
    out = tmp_path / "out.csv"
    assert cli.main(list(argv) + ["--out", str(out)]) == 0
    assert out.read_text().splitlines()[0] == GOLDEN_HEADERS[argv]


def test_cli_sample_dump(tmp_path):
    dump = tmp_path / "s.csv"
    rc = cli.main(["run", "--target", "gauss-diag", "--dim", "2", "--iters", "5",
                   "--samples", str(dump), "--out", str(tmp_path / "o.csv")])
    assert rc == 0
    rows = list(csv.reader(io.StringIO(dump.read_text())))
    assert rows[0] == ["iter", "x1", "x2", "v1", "v2"] and len(rows) == 6


def test_cli_json_summary_fields(tmp_path):
    out = tmp_path / "o.json"
    assert cli.main(["--seed", "42", "run", "--iters", "10", "--format", "json",
                     "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    for k in ("count", "stat_mean", "stat_se", "reject_frac", "grad_evals", "seed"):
        assert k in d
    assert d["seed"] == 42


def test_cli_exit_codes(tmp_path):
    o = str(tmp_path / "o")
    assert cli.main(["run", "--scheme", "DB", "--out", o]) == 1
    assert cli.main(["run", "--sampler", "ula", "--delta", "3", "--iters", "200", "--out", o]) == 2
    assert cli.main(["grid-check", "--target", "gauss-diag", "--delta", "1.5", "--radius", "2",
                     "--out", o]) == 2
    assert cli.main(["f2", "--target", "gauss-equi", "--dim", "3", "--out", o]) == 1
    assert cli.main(["--replicates", "0", "run", "--out", o]) == 1


def test_cli_full_scale_switch():
    args = cli.build_parser().parse_args(["order", "--paper-scale"])
    assert cli._scaled(args, "order", "horizon") == 1e5
    assert cli._scaled(args, "order", "replicates") == 250
    args = cli.build_parser().parse_args(["order", "--replicates", "7"])
    assert cli._scaled(args, "order", "replicates") == 7
