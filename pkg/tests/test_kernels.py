import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdmpsplit.kernels import (
    JumpGuardError,
    SchemeError,
    State,
    EvalCounter,
    apply_scheme,
    bps_bounce_window,
    drift,
    parse_scheme,
    reflect,
    refresh_window,
    subsampled_zzs_bounce_window,
    zzs_bounce_window,
    zzs_flip_probability,
)
from pdmpsplit.targets import FactorizedTarget, Gaussian1D, ParticleChain, SingleFactor
from pdmpsplit.util import RngBatch, RngStream
from conftest import ScriptedRng


def test_parse_dbd():
    spec = parse_scheme("DBD", 0.5)
    assert spec.tokens == ("D", "B", "D") and spec.durations == (0.25, 0.5, 0.25)


def test_parse_rdbdr():
    spec = parse_scheme("RDBDR", 1.0)
    assert spec.durations == (0.5, 0.5, 1.0, 0.5, 0.5)
    assert sum(spec.durations) == 1.0 * (5 + 1) / 2


@pytest.mark.parametrize("word, msg", [("DB", "odd length"), ("DBR", "palindrome"),
                                       ("DXD", "position 1"), ("DBDBDBD", "odd length"),
                                       ("", "odd length")])
def test_parse_errors(word, msg):
    with pytest.raises(SchemeError, match=msg):
        parse_scheme(word, 0.1)


def test_parse_rejects_operator_with_wrong_total_time():
    with pytest.raises(SchemeError, match="acts for"):
        parse_scheme("DDD", 0.1)


def test_parse_rejects_nonpositive_step():
    with pytest.raises(SchemeError):
        parse_scheme("DBD", 0.0)


def test_drift_examples():
    s = drift(State(np.array([0.0]), np.array([1.0])), 0.5)
    assert s.x[0] == 0.5
    s0 = State(np.array([0.3, -1.0]), np.array([1.0, -1.0]))
    assert np.array_equal(drift(s0, 0.0).x, s0.x)
    v = np.array([-1.0, 1.0]) / math.sqrt(2)
    s = drift(State(np.array([1.0, 2.0]), v, "bps"), math.sqrt(2))
    np.testing.assert_allclose(s.x, [0.0, 3.0], atol=1e-15)


@pytest.mark.parametrize("g, v, out", [((0, 2), (0.6, 0.8), (0.6, -0.8)),
                                       ((1, 0), (1, 0), (-1, 0)),
                                       ((1, 1), (1, 0), (0, -1))])
def test_reflect_examples(g, v, out):
    np.testing.assert_allclose(reflect(np.array(v, float), np.array(g, float)), out, atol=1e-15)


def test_reflect_zero_gradient_rejected():
    with pytest.raises(ValueError):
        reflect(np.array([1.0, 0.0]), np.zeros(2))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_reflection_properties(g, v):
    g, v = np.array(g), np.array(v)
    if np.linalg.norm(g) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    v = v / np.linalg.norm(v)
    r = reflect(v, g)
    assert abs(r @ g + v @ g) <= 1e-12 * (1 + np.abs(g).sum())
    assert abs(np.linalg.norm(r) - 1.0) <= 1e-12
    np.testing.assert_allclose(reflect(r, g), v, atol=1e-12)


def test_refresh_rate_zero_and_empty_window():
    s = State(np.zeros(3), np.array([0.6, 0.8, 0.0]), "bps")
    assert np.array_equal(refresh_window(s, 1.0, 0.0, RngStream(0)).v, s.v)
    assert np.array_equal(refresh_window(s, 0.0, 5.0, RngStream(0)).v, s.v)


def test_refresh_frequency():
    # Replay the kernel's draws: one uniform decides, one velocity draw follows.
    p = 1 - math.exp(-0.5)
    assert p == pytest.approx(0.393469, abs=1e-6)
    n = 100_000
    rng, replay = RngStream(9), RngStream(9)
    hits = 0
    for _ in range(n):
        out = refresh_window(State(np.zeros(1), np.ones(1), "zzs"), 0.5, 1.0, rng)
        u = replay.uniform(())
        z = replay.uniform((1,))
        if u < p:
            hits += 1
            assert out.v[0] == (1.0 if z[0] < 0.5 else -1.0)
        else:
            assert out.v[0] == 1.0
    assert abs(hits / n - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_refresh_keeps_unit_norm():
    rng = RngStream(2)
    s = State(np.zeros(4), np.array([1.0, 0, 0, 0]), "bps")
    for _ in range(200):
        s = refresh_window(s, 0.7, 2.0, rng)
        assert abs(np.linalg.norm(s.v) - 1.0) <= 1e-12


def test_zzs_flip_probability_examples():
    g = Gaussian1D().gradient(np.array([2.0]))
    assert zzs_flip_probability(np.array([1.0]), g, 0.5)[0] == pytest.approx(1 - math.exp(-1), abs=1e-15)
    assert zzs_flip_probability(np.array([-1.0]), g, 0.5)[0] == 0.0
    assert zzs_flip_probability(np.array([1.0]), g, 0.0)[0] == 0.0


def test_zzs_bounce_frequency():
    t = Gaussian1D()
    p = 1 - math.exp(-0.5 * 2.0)
    rng = RngStream(1)
    n = 100_000
    flips = sum(zzs_bounce_window(State(np.array([2.0]), np.array([1.0])), t, 0.5, rng).v[0] < 0
                for _ in range(n))
    assert abs(flips / n - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_bps_bounce_examples():
    t = Gaussian1D()
    s = State(np.array([1.0]), np.array([-1.0]), "bps")
    for seed in range(20):
        assert bps_bounce_window(s, t, 1.0, RngStream(seed)).v[0] == -1.0
    s = State(np.array([1.0]), np.array([1.0]), "bps")
    assert bps_bounce_window(s, t, 0.0, RngStream(0)).v[0] == 1.0
    rng = RngStream(4)
    n = 50_000
    hits = sum(bps_bounce_window(s, t, 1.0, rng).v[0] < 0 for _ in range(n))
    p = 1 - math.exp(-1)
    assert abs(hits / n - p) < 4 * math.sqrt(p * (1 - p) / n)


def test_bounce_counts_one_gradient_per_window():
    c = EvalCounter()
    s = State(np.array([1.0]), np.array([1.0]))
    zzs_bounce_window(s, Gaussian1D(), 0.3, RngStream(0), c)
    bps_bounce_window(State(s.x, s.v, "bps"), Gaussian1D(), 0.3, RngStream(0), c)
    assert c.grad == 2


def test_apply_single_drift_token():
    s = apply_scheme(State(np.array([0.0]), np.array([1.0])), parse_scheme("D", 0.7),
                     Gaussian1D(), 0.0, RngStream(0))
    assert s.x[0] == 0.7


def test_apply_dbd_forced_no_flip_and_flip():
    start = State(np.array([0.0]), np.array([1.0]))
    spec = parse_scheme("DBD", 0.5)
    s = apply_scheme(start, spec, Gaussian1D(), 0.0, ScriptedRng([0.999999]))
    assert (s.x[0], s.v[0]) == (0.5, 1.0)
    s = apply_scheme(start, spec, Gaussian1D(), 0.0, ScriptedRng([1e-9]))
    assert (s.x[0], s.v[0]) == (0.0, -1.0)


def test_batched_scheme_matches_rows():
    spec = parse_scheme("RDBDR", 0.4)
    t = Gaussian1D()
    b = RngBatch(2, [0, 1, 2])
    sb = State(np.array([[0.1], [0.5], [-1.0]]), np.array([[1.0], [-1.0], [1.0]]), "bps")
    rows = [State(sb.x[r].copy(), sb.v[r].copy(), "bps") for r in range(3)]
    streams = [RngStream(2, r) for r in range(3)]
    for _ in range(200):
        sb = apply_scheme(sb, spec, t, 1.0, b)
        rows = [apply_scheme(rows[r], spec, t, 1.0, streams[r]) for r in range(3)]
    for r in range(3):
        assert np.array_equal(sb.x[r], rows[r].x) and np.array_equal(sb.v[r], rows[r].v)


def test_single_factor_fixed_j_matches_canonical_law():
    t = Gaussian1D()
    ft = SingleFactor(t)
    n = 40_000
    s = State(np.array([1.0]), np.array([1.0]))
    rng = RngStream(6)
    flips = sum(subsampled_zzs_bounce_window(s, ft, 0.5, "fixed-J", rng).v[0] < 0 for _ in range(n))
    p = 1 - math.exp(-0.5)
    assert abs(flips / n - p) < 4 * math.sqrt(p * (1 - p) / n)


class _Steep(FactorizedTarget):
    dim = 1
    num_factors = 2

    def factor_gradient(self, j, x):
        return np.array([1e6 if j == 0 else -1e6])


def test_fixed_j_at_most_one_flip_with_frozen_factor():
    s = State(np.array([0.0]), np.array([1.0]))
    for seed in range(50):
        out = subsampled_zzs_bounce_window(s, _Steep(), 1.0, "fixed-J", RngStream(seed))
        assert out.v[0] in (1.0, -1.0)


def test_per_event_j_no_forces_no_flips():
    pc = ParticleChain(4, 0.0)
    s = State(np.zeros(4), np.array([1.0, -1.0, 1.0, 1.0]))
    out = subsampled_zzs_bounce_window(s, pc, 1.0, "per-event-J", RngStream(0))
    assert np.array_equal(out.v, s.v)


def test_per_event_j_forces_two_particles():
    pc = ParticleChain(2, 1.0)
    x = np.array([1.0, 0.0])
    assert pc.chain_force(x)[0] == 4.0
    w1 = pc.meanfield_force(0, 1, x)
    assert abs(w1) == pytest.approx(1 / math.sqrt(2), abs=1e-6)
    # Flip acceptance (v_0 * a W'(x_0 - x_J))_+ / a: zero moving outwards with v = +1,
    # 1/sqrt(2) for v = -1.
    assert max(1.0 * w1, 0.0) == 0.0
    assert max(-1.0 * w1, 0.0) == pytest.approx(0.707107, abs=1e-6)


def test_per_event_j_requires_particle_chain():
    with pytest.raises(ValueError):
        subsampled_zzs_bounce_window(State(np.zeros(1), np.ones(1)), SingleFactor(Gaussian1D()),
                                     0.1, "per-event-J", RngStream(0))


def test_jump_guard():
    pc = ParticleChain(2, 1e5)
    s = State(np.array([0.0, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(JumpGuardError):
        subsampled_zzs_bounce_window(s, pc, 1.0, "per-event-J", RngStream(0))
