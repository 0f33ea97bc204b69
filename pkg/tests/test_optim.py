import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from twophase import diagnostics as dg
from twophase import optim
from twophase.data import Dataset, make_dataset, make_teacher
from twophase.model import InitConfig, NetworkParams, init_ntk, linearized_predictor
from twophase.optim import (
    GD, SAM, DivergenceError, LabelNoiseSGD, LinearizedGD, MarkovOscillation, MarkovState,
    MarkovStateError, ScheduleSegment, gd_full_batch_step, init_markov_stationary,
    label_noise_sgd_step, linearized_gd_step, markov_oscillation_step, run_schedule, sam_step,
)
from twophase.streams import make_rng

seeds = st.integers(0, 2**32 - 1)


def one_point(x, y, theta_star):
    return make_teacher(len(theta_star), 1.0), Dataset(np.atleast_2d(x), np.atleast_1d(y))


def scalar_problem():
    # m = d = 1 with the single training pair x = 1, y = 2
    tp = make_teacher(1, 2.0)
    return NetworkParams([[1.0]], [1.0]), tp, Dataset([[1.0]], [2.0])


# -- configuration checks ---------------------------------------------------------------


@pytest.mark.parametrize("make", [
    lambda: LabelNoiseSGD(0.0),
    lambda: LabelNoiseSGD(0.1, -1.0),
    lambda: LabelNoiseSGD(0.1, sampling="batch"),
    lambda: GD(-0.1),
    lambda: GD(0.1, "exact"),
    lambda: SAM(0.1, -0.5),
    lambda: MarkovOscillation(0.0),
    lambda: ScheduleSegment(GD(0.1), -1),
    lambda: ScheduleSegment(GD(0.1), 3, 0),
])
def test_invalid_configs_rejected(make):
    with pytest.raises(ValueError):
        make()


# -- label-noise SGD --------------------------------------------------------------------


def test_sgd_hand_example():
    p, tp, ds = scalar_problem()
    info = label_noise_sgd_step(p, tp, ds, LabelNoiseSGD(0.1, 0.0, "fixed"), make_rng(0))
    assert info.residual == -1.0
    assert p.W[0, 0] == pytest.approx(1.1, abs=1e-15) and p.a[0] == pytest.approx(1.1, abs=1e-15)


def test_sgd_no_change_at_perfect_fit():
    p = NetworkParams([[1.0]], [2.0])
    tp = make_teacher(1, 2.0)
    before = p.copy()
    label_noise_sgd_step(p, tp, Dataset([[1.0]], [2.0]), LabelNoiseSGD(0.1, 0.0, "fixed"), make_rng(0))
    assert p == before


def test_noiseless_fresh_sgd_stationary_at_teacher():
    tp = make_teacher(3, 1.0)
    p = NetworkParams([[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]], [1.0, 0.0])
    before = p.copy()
    rng = make_rng(1)
    for _ in range(200):
        label_noise_sgd_step(p, tp, None, LabelNoiseSGD(0.05, 0.0), rng)
    assert p == before


@given(seeds, st.floats(0.0, 2.0), st.floats(1e-3, 0.1))
def test_coupled_update_identity(seed, sigma, eta):
    tp = make_teacher(6, 0.5)
    p = init_ntk(InitConfig(8, 6, seed))
    rng = make_rng(seed)
    for _ in range(5):
        W_before = p.W.copy()
        info = label_noise_sgd_step(p, tp, None, LabelNoiseSGD(eta, sigma), rng)
        lhs = eta * info.residual * (W_before @ info.x)
        assert np.abs(lhs - (info.a_before - p.a)).max() <= 1e-12


@given(seeds)
def test_rank_one_update_matches_numpy_outer(seed):
    rng = make_rng(seed)
    p = NetworkParams(rng.standard_normal((7, 4)), rng.standard_normal(7))
    u, v, alpha = rng.standard_normal(7), rng.standard_normal(4), float(rng.standard_normal())
    expected = p.W + alpha * np.outer(u, v)
    optim._rank_one_update(p, alpha, u, v)
    assert np.allclose(p.W, expected, rtol=0, atol=1e-14)
    assert p.W.flags.c_contiguous


def test_rank_one_update_on_readonly_copy_keeps_snapshot():
    p = init_ntk(InitConfig(3, 2, 0))
    W0 = p.W0.copy()
    optim._rank_one_update(p, 1.0, np.ones(3), np.ones(2))
    assert np.array_equal(p.W0, W0) and not np.array_equal(p.W, W0)


# -- GD -----------------------------------------------------------------------


def test_gd_population_zero_update_at_teacher():
    tp = make_teacher(2, 1.0)
    p = NetworkParams([[1.0, 0.0]], [1.0])
    before = p.copy()
    gd_full_batch_step(p, tp, None, GD(0.1, "population"))
    assert p == before


def test_gd_population_hand_example():
    p = NetworkParams([[2.0]], [1.0])
    gd_full_batch_step(p, make_teacher(1, 1.0), None, GD(0.1, "population"))
    assert p.W[0, 0] == pytest.approx(1.9, abs=1e-15)
    assert p.a[0] == pytest.approx(0.8, abs=1e-15)


def test_gd_empirical_close_to_population():
    tp = make_teacher(8, 0.5)
    ds = make_dataset(tp, 100_000, make_rng(2))
    p = init_ntk(InitConfig(16, 8, 3))
    q = p.copy()
    eta = 0.1
    gd_full_batch_step(p, tp, ds, GD(eta, "empirical"))
    gd_full_batch_step(q, tp, None, GD(eta, "population"))
    diff = max(np.abs(p.W - q.W).max(), np.abs(p.a - q.a).max())
    assert diff <= 10 * eta / math.sqrt(ds.n)


def test_empirical_gd_needs_dataset():
    with pytest.raises(ValueError):
        gd_full_batch_step(init_ntk(InitConfig(2, 2)), make_teacher(2, 1.0), None, GD(0.1))


# -- SAM -----------------------------------------------------------------------


def test_sam_hand_example():
    p, tp, ds = scalar_problem()
    sam_step(p, tp, ds, SAM(0.1, 0.1, 0.0, "fixed"), make_rng(0))
    # perturbed weights 1 - 0.1/sqrt(2), perturbed residual c^2 - 2, outer step 0.1 * c * r
    c = 1 - 0.1 / math.sqrt(2)
    expected = 1 - 0.1 * c * (c * c - 2)
    assert p.W[0, 0] == pytest.approx(expected, abs=1e-14)
    assert p.a[0] == pytest.approx(expected, abs=1e-14)
    assert round(expected, 5) == 1.10561


@given(seeds, st.floats(0.0, 1.5))
def test_sam_zero_radius_is_label_noise_sgd(seed, sigma):
    tp = make_teacher(5, 0.6)
    p = init_ntk(InitConfig(6, 5, seed))
    q = p.copy()
    r1, r2 = make_rng(seed), make_rng(seed)
    for _ in range(10):
        sam_step(p, tp, None, SAM(0.05, 0.0, sigma), r1)
        label_noise_sgd_step(q, tp, None, LabelNoiseSGD(0.05, sigma), r2)
    assert np.array_equal(p.W, q.W) and np.array_equal(p.a, q.a)


def test_sam_zero_gradient_point_skips_perturbation():
    p = NetworkParams([[1.0]], [2.0])
    before = p.copy()
    sam_step(p, make_teacher(1, 2.0), Dataset([[1.0]], [2.0]), SAM(0.1, 0.5, 0.0, "fixed"), make_rng(0))
    assert p == before


# -- Markov oscillation -----------------------------------------------------------


def test_markov_from_top_level_goes_to_zero():
    eta = 0.01
    c = eta**0.25
    tp = make_teacher(2, 0.5)
    p = NetworkParams(np.ones((3, 2)), [c, c, c])
    ms = MarkovState([1, 1, 1])
    info = markov_oscillation_step(p, tp, None, ms, MarkovOscillation(eta, "population"), make_rng(0))
    assert not p.a.any()
    assert np.array_equal(info.delta, [-c, -c, -c])


def test_markov_zero_level_splits_evenly():
    eta = 0.01
    ups = optim.markov_transition(np.zeros(100_000, dtype=np.int8), make_rng(1))
    assert set(np.unique(ups)) == {-1, 1}
    assert abs((ups == 1).mean() - 0.5) < 0.01


@given(seeds, st.sampled_from(["population", "empirical"]))
def test_markov_orthogonality_and_theta_recursion(seed, gradient):
    eta = 0.01
    tp = make_teacher(4, 0.5)
    ds = make_dataset(tp, 50, make_rng(seed)) if gradient == "empirical" else None
    rng = make_rng(seed)
    p = init_ntk(InitConfig(12, 4, seed))
    a, ms = init_markov_stationary(12, eta, rng)
    p = NetworkParams(p.W, a)
    cfg = MarkovOscillation(eta, gradient)
    for _ in range(30):
        a_old, W_old, theta_old = p.a.copy(), p.W.copy(), p.a @ p.W
        info = markov_oscillation_step(p, tp, ds, ms, cfg, rng)
        assert not (p.a * a_old).any()
        assert np.array_equal(p.a, ms.level * eta**0.25)
        theta_new = p.a @ p.W
        assert np.abs(theta_new - (theta_old + info.delta @ W_old)).max() <= 1e-12


def test_markov_lattice_violation_detected():
    eta = 0.01
    p = NetworkParams(np.ones((2, 2)), [0.3, 0.0])
    with pytest.raises(MarkovStateError):
        MarkovState.from_weights(p.a, eta)
    with pytest.raises(MarkovStateError):
        MarkovState([2, 0])
    ms = MarkovState([1, 0])
    with pytest.raises(MarkovStateError):
        markov_oscillation_step(p, make_teacher(2, 1.0), None, ms, MarkovOscillation(eta, "population"),
                                make_rng(0))


def test_stationary_markov_init():
    eta = 0.01
    c = eta**0.25
    a, ms = init_markov_stationary(100_000, eta, make_rng(3))
    assert set(np.unique(a)) <= {-c, 0.0, c}
    freqs = [np.mean(ms.level == k) for k in (-1, 0, 1)]
    assert np.allclose(freqs, [0.25, 0.5, 0.25], atol=0.01)
    sq = a**2
    assert abs(sq.mean() - math.sqrt(eta) / 2) <= 3 * sq.std(ddof=1) / math.sqrt(sq.size)


# -- linearized GD --------------------------------------------------------------


def test_linearized_first_step_equals_gd():
    tp = make_teacher(4, 0.5)
    p = init_ntk(InitConfig(6, 4, 5))
    q = p.copy()
    gd_full_batch_step(p, tp, None, GD(0.1, "population"))
    linearized_gd_step(q, tp, None, LinearizedGD(0.1, "population"))
    assert np.array_equal(p.W, q.W) and np.array_equal(p.a, q.a)


def test_linearized_zero_second_layer_freezes_first_layer():
    tp = make_teacher(3, 1.0)
    W0 = make_rng(0).standard_normal((4, 3))
    p = NetworkParams(W0, np.zeros(4))
    for _ in range(20):
        linearized_gd_step(p, tp, None, LinearizedGD(0.1, "population"))
    assert np.array_equal(p.W, W0)
    assert p.a.any()


def test_linearized_contraction_on_small_instance():
    tp = make_teacher(2, 1.0)
    p = NetworkParams([[0.5, 0.2], [-0.3, 0.4]], [0.3, -0.6])
    lam = p.a0 @ p.a0 + np.linalg.eigvalsh(p.W0.T @ p.W0).max()
    cfg = LinearizedGD(0.9 / lam, "population")
    errs = []
    for _ in range(200):
        errs.append(np.linalg.norm(linearized_predictor(p) - tp.theta_star))
        linearized_gd_step(p, tp, None, cfg)
    # strictly decreasing until the error hits the rounding floor
    assert all(b < a for a, b in zip(errs, errs[1:]) if a > 1e-14)
    assert errs[-1] < 1e-12


# -- scheduler --------------------------------------------------------------------


def test_empty_segment_is_noop():
    tp = make_teacher(3, 0.5)
    p = init_ntk(InitConfig(4, 3, 0))
    before = p.copy()
    sink = dg.MemorySink()
    summary = run_schedule(p, tp, None, [ScheduleSegment(LabelNoiseSGD(0.1), 0)], sinks=[sink])
    assert p == before
    assert summary.steps == 0 and [r.step for r in sink.records] == [0]


def test_record_cadence_includes_segment_ends():
    tp = make_teacher(3, 0.5)
    p = init_ntk(InitConfig(4, 3, 0))
    sink = dg.MemorySink()
    segs = [ScheduleSegment(LabelNoiseSGD(0.01), 7, 3), ScheduleSegment(GD(0.01, "population"), 4, 2)]
    summary = run_schedule(p, tp, None, segs, sinks=[sink], rng=0)
    assert [r.step for r in sink.records] == [0, 3, 6, 7, 9, 11]
    assert summary.n_records == 6 and summary.steps == 11


def test_schedule_determinism():
    def go():
        tp = make_teacher(3, 0.5)
        p = init_ntk(InitConfig(5, 3, 1))
        run_schedule(p, tp, None, [ScheduleSegment(LabelNoiseSGD(0.02, 1.0), 300)], rng=9)
        return p
    assert go() == go()


def test_divergence_is_reported_with_partial_summary():
    tp = make_teacher(4, 0.5)
    p = init_ntk(InitConfig(8, 4, 0))
    sink = dg.MemorySink()
    with pytest.raises(DivergenceError) as err:
        run_schedule(p, tp, None, [ScheduleSegment(LabelNoiseSGD(5.0, 1.0), 1000)], sinks=[sink], rng=0)
    summary = err.value.summary
    assert summary.diverged and summary.divergence_reason
    assert err.value.step <= 1000
    assert json.loads(summary.to_json())["diverged"] is True


def test_step_info_and_summary_serialize():
    tp = make_teacher(2, 0.5)
    p = init_ntk(InitConfig(3, 2, 0))
    info = label_noise_sgd_step(p, tp, None, LabelNoiseSGD(0.1), make_rng(0))
    blob = json.dumps(info.to_dict())
    assert json.loads(blob)["kind"] == "label_noise_sgd"
    summary = run_schedule(p, tp, None, [ScheduleSegment(GD(0.1, "population"), 5)])
    assert json.loads(summary.to_json())["steps"] == 5


def test_alternating_schedule_norm_moves_only_with_noise():
    tp = make_teacher(16, 64**-0.25)
    ds = make_dataset(tp, 2000, make_rng(1))
    p = init_ntk(InitConfig(64, 16, 0))
    sink = dg.MemorySink()
    noisy, quiet = LabelNoiseSGD(0.01, 1.0, "fixed"), LabelNoiseSGD(0.01, 0.0, "fixed")
    segs = [ScheduleSegment(noisy, 3000, 3000), ScheduleSegment(quiet, 3000, 3000)]
    run_schedule(p, tp, ds, segs, sinks=[sink], rng=2)
    n0, n1, n2 = sink.column("mean_norm")
    assert n1 < 0.9 * n0
    assert abs(n2 - n1) < 0.25 * (n0 - n1)
