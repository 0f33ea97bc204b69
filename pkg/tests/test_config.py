import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from twophase import config as C
from twophase.cli import resolve_config

BASE = """
experiment.name = t
model.m = 8
model.d = 4
data.mode = fixed
data.n = 50
schedule.0.optimizer = label_noise_sgd
schedule.0.eta = 0.01
schedule.0.steps = 10
"""


def test_defaults_and_segment_parse():
    cfg = C.parse_config(BASE)
    assert (cfg.m, cfg.d, cfg.n) == (8, 4, 50)
    assert cfg.teacher_norm == C.M_BOUND and cfg.theta_norm() == pytest.approx(8**-0.25)
    seg = cfg.segments[0]
    assert seg.optimizer == "label_noise_sgd" and seg.record_every == 1 and seg.sigma is None
    opt = C.build_optimizer(seg, cfg)
    assert opt.sigma == 1.0 and opt.sampling == "fixed"


def test_comments_and_whitespace():
    cfg = C.parse_config(BASE + "\n   # note\nmodel.seed = 7   # trailing\n")
    assert cfg.model_seed == 7


def test_all_errors_reported_together():
    text = BASE + "model.bogus = 1\nmodel.d = 5\nschedule.0.rho = 0.1\nteacher.norm = -1\njunk line\n"
    with pytest.raises(C.ConfigError) as info:
        C.parse_config(text)
    probs = info.value.problems
    assert any("unknown key 'model.bogus'" in p for p in probs)
    assert any("duplicate key 'model.d'" in p for p in probs)
    assert any("schedule.0.rho: not a parameter of label_noise_sgd" in p for p in probs)
    assert any("teacher.norm" in p for p in probs)
    assert any("expected 'key = value'" in p for p in probs)
    assert len(probs) == 5


def test_schedule_errors():
    with pytest.raises(C.ConfigError, match="at least one segment"):
        C.parse_config("model.m = 4\n")
    with pytest.raises(C.ConfigError, match="without gaps"):
        C.parse_config(BASE.replace("schedule.0", "schedule.1"))
    with pytest.raises(C.ConfigError, match="missing eta"):
        C.parse_config(BASE.replace("schedule.0.eta = 0.01\n", ""))
    with pytest.raises(C.ConfigError, match="sam needs rho"):
        C.parse_config(BASE.replace("label_noise_sgd", "sam"))
    with pytest.raises(C.ConfigError, match="data.n must be set"):
        C.parse_config(BASE.replace("data.n = 50\n", ""))
    with pytest.raises(C.ConfigError, match="needs a fixed dataset"):
        C.parse_config(BASE.replace("data.mode = fixed", "data.mode = fresh")
                       + "schedule.0.sampling = fixed\n")
    with pytest.raises(C.ConfigError, match="learning rate must be positive"):
        C.parse_config(BASE.replace("eta = 0.01", "eta = -1"))


def test_round_trip_bundled():
    for name in ("fig2.cfg", "fig4.cfg", "appendixE.cfg", "lemma2.cfg"):
        cfg = C.load_config(resolve_config(name))
        assert C.parse_config(C.serialize_config(cfg)) == cfg
        assert cfg.name == name.removesuffix(".cfg")


@given(
    m=st.integers(1, 5000), d=st.integers(1, 64), eta=st.floats(1e-6, 1.0),
    norm=st.one_of(st.just(C.M_BOUND), st.floats(1e-3, 10)),
    steps=st.integers(0, 10**6), every=st.integers(1, 100), repeat=st.integers(1, 4),
    clip=st.one_of(st.none(), st.floats(10, 1e3)), sigma=st.floats(0, 5),
)
def test_round_trip_property(m, d, eta, norm, steps, every, repeat, clip, sigma):
    cfg = C.RunConfig(m=m, d=d, teacher_norm=norm, input_clip=clip, repeat=repeat,
                      data_mode="fixed", n=100,
                      segments=[C.SegmentSpec("label_noise_sgd", eta, steps, every, sigma=sigma),
                                C.SegmentSpec("gd", eta, steps, every, gradient="population")])
    if clip is not None and clip < 0.1 * math.sqrt(d):
        return
    text = C.serialize_config(cfg)
    assert C.parse_config(text) == cfg
    assert C.serialize_config(C.parse_config(text)) == text


def test_overrides():
    cfg = C.parse_config(BASE)
    new = C.apply_overrides(cfg, {"model.m": "16", "schedule.0.sigma": "2.5"})
    assert new.m == 16 and new.segments[0].sigma == 2.5
    assert cfg.m == 8
    with pytest.raises(C.ConfigError, match="unknown key"):
        C.apply_overrides(cfg, {"model.nope": "1"})
    with pytest.raises(C.ConfigError):
        C.apply_overrides(cfg, {"model.m": "many"})


def test_repeat_expands_segments():
    cfg = C.parse_config(BASE + "schedule.repeat = 3\n")
    built = C.build_run(cfg)
    assert len(built.segments) == 3 and len(cfg.segments) == 1


def test_build_run_streams():
    cfg = C.parse_config(BASE)
    a, b = C.build_run(cfg), C.build_run(cfg)
    np.testing.assert_array_equal(a.params.W, b.params.W)
    np.testing.assert_array_equal(a.dataset.inputs, b.dataset.inputs)
    # changing the run seed leaves init and data alone
    c = C.build_run(C.apply_overrides(cfg, {"run.seed": "99"}))
    np.testing.assert_array_equal(a.params.W, c.params.W)
    np.testing.assert_array_equal(a.dataset.inputs, c.dataset.inputs)
    assert a.rng.random() != c.rng.random()


def test_markov_stationary_second_layer():
    cfg = C.load_config(resolve_config("lemma2.cfg"))
    built = C.build_run(cfg)
    c = cfg.segments[0].eta ** 0.25
    assert built.markov_state is not None
    assert set(np.round(built.params.a / c).astype(int)) <= {-1, 0, 1}


# -- assumption warnings ----------------------------------------------------------


def _cond(**over):
    cfg = C.parse_config(BASE)
    return C.check_conditions(C.apply_overrides(cfg, {k: str(v) for k, v in over.items()}))


def _tags(warnings):
    return {w.split(":")[0] for w in warnings}


def test_width_exactly_at_bound_has_no_a1():
    # eta = 0.01 gives 1/sqrt(eta) = 10
    assert "A1" not in _tags(_cond(**{"model.m": 10}))
    assert "A1" in _tags(_cond(**{"model.m": 9}))


def test_teacher_norm_above_bound_warns_a4():
    m = 16
    assert "A4" not in _tags(_cond(**{"model.m": m}))
    assert "A4" in _tags(_cond(**{"model.m": m, "teacher.norm": 2 * m**-0.25}))


def test_a2_always_informational():
    w = _cond(**{"schedule.0.eta": 0.1})
    assert any(s.startswith("A2") and "informational" in s for s in w)


def test_a3_and_a6():
    assert "A3" in _tags(_cond())  # n = 50 < 1/eta^2
    assert "A3" not in _tags(_cond(**{"data.n": 10_000}))
    assert "A6" in _tags(_cond(**{"model.d": 6}))
    assert "A6" not in _tags(_cond(**{"model.d": 7}))


def test_a5_only_with_clip():
    assert "A5" not in _tags(_cond())
    assert "A5" in _tags(_cond(**{"teacher.input_clip": 8}))
    assert "A5" not in _tags(_cond(**{"teacher.input_clip": 3}))
