"""Steppers for the two-layer linear network and the segment scheduler.

Every stepper mutates ``p.W`` and ``p.a`` in place, evaluating both layers'
gradients at the pre-step values, and returns a :class:`StepInfo` carrying what
the diagnostics need. Full-batch steppers accept ``gradient="empirical"`` (fixed
dataset) or ``gradient="population"`` (``E[x x^T] = I``).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy.linalg.blas import dger

from . import diagnostics
from .data import Dataset, TeacherProblem, sample_input
from .model import NetworkParams, linearized_predictor

THETA_BLOWUP = 1e6
SAM_GRAD_FLOOR = 1e-12


class DivergenceError(RuntimeError):
    def __init__(self, step: int, reason: str, summary=None):
        super().__init__(f"diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.summary = summary


class MarkovStateError(ValueError):
    """Second-layer weights left the three-point lattice."""


# -- optimizer configurations -------------------------------------------------


def _check_eta(eta):
    if not eta > 0:
        raise ValueError(f"learning rate must be positive, got {eta}")


def _check_choice(value, allowed, what):
    if value not in allowed:
        raise ValueError(f"{what} must be one of {allowed}, got {value!r}")


@dataclass(frozen=True)
class LabelNoiseSGD:
    eta: float
    sigma: float = 1.0
    sampling: str = "fresh"

    def __post_init__(self):
        _check_eta(self.eta)
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        _check_choice(self.sampling, ("fresh", "fixed"), "sampling")


@dataclass(frozen=True)
class GD:
    eta: float
    gradient: str = "empirical"

    def __post_init__(self):
        _check_eta(self.eta)
        _check_choice(self.gradient, ("empirical", "population"), "gradient")


@dataclass(frozen=True)
class SAM:
    eta: float
    rho: float
    sigma: float = 0.0
    sampling: str = "fresh"

    def __post_init__(self):
        _check_eta(self.eta)
        if self.rho < 0 or self.sigma < 0:
            raise ValueError("SAM needs rho >= 0 and sigma >= 0")
        _check_choice(self.sampling, ("fresh", "fixed"), "sampling")


@dataclass(frozen=True)
class MarkovOscillation:
    eta: float
    gradient: str = "empirical"

    def __post_init__(self):
        _check_eta(self.eta)
        _check_choice(self.gradient, ("empirical", "population"), "gradient")

    @property
    def level(self) -> float:
        return self.eta**0.25


@dataclass(frozen=True)
class LinearizedGD:
    eta: float
    gradient: str = "empirical"

    def __post_init__(self):
        _check_eta(self.eta)
        _check_choice(self.gradient, ("empirical", "population"), "gradient")


OptimizerConfig = Union[LabelNoiseSGD, GD, SAM, MarkovOscillation, LinearizedGD]

OPTIMIZER_NAMES = {
    LabelNoiseSGD: "label_noise_sgd",
    GD: "gd",
    SAM: "sam",
    MarkovOscillation: "markov",
    LinearizedGD: "linearized_gd",
}


@dataclass(frozen=True)
class ScheduleSegment:
    config: OptimizerConfig
    steps: int
    record_every: int = 1

    def __post_init__(self):
        if self.steps < 0 or self.record_every < 1:
            raise ValueError("segment needs steps >= 0 and record_every >= 1")


# -- per-step information ------------------------------------------------------


@dataclass
class StepInfo:
    """What one step did.

    For coupled steps (SGD, GD) the update was ``W -= eta * outer(a, g)`` and
    ``a -= eta * W g`` with ``g = scale * direction``; ``proj = W(t) @ direction``
    and ``sqnorm = direction @ direction`` let the monitors evaluate the
    per-neuron norm-change term without redoing the step.
    """

    kind: str
    eta: float
    residual: Optional[float] = None
    x: Optional[np.ndarray] = None
    epsilon: float = 0.0
    a_before: Optional[np.ndarray] = None
    a_after: Optional[np.ndarray] = None
    scale: Optional[float] = None
    proj: Optional[np.ndarray] = None
    sqnorm: Optional[float] = None
    delta: Optional[np.ndarray] = None

    @property
    def coupled(self) -> bool:
        return self.proj is not None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _check_step(p: NetworkParams, step: int) -> None:
    theta = p.a @ p.W
    if not (np.isfinite(theta).all() and np.isfinite(p.a).all()):
        raise DivergenceError(step, "non-finite parameters")
    if float(np.sqrt(theta @ theta)) > THETA_BLOWUP:
        raise DivergenceError(step, f"|theta| exceeded {THETA_BLOWUP:g}")


def _draw_example(p, tp, ds, sampling, rng):
    if sampling == "fixed":
        if ds is None:
            raise ValueError("fixed-dataset sampling needs a dataset")
        idx = int(rng.integers(ds.n))
        return ds.inputs[idx], float(ds.targets[idx])
    x = sample_input(tp, rng)
    return x, float(tp.theta_star @ x)


def _draw_noise(sigma, rng) -> float:
    if sigma > 0:
        return sigma if rng.random() < 0.5 else -sigma
    return 0.0


def _rank_one_update(p, alpha, u, v) -> None:
    """``p.W += alpha * outer(u, v)`` in place through BLAS ``dger``."""
    out = dger(alpha, v, u, a=p.W.T, overwrite_a=1)
    if not np.shares_memory(out, p.W):
        p.W = np.ascontiguousarray(out.T)


def _sample_update(p, eta, r, x, Wx, a_src) -> None:
    # both layers move from the pre-step values
    a_new = p.a - (eta * r) * Wx
    _rank_one_update(p, -(eta * r), a_src, x)
    p.a = a_new


def label_noise_sgd_step(p, tp, ds, cfg: LabelNoiseSGD, rng) -> StepInfo:
    x, y = _draw_example(p, tp, ds, cfg.sampling, rng)
    eps = _draw_noise(cfg.sigma, rng)
    Wx = p.W @ x
    r = float(p.a @ Wx) - y - eps
    if not math.isfinite(r):
        raise DivergenceError(-1, "non-finite residual")
    a_before = p.a
    _sample_update(p, cfg.eta, r, x, Wx, a_before)
    return StepInfo("label_noise_sgd", cfg.eta, r, x, eps, a_before, p.a, r, Wx, float(x @ x))


def sam_step(p, tp, ds, cfg: SAM, rng) -> StepInfo:
    x, y = _draw_example(p, tp, ds, cfg.sampling, rng)
    eps = _draw_noise(cfg.sigma, rng)
    Wx = p.W @ x
    r = float(p.a @ Wx) - y - eps
    if not math.isfinite(r):
        raise DivergenceError(-1, "non-finite residual")
    a_before = p.a
    # global norm over the flattened (W, a) gradient
    gnorm = abs(r) * math.sqrt(float(a_before @ a_before) * float(x @ x) + float(Wx @ Wx))
    if cfg.rho > 0 and gnorm > SAM_GRAD_FLOOR:
        step = cfg.rho * r / gnorm
        W_pert = p.W + step * np.outer(a_before, x)
        a_pert = a_before + step * Wx
        Wpx = W_pert @ x
        r_pert = float(a_pert @ Wpx) - y - eps
        if not math.isfinite(r_pert):
            raise DivergenceError(-1, "non-finite perturbed residual")
        _sample_update(p, cfg.eta, r_pert, x, Wpx, a_pert)
        return StepInfo("sam", cfg.eta, r_pert, x, eps, a_before, p.a)
    _sample_update(p, cfg.eta, r, x, Wx, a_before)
    return StepInfo("sam", cfg.eta, r, x, eps, a_before, p.a, r, Wx, float(x @ x))


def full_gradient(theta, tp: TeacherProblem, ds: Optional[Dataset], mode: str) -> np.ndarray:
    """Mean-squared-loss gradient with respect to ``theta``."""
    if mode == "population":
        return theta - tp.theta_star
    if ds is None:
        raise ValueError("empirical gradient needs a dataset")
    return ds.mean_gradient(theta)


def gd_full_batch_step(p, tp, ds, cfg: GD) -> StepInfo:
    g = full_gradient(p.a @ p.W, tp, ds, cfg.gradient)
    Wg = p.W @ g
    a_before = p.a
    a_new = p.a - cfg.eta * Wg
    _rank_one_update(p, -cfg.eta, a_before, g)
    p.a = a_new
    return StepInfo("gd", cfg.eta, a_before=a_before, a_after=p.a, scale=1.0, proj=Wg,
                    sqnorm=float(g @ g))


def linearized_gd_step(p, tp, ds, cfg: LinearizedGD) -> StepInfo:
    g = full_gradient(linearized_predictor(p), tp, ds, cfg.gradient)
    a_before = p.a
    p.a = p.a - cfg.eta * (p.W0 @ g)
    _rank_one_update(p, -cfg.eta, p.a0, g)
    return StepInfo("linearized_gd", cfg.eta, a_before=a_before, a_after=p.a)


# -- Markov oscillation of the second layer -----------------------------------


@dataclass
class MarkovState:
    """Lattice index per neuron (``-1, 0, +1``) and the last increment."""

    level: np.ndarray
    prev_delta: np.ndarray = field(default=None)

    def __post_init__(self):
        self.level = np.asarray(self.level, dtype=np.int8)
        if not np.isin(self.level, (-1, 0, 1)).all():
            raise MarkovStateError("levels must be -1, 0 or +1")
        if self.prev_delta is None:
            self.prev_delta = np.zeros(self.level.shape)

    @classmethod
    def from_weights(cls, a, eta) -> "MarkovState":
        c = eta**0.25
        a = np.asarray(a, dtype=np.float64)
        level = np.zeros(a.shape, dtype=np.int8)
        level[a == c] = 1
        level[a == -c] = -1
        if not np.array_equal(level * c, a):
            raise MarkovStateError("second-layer weights are off the {-c, 0, c} lattice")
        return cls(level)


def init_markov_stationary(m: int, eta: float, rng):
    """Stationary three-point draw: ``+-eta**0.25`` w.p. 1/4 each, 0 w.p. 1/2."""
    if m < 1:
        raise ValueError("m must be >= 1")
    u = rng.random(m)
    level = np.where(u < 0.25, -1, np.where(u < 0.75, 0, 1)).astype(np.int8)
    return level * eta**0.25, MarkovState(level)


def markov_transition(level: np.ndarray, rng) -> np.ndarray:
    """One transition of the chain on lattice indices."""
    new = np.zeros_like(level)
    at_zero = level == 0
    coins = rng.random(int(at_zero.sum()))
    new[at_zero] = np.where(coins < 0.5, 1, -1)
    return new


def markov_oscillation_step(p, tp, ds, ms: MarkovState, cfg: MarkovOscillation, rng) -> StepInfo:
    c = cfg.level
    if not np.array_equal(p.a, ms.level * c):
        raise MarkovStateError("second-layer weights drifted off the Markov lattice")
    g = full_gradient(p.a @ p.W, tp, ds, cfg.gradient)
    a_before = p.a
    _rank_one_update(p, -cfg.eta, a_before, g)
    new_level = markov_transition(ms.level, rng)
    ms.prev_delta = (new_level - ms.level) * c
    ms.level = new_level
    p.a = new_level * c
    return StepInfo("markov", cfg.eta, a_before=a_before, a_after=p.a, delta=ms.prev_delta)


# -- scheduler -----------------------------------------------------------------


@dataclass
class RunSummary:
    steps: int
    final_train_loss: float
    final_pop_loss: float
    final_theta_err: float
    escape_step: Optional[int]
    phase_boundary_step: Optional[int]
    n_records: int
    phase_report: diagnostics.PhaseReport
    diverged: bool = False
    divergence_reason: Optional[str] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["phase_report"] = self.phase_report.to_dict()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _predicted_T1(p, segments) -> Optional[float]:
    for seg in segments:
        cfg = seg.config
        if isinstance(cfg, LabelNoiseSGD) and cfg.sigma > 0 and p.m >= 2:
            from .verify import predicted_escape_time

            return predicted_escape_time(p.m, cfg.eta, cfg.sigma)
    return None


def run_schedule(p: NetworkParams, tp: TeacherProblem, ds: Optional[Dataset],
                 segments: Sequence[ScheduleSegment], sinks=(), rng=None,
                 markov_state: Optional[MarkovState] = None, monitors=()) -> RunSummary:
    """Run the segments in order on ``p``.

    A record is emitted at step 0, every ``record_every`` steps of a segment and
    at each segment end. Monitors get ``observe(step, info, p)`` after every
    step. On divergence the sinks are flushed and :class:`DivergenceError` is
    raised with the partial summary attached.
    """
    if not segments:
        raise ValueError("schedule needs at least one segment")
    from .streams import make_rng

    rng = make_rng(0 if rng is None else rng)
    tracker = diagnostics.PhaseTracker(p, tp, eta=segments[0].config.eta)
    last = diagnostics.record(p, tp, ds, 0, sinks, tracker=tracker, monitors=monitors)
    step = 0

    def summary(diverged=False, reason=None):
        return RunSummary(
            steps=step,
            final_train_loss=last.train_loss,
            final_pop_loss=last.pop_loss,
            final_theta_err=last.theta_err,
            escape_step=tracker.all_escaped_step,
            phase_boundary_step=tracker.phase2_entry_step,
            n_records=tracker.n_records,
            phase_report=tracker.report(_predicted_T1(p, segments)),
            diverged=diverged,
            divergence_reason=reason,
        )

    try:
        for seg in segments:
            cfg = seg.config
            if isinstance(cfg, MarkovOscillation) and markov_state is None:
                markov_state = MarkovState.from_weights(p.a, cfg.eta)
            for k in range(1, seg.steps + 1):
                try:
                    info = _dispatch(p, tp, ds, cfg, rng, markov_state)
                except DivergenceError as err:
                    raise DivergenceError(step + 1, err.reason) from None
                step += 1
                for mon in monitors:
                    mon.observe(step, info, p)
                _check_step(p, step)
                tracker.eta = cfg.eta
                if k % seg.record_every == 0 or k == seg.steps:
                    last = diagnostics.record(p, tp, ds, step, sinks, tracker=tracker,
                                              monitors=monitors)
    except DivergenceError as err:
        for sink in sinks:
            sink.flush()
        err.summary = summary(True, err.reason)
        raise
    for sink in sinks:
        sink.flush()
    return summary()


def _dispatch(p, tp, ds, cfg, rng, markov_state) -> StepInfo:
    if isinstance(cfg, LabelNoiseSGD):
        return label_noise_sgd_step(p, tp, ds, cfg, rng)
    if isinstance(cfg, GD):
        return gd_full_batch_step(p, tp, ds, cfg)
    if isinstance(cfg, SAM):
        return sam_step(p, tp, ds, cfg, rng)
    if isinstance(cfg, MarkovOscillation):
        return markov_oscillation_step(p, tp, ds, markov_state, cfg, rng)
    if isinstance(cfg, LinearizedGD):
        return linearized_gd_step(p, tp, ds, cfg)
    raise TypeError(f"unknown optimizer config {cfg!r}")


def step_once(p, tp, ds, cfg, rng, markov_state=None) -> StepInfo:
    """Single step of any configured optimizer, with the divergence check."""
    info = _dispatch(p, tp, ds, cfg, rng, markov_state)
    _check_step(p, 1)
    return info
