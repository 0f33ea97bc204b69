"""Measurements on the network state: losses, neuron norms and alignment,
lazy-regime escape, the per-step norm-change term and its telescoping sum,
the closed-form small-initialization predictor, and trace sinks."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np

TRACE_HEADER = (
    "step,train_loss,pop_loss,mean_norm,min_norm,max_norm,"
    "mean_align,min_align,frac_escaped,theta_err,a_abs_max"
)
NEURON_HEADER = "step,i,w_norm,align,a_i,cum_dw,escaped"
DEGENERATE_NORM = 1e-300


class SinkError(IOError):
    pass


# -- scalar diagnostics --------------------------------------------------------


def delta_w(residual: float, x, w_i, a_i: float) -> float:
    """``-r^2 ((x.w_i)^2 - a_i^2 |x|^2)``; the ``eta^2``-weighted sum of these
    accounts for the change of ``|w_i|^2 - a_i^2`` under single-sample SGD."""
    x = np.asarray(x, dtype=np.float64)
    proj = float(x @ np.asarray(w_i, dtype=np.float64))
    return -(residual**2) * (proj**2 - a_i**2 * float(x @ x))


def delta_w_vector(scale: float, proj: np.ndarray, a: np.ndarray, sqnorm: float) -> np.ndarray:
    """All-neuron form for an update with gradient direction ``g = scale * u``."""
    return -(scale**2) * (proj**2 - a**2 * sqnorm)


def telescope_check(a_history, dw_history, w0, wT, eta: float) -> float:
    """``| |w(T)|^2 - (|w(0)|^2 + eta^2 sum dW - a(0)^2 + a(T)^2) |`` for one neuron.

    ``a_history`` holds ``a_i(0..T)`` and ``dw_history`` the ``T`` per-step terms.
    """
    a_history = np.asarray(a_history, dtype=np.float64)
    dw_history = np.asarray(dw_history, dtype=np.float64)
    if a_history.size != dw_history.size + 1:
        raise ValueError(
            f"history gap: {a_history.size} second-layer values for {dw_history.size} steps"
        )
    w0 = np.asarray(w0, dtype=np.float64)
    wT = np.asarray(wT, dtype=np.float64)
    rhs = w0 @ w0 + eta**2 * math.fsum(dw_history) - a_history[0] ** 2 + a_history[-1] ** 2
    return abs(float(wT @ wT) - rhs)


def neuron_norms(W) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", W, W))


def alignment_cosine(w, theta_star) -> float:
    """``|<theta*, w>| / (|theta*| |w|)``, and 0 for a vanishing neuron."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    tnorm = float(np.linalg.norm(theta_star))
    if tnorm == 0:
        raise ValueError("alignment is undefined for a zero theta_star")
    w = np.asarray(w, dtype=np.float64)
    wnorm = float(np.linalg.norm(w))
    if wnorm < DEGENERATE_NORM:
        return 0.0
    return min(1.0, abs(float(w @ theta_star)) / (tnorm * wnorm))


def alignments(W, theta_star) -> np.ndarray:
    theta_star = np.asarray(theta_star, dtype=np.float64)
    tnorm = float(np.linalg.norm(theta_star))
    if tnorm == 0:
        raise ValueError("alignment is undefined for a zero theta_star")
    norms = neuron_norms(W)
    out = np.zeros(len(norms))
    ok = norms >= DEGENERATE_NORM
    out[ok] = np.abs(W[ok] @ theta_star) / (tnorm * norms[ok])
    return np.minimum(out, 1.0)


def lazy_escape_status(p):
    """Distances ``|w_i - w_i(0)|``, flags ``distance > 1/sqrt(m)``, escaped fraction."""
    dist = neuron_norms(p.W - p.W0)
    escaped = dist > 1.0 / math.sqrt(p.m)
    return dist, escaped, float(escaped.mean())


def detect_phase_boundary(p, eta: float) -> bool:
    """True once every ``|w_i|`` and ``|a_i|`` is at most ``sqrt(eta)``."""
    bound = math.sqrt(eta)
    return bool(neuron_norms(p.W).max() <= bound and np.abs(p.a).max() <= bound)


def losses(p, tp, ds=None):
    """``(train_loss, population_loss)``; without a dataset the train loss is the
    population loss."""
    theta = p.a @ p.W
    err = theta - tp.theta_star
    pop = 0.5 * float(err @ err)
    train = pop if ds is None else ds.loss(theta)
    return train, pop


# -- small-initialization predictor -------------------------------------------


def phase2_matrix(theta_star) -> np.ndarray:
    """``M = [[0, theta*], [theta*^T, 0]]`` acting on stacked ``(w_i; a_i)``."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    d = theta_star.size
    M = np.zeros((d + 1, d + 1))
    M[:d, d] = theta_star
    M[d, :d] = theta_star
    return M


def phase2_eigvecs(theta_star):
    """Eigenpairs ``(+|theta*|, u_plus)`` and ``(-|theta*|, u_minus)`` of ``M``;
    every other eigenvalue is zero."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    lam = float(np.linalg.norm(theta_star))
    u_plus = np.append(theta_star / lam, 1.0) / math.sqrt(2.0)
    u_minus = np.append(theta_star / lam, -1.0) / math.sqrt(2.0)
    return lam, u_plus, u_minus


def phase2_predict(W, a, theta_star, s: float):
    """Apply ``exp(s M)`` to every stacked ``(w_i; a_i)``.

    Uses the rank-two spectral form
    ``exp(sM) v = v + (e^{s lam} - 1)(u+ . v) u+ + (e^{-s lam} - 1)(u- . v) u-``.
    Returns the predicted ``(W, a)``.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    lam, u_plus, u_minus = phase2_eigvecs(theta_star)
    V = np.column_stack([W, a])
    c_plus = V @ u_plus
    c_minus = V @ u_minus
    V = V + np.outer(np.expm1(s * lam) * c_plus, u_plus) + np.outer(
        np.expm1(-s * lam) * c_minus, u_minus
    )
    return V[:, :-1], V[:, -1]


# -- records -------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    train_loss: float
    pop_loss: float
    mean_norm: float
    min_norm: float
    max_norm: float
    mean_align: float
    min_align: float
    frac_escaped: float
    theta_err: float
    a_abs_max: float
    mean_inner: float = float("nan")

    def row(self, include_inner=False) -> List[str]:
        vals = list(asdict(self).values())
        if not include_inner:
            vals = vals[:-1]
        return [str(vals[0])] + [repr(float(v)) for v in vals[1:]]


@dataclass
class NeuronRecord:
    step: int
    i: int
    w_norm: float
    align: float
    a_i: float
    cum_dw: float
    escaped: bool

    def row(self) -> List[str]:
        return [str(self.step), str(self.i), repr(self.w_norm), repr(self.align),
                repr(self.a_i), repr(self.cum_dw), str(int(self.escaped))]


@dataclass
class PhaseReport:
    escape_step_per_neuron: List[Optional[int]]
    phase2_entry_step: Optional[int]
    T1_predicted: Optional[float]
    alignment_at_end: float
    converged: bool

    def to_dict(self) -> dict:
        return asdict(self)


class PhaseTracker:
    """Accumulates per-neuron escape steps and the phase-boundary step over the
    records of one run."""

    def __init__(self, p, tp, eta: float, converge_tol: float = 1e-3):
        self.tp = tp
        self.eta = eta
        self.converge_tol = converge_tol
        self.escape_step: List[Optional[int]] = [None] * p.m
        self.all_escaped_step: Optional[int] = None
        self.phase2_entry_step: Optional[int] = None
        self.n_records = 0
        self.last: Optional[StepRecord] = None

    def update(self, p, rec: StepRecord, escaped: np.ndarray) -> None:
        self.n_records += 1
        self.last = rec
        for i in np.flatnonzero(escaped):
            if self.escape_step[i] is None:
                self.escape_step[i] = rec.step
        if self.all_escaped_step is None and escaped.all():
            self.all_escaped_step = rec.step
        if self.phase2_entry_step is None and detect_phase_boundary(p, self.eta):
            self.phase2_entry_step = rec.step

    def report(self, T1_predicted=None) -> PhaseReport:
        last = self.last
        return PhaseReport(
            escape_step_per_neuron=list(self.escape_step),
            phase2_entry_step=self.phase2_entry_step,
            T1_predicted=T1_predicted,
            alignment_at_end=last.mean_align if last else float("nan"),
            converged=bool(last is not None and last.pop_loss <= self.converge_tol),
        )


def record(p, tp, ds, step: int, sinks=(), tracker: Optional[PhaseTracker] = None,
           monitors=()) -> StepRecord:
    """Assemble a :class:`StepRecord` (read-only on ``p``) and hand it to every sink."""
    theta = p.a @ p.W
    train, pop = losses(p, tp, ds)
    norms = neuron_norms(p.W)
    align = alignments(p.W, tp.theta_star)
    _, escaped, frac = lazy_escape_status(p)
    rec = StepRecord(
        step=int(step),
        train_loss=train,
        pop_loss=pop,
        mean_norm=float(norms.mean()),
        min_norm=float(norms.min()),
        max_norm=float(norms.max()),
        mean_align=float(align.mean()),
        min_align=float(align.min()),
        frac_escaped=frac,
        theta_err=float(np.linalg.norm(theta - tp.theta_star)),
        a_abs_max=float(np.abs(p.a).max()),
        mean_inner=float((p.W @ tp.theta_star).mean()),
    )
    if tracker is not None:
        tracker.update(p, rec, escaped)
    neurons = None
    if any(getattr(s, "wants_neurons", False) for s in sinks):
        cum = next((mon.cumulative for mon in monitors if isinstance(mon, TelescopeMonitor)), None)
        neurons = [
            NeuronRecord(int(step), i, float(norms[i]), float(align[i]), float(p.a[i]),
                         float(cum[i]) if cum is not None else float("nan"), bool(escaped[i]))
            for i in range(p.m)
        ]
    for sink in sinks:
        try:
            sink.write(rec, neurons)
        except OSError as err:
            raise SinkError(f"trace sink {sink!r} failed at step {step}: {err}") from err
    return rec


# -- monitors ------------------------------------------------------------------


class TelescopeMonitor:
    """Running per-neuron ``eta^2 * sum dW_i`` for the conserved-quantity check.

    Valid only while every observed step is a coupled gradient step (label-noise
    SGD, GD); any other step marks the accumulator invalid.
    """

    def __init__(self, p, keep_history: bool = False):
        self.w0_sq = np.einsum("ij,ij->i", p.W, p.W).copy()
        self.a_start = p.a.copy()
        self._sum = np.zeros(p.m)
        self._comp = np.zeros(p.m)
        self.valid = True
        self.n_steps = 0
        self.history = [] if keep_history else None

    def observe(self, step, info, p) -> None:
        self.n_steps += 1
        if not info.coupled:
            self.valid = False
            return
        dw = delta_w_vector(info.scale, info.proj, info.a_before, info.sqnorm)
        inc = info.eta**2 * dw
        # Kahan summation keeps the running sum at rounding level over long runs
        y = inc - self._comp
        t = self._sum + y
        self._comp = (t - self._sum) - y
        self._sum = t
        if self.history is not None:
            self.history.append(dw)

    @property
    def cumulative(self) -> np.ndarray:
        return self._sum.copy()

    def residuals(self, p) -> np.ndarray:
        lhs = np.einsum("ij,ij->i", p.W, p.W)
        rhs = self.w0_sq + self._sum - self.a_start**2 + p.a**2
        return np.abs(lhs - rhs)


class ABoundMonitor:
    """Tracks ``max_t |a_i(t)|`` against ``m^{-1/4}``; reports, never asserts."""

    def __init__(self, p):
        self.bound = p.m ** -0.25
        self.max_abs = np.abs(p.a).copy()
        self.violating_steps = 0
        self.n_steps = 0

    def observe(self, step, info, p) -> None:
        self.n_steps += 1
        np.maximum(self.max_abs, np.abs(p.a), out=self.max_abs)
        if np.abs(p.a).max() > self.bound:
            self.violating_steps += 1

    def report(self) -> dict:
        return {
            "bound": self.bound,
            "max_abs_a": float(self.max_abs.max()),
            "neurons_violating": int((self.max_abs > self.bound).sum()),
            "violation_rate": self.violating_steps / max(self.n_steps, 1),
        }


# -- sinks ---------------------------------------------------------------------


class MemorySink:
    wants_neurons = False

    def __init__(self):
        self.records: List[StepRecord] = []

    def write(self, rec, neurons=None):
        self.records.append(rec)

    def flush(self):
        pass

    def close(self):
        pass

    def column(self, name) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


class CSVTraceSink:
    """Trace CSV with the fixed header; ``include_inner`` appends ``mean_inner``."""

    wants_neurons = False

    def __init__(self, path_or_file, include_inner=False):
        self.include_inner = include_inner
        self._own = not hasattr(path_or_file, "write")
        self._fh = open(path_or_file, "w", newline="") if self._own else path_or_file
        self._writer = csv.writer(self._fh, lineterminator="\n")
        header = TRACE_HEADER + (",mean_inner" if include_inner else "")
        self._fh.write(header + "\n")
        self.n_rows = 0

    def write(self, rec, neurons=None):
        self._writer.writerow(rec.row(self.include_inner))
        self.n_rows += 1

    def flush(self):
        self._fh.flush()

    def close(self):
        self.flush()
        if self._own:
            self._fh.close()


class NeuronDumpSink:
    wants_neurons = True

    def __init__(self, path_or_file):
        self._own = not hasattr(path_or_file, "write")
        self._fh = open(path_or_file, "w", newline="") if self._own else path_or_file
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._fh.write(NEURON_HEADER + "\n")

    def write(self, rec, neurons=None):
        for n in neurons or ():
            self._writer.writerow(n.row())

    def flush(self):
        self._fh.flush()

    def close(self):
        self.flush()
        if self._own:
            self._fh.close()
