"""Monte-Carlo and brute-force checks of the desk-checkable lemmas.

Each ``check_*`` returns one or more :class:`VerifyReport` and is a pure
function of its arguments, including the seed. Acceptance constants for the
asymptotic statements live in :data:`ACCEPTANCE`.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy import integrate, special

from . import diagnostics as dg
from .data import make_teacher, sample_input
from .model import InitConfig, NetworkParams, init_ntk, linearized_predictor
from .optim import (
    GD, DivergenceError, LabelNoiseSGD, LinearizedGD, gd_full_batch_step, init_markov_stationary,
    label_noise_sgd_step, linearized_gd_step, markov_transition,
)
from .streams import derive_seed, make_rng

ACCEPTANCE = {
    "K_slack": 10.0,  # escape within K_slack * T1
    "C_align": 10.0,
    "C_conv": 10.0,
    "n_se": 3.0,
    "scaling_band": 2.0,  # escape ratio for eta -> eta/2 must lie in [4/band, 4*band]
    "predictor_rtol": 0.10,
}


@dataclass
class VerifyReport:
    check_name: str
    statistic: float
    bound_or_target: float
    mc_stderr: float
    n_trials: int
    passed: bool
    notes: str = ""
    status: str = ""
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.status:
            self.status = "passed" if self.passed else "failed"

    @property
    def skipped(self) -> bool:
        return self.status == "precondition-skipped"

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def reports_to_json(reports) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)


def _se_of_fraction(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


# -- Phase I: sign probabilities of the norm-change term ----------------------


def sphere_marginal_density(x, d: int):
    """Density of one coordinate of a uniform point on the unit sphere in R^d."""
    logc = special.gammaln(d / 2) - 0.5 * math.log(math.pi) - special.gammaln((d - 1) / 2)
    return np.exp(logc) * (1.0 - np.asarray(x) ** 2) ** ((d - 3) / 2)


def deltaw_positive_prob_oracle(w_norm: float, a_abs: float, d: int) -> float:
    """``P[|x_hat . w| < |a|]`` for ``x_hat`` uniform on the sphere.

    Integrates the one-coordinate marginal over ``[-u, u]`` with
    ``u = min(|a| / |w|, 1)``. Substituting ``x = sin(phi)`` turns the
    integrand into ``cos(phi)^(d-2)``, which removes the endpoint singularity
    at ``d = 2``.
    """
    if not w_norm > 0:
        raise ValueError("w_norm must be positive")
    if d < 2:
        raise ValueError("the sphere marginal needs d >= 2")
    u = min(abs(a_abs) / w_norm, 1.0)
    if u == 0.0:
        return 0.0
    if u == 1.0:
        return 1.0
    logc = special.gammaln(d / 2) - 0.5 * math.log(math.pi) - special.gammaln((d - 1) / 2)
    val, _ = integrate.quad(lambda phi: math.cos(phi) ** (d - 2), 0.0, math.asin(u),
                            epsabs=1e-13, epsrel=1e-12, limit=200)
    return min(1.0, 2.0 * math.exp(logc) * val)


def _draw_inputs(tp, n, rng) -> np.ndarray:
    X = rng.standard_normal((n, tp.d))
    if tp.input_clip is not None:
        bad = np.einsum("ij,ij->i", X, X) > tp.input_clip**2
        while bad.any():
            X[bad] = rng.standard_normal((int(bad.sum()), tp.d))
            bad = np.einsum("ij,ij->i", X, X) > tp.input_clip**2
    return X


def sample_deltaw(p: NetworkParams, tp, i: int, sigma: float, n_trials: int, rng) -> np.ndarray:
    """``n_trials`` fresh ``(x, eps)`` draws of neuron ``i``'s norm-change term at fixed ``p``."""
    X = _draw_inputs(tp, n_trials, rng)
    eps = np.where(rng.random(n_trials) < 0.5, -sigma, sigma) if sigma > 0 else np.zeros(n_trials)
    theta = p.a @ p.W
    r = X @ (theta - tp.theta_star) - eps
    proj = X @ p.W[i]
    return -(r**2) * (proj**2 - p.a[i] ** 2 * np.einsum("ij,ij->i", X, X))


def check_deltaw_signs(p: NetworkParams, tp, sigma: float, n_trials: int = 100_000,
                       seed: int = 0, neuron: Optional[int] = None) -> List[VerifyReport]:
    """Three reports for one neuron: ``P[dW > 0]`` against the sphere oracle,
    ``P[dW <= -(sigma/4)^2] >= 1/4``, and the observed maximum (informational).

    The default neuron is the one with the largest ``|a_i|``.
    """
    m, d = p.m, p.d
    i = int(np.argmax(np.abs(p.a))) if neuron is None else int(neuron)
    a_abs = abs(float(p.a[i]))
    w_norm = float(np.linalg.norm(p.W[i]))
    regime_ok = a_abs <= m**-0.25 * (1 + 1e-12) and sigma > 0
    k = ACCEPTANCE["n_se"]
    dw = sample_deltaw(p, tp, i, sigma, n_trials, make_rng(seed))

    oracle = deltaw_positive_prob_oracle(w_norm, a_abs, d)
    p_pos = float(np.mean(dw > 0))
    se_pos = _se_of_fraction(oracle, n_trials)
    rho = 2 * math.sqrt(d) / math.sqrt(math.pi)
    lemma_bound = rho / m**0.125
    rep_a = VerifyReport(
        "deltaw_positive_prob", p_pos, oracle, se_pos, n_trials,
        passed=abs(p_pos - oracle) <= k * se_pos,
        notes=(f"neuron {i}, |a|/|w|={a_abs / w_norm:.4g}; lemma ceiling rho/m^(1/8)="
               f"{lemma_bound:.4g} ({'holds' if p_pos <= lemma_bound else 'exceeded'})"),
        details={"lemma_ceiling": lemma_bound, "neuron": i},
    )
    thr = -((sigma / 4) ** 2)
    p_neg = float(np.mean(dw <= thr))
    se_neg = _se_of_fraction(p_neg, n_trials)
    rep_b = VerifyReport(
        "deltaw_negative_mass", p_neg, 0.25, se_neg, n_trials,
        passed=p_neg >= 0.25 - k * se_neg,
        notes=f"P[dW <= -(sigma/4)^2] at neuron {i}",
    )
    rep_c = VerifyReport(
        "deltaw_max", float(dw.max()), float("nan"), 0.0, n_trials, passed=True,
        notes="largest observed dW; the O(1) ceiling has no constant, reported only",
        details={"max_abs": float(np.abs(dw).max())},
    )
    reports = [rep_a, rep_b, rep_c]
    if not regime_ok:
        for rep in reports:
            rep.status = "precondition-skipped"
            rep.notes += "; regime precondition |a_i| <= m^(-1/4), sigma > 0 not met"
    return reports


# -- Markov oscillation ----------------------------------------------------------


def _markov_increments(shape, eta, horizon, rng) -> np.ndarray:
    """Increments ``delta(0..horizon-1)`` of independent stationary chains."""
    c = eta**0.25
    u = rng.random(shape)
    level = np.where(u < 0.25, -1, np.where(u < 0.75, 0, 1)).astype(np.int8)
    out = np.empty((horizon,) + tuple(shape))
    for t in range(horizon):
        new = markov_transition(level, rng)
        out[t] = (new - level) * c
        level = new
    return out


def _lag_products(deltas: np.ndarray, max_lag: int) -> np.ndarray:
    """Per-chain averages of ``delta(t) delta(t+k)`` for ``k = 1..max_lag``.
    ``deltas`` is ``(T, n_chains)``; returns ``(max_lag, n_chains)``."""
    T = deltas.shape[0]
    return np.stack([(deltas[: T - k] * deltas[k:]).mean(axis=0) for k in range(1, max_lag + 1)])


def markov_lag_autocov_exact(eta: float, horizon: int) -> np.ndarray:
    """Exact ``E[delta(t) delta(t+k)]`` averaged over ``t``, for ``k = 1..horizon-1``,
    by enumerating every path of the stationary three-state chain.

    Paths are weighted by the stationary law ``(1/4, 1/2, 1/4)`` and the
    transition matrix ``Q = [[0,1,0],[1/2,0,1/2],[0,1,0]]``.
    """
    if horizon < 2:
        raise ValueError("need horizon >= 2 to define a lag")
    c = eta**0.25
    states = (-1, 0, 1)
    pi = {-1: 0.25, 0: 0.5, 1: 0.25}
    Q = {(-1, 0): 1.0, (1, 0): 1.0, (0, -1): 0.5, (0, 1): 0.5}
    acc = np.zeros(horizon - 1)
    for path in itertools.product(states, repeat=horizon + 1):
        w = pi[path[0]]
        for s, t in zip(path, path[1:]):
            w *= Q.get((s, t), 0.0)
            if w == 0.0:
                break
        if w == 0.0:
            continue
        delta = np.diff(np.array(path, dtype=np.float64)) * c
        for k in range(1, horizon):
            acc[k - 1] += w * np.mean(delta[: horizon - k] * delta[k:])
    return acc


def check_markov_autocovariance(m: int = 100, eta: float = 0.01, horizon: int = 500,
                                n_seeds: int = 20, seed: int = 0, max_lag: int = 5) -> VerifyReport:
    """Lag-1 autocovariance of the increments against ``-sqrt(eta)/2`` and lags
    ``2..max_lag`` against 0, each within ``n_se`` standard errors. Every
    (seed, neuron) chain is one independent unit for the standard error."""
    rng = make_rng(seed)
    deltas = _markov_increments((n_seeds * m,), eta, horizon, rng)
    prods = _lag_products(deltas, max_lag)
    est = prods.mean(axis=1)
    se = prods.std(axis=1, ddof=1) / math.sqrt(prods.shape[1])
    target = np.zeros(max_lag)
    target[0] = -math.sqrt(eta) / 2
    k = ACCEPTANCE["n_se"]
    ok = np.abs(est - target) <= k * se
    return VerifyReport(
        "markov_autocovariance", float(est[0]), float(target[0]), float(se[0]),
        n_seeds * m * horizon, passed=bool(ok.all()),
        notes=f"lags 1..{max_lag} within {k:g} SE: {ok.tolist()}",
        details={"lag_estimates": est, "lag_stderr": se, "lag_targets": target},
    )


def check_markov_enumeration(eta: float = 0.01, horizon: int = 6, n_chains: int = 200_000,
                             seed: int = 0) -> VerifyReport:
    """Monte-Carlo lag autocovariances of short chains against exact path enumeration."""
    exact = markov_lag_autocov_exact(eta, horizon)
    deltas = _markov_increments((n_chains,), eta, horizon, make_rng(seed))
    prods = _lag_products(deltas, horizon - 1)
    est = prods.mean(axis=1)
    se = prods.std(axis=1, ddof=1) / math.sqrt(n_chains)
    k = ACCEPTANCE["n_se"]
    # a lag whose product is identically zero has zero spread; compare exactly
    ok = np.abs(est - exact) <= np.maximum(k * se, 1e-15)
    return VerifyReport(
        "markov_enumeration", float(np.max(np.abs(est - exact))), 0.0, float(se.max()),
        n_chains, passed=bool(ok.all()),
        notes=f"horizon {horizon}; exact lag-1 {exact[0]:.6g} vs -sqrt(eta)/2 {-math.sqrt(eta) / 2:.6g}",
        details={"exact": exact, "estimate": est, "stderr": se},
    )


def simulate_markov_population(W, level, theta_star, eta, horizon, rng, record=None,
                               transition: Callable = markov_transition, moments=None):
    """Batched oscillation dynamics.

    ``W`` is ``(S, m, d)`` and ``level`` is ``(S, m)``, both updated in place.
    The first layer follows ``w_i -= eta * a_i * g`` with the population
    gradient ``g = theta - theta*`` (or ``S_k theta - b_k`` when ``moments=(S, b)``
    gives per-run second and cross moments); ``a`` follows the chain.
    ``record(t, W, a)`` is called at ``t = 0..horizon``.
    """
    c = eta**0.25
    theta_star = np.asarray(theta_star, dtype=np.float64)
    a = level * c
    if record is not None:
        record(0, W, a)
    for t in range(1, horizon + 1):
        theta = np.einsum("sm,smd->sd", a, W)
        if moments is None:
            g = theta - theta_star
        else:
            g = np.einsum("sij,sj->si", moments[0], theta) - moments[1]
        W -= eta * a[:, :, None] * g[:, None, :]
        level[...] = transition(level, rng)
        a = level * c
        if record is not None:
            record(t, W, a)
    return W, level


def _markov_batch_init(n_seeds, m, d, eta, seed):
    """Per-run NTK first layer and stationary second layer, each run on its own stream."""
    W = np.empty((n_seeds, m, d))
    level = np.empty((n_seeds, m), dtype=np.int8)
    for s in range(n_seeds):
        rng = make_rng(derive_seed(seed, s))
        W[s] = rng.standard_normal((m, d)) / math.sqrt(d)
        _, ms = init_markov_stationary(m, eta, rng)
        level[s] = ms.level
    return W, level


def check_theta_expectation(m: int = 64, d: int = 8, eta: float = 0.01, horizon: int = 2000,
                            n_seeds: int = 500, seed: int = 0, teacher_norm: float = 0.5) -> VerifyReport:
    """Seed-mean drift of ``theta(t) - theta(0)`` at four checkpoints, per
    coordinate within ``n_se`` SE of 0, plus the exact one-step recursion
    ``theta(1) = theta(0) + delta(0)^T W(0)``."""
    tp = make_teacher(d, teacher_norm)
    W, level = _markov_batch_init(n_seeds, m, d, eta, seed)
    c = eta**0.25
    theta0 = np.einsum("sm,smd->sd", level * c, W)
    W_first, a_first = W.copy(), level * c
    checkpoints = sorted({max(1, horizon * q // 4) for q in (1, 2, 3, 4)})
    drifts = {}
    one_step = {}

    def rec(t, Wt, at):
        if t == 1:
            one_step["theta1"] = np.einsum("sm,smd->sd", at, Wt)
            one_step["delta0"] = at - a_first
        if t in checkpoints:
            drifts[t] = np.einsum("sm,smd->sd", at, Wt) - theta0

    simulate_markov_population(W, level, tp.theta_star, eta, horizon, make_rng(derive_seed(seed, 10**6)),
                               record=rec)
    k = ACCEPTANCE["n_se"]
    worst, worst_se, ok = 0.0, 0.0, True
    for t in checkpoints:
        mean = drifts[t].mean(axis=0)
        se = drifts[t].std(axis=0, ddof=1) / math.sqrt(n_seeds)
        ok &= bool(np.all(np.abs(mean) <= k * se))
        j = int(np.argmax(np.abs(mean) / np.maximum(se, 1e-300)))
        if abs(mean[j]) / max(se[j], 1e-300) > abs(worst) / max(worst_se, 1e-300):
            worst, worst_se = float(mean[j]), float(se[j])
    if horizon >= 1:
        predicted = theta0 + np.einsum("sm,smd->sd", one_step["delta0"], W_first)
        recursion_err = float(np.max(np.abs(one_step["theta1"] - predicted)))
    else:
        recursion_err = 0.0
    ok &= recursion_err <= 1e-12
    return VerifyReport(
        "theta_expectation", worst, 0.0, worst_se, n_seeds, passed=bool(ok),
        notes=f"checkpoints {checkpoints}; one-step recursion error {recursion_err:.3g}",
        details={"recursion_error": recursion_err, "checkpoints": checkpoints},
    )


def check_simulation_decay(eta: float = 0.01, d: int = 16, n: Optional[int] = None,
                           seed: int = 0, n_seeds: int = 20, teacher_norm: Optional[float] = None,
                           horizon: Optional[int] = None) -> VerifyReport:
    """Oscillation dynamics at ``m = round(1/sqrt(eta))`` for ``1/eta^2`` steps;
    passes if the seed-averaged ``(1/m) sum |w_i|^2`` dips to ``sqrt(eta) + n_se SE``.

    ``n=None`` uses the population gradient, otherwise a fixed dataset of
    size ``n`` per run. ``teacher_norm=0`` runs without a teacher signal; the
    default norm is ``m^(-1/4)``.
    """
    m = max(1, round(1 / math.sqrt(eta)))
    T = math.ceil(1 / eta**2) if horizon is None else int(horizon)
    norm = m**-0.25 if teacher_norm is None else float(teacher_norm)
    theta_star = np.zeros(d)
    theta_star[0] = norm
    W, level = _markov_batch_init(n_seeds, m, d, eta, seed)
    moments = None
    if n is not None:
        S = np.empty((n_seeds, d, d))
        b = np.empty((n_seeds, d))
        for s in range(n_seeds):
            X = make_rng(derive_seed(seed, s, 1)).standard_normal((n, d))
            S[s] = X.T @ X / n
            b[s] = X.T @ (X @ theta_star) / n
        moments = (S, b)
    curve = np.empty((T + 1, n_seeds))

    def rec(t, Wt, at):
        curve[t] = np.einsum("smd,smd->s", Wt, Wt) / m

    simulate_markov_population(W, level, theta_star, eta, T, make_rng(derive_seed(seed, 10**6)),
                               record=rec, moments=moments)
    if not np.isfinite(curve).all():
        return VerifyReport("simulation_decay", float("nan"), math.sqrt(eta), float("nan"),
                            n_seeds, passed=False, notes="non-finite first-layer norms")
    mean = curve.mean(axis=1)
    se = curve.std(axis=1, ddof=1) / math.sqrt(n_seeds)
    k = ACCEPTANCE["n_se"]
    slack = mean - k * se
    t_best = int(np.argmin(slack))
    target = math.sqrt(eta)
    return VerifyReport(
        "simulation_decay", float(mean.min()), target, float(se[t_best]), n_seeds,
        passed=bool(slack[t_best] <= target),
        notes=(f"m={m}, horizon={T}, {'population' if n is None else f'n={n}'}; "
               f"first dip below target at t={_first_below(mean, target)}"),
        details={"argmin_step": int(np.argmin(mean)), "initial": float(mean[0])},
    )


def _first_below(curve, level):
    idx = np.flatnonzero(curve <= level)
    return int(idx[0]) if idx.size else None


# -- Phase I escape -----------------------------------------------------------------


def predicted_escape_time(m: int, eta: float, sigma: float, log: Callable = math.log) -> float:
    """``384 sqrt(log m) / (sigma^2 eta^2 sqrt(m))``, natural log by default."""
    if m < 2:
        raise ValueError("escape time needs m >= 2")
    return 384.0 * math.sqrt(log(m)) / (sigma**2 * eta**2 * math.sqrt(m))


def escape_run(m, d, eta, sigma, seed, horizon, teacher_norm=None):
    """Fresh-sample label-noise SGD from NTK init until every neuron leaves
    its ``1/sqrt(m)`` ball or ``horizon`` steps pass.

    Returns ``(escape_step or None, frac_escaped at the end, divergence step or None)``.
    """
    p = init_ntk(InitConfig(m, d, derive_seed(seed, 0)))
    tp = make_teacher(d, m**-0.25 if teacher_norm is None else teacher_norm)
    cfg = LabelNoiseSGD(eta, sigma)
    rng = make_rng(derive_seed(seed, 1))
    thr_sq = 1.0 / m
    # |w_i - w_i(0)|^2 follows the rank-one update exactly; recomputed directly
    # whenever it signals that every neuron has escaped
    dist_sq = np.zeros(m)
    escaped = np.zeros(m, dtype=bool)
    for t in range(1, int(horizon) + 1):
        try:
            info = label_noise_sgd_step(p, tp, None, cfg, rng)
        except DivergenceError:
            return None, float(escaped.mean()), t
        theta = p.a @ p.W
        if not (np.isfinite(theta).all() and theta @ theta <= 1e12):
            return None, float(escaped.mean()), t
        step = cfg.eta * info.residual
        dx = info.proj - p.W0 @ info.x
        dist_sq += step * info.a_before * (step * info.a_before * info.sqnorm - 2.0 * dx)
        escaped |= dist_sq > thr_sq
        if escaped.all():
            D = p.W - p.W0
            exact = np.einsum("ij,ij->i", D, D)
            dist_sq = exact
            now = exact > thr_sq
            if now.all():
                return t, 1.0, None
            escaped = now
    D = p.W - p.W0
    return None, float((np.einsum("ij,ij->i", D, D) > thr_sq).mean()), None


def check_escape(m: int = 1024, d: int = 32, eta: float = 0.1, sigma: float = 1.0,
                 n_seeds: int = 10, seed: int = 0, horizon: Optional[float] = None,
                 control_horizon: Optional[int] = None, control: bool = True) -> VerifyReport:
    """Every seed escapes within ``K_slack * T1`` (or ``horizon``), and a
    ``sigma = 0`` control at ``control_horizon`` (default: the same horizon)
    ends with a strictly smaller escaped fraction."""
    T1 = predicted_escape_time(m, eta, sigma)
    K = ACCEPTANCE["K_slack"]
    H = math.ceil(K * T1) if horizon is None else int(horizon)
    steps, diverged = [], []
    for s in range(n_seeds):
        t, _, div = escape_run(m, d, eta, sigma, derive_seed(seed, s), H)
        steps.append(t)
        if div is not None:
            diverged.append((s, div))
    escaped = [t for t in steps if t is not None]
    median = float(np.median(escaped)) if len(escaped) == n_seeds else float("inf")
    ok = len(escaped) == n_seeds and median <= K * T1
    notes = [f"T1={T1:.6g} (natural log); log2 variant {predicted_escape_time(m, eta, sigma, math.log2):.6g}",
             f"horizon {H}"]
    control_frac = []
    if control:
        CH = H if control_horizon is None else int(control_horizon)
        for s in range(n_seeds):
            _, frac, div = escape_run(m, d, eta, 0.0, derive_seed(seed, s), CH)
            control_frac.append(frac)
            if div is not None:
                notes.append(f"control seed {s} diverged at step {div}")
        ok = ok and max(control_frac) < 1.0
        notes.append(f"control horizon {CH}")
    if diverged:
        notes.append("diverged: " + ", ".join(f"seed {s} at step {t}" for s, t in diverged))
    return VerifyReport(
        "escape", median, K * T1, 0.0, n_seeds, passed=bool(ok), notes="; ".join(notes),
        details={"escape_steps": steps, "control_frac_escaped": control_frac, "T1": T1,
                 "config": {"m": m, "d": d, "eta": eta, "sigma": sigma}},
    )


def check_escape_scaling(m: int = 1024, d: int = 32, eta: float = 0.001, sigma: float = 1.0,
                         n_seeds: int = 10, seed: int = 0,
                         horizon_factor: float = 64.0) -> VerifyReport:
    """Median escape step at ``eta/2`` over the one at ``eta``, against 4 within the band.

    Each run is capped at ``horizon_factor / (eta^2 sigma^2 d)`` steps, a
    generous multiple of the random-walk escape scale.
    """
    medians = []
    per_eta = {}
    for j, e in enumerate((eta, eta / 2)):
        H = math.ceil(horizon_factor / (e**2 * sigma**2 * d))
        steps = [escape_run(m, d, e, sigma, derive_seed(seed, j, s), H)[0] for s in range(n_seeds)]
        per_eta[repr(e)] = steps
        ok_steps = [t for t in steps if t is not None]
        medians.append(float(np.median(ok_steps)) if len(ok_steps) == n_seeds else float("inf"))
    ratio = medians[1] / medians[0] if math.isfinite(medians[0]) and medians[0] > 0 else float("nan")
    band = ACCEPTANCE["scaling_band"]
    ok = math.isfinite(ratio) and 4 / band <= ratio <= 4 * band
    return VerifyReport(
        "escape_scaling", ratio, 4.0, 0.0, 2 * n_seeds, passed=bool(ok),
        notes=f"median escape {medians[0]:.6g} at eta={eta:g}, {medians[1]:.6g} at eta={eta / 2:g}",
        details={"escape_steps": per_eta},
    )


def check_lazy_baseline(m: int = 1024, d: int = 32, eta: float = 0.001, steps: int = 500,
                        seed: int = 0, sigma: float = 1.0, noise_horizon: int = 100_000,
                        rtol: float = 0.10) -> VerifyReport:
    """Plain population GD from NTK init against its linearization at init.

    Passes when the two population-loss curves agree within ``rtol`` relative
    over ``steps`` steps, GD stays inside the ``1/sqrt(m)`` lazy ball, and a
    label-noise run from the same init leaves that ball (every neuron) within
    ``noise_horizon`` steps.
    """
    init_seed = derive_seed(seed, 0)
    tp = make_teacher(d, m**-0.25)
    p = init_ntk(InitConfig(m, d, init_seed))
    q = p.copy()
    gd, lin = GD(eta, gradient="population"), LinearizedGD(eta, gradient="population")
    worst_rel, worst_dist = 0.0, 0.0
    for t in range(steps + 1):
        l_gd = dg.losses(p, tp)[1]
        e_lin = linearized_predictor(q) - tp.theta_star
        l_lin = 0.5 * float(e_lin @ e_lin)
        worst_rel = max(worst_rel, abs(l_gd - l_lin) / l_lin)
        worst_dist = max(worst_dist, float(dg.neuron_norms(p.W - p.W0).max()))
        if t < steps:
            gd_full_batch_step(p, tp, None, gd)
            linearized_gd_step(q, tp, None, lin)
    bound = 1.0 / math.sqrt(m)
    # escape_run re-derives the init from its seed: derive_seed(s, 0) == init_seed
    noisy_step, noisy_frac, div = escape_run(m, d, eta, sigma, seed, noise_horizon)
    ok = worst_rel <= rtol and worst_dist <= bound and noisy_step is not None
    return VerifyReport(
        "lazy_baseline", worst_rel, rtol, 0.0, 1, passed=bool(ok),
        notes=(f"max |w_i - w_i(0)| under GD {worst_dist:.4g} vs 1/sqrt(m) {bound:.4g}; "
               f"label-noise run escapes at step {noisy_step} (horizon {noise_horizon})"),
        details={"gd_max_distance": worst_dist, "lazy_bound": bound, "noisy_escape_step": noisy_step,
                 "noisy_final_frac": noisy_frac, "noisy_divergence_step": div},
    )


# -- Phase II -------------------------------------------------------------------------


def phase2_steps(eta: float, theta_norm: float) -> int:
    """Discrete step count ``ceil(ln(1/eta) / (eta |theta*|))``."""
    return math.ceil(math.log(1 / eta) / (eta * theta_norm))


def phase2_entry_state(m: int, d: int, eta: float, rng, scale: float = 0.025,
                       w_scale: Optional[float] = None) -> NetworkParams:
    """Small random state inside the Phase-II box.

    ``a_i ~ scale * sqrt(eta) * N(0, 1)`` and ``W`` entries are
    ``w_scale * sqrt(eta / d) * N(0, 1)``; ``w_scale`` defaults to ``scale / 4``,
    mimicking a first layer that shrank more than the oscillating second
    layer. Any neuron that would leave ``|w_i|, |a_i| <= sqrt(eta)`` is
    rescaled onto the box.
    """
    box = math.sqrt(eta)
    w_scale = scale / 4 if w_scale is None else w_scale
    W = w_scale * box * rng.standard_normal((m, d)) / math.sqrt(d)
    a = scale * box * rng.standard_normal(m)
    norms = dg.neuron_norms(W)
    # a few ulps inside, so the recomputed norm cannot round past the box
    W *= np.minimum(1.0, box * (1 - 4 * np.finfo(float).eps) / np.maximum(norms, 1e-300))[:, None]
    a = np.clip(a, -box, box)
    return NetworkParams(W, a)


def check_phase2_alignment(m: int = 64, d: int = 16, eta: float = 0.01, theta_norm: float = 0.5,
                           n_seeds: int = 10, seed: int = 0, entry_scale: float = 0.025,
                           min_alignment: float = 0.9, exclude_ratio: float = 0.1) -> VerifyReport:
    """Population GD from Phase-II entry states for ``phase2_steps`` steps.

    Passes when the minimum alignment cosine over the retained neurons is at
    least ``min_alignment`` and the rank-two predictor ``exp(sM)`` matches each
    neuron's trajectory at ``s = 1/|theta*|`` within ``predictor_rtol``. A
    neuron is excluded when its top-mode coefficient ``|u_+ . (w_i; a_i)|`` at
    entry is below ``exclude_ratio`` times its norm, since then the
    predictor's dominant term vanishes.
    """
    tp = make_teacher(d, theta_norm)
    T2 = phase2_steps(eta, theta_norm)
    s_pred = 1.0 / theta_norm
    t_pred = round(s_pred / eta)
    lemma_floor = 1 - ACCEPTANCE["C_align"] * math.log(1 / eta) * math.sqrt(eta)
    _, u_plus, _ = dg.phase2_eigvecs(tp.theta_star)
    cfg = GD(eta, gradient="population")
    worst_align, worst_pred, n_excluded = 1.0, 0.0, 0
    box_ok = True
    for s in range(n_seeds):
        p = phase2_entry_state(m, d, eta, make_rng(derive_seed(seed, s)), entry_scale)
        box_ok &= dg.detect_phase_boundary(p, eta)
        V0 = np.column_stack([p.W, p.a])
        keep = np.abs(V0 @ u_plus) >= exclude_ratio * np.linalg.norm(V0, axis=1)
        n_excluded += int((~keep).sum())
        W_hat, a_hat = dg.phase2_predict(p.W, p.a, tp.theta_star, t_pred * eta)
        for t in range(1, T2 + 1):
            gd_full_batch_step(p, tp, None, cfg)
            if t == t_pred:
                pred = np.column_stack([W_hat, a_hat])
                got = np.column_stack([p.W, p.a])
                rel = np.linalg.norm(pred - got, axis=1) / np.linalg.norm(got, axis=1)
                worst_pred = max(worst_pred, float(rel.max()))
        align = dg.alignments(p.W, tp.theta_star)
        if keep.any():
            worst_align = min(worst_align, float(align[keep].min()))
    ok = box_ok and worst_align >= min_alignment and worst_pred <= ACCEPTANCE["predictor_rtol"]
    return VerifyReport(
        "phase2_alignment", worst_align, min_alignment, 0.0, n_seeds, passed=bool(ok),
        notes=(f"T2={T2} steps; predictor max rel err {worst_pred:.3g} at step {t_pred}; "
               f"{n_excluded} of {m * n_seeds} neurons excluded; "
               f"lemma floor 1-C*ln(1/eta)*sqrt(eta)={lemma_floor:.3g}"),
        details={"predictor_rel_err": worst_pred, "excluded": n_excluded, "T2": T2,
                 "entry_in_box": bool(box_ok), "lemma_floor": lemma_floor},
    )


def aligned_state(m: int, theta_star, eta: float, rng, scale: float = 1.0) -> NetworkParams:
    """``w_i = gamma_i theta*`` with ``gamma_i, a_i ~ scale * sqrt(eta) * N(0, 1)``."""
    theta_star = np.asarray(theta_star, dtype=np.float64)
    gamma = scale * math.sqrt(eta) * rng.standard_normal(m)
    a = scale * math.sqrt(eta) * rng.standard_normal(m)
    return NetworkParams(np.outer(gamma, theta_star), a)


def check_convergence(m: int = 64, d: int = 16, eta: float = 0.01, theta_norm: float = 0.5,
                      seed: int = 0, scale: float = 1.0, p0: Optional[NetworkParams] = None) -> VerifyReport:
    """Population GD from a perfectly aligned state for
    ``ceil(ln(1/eta) / (eta |theta*|^2))`` steps: ``|theta - theta*|`` against
    ``C_conv * eta * ln(1/eta)``, alignment of the non-negligible neurons, and
    the distance of every neuron from ``span{theta*}``."""
    tp = make_teacher(d, theta_norm)
    p = aligned_state(m, tp.theta_star, eta, make_rng(derive_seed(seed, 0)), scale) if p0 is None else p0.copy()
    steps = math.ceil(math.log(1 / eta) / (eta * theta_norm**2))
    cfg = GD(eta, gradient="population")
    theta_hat = tp.theta_star / np.linalg.norm(tp.theta_star)
    span_dev = 0.0
    for _ in range(steps):
        gd_full_batch_step(p, tp, None, cfg)
        perp = p.W - np.outer(p.W @ theta_hat, theta_hat)
        span_dev = max(span_dev, float(np.abs(perp).max()))
    err = float(np.linalg.norm(p.a @ p.W - tp.theta_star))
    tol = ACCEPTANCE["C_conv"] * eta * math.log(1 / eta)
    big = dg.neuron_norms(p.W) >= math.sqrt(eta)
    min_align = float(dg.alignments(p.W, tp.theta_star)[big].min()) if big.any() else 1.0
    ok = err <= tol and min_align >= 1 - tol and span_dev <= 1e-12
    return VerifyReport(
        "convergence", err, tol, 0.0, 1, passed=bool(ok),
        notes=f"{steps} steps; min alignment {min_align:.12g} over {int(big.sum())} neurons; "
              f"span deviation {span_dev:.3g}",
        details={"min_alignment": min_align, "span_deviation": span_dev, "steps": steps},
    )


# -- concentration probes ------------------------------------------------------------


def _one_sided(name, freqs, bounds, n_trials, thresholds, notes):
    freqs, bounds = np.asarray(freqs), np.asarray(bounds)
    se = np.sqrt(freqs * (1 - freqs) / n_trials)
    excess = freqs - bounds - ACCEPTANCE["n_se"] * se
    j = int(np.argmax(freqs - bounds))
    warn = bool(np.any(freqs > bounds))
    rep = VerifyReport(
        name, float(freqs[j]), float(bounds[j]), float(se[j]), n_trials,
        passed=bool(np.all(excess <= 0)),
        notes=notes + ("; warning: a frequency exceeds its bound within noise" if warn else ""),
        details={"thresholds": list(thresholds), "frequencies": freqs, "bounds": bounds},
    )
    return rep


def check_concentration_probes(d: int = 64, n_sum: int = 16, n_trials: int = 100_000,
                               seed: int = 0, bern_p: float = 0.25,
                               bern_n: int = 100) -> List[VerifyReport]:
    """Upper-tail probes, each at five thresholds; a probe fails only if an
    empirical frequency exceeds its bound by more than ``n_se`` SE.

    1. ``sum X_i Y_i`` and ``sum X_i^2 - n`` for ``n_sum`` standard normal
       pairs, bound ``exp(-t^2 / (2 nu^2))`` with ``(nu, b) = (2 sqrt(n), 4)``
       and ``t <= nu^2 / b``.
    2. ``|  |X| - sqrt(d) |``, bound ``2 exp(-t^2 / 2)``.
    3. Bernoulli sums, upper tail ``P[S >= t] <= e^{-mu} (e mu / t)^t`` for ``t > mu``.
    """
    rng = make_rng(seed)
    nu, b = 2 * math.sqrt(n_sum), 4.0
    ts = np.linspace(0.2, 1.0, 5) * nu**2 / b
    X = rng.standard_normal((n_trials, n_sum))
    Y = rng.standard_normal((n_trials, n_sum))
    sxy = np.einsum("ij,ij->i", X, Y)
    sxx = np.einsum("ij,ij->i", X, X) - n_sum
    freqs = [np.mean(sxy >= t) for t in ts] + [np.mean(sxx >= t) for t in ts]
    bounds = [math.exp(-t**2 / (2 * nu**2)) for t in ts] * 2
    rep1 = _one_sided("subexponential_tail", freqs, bounds, n_trials, list(ts) * 2,
                      f"sum XY and sum X^2 - n with n={n_sum}, (nu, b)=(2 sqrt(n), 4)")

    Z = rng.standard_normal((n_trials, d))
    dev = np.abs(np.sqrt(np.einsum("ij,ij->i", Z, Z)) - math.sqrt(d))
    tn = [k * math.sqrt(d) / 6 for k in range(1, 6)]
    rep2 = _one_sided("norm_concentration", [np.mean(dev >= t) for t in tn],
                      [min(1.0, 2 * math.exp(-t**2 / 2)) for t in tn], n_trials, tn,
                      f"d={d}, K^2=8/3, c=K^4/2, bound 2 exp(-c t^2 / K^4)")

    S = rng.binomial(bern_n, bern_p, size=n_trials)
    mu = bern_n * bern_p
    tc = [mu + k * (bern_n * 0.5 - mu) / 5 for k in range(1, 6)]
    rep3 = _one_sided("chernoff_upper", [np.mean(S >= t) for t in tc],
                      [min(1.0, math.exp(-mu) * (math.e * mu / t) ** t) for t in tc], n_trials, tc,
                      f"N={bern_n}, p={bern_p}, mu={mu:g}, upper tail")
    return [rep1, rep2, rep3]


# -- suite driver ---------------------------------------------------------------------


def _deltaw_state(m, d, seed):
    p = init_ntk(InitConfig(m, d, seed))
    i = int(np.argmax(np.abs(p.a)))
    a = p.a.copy()
    a[i] = m**-0.25
    return NetworkParams(p.W, a), make_teacher(d, m**-0.25)


def _job_deltaw(seed, full):
    m, d = (4096, 16) if full else (1024, 16)
    p, tp = _deltaw_state(m, d, derive_seed(seed, 0))
    return check_deltaw_signs(p, tp, 1.0, 100_000, seed=derive_seed(seed, 1))


def suite_jobs(kind: str):
    """``(name, callable(seed) -> reports)`` for the quick or full suite."""
    if kind not in ("quick", "full"):
        raise ValueError("suite must be 'quick' or 'full'")
    full = kind == "full"
    jobs = [
        ("deltaw_signs", lambda s: _job_deltaw(s, full)),
        ("markov_autocovariance", lambda s: [
            check_markov_autocovariance(100, 0.01, 500 if full else 100, 20, seed=s),
            check_markov_enumeration(0.01, 6, 200_000 if full else 50_000, seed=derive_seed(s, 1)),
        ]),
        ("theta_expectation", lambda s: [check_theta_expectation(
            64, 8, 0.01, 2000 if full else 500, 500 if full else 200, seed=s)]),
        ("simulation_decay", lambda s: [check_simulation_decay(0.04, 16, seed=s)]
         + ([check_simulation_decay(0.01, 16, seed=derive_seed(s, 1))] if full else [])),
        ("escape", lambda s: [check_escape(256 if not full else 1024, 32 if full else 16,
                                           0.001 if full else 0.004, 1.0, 10 if full else 4, seed=s,
                                           horizon=200_000 if full else 20_000,
                                           control_horizon=None)]),
        ("phase2_alignment", lambda s: [check_phase2_alignment(
            64, 16, 0.01, 0.5, 10 if full else 3, seed=s)]),
        ("convergence", lambda s: [check_convergence(64, 16, 0.01, 0.5, seed=s)]),
        ("concentration_probes", lambda s: check_concentration_probes(
            64, 16, 100_000, seed=s)),
    ]
    if full:
        jobs.append(("escape_large_step", lambda s: [check_escape(1024, 32, 0.1, 1.0, 10, seed=s)]))
        jobs.append(("lazy_baseline", lambda s: [check_lazy_baseline(1024, 32, 0.001, seed=s)]))
        jobs.append(("escape_scaling", lambda s: [check_escape_scaling(1024, 32, 0.001, 1.0, 10, seed=s)]))
    return jobs


def _run_job(args):
    kind, index, seed = args
    name, fn = suite_jobs(kind)[index]
    return fn(derive_seed(seed, index))


def run_suite(kind: str = "quick", seed: int = 0, workers: Optional[int] = None) -> List[VerifyReport]:
    """Run every check of the suite, each on its own derived seed. Reports are
    merged in job order, so the output does not depend on ``workers``."""
    jobs = suite_jobs(kind)
    if workers is None:
        workers = int(os.environ.get("TWOPHASE_WORKERS", "1") or 1)
    args = [(kind, i, seed) for i in range(len(jobs))]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_job, args))
    else:
        chunks = [_run_job(a) for a in args]
    return [rep for chunk in chunks for rep in chunk]


def summary_table(reports) -> str:
    lines = [f"{'check':<26} {'status':<22} {'statistic':>14} {'target':>14}"]
    for r in reports:
        lines.append(f"{r.check_name:<26} {r.status:<22} {r.statistic:>14.6g} {r.bound_or_target:>14.6g}")
    return "\n".join(lines)


def suite_failed(reports) -> bool:
    return any(not r.passed and not r.skipped for r in reports)
