"""Run configuration files.

A config is flat ``key = value`` text with dotted section names; ``#`` starts
a comment. Schedule segments are numbered ``schedule.0.*``, ``schedule.1.*``
and so on, and ``schedule.repeat`` repeats the whole list. Unknown or
malformed keys are collected and reported together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from . import optim
from .data import make_dataset, make_teacher
from .model import InitConfig, NetworkParams, init_ntk
from .streams import derive_seed, make_rng

M_BOUND = "m^-1/4"
OPTIMIZERS = ("label_noise_sgd", "gd", "sam", "markov", "linearized_gd")
SEGMENT_KEYS = {
    "label_noise_sgd": {"sigma", "sampling"},
    "sam": {"rho", "sigma", "sampling"},
    "gd": {"gradient"},
    "markov": {"gradient"},
    "linearized_gd": {"gradient"},
}
COMMON_SEGMENT_KEYS = {"optimizer", "eta", "steps", "record_every"}
DEFAULT_K = math.sqrt(8 / 3)


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class SegmentSpec:
    optimizer: str
    eta: float
    steps: int
    record_every: int = 1
    sigma: Optional[float] = None
    rho: Optional[float] = None
    sampling: Optional[str] = None
    gradient: Optional[str] = None


@dataclass
class RunConfig:
    name: str = "run"
    m: int = 64
    d: int = 16
    model_seed: int = 0
    second_layer: str = "ntk"  # or markov_stationary
    teacher_norm: Union[float, str] = M_BOUND
    teacher_direction: str = "first_axis"
    teacher_seed: int = 0
    input_clip: Optional[float] = None
    data_mode: str = "fresh"
    n: Optional[int] = None
    data_seed: int = 1
    run_seed: int = 2
    segments: List[SegmentSpec] = field(default_factory=list)
    repeat: int = 1
    trace: Optional[str] = "trace.csv"
    neuron_dump: bool = False
    include_inner: bool = False
    summary: Optional[str] = "summary.json"
    cond_K: float = DEFAULT_K
    cond_c: float = DEFAULT_K**4 / 2

    def theta_norm(self) -> float:
        return self.m**-0.25 if self.teacher_norm == M_BOUND else float(self.teacher_norm)

    def expanded_segments(self) -> List[SegmentSpec]:
        return list(self.segments) * self.repeat


# flat key -> (attribute, parser)
def _parse_bool(v):
    low = v.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _parse_opt(parser):
    def inner(v):
        return None if v.lower() in ("none", "") else parser(v)

    return inner


def _parse_norm(v):
    if v.replace(" ", "") == M_BOUND:
        return M_BOUND
    x = float(v)
    if not x > 0:
        raise ValueError("teacher norm must be positive")
    return x


def _parse_choice(*allowed):
    def inner(v):
        if v not in allowed:
            raise ValueError(f"expected one of {allowed}, got {v!r}")
        return v

    return inner


_TOP = {
    "experiment.name": ("name", str),
    "model.m": ("m", int),
    "model.d": ("d", int),
    "model.seed": ("model_seed", int),
    "model.second_layer": ("second_layer", _parse_choice("ntk", "markov_stationary")),
    "teacher.norm": ("teacher_norm", _parse_norm),
    "teacher.direction": ("teacher_direction", _parse_choice("first_axis", "random_unit")),
    "teacher.seed": ("teacher_seed", int),
    "teacher.input_clip": ("input_clip", _parse_opt(float)),
    "data.mode": ("data_mode", _parse_choice("fresh", "fixed")),
    "data.n": ("n", _parse_opt(int)),
    "data.seed": ("data_seed", int),
    "run.seed": ("run_seed", int),
    "schedule.repeat": ("repeat", int),
    "outputs.trace": ("trace", _parse_opt(str)),
    "outputs.neuron_dump": ("neuron_dump", _parse_bool),
    "outputs.include_inner": ("include_inner", _parse_bool),
    "outputs.summary": ("summary", _parse_opt(str)),
    "conditions.K": ("cond_K", float),
    "conditions.c": ("cond_c", float),
}
_ATTR_TO_KEY = {attr: key for key, (attr, _) in _TOP.items()}

_SEG = {
    "optimizer": _parse_choice(*OPTIMIZERS),
    "eta": float,
    "steps": int,
    "record_every": int,
    "sigma": float,
    "rho": float,
    "sampling": _parse_choice("fresh", "fixed"),
    "gradient": _parse_choice("empirical", "population"),
}


def _lines(text):
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield lineno, line


def parse_config(text: str) -> RunConfig:
    problems = []
    values: Dict[str, object] = {}
    seg_raw: Dict[int, Dict[str, object]] = {}
    seen = set()
    for lineno, line in _lines(text):
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value', got {line!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key in seen:
            problems.append(f"line {lineno}: duplicate key {key!r}")
            continue
        seen.add(key)
        try:
            if key in _TOP:
                attr, parser = _TOP[key]
                values[attr] = parser(val)
                continue
            parts = key.split(".")
            if len(parts) == 3 and parts[0] == "schedule" and parts[1].isdigit() and parts[2] in _SEG:
                seg_raw.setdefault(int(parts[1]), {})[parts[2]] = _SEG[parts[2]](val)
                continue
            problems.append(f"line {lineno}: unknown key {key!r}")
        except ValueError as err:
            problems.append(f"line {lineno}: bad value for {key!r}: {err}")

    segments = []
    if sorted(seg_raw) != list(range(len(seg_raw))):
        problems.append(f"schedule indices must be 0..N-1 without gaps, got {sorted(seg_raw)}")
    for idx in sorted(seg_raw):
        raw = seg_raw[idx]
        missing = [k for k in ("optimizer", "eta", "steps") if k not in raw]
        if missing:
            problems.append(f"schedule.{idx}: missing {', '.join(missing)}")
            continue
        allowed = COMMON_SEGMENT_KEYS | SEGMENT_KEYS[raw["optimizer"]]
        for k in sorted(set(raw) - allowed):
            problems.append(f"schedule.{idx}.{k}: not a parameter of {raw['optimizer']}")
        segments.append(SegmentSpec(**raw))
    if not segments and not problems:
        problems.append("schedule: at least one segment is required")
    cfg = None
    if not problems:
        cfg = RunConfig(**values, segments=segments)
        problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def validate(cfg: RunConfig) -> List[str]:
    """Problems that make ``cfg`` unrunnable (not assumption warnings)."""
    out = []
    if cfg.m < 1 or cfg.d < 1:
        out.append("model.m and model.d must be >= 1")
    if cfg.repeat < 1:
        out.append("schedule.repeat must be >= 1")
    if cfg.data_mode == "fixed" and not (cfg.n and cfg.n >= 1):
        out.append("data.n must be set (>= 1) when data.mode = fixed")
    if cfg.input_clip is not None and cfg.input_clip < 0.1 * math.sqrt(cfg.d):
        out.append("teacher.input_clip must be >= 0.1*sqrt(d)")
    for i, seg in enumerate(cfg.segments):
        try:
            optim.ScheduleSegment(build_optimizer(seg, cfg), seg.steps, seg.record_every)
        except ValueError as err:
            out.append(f"schedule.{i}: {err}")
        if cfg.data_mode == "fresh" and (seg.sampling == "fixed" or seg.gradient == "empirical"):
            out.append(f"schedule.{i}: needs a fixed dataset but data.mode = fresh")
    return out


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical text form; ``parse_config(serialize_config(c)) == c``."""
    lines = []
    for f in fields(RunConfig):
        if f.name == "segments":
            continue
        lines.append(f"{_ATTR_TO_KEY[f.name]} = {_fmt(getattr(cfg, f.name))}")
    for i, seg in enumerate(cfg.segments):
        for f in fields(SegmentSpec):
            v = getattr(seg, f.name)
            if v is not None:
                lines.append(f"schedule.{i}.{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def apply_overrides(cfg: RunConfig, overrides: Dict[str, str]) -> RunConfig:
    """Re-parse ``cfg`` with some keys replaced, so overrides are validated
    exactly like file contents."""
    base = {}
    for lineno, line in _lines(serialize_config(cfg)):
        k, v = (s.strip() for s in line.split("=", 1))
        base[k] = v
    base.update(overrides)
    return parse_config("\n".join(f"{k} = {v}" for k, v in base.items()))


# -- building a run -------------------------------------------------------------------


def build_optimizer(seg: SegmentSpec, cfg: RunConfig):
    fixed = cfg.data_mode == "fixed"
    sampling = seg.sampling or ("fixed" if fixed else "fresh")
    gradient = seg.gradient or ("empirical" if fixed else "population")
    kind = seg.optimizer
    if kind == "label_noise_sgd":
        return optim.LabelNoiseSGD(seg.eta, 1.0 if seg.sigma is None else seg.sigma, sampling)
    if kind == "sam":
        if seg.rho is None:
            raise ValueError("sam needs rho")
        return optim.SAM(seg.eta, seg.rho, 0.0 if seg.sigma is None else seg.sigma, sampling)
    if kind == "gd":
        return optim.GD(seg.eta, gradient)
    if kind == "markov":
        return optim.MarkovOscillation(seg.eta, gradient)
    if kind == "linearized_gd":
        return optim.LinearizedGD(seg.eta, gradient)
    raise ValueError(f"unknown optimizer {kind!r}")


@dataclass
class BuiltRun:
    params: NetworkParams
    teacher: object
    dataset: object
    segments: list
    rng: np.random.Generator
    markov_state: Optional[optim.MarkovState] = None


def build_run(cfg: RunConfig) -> BuiltRun:
    """Teacher, dataset, initial parameters, segments and the stepping stream.

    Streams: ``model.seed`` draws the NTK init, ``teacher.seed`` a random
    teacher direction, ``data.seed`` the fixed dataset and ``run.seed``
    everything drawn while stepping (including a stationary second layer).
    """
    tp = make_teacher(cfg.d, cfg.theta_norm(), cfg.teacher_direction, cfg.teacher_seed,
                      cfg.input_clip)
    ds = make_dataset(tp, cfg.n, make_rng(cfg.data_seed)) if cfg.data_mode == "fixed" else None
    p = init_ntk(InitConfig(cfg.m, cfg.d, cfg.model_seed))
    rng = make_rng(cfg.run_seed)
    ms = None
    if cfg.second_layer == "markov_stationary":
        first = next((s for s in cfg.segments if s.optimizer == "markov"), cfg.segments[0])
        a, ms = optim.init_markov_stationary(cfg.m, first.eta, rng)
        p = NetworkParams(p.W, a)
    segments = [
        optim.ScheduleSegment(build_optimizer(s, cfg), s.steps, s.record_every)
        for s in cfg.expanded_segments()
    ]
    return BuiltRun(p, tp, ds, segments, rng, ms)


# -- assumptions A1-A6 -------------------------------------------------------------------


def check_conditions(cfg: RunConfig) -> List[str]:
    """Warnings for each literal assumption inequality (A1-A6) the config misses.

    Evaluated against the first segment's learning rate. Never raises on an
    unmet condition; most are unattainable at desk scale.
    """
    eta = cfg.segments[0].eta
    out = []
    if cfg.m < 1 / math.sqrt(eta) * (1 - 1e-12):
        out.append(f"A1: m={cfg.m} < 1/sqrt(eta)={1 / math.sqrt(eta):.4g}")
    out.append(f"A2: eta <= C^-96 is unattainable at desk scale; informational (eta={eta:g})")
    if cfg.data_mode == "fixed" and cfg.n < 1 / eta**2 * (1 - 1e-12):
        out.append(f"A3: n={cfg.n} < 1/eta^2={1 / eta**2:.4g}")
    bound = cfg.m**-0.25
    if cfg.theta_norm() > bound * (1 + 1e-12):
        out.append(f"A4: |theta*|={cfg.theta_norm():.4g} > m^-1/4={bound:.4g}")
    if cfg.input_clip is not None and cfg.input_clip >= cfg.m:
        out.append(f"A5: C_data={cfg.input_clip:g} is not << m={cfg.m}")
    need = 9 * math.log(2) * cfg.cond_K**4 / (2 * cfg.cond_c)
    if cfg.d < need:
        out.append(f"A6: d={cfg.d} < 9 ln2 K^4/(2c)={need:.4g}")
    return out
