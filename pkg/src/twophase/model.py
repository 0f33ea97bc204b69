"""Two-layer linear network ``f(x) = a^T W x``.

Parameter state, NTK initialization, the analytic per-sample gradients and the
first-order (lazy) surrogate around the initialization, plus a small versioned
snapshot format for inspection and resume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .streams import make_rng

SNAPSHOT_VERSION = 1
_PARAMS_TAG = b"P"


class NonFiniteError(FloatingPointError):
    """Raised when parameters acquire a NaN or Inf entry."""


@dataclass(frozen=True)
class InitConfig:
    m: int
    d: int
    seed: int = 0

    def __post_init__(self):
        if int(self.m) < 1 or int(self.d) < 1:
            raise ValueError(f"need m >= 1 and d >= 1, got m={self.m}, d={self.d}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(eq=False)
class NetworkParams:
    """Trainable state ``(W, a)`` plus frozen copies taken at construction.

    ``W`` is ``(m, d)`` with row ``i`` the neuron ``w_i``; ``a`` has length ``m``.
    ``W0`` and ``a0`` are read-only views kept for the lazy-regime distance and
    the linearized model; steppers only ever replace ``W`` and ``a``.
    """

    W: np.ndarray
    a: np.ndarray
    W0: np.ndarray = field(default=None)
    a0: np.ndarray = field(default=None)

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64, ndmin=2)
        self.a = np.array(self.a, dtype=np.float64, ndmin=1)
        if self.W.ndim != 2 or self.a.ndim != 1 or self.W.shape[0] != self.a.shape[0]:
            raise ValueError(f"inconsistent shapes W{self.W.shape}, a{self.a.shape}")
        self.W0 = _frozen(self.W if self.W0 is None else self.W0)
        self.a0 = _frozen(self.a if self.a0 is None else self.a0)
        if self.W0.shape != self.W.shape or self.a0.shape != self.a.shape:
            raise ValueError("initial snapshot shape differs from the live parameters")
        self.check_finite()

    @property
    def m(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    def check_finite(self) -> None:
        if not (np.isfinite(self.W).all() and np.isfinite(self.a).all()):
            raise NonFiniteError("non-finite entry in network parameters")

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.W.copy(), self.a.copy(), self.W0, self.a0)

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return all(
            np.array_equal(x, y)
            for x, y in zip(
                (self.W, self.a, self.W0, self.a0), (other.W, other.a, other.W0, other.a0)
            )
        )


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def init_ntk(cfg: InitConfig) -> NetworkParams:
    """Draw ``w_ij ~ N(0, 1/d)`` (row-major) then ``a_i ~ N(0, 1/m)`` from one stream."""
    rng = make_rng(cfg.seed)
    W = rng.standard_normal((cfg.m, cfg.d)) / np.sqrt(cfg.d)
    a = rng.standard_normal(cfg.m) / np.sqrt(cfg.m)
    return NetworkParams(W, a)


def _as_input(p: NetworkParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (p.d,):
        raise ValueError(f"input has shape {x.shape}, expected ({p.d},)")
    return x


def forward(p: NetworkParams, x) -> float:
    x = _as_input(p, x)
    return float(p.a @ (p.W @ x))


def effective_predictor(p: NetworkParams) -> np.ndarray:
    """End-to-end linear map ``theta = a^T W``."""
    return p.a @ p.W


def per_sample_gradients(p: NetworkParams, x, target: float):
    """Gradients of ``0.5 * (f(x) - target)**2`` at the current ``(W, a)``.

    Returns ``(grad_W, grad_a, residual)`` with ``grad_W = residual * outer(a, x)``
    and ``grad_a = residual * W x``.
    """
    x = _as_input(p, x)
    Wx = p.W @ x
    r = float(p.a @ Wx) - float(target)
    return r * np.outer(p.a, x), r * Wx, r


def linearized_predictor(p: NetworkParams) -> np.ndarray:
    """``theta_lin`` such that ``linearized_forward(p, x) == theta_lin @ x``."""
    return p.a0 @ p.W + p.a @ p.W0 - p.a0 @ p.W0


def linearized_forward(p: NetworkParams, x) -> float:
    """First-order Taylor expansion of :func:`forward` around ``(W0, a0)``."""
    x = _as_input(p, x)
    W0x = p.W0 @ x
    base = p.a0 @ W0x
    return float(base + p.a0 @ ((p.W - p.W0) @ x) + (p.a - p.a0) @ W0x)


def linearized_gradients(p: NetworkParams, x, target: float):
    x = _as_input(p, x)
    r = linearized_forward(p, x) - float(target)
    return r * np.outer(p.a0, x), r * (p.W0 @ x), r


# -- snapshots ---------------------------------------------------------------


def params_to_bytes(p: NetworkParams) -> bytes:
    """Binary layout: version byte, tag ``P``, ``<QQ`` (m, d), then float64 LE
    ``W, a, W0, a0`` in row-major order."""
    head = struct.pack("<B1sQQ", SNAPSHOT_VERSION, _PARAMS_TAG, p.m, p.d)
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in (p.W, p.a, p.W0, p.a0))
    return head + body


def params_from_bytes(blob: bytes) -> NetworkParams:
    version, tag, m, d = struct.unpack_from("<B1sQQ", blob)
    if version != SNAPSHOT_VERSION or tag != _PARAMS_TAG:
        raise ValueError(f"not a version-{SNAPSHOT_VERSION} parameter snapshot")
    offset = struct.calcsize("<B1sQQ")
    expected = offset + 8 * (2 * m * d + 2 * m)
    if len(blob) != expected:
        raise ValueError(f"snapshot length {len(blob)} != expected {expected}")
    flat = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
    W, a, W0, a0 = np.split(flat, np.cumsum([m * d, m, m * d]))
    return NetworkParams(W.reshape(m, d), a, W0.reshape(m, d), a0)


def params_to_json(p: NetworkParams) -> str:
    return json.dumps(
        {
            "version": SNAPSHOT_VERSION,
            "m": p.m,
            "d": p.d,
            "W": p.W.ravel().tolist(),
            "a": p.a.tolist(),
            "W0": p.W0.ravel().tolist(),
            "a0": p.a0.tolist(),
        }
    )


def params_from_json(text: str) -> NetworkParams:
    obj = json.loads(text)
    if obj.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {obj.get('version')!r}")
    m, d = obj["m"], obj["d"]
    return NetworkParams(
        np.reshape(obj["W"], (m, d)), obj["a"], np.reshape(obj["W0"], (m, d)), obj["a0"]
    )


def save_params(p: NetworkParams, path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(params_to_json(p))
    else:
        path.write_bytes(params_to_bytes(p))


def load_params(path) -> NetworkParams:
    path = Path(path)
    if path.suffix == ".json":
        return params_from_json(path.read_text())
    return params_from_bytes(path.read_bytes())
