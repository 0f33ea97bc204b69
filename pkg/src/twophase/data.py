"""Teacher problems, Gaussian inputs and the two label-noise models."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .model import SNAPSHOT_VERSION
from .streams import make_rng

_DATASET_TAG = b"D"


@dataclass(frozen=True, eq=False)
class TeacherProblem:
    theta_star: np.ndarray
    input_clip: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        theta = np.array(self.theta_star, dtype=np.float64, ndmin=1)
        theta.setflags(write=False)
        object.__setattr__(self, "theta_star", theta)
        if not np.linalg.norm(theta) > 0:
            raise ValueError("theta_star must be nonzero")
        if self.input_clip is not None and self.input_clip < 0.1 * np.sqrt(theta.size):
            raise ValueError(
                f"input_clip={self.input_clip} < 0.1*sqrt(d); rejection sampling would stall"
            )

    @property
    def d(self) -> int:
        return self.theta_star.size


def make_teacher(d: int, norm: float, direction: str = "first_axis", seed: int = 0,
                 input_clip: Optional[float] = None) -> TeacherProblem:
    """``theta_star = norm * u`` with ``u = e_1`` or a uniformly random unit vector."""
    if d < 1 or not norm > 0:
        raise ValueError("need d >= 1 and norm > 0")
    if direction == "first_axis":
        u = np.zeros(d)
        u[0] = 1.0
    elif direction == "random_unit":
        u = make_rng(seed).standard_normal(d)
        u /= np.linalg.norm(u)
    else:
        raise ValueError(f"unknown teacher direction {direction!r}")
    return TeacherProblem(norm * u, input_clip=input_clip, seed=seed)


def sample_input(tp: TeacherProblem, rng) -> np.ndarray:
    """Standard Gaussian input; with ``input_clip`` set, rejection-resampled."""
    x = rng.standard_normal(tp.d)
    if tp.input_clip is not None:
        while x @ x > tp.input_clip**2:
            x = rng.standard_normal(tp.d)
    return x


@dataclass(frozen=True, eq=False)
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    second_moment: np.ndarray = field(init=False, repr=False)
    cross_moment: np.ndarray = field(init=False, repr=False)
    mean_sq_target: float = field(init=False, repr=False)

    def __post_init__(self):
        X = np.array(self.inputs, dtype=np.float64, ndmin=2)
        y = np.array(self.targets, dtype=np.float64, ndmin=1)
        if X.shape[0] != y.shape[0] or X.shape[0] < 1:
            raise ValueError(f"{X.shape[0]} inputs vs {y.shape[0]} targets")
        n = X.shape[0]
        moments = {
            "inputs": X,
            "targets": y,
            "second_moment": X.T @ X / n,
            "cross_moment": X.T @ y / n,
        }
        for name, arr in moments.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "mean_sq_target", float(y @ y / n))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def mean_gradient(self, theta: np.ndarray) -> np.ndarray:
        """``(1/n) sum_j (theta.x_j - y_j) x_j`` through the cached moments."""
        return self.second_moment @ theta - self.cross_moment

    def loss(self, theta: np.ndarray) -> float:
        """Clean training loss ``(1/n) sum_j 0.5 (theta.x_j - y_j)^2``."""
        r = self.inputs @ theta - self.targets
        return 0.5 * float(r @ r) / self.n

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return np.array_equal(self.inputs, other.inputs) and np.array_equal(
            self.targets, other.targets
        )


def make_dataset(tp: TeacherProblem, n: int, rng) -> Dataset:
    if n < 1:
        raise ValueError("n must be >= 1")
    X = np.stack([sample_input(tp, rng) for _ in range(n)])
    return Dataset(X, X @ tp.theta_star)


# -- noise models -------------------------------------------------------------


@dataclass(frozen=True)
class NoNoise:
    pass


@dataclass(frozen=True)
class Rademacher:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("Rademacher noise needs sigma > 0")


@dataclass(frozen=True)
class LabelFlip:
    tau: float
    c: int

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be a probability")
        if self.c < 2:
            raise ValueError("label flipping needs c >= 2 classes")


NoiseModel = Union[NoNoise, Rademacher, LabelFlip]


def rademacher_sign(rng) -> float:
    return 1.0 if rng.random() < 0.5 else -1.0


def noisy_target(y: float, nm: NoiseModel, rng) -> float:
    if isinstance(nm, NoNoise):
        return y
    if isinstance(nm, Rademacher):
        return y + nm.sigma * rademacher_sign(rng)
    raise TypeError("label flipping applies to class labels, not real targets")


def flip_label(y: int, tau: float, c: int, rng) -> int:
    """Labels live in ``1..c``; with probability ``tau`` return a uniform other label."""
    if c < 2:
        raise ValueError("label flipping needs c >= 2 classes")
    if not 1 <= y <= c:
        raise ValueError(f"label {y} outside [1, {c}]")
    if rng.random() < tau:
        other = int(rng.integers(1, c))
        return other + 1 if other >= y else other
    return y


# -- export / import -----------------------------------------------------------


def dataset_to_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{j + 1}" for j in range(ds.d)] + ["y"])
        for x, y in zip(ds.inputs, ds.targets):
            writer.writerow([repr(float(v)) for v in x] + [repr(float(y))])


def dataset_from_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    d = len(header) - 1
    if header != [f"x_{j + 1}" for j in range(d)] + ["y"]:
        raise ValueError(f"unexpected dataset header {header}")
    arr = np.array(body, dtype=np.float64).reshape(len(body), d + 1)
    return Dataset(arr[:, :d], arr[:, d])


def dataset_to_bytes(ds: Dataset) -> bytes:
    head = struct.pack("<B1sQQ", SNAPSHOT_VERSION, _DATASET_TAG, ds.n, ds.d)
    return (
        head
        + np.ascontiguousarray(ds.inputs, dtype="<f8").tobytes()
        + np.ascontiguousarray(ds.targets, dtype="<f8").tobytes()
    )


def dataset_from_bytes(blob: bytes) -> Dataset:
    version, tag, n, d = struct.unpack_from("<B1sQQ", blob)
    if version != SNAPSHOT_VERSION or tag != _DATASET_TAG:
        raise ValueError(f"not a version-{SNAPSHOT_VERSION} dataset snapshot")
    offset = struct.calcsize("<B1sQQ")
    if len(blob) != offset + 8 * n * (d + 1):
        raise ValueError("truncated dataset snapshot")
    flat = np.frombuffer(blob, dtype="<f8", offset=offset).astype(np.float64)
    return Dataset(flat[: n * d].reshape(n, d), flat[n * d:])


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        dataset_to_csv(ds, path)
    else:
        path.write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".csv":
        return dataset_from_csv(path)
    return dataset_from_bytes(path.read_bytes())
