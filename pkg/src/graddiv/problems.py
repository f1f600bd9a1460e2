"""Loss models, datasets, and synthetic problem generators.

Every model evaluates a per-example loss f_i(w) and its gradient; datasets
are plain (features, labels) pairs.  Generators are pure functions of their
parameters and a seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .util import fmt_num

__all__ = [
    "Dataset",
    "LossModel",
    "LeastSquares",
    "Logistic",
    "QuadraticDistance",
    "SparseConflict",
    "Unconstrained",
    "L2Ball",
    "eval_gradient",
    "eval_full_gradient",
    "gen_gaussian_dataset",
    "gen_rademacher_dataset",
    "gen_lowerbound_instance",
    "gen_sparse_conflict",
    "replicate_dataset",
    "save_dataset",
    "load_dataset",
]


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n x d) plus a real label per row."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        labs = np.asarray(self.labels, dtype=float)
        if feats.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if labs.shape != (feats.shape[0],):
            raise ValueError(
                f"labels have shape {labs.shape}, expected ({feats.shape[0]},)"
            )
        if not np.isfinite(feats).all() or not np.isfinite(labs).all():
            raise ValueError("dataset entries must be finite")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]


def _as_param(dataset: Dataset, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (dataset.d,):
        raise ValueError(f"parameter has shape {w.shape}, expected ({dataset.d},)")
    return w


def _check_index(dataset: Dataset, i: int) -> int:
    i = int(i)
    if not 0 <= i < dataset.n:
        raise IndexError(f"example index {i} out of range [0, {dataset.n})")
    return i


def _sigmoid(z):
    # exp(-log(1+e^-z)) stays finite for any float z
    return np.exp(-np.logaddexp(0.0, -z))


class LossModel:
    """Per-example loss/gradient evaluator."""

    def values(self, dataset: Dataset, w) -> np.ndarray:
        raise NotImplementedError

    def grad_rows(self, dataset: Dataset, idx, w) -> np.ndarray:
        """Gradients of the examples in `idx`, one per row (duplicates kept)."""
        raise NotImplementedError

    def value(self, dataset: Dataset, i: int, w) -> float:
        _check_index(dataset, i)
        return float(self.values(dataset, _as_param(dataset, w))[i])

    def gradient(self, dataset: Dataset, i: int, w) -> np.ndarray:
        i = _check_index(dataset, i)
        return self.grad_rows(dataset, np.array([i]), _as_param(dataset, w))[0]

    def grad_matrix(self, dataset: Dataset, w) -> np.ndarray:
        return self.grad_rows(dataset, np.arange(dataset.n), _as_param(dataset, w))

    def grad_sum(self, dataset: Dataset, idx, w) -> np.ndarray:
        return self.grad_rows(dataset, idx, w).sum(axis=0)

    def mean_loss(self, dataset: Dataset, w) -> float:
        return float(self.values(dataset, _as_param(dataset, w)).mean())


class LeastSquares(LossModel):
    """Squared error 0.5*(x.w - y)^2 per example."""

    def values(self, dataset, w):
        r = dataset.features @ _as_param(dataset, w) - dataset.labels
        return 0.5 * r * r

    def grad_rows(self, dataset, idx, w):
        w = _as_param(dataset, w)
        x = dataset.features[idx]
        r = x @ w - dataset.labels[idx]
        return r[:, None] * x


class Logistic(LossModel):
    """Logistic loss log(1 + exp(-y * x.w)) with labels in {-1, +1}."""

    def values(self, dataset, w):
        z = -dataset.labels * (dataset.features @ _as_param(dataset, w))
        return np.logaddexp(0.0, z)

    def grad_rows(self, dataset, idx, w):
        w = _as_param(dataset, w)
        x = dataset.features[idx]
        y = dataset.labels[idx]
        z = -y * (x @ w)
        return (-y * _sigmoid(z))[:, None] * x

    def lipschitz_bound(self, dataset: Dataset) -> float:
        """Closed-form per-example gradient-norm bound: max row norm."""
        return float(np.sqrt((dataset.features**2).sum(axis=1).max()))


@dataclass(frozen=True)
class QuadraticDistance(LossModel):
    """Strongly convex loss 0.5*lam*||w - x_i||^2 per example."""

    lam: float

    def __post_init__(self):
        if not (np.isfinite(self.lam) and self.lam > 0):
            raise ValueError("lam must be finite and positive")

    def values(self, dataset, w):
        diff = _as_param(dataset, w)[None, :] - dataset.features
        return 0.5 * self.lam * (diff * diff).sum(axis=1)

    def grad_rows(self, dataset, idx, w):
        w = _as_param(dataset, w)
        return self.lam * (w[None, :] - dataset.features[idx])

    def lipschitz_bound(self, dataset: Dataset, radius: float) -> float:
        """sup ||grad|| over the radius-ball: lam*(radius + max row norm)."""
        max_x = float(np.sqrt((dataset.features**2).sum(axis=1).max()))
        return self.lam * (radius + max_x)


class SparseConflict(LossModel):
    """Quadratic loss restricted to a declared coordinate support per example.

    f_i(w) = 0.5 * sum_{j in S_i} (w_j - x_ij)^2, so gradients are zero
    outside S_i and two gradients can only interact when supports overlap.
    """

    def __init__(self, supports: Sequence[Sequence[int]]):
        self.supports = tuple(np.asarray(sorted(set(map(int, s))), dtype=int) for s in supports)
        for s in self.supports:
            if len(s) == 0:
                raise ValueError("every example needs a non-empty support")
            if s.min() < 0:
                raise ValueError("support indices must be non-negative")
        self._mask = None

    @property
    def n(self) -> int:
        return len(self.supports)

    def mask(self, d: int) -> np.ndarray:
        if self._mask is None or self._mask.shape[1] != d:
            m = np.zeros((len(self.supports), d), dtype=bool)
            for i, s in enumerate(self.supports):
                if s.max() >= d:
                    raise ValueError(f"support of example {i} exceeds dimension {d}")
                m[i, s] = True
            self._mask = m
        return self._mask

    def values(self, dataset, w):
        if len(self.supports) != dataset.n:
            raise ValueError("support count does not match dataset size")
        diff = (_as_param(dataset, w)[None, :] - dataset.features) * self.mask(dataset.d)
        return 0.5 * (diff * diff).sum(axis=1)

    def grad_rows(self, dataset, idx, w):
        if len(self.supports) != dataset.n:
            raise ValueError("support count does not match dataset size")
        w = _as_param(dataset, w)
        idx = np.asarray(idx, dtype=int)
        return (w[None, :] - dataset.features[idx]) * self.mask(dataset.d)[idx]


class Unconstrained:
    """All of R^d."""

    def project(self, w: np.ndarray) -> np.ndarray:
        return w

    def contains(self, w) -> bool:
        return True

    def __repr__(self):
        return "Unconstrained()"

    def __eq__(self, other):
        return isinstance(other, Unconstrained)


@dataclass(frozen=True)
class L2Ball:
    """Euclidean ball of the given radius around the origin."""

    radius: float

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError("radius must be finite and positive")

    def project(self, w: np.ndarray) -> np.ndarray:
        norm = float(np.linalg.norm(w))
        if norm <= self.radius:
            return w
        return w * (self.radius / norm)

    def contains(self, w, tol: float = 1e-12) -> bool:
        return float(np.linalg.norm(w)) <= self.radius + tol


ParamSpace = Unconstrained | L2Ball


def eval_gradient(model: LossModel, dataset: Dataset, i: int, w) -> np.ndarray:
    """Gradient of example i's loss at w."""
    return model.gradient(dataset, i, w)


def eval_full_gradient(model: LossModel, dataset: Dataset, w) -> np.ndarray:
    """Gradient of the mean loss: (1/n) * sum_i grad f_i(w)."""
    return model.grad_matrix(dataset, w).mean(axis=0)


def _sign_labels(features: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Labels +-1 from a random linear separator drawn from the same stream."""
    w_true = rng.standard_normal(features.shape[1])
    return np.where(features @ w_true >= 0.0, 1.0, -1.0)


def gen_gaussian_dataset(n: int, d: int, sigma: float, seed) -> Dataset:
    """i.i.d. N(0, sigma^2) features with +-1 labels from a random separator."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    rng = np.random.default_rng(seed)
    feats = rng.normal(0.0, sigma, size=(n, d))
    return Dataset(feats, _sign_labels(feats, rng))


def gen_rademacher_dataset(n: int, d: int, seed) -> Dataset:
    """i.i.d. +-1 features with +-1 labels from a random separator."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    rng = np.random.default_rng(seed)
    feats = rng.integers(0, 2, size=(n, d)).astype(float) * 2.0 - 1.0
    return Dataset(feats, _sign_labels(feats, rng))


def gen_lowerbound_instance(n: int, lam: float):
    """Planar worst-case instance: unit-circle anchors, quadratic losses.

    The anchors are the n-th roots of unity, so every row has unit norm and
    the rows sum to zero up to floating point.  The minimizer of the mean
    loss is the origin with value lam/2.

    Returns (model, dataset, space) with space the closed unit ball.
    """
    if n < 2:
        raise ValueError("need at least two anchor points")
    angles = 2.0 * np.pi * np.arange(n) / n
    feats = np.column_stack([np.cos(angles), np.sin(angles)])
    return QuadraticDistance(lam), Dataset(feats, np.zeros(n)), L2Ball(1.0)


def replicate_dataset(dataset: Dataset, r: int, seed) -> Dataset:
    """Random 1/r fraction of the rows, each repeated r times (n unchanged)."""
    r = int(r)
    if r < 1:
        raise ValueError("replication factor must be at least 1")
    if dataset.n % r != 0:
        raise ValueError(f"replication factor {r} does not divide n={dataset.n}")
    rng = np.random.default_rng(seed)
    keep = rng.choice(dataset.n, size=dataset.n // r, replace=False)
    rows = np.repeat(keep, r)
    return Dataset(dataset.features[rows].copy(), dataset.labels[rows].copy())


def gen_sparse_conflict(n: int, d: int, rho: int, seed):
    """Sparse-conflict instance whose overlap graph has max degree exactly rho.

    Even rho uses a chain of sliding coordinate windows (each interior
    support overlaps its rho/2 neighbours on both sides); odd rho uses
    cliques of rho+1 examples sharing a hub coordinate.  Coordinates are
    assigned through a seeded permutation and features are standard normal.
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be at least 1")
    if rho < 0:
        raise ValueError("rho must be non-negative")
    if rho >= n:
        raise ValueError(f"max degree {rho} impossible with n={n} examples")
    rng = np.random.default_rng(seed)
    if rho % 2 == 0:
        half = rho // 2
        need = n + half
        if d < need:
            raise ValueError(f"need d >= {need} for n={n}, rho={rho}")
        coords = rng.permutation(d)[:need]
        supports = [coords[i : i + half + 1] for i in range(n)]
    else:
        blocks = -(-n // (rho + 1))
        need = n + blocks
        if d < need:
            raise ValueError(f"need d >= {need} for n={n}, rho={rho}")
        coords = rng.permutation(d)[:need]
        supports = [
            np.array([coords[i], coords[n + i // (rho + 1)]]) for i in range(n)
        ]
    feats = rng.standard_normal((n, d))
    model = SparseConflict(supports)
    return model, Dataset(feats, np.zeros(n))


def save_dataset(dataset: Dataset, path) -> None:
    """Write `f0,...,f{d-1},label` rows with round-trip float formatting."""
    header = ",".join([f"f{j}" for j in range(dataset.d)] + ["label"])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row, lab in zip(dataset.features, dataset.labels):
            fh.write(",".join(fmt_num(v) for v in row) + "," + fmt_num(lab) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[-1] != "label" or not all(
            c == f"f{j}" for j, c in enumerate(header[:-1])
        ):
            raise ValueError(f"unexpected dataset header in {path}")
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    return Dataset(rows[:, :-1], rows[:, -1])
