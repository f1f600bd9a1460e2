"""Gradient diversity statistics and data-dependent batch-size bounds."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .problems import Dataset, LossModel, SparseConflict, _as_param
from .util import write_csv

__all__ = [
    "GradientStats",
    "DifferentialStats",
    "DiversityProfile",
    "stats_from_gradients",
    "pairwise_sq_norm_of_sum",
    "gradient_diversity",
    "differential_diversity",
    "spectral_sq_norm",
    "glm_bound",
    "conflict_max_degree",
    "conflict_bound",
    "diversity_profile",
    "write_stats_csv",
]

# Denominators at or below this fraction of the numerator count as zero.
DEGENERATE_FRACTION = 1e-30
# The O(n^2 d) pairwise cross-check runs only at this scale or below.
PAIRWISE_CHECK_MAX_N = 512
DUAL_PATH_RTOL = 1e-8

STATS_CSV_HEADER = "k,N_k,m2,g,delta,bs,degenerate"


@dataclass(frozen=True)
class GradientStats:
    """Diversity statistics of one gradient bundle at a point.

    m2:    mean squared per-example gradient norm
    g:     squared norm of the mean gradient
    delta: sum ||g_i||^2 / ||sum g_i||^2
    bs:    n * delta, the batch-size bound (inf when degenerate)
    """

    m2: float
    g: float
    delta: float
    bs: float
    degenerate: bool


@dataclass(frozen=True)
class DifferentialStats(GradientStats):
    """Same statistics built from difference gradients at a pair of points."""


def pairwise_sq_norm_of_sum(grads: np.ndarray) -> float:
    """||sum g_i||^2 accumulated from all pairwise inner products (O(n^2 d))."""
    return float((grads @ grads.T).sum())


def stats_from_gradients(grads: np.ndarray, cls=GradientStats) -> GradientStats:
    grads = np.asarray(grads, dtype=float)
    if grads.ndim != 2:
        raise ValueError("expected one gradient per row")
    n = grads.shape[0]
    num = float(np.einsum("ij,ij->", grads, grads))
    total = grads.sum(axis=0)
    den = float(total @ total)
    if n <= PAIRWISE_CHECK_MAX_N:
        den_pairwise = pairwise_sq_norm_of_sum(grads)
        tol = DUAL_PATH_RTOL * max(abs(den), abs(den_pairwise)) + 1e-13 * num
        if abs(den - den_pairwise) > tol:
            raise ArithmeticError(
                f"sum-path and pairwise-path denominators disagree: "
                f"{den!r} vs {den_pairwise!r}"
            )
    degenerate = den <= DEGENERATE_FRACTION * num
    delta = math.inf if degenerate else num / den
    bs = math.inf if degenerate else n * delta
    return cls(m2=num / n, g=den / n**2, delta=delta, bs=bs, degenerate=degenerate)


def gradient_diversity(model: LossModel, dataset: Dataset, w) -> GradientStats:
    """Diversity of the per-example gradients at w."""
    return stats_from_gradients(model.grad_matrix(dataset, w))


def differential_diversity(model: LossModel, dataset: Dataset, w, w_prime) -> DifferentialStats:
    """Diversity of the difference gradients grad f_i(w) - grad f_i(w')."""
    diff = model.grad_matrix(dataset, w) - model.grad_matrix(dataset, w_prime)
    return stats_from_gradients(diff, cls=DifferentialStats)


def spectral_sq_norm(
    matrix: np.ndarray,
    rel_tol: float = 1e-10,
    max_iter: int = 10_000,
    seed: int = 0,
) -> float:
    """Squared top singular value of `matrix` by power iteration on X^T X."""
    x = np.asarray(matrix, dtype=float)
    a = x.T @ x
    if not a.any():
        warnings.warn("zero matrix: spectral norm is 0", stacklevel=2)
        return 0.0
    rng = np.random.default_rng(seed)
    b = rng.standard_normal(a.shape[0])
    b /= np.linalg.norm(b)
    lam = 0.0
    for _ in range(max_iter):
        v = a @ b
        lam_new = float(b @ v)
        norm_v = float(np.linalg.norm(v))
        if norm_v == 0.0:
            # start vector landed in the null space; re-seed and continue
            b = rng.standard_normal(a.shape[0])
            b /= np.linalg.norm(b)
            continue
        b = v / norm_v
        if abs(lam_new - lam) <= rel_tol * abs(lam_new):
            return lam_new
        lam = lam_new
    return lam


def glm_bound(dataset: Dataset, seed: int = 0) -> float:
    """Data-dependent diversity floor for generalized linear losses.

    Returns n * min_i ||x_i||^2 / sigma_max^2(X); the same value also floors
    the differential batch-size bound for these losses.
    """
    sq_norms = (dataset.features**2).sum(axis=1)
    sigma_sq = spectral_sq_norm(dataset.features, seed=seed)
    if sigma_sq == 0.0:
        return 0.0
    return dataset.n * float(sq_norms.min()) / sigma_sq


def conflict_max_degree(supports: Sequence[np.ndarray]) -> int:
    """Max degree of the support-overlap graph, via a coordinate index."""
    by_coord: dict[int, list[int]] = {}
    for i, s in enumerate(supports):
        for c in map(int, s):
            by_coord.setdefault(c, []).append(i)
    neighbours: list[set[int]] = [set() for _ in supports]
    for members in by_coord.values():
        for i in members:
            neighbours[i].update(members)
    return max(len(nb - {i}) for i, nb in enumerate(neighbours))


def conflict_bound(model: LossModel) -> float:
    """Diversity floor n/(rho+1) from the support-overlap graph."""
    if not isinstance(model, SparseConflict):
        raise TypeError("conflict_bound needs a model with declared supports")
    rho = conflict_max_degree(model.supports)
    return model.n / (rho + 1)


@dataclass(frozen=True)
class ProfilePoint:
    k: int
    n_cum: int
    stats: GradientStats


@dataclass(frozen=True)
class DiversityProfile:
    points: tuple[ProfilePoint, ...]

    @property
    def min_bs(self) -> float:
        return min(p.stats.bs for p in self.points)

    @property
    def max_m2(self) -> float:
        return max(p.stats.m2 for p in self.points)


def diversity_profile(model: LossModel, dataset: Dataset, trajectory) -> DiversityProfile:
    """Batch-size bound at every recorded iterate of a trajectory."""
    if not trajectory.points:
        raise ValueError("trajectory has no recorded iterates")
    points = tuple(
        ProfilePoint(p.k, p.n_cum, gradient_diversity(model, dataset, p.w))
        for p in trajectory.points
    )
    return DiversityProfile(points)


def write_stats_csv(path, entries: Sequence[tuple[int, int, GradientStats]]) -> None:
    """Emit `k,N_k,m2,g,delta,bs,degenerate` rows."""
    rows = [
        (k, n_cum, s.m2, s.g, s.delta, s.bs, int(s.degenerate))
        for k, n_cum, s in entries
    ]
    write_csv(path, STATS_CSV_HEADER, rows)


def empirical_diversity_constant(
    dist: str,
    d_grid: Sequence[int],
    trials: int,
    w_per_trial: int,
    seed,
    n_factor: int = 4,
) -> float:
    """Smallest observed bs/d over random logistic instances with n = n_factor*d.

    Measures the dimension-proportionality constant of the batch-size bound
    for random feature matrices; the constant itself is distribution
    dependent, so callers freeze a registered value and check re-runs
    against it.
    """
    from .problems import gen_gaussian_dataset, gen_rademacher_dataset, Logistic

    rng = np.random.default_rng(seed)
    model = Logistic()
    worst = math.inf
    for d in d_grid:
        for _ in range(trials):
            data_seed = int(rng.integers(2**63))
            if dist == "gaussian":
                data = gen_gaussian_dataset(n_factor * d, d, 1.0, data_seed)
            elif dist == "rademacher":
                data = gen_rademacher_dataset(n_factor * d, d, data_seed)
            else:
                raise ValueError(f"unknown distribution {dist!r}")
            for _ in range(w_per_trial):
                w = rng.standard_normal(d)
                worst = min(worst, gradient_diversity(model, data, w).bs / d)
    return worst
