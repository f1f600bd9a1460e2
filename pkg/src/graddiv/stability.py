"""Coupled-run stability harness.

Two SGD executions on samples differing at one index share the identical
index stream and mechanism randomness; the distance between their iterates
estimates the algorithmic stability of the configuration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import dims as dims_mod
from .problems import Dataset, L2Ball, LossModel, _as_param
from .sgd import SgdConfig, _batch_plan
from .util import parallel_map, write_csv

__all__ = [
    "CoupledSample",
    "CoupledRun",
    "StabilityReport",
    "make_coupled_sample",
    "coupled_sgd",
    "step_size_threshold",
    "stability_bounds",
    "lipschitz_estimate",
    "stability_experiment",
    "stability_sweep",
    "write_stability_csv",
]

STABILITY_CSV_HEADER = (
    "B,gamma,T,n,mean_dist,stderr_dist,mean_norm_dist,bound_thm9,bound_thm10,cond_ok"
)


@dataclass(frozen=True)
class CoupledSample:
    """Two datasets identical except (at most) at row i_replaced."""

    s: Dataset
    s_prime: Dataset
    i_replaced: int

    def __post_init__(self):
        if self.s.features.shape != self.s_prime.features.shape:
            raise ValueError("coupled datasets must have identical shapes")
        if not 0 <= self.i_replaced < self.s.n:
            raise ValueError("replaced index out of range")


def make_coupled_sample(
    kind: str,
    n: int,
    d: int,
    seed,
    sigma: float = 1.0,
    force_identical: bool = False,
) -> CoupledSample:
    """Draw a size-n sample plus one fresh replacement point at a uniform index.

    kind is "gaussian" or "rademacher"; labels come from one random linear
    separator shared by all n+1 points.  With force_identical the
    replacement equals the original row and the two datasets coincide.
    """
    if n < 1:
        raise ValueError("need at least one data point")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(d)
    if kind == "gaussian":
        feats = rng.normal(0.0, sigma, size=(n + 1, d))
    elif kind == "rademacher":
        feats = rng.integers(0, 2, size=(n + 1, d)).astype(float) * 2.0 - 1.0
    else:
        raise ValueError(f"unknown sample kind {kind!r}")
    labels = np.where(feats @ w_true >= 0.0, 1.0, -1.0)
    i = int(rng.integers(n))
    base = Dataset(feats[:n].copy(), labels[:n].copy())
    feats_p = feats[:n].copy()
    labels_p = labels[:n].copy()
    if not force_identical:
        feats_p[i] = feats[n]
        labels_p[i] = labels[n]
    return CoupledSample(base, Dataset(feats_p, labels_p), i)


@dataclass(frozen=True)
class CoupledRun:
    """Distance sequence of one coupled pair (index 0 is the shared start)."""

    distances: np.ndarray
    hits: np.ndarray
    final_w: np.ndarray
    final_w_prime: np.ndarray
    batch_size_max: int
    budget: int

    @property
    def terminal_dist(self) -> float:
        return float(self.distances[-1])

    @property
    def normalized_dist(self) -> float:
        denom = float(self.final_w @ self.final_w + self.final_w_prime @ self.final_w_prime)
        if denom == 0.0:
            return 0.0
        return math.sqrt(self.terminal_dist**2 / denom)


def coupled_sgd(
    model: LossModel,
    coupled: CoupledSample,
    config: SgdConfig,
    w0,
    dim=None,
) -> CoupledRun:
    """Run the same SGD instance on both datasets of a coupled pair.

    Both runs consume one shared index stream and, when a mechanism is
    given, the same mechanism randomness per sampled slot.
    """
    w = _as_param(coupled.s, w0).copy()
    wp = w.copy()
    if not config.space.contains(w):
        raise ValueError("initial point lies outside the parameter space")
    idx_stream, noise_stream = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    )
    plan = _batch_plan(config)
    n = coupled.s.n
    dists = [0.0]
    hits = []
    for b in plan:
        idx = idx_stream.integers(0, n, size=b)
        hits.append(int((idx == coupled.i_replaced).sum()))
        rows = model.grad_rows(coupled.s, idx, w)
        rows_p = model.grad_rows(coupled.s_prime, idx, wp)
        if dim is not None:
            noise = dims_mod.draw_dim_noise(dim, rows.shape, noise_stream)
            rows = dims_mod.apply_dim(dim, rows, noise)
            rows_p = dims_mod.apply_dim(dim, rows_p, noise)
        w = config.space.project(w - config.gamma * rows.sum(axis=0))
        wp = config.space.project(wp - config.gamma * rows_p.sum(axis=0))
        dists.append(float(np.linalg.norm(w - wp)))
    return CoupledRun(
        distances=np.array(dists),
        hits=np.array(hits, dtype=int),
        final_w=w,
        final_w_prime=wp,
        batch_size_max=max(plan, default=0),
        budget=config.budget,
    )


def step_size_threshold(
    beta: float,
    lam: float | None,
    batch_size: int,
    b_bar: float,
    n: int,
) -> float:
    """Largest stable step-size for a coupled pair with differential
    batch-size bound b_bar; lam switches to the strongly convex variant."""
    if b_bar < 1:
        raise ValueError("differential batch-size bound must be at least 1")
    if batch_size < 1 or n < 2:
        raise ValueError("need batch_size >= 1 and n >= 2")
    if beta <= 0 or (lam is not None and lam <= 0):
        raise ValueError("curvature parameters must be positive")
    factor = 1.0 + (1.0 / (n - 1) if batch_size > 1 else 0.0) + (batch_size - 1) / b_bar
    curvature = beta if lam is None else beta + lam
    return 2.0 / (curvature * factor)


def stability_bounds(
    function_class: str,
    *,
    gamma: float,
    lipschitz: float,
    budget: int,
    n: int,
    lam: float | None = None,
    eta: float = 0.0,
) -> float:
    """Stability/generalization bound value for the class.

    convex: 2*gamma*L^2*T/n; strongly_convex: 4*L^2/(lam*n).  A positive eta
    mixes in the unconditional 2*gamma*L^2*T tail term.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if gamma <= 0 or lipschitz < 0 or budget < 0 or n < 1:
        raise ValueError("invalid bound parameters")
    tail = 2.0 * gamma * lipschitz**2 * budget
    if function_class == "convex":
        main = tail / n
    elif function_class == "strongly_convex":
        if lam is None or lam <= 0:
            raise ValueError("strongly_convex needs lam > 0")
        main = 4.0 * lipschitz**2 / (lam * n)
    else:
        raise ValueError(f"unknown function class {function_class!r}")
    return main * (1.0 - eta) + tail * eta


def lipschitz_estimate(
    model: LossModel,
    dataset: Dataset,
    space,
    samples: int,
    rng: np.random.Generator,
) -> float:
    """Max per-example gradient norm over sampled (i, w) pairs.

    Only works on a bounded space; the result is an under-estimate of the
    true Lipschitz constant by construction.
    """
    if not isinstance(space, L2Ball):
        raise ValueError("unbounded space: supply the Lipschitz constant analytically")
    if samples < 1:
        raise ValueError("need at least one sample")
    best = 0.0
    d = dataset.d
    for _ in range(samples):
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        radius = space.radius * rng.random() ** (1.0 / d)
        i = int(rng.integers(dataset.n))
        g = model.gradient(dataset, i, direction * radius)
        best = max(best, float(np.linalg.norm(g)))
    return best


@dataclass(frozen=True)
class StabilityReport:
    """Aggregate coupled-run distances for one batch size."""

    batch_size: int
    gamma: float
    budget: int
    n: int
    mean_dist: float
    stderr_dist: float
    mean_norm_dist: float
    bound_dist_convex: float
    bound_dist_strong: float
    cond_ok: bool


def stability_experiment(
    model: LossModel,
    pair_factory: Callable[[int], CoupledSample],
    config_base: SgdConfig,
    batch_size: int,
    seeds: Sequence[int],
    *,
    lipschitz: float,
    beta: float,
    lam: float | None = None,
    b_bar: float | None = None,
    dim=None,
) -> StabilityReport:
    """Mean coupled distance over seeds at one batch size.

    The reported distance-level references are 2*gamma*L*T/n (convex) and
    4*L/(lam*n) (strongly convex, inf when lam is None); cond_ok records
    whether gamma sits below the coupled step-size threshold.
    """
    if not seeds:
        raise ValueError("need at least one seed")

    def one(seed):
        pair = pair_factory(seed)
        cfg = replace(config_base, batch_schedule=batch_size, seed=[seed, 1])
        run = coupled_sgd(model, pair, cfg, np.zeros(pair.s.d), dim=dim)
        return run.terminal_dist, run.normalized_dist, pair.s.n

    results = parallel_map(one, list(seeds))
    dists = np.array([r[0] for r in results])
    norms = np.array([r[1] for r in results])
    n = results[0][2]
    gamma, budget = config_base.gamma, config_base.budget
    mean = float(dists.mean())
    stderr = float(dists.std(ddof=1) / math.sqrt(len(dists))) if len(dists) > 1 else math.inf
    bound_cvx = 2.0 * gamma * lipschitz * budget / n
    bound_strong = math.inf if lam is None else 4.0 * lipschitz / (lam * n)
    cond_ok = True
    if b_bar is not None:
        cond_ok = gamma <= step_size_threshold(beta, lam, batch_size, b_bar, n)
    return StabilityReport(
        batch_size=batch_size,
        gamma=gamma,
        budget=budget,
        n=n,
        mean_dist=mean,
        stderr_dist=stderr,
        mean_norm_dist=float(norms.mean()),
        bound_dist_convex=bound_cvx,
        bound_dist_strong=bound_strong,
        cond_ok=cond_ok,
    )


def stability_sweep(
    model: LossModel,
    pair_factory: Callable[[int], CoupledSample],
    batch_grid: Sequence[int],
    config_base: SgdConfig,
    seeds: Sequence[int],
    *,
    lipschitz: float,
    beta: float,
    lam: float | None = None,
    b_bar: float | None = None,
    dim=None,
) -> list[StabilityReport]:
    """Coupled distances across a batch-size grid at equal gradient budget."""
    return [
        stability_experiment(
            model,
            pair_factory,
            config_base,
            b,
            seeds,
            lipschitz=lipschitz,
            beta=beta,
            lam=lam,
            b_bar=b_bar,
            dim=dim,
        )
        for b in batch_grid
    ]


def write_stability_csv(path, reports: Sequence[StabilityReport]) -> None:
    rows = [
        (
            r.batch_size,
            r.gamma,
            r.budget,
            r.n,
            r.mean_dist,
            r.stderr_dist,
            r.mean_norm_dist,
            r.bound_dist_convex,
            r.bound_dist_strong,
            int(r.cond_ok),
        )
        for r in reports
    ]
    write_csv(path, STABILITY_CSV_HEADER, rows)
