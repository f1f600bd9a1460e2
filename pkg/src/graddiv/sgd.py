"""Seeded mini-batch SGD engine and convergence-parity experiments.

The update is w <- w - gamma * (sum of batch gradients); there is no 1/B
normalization, the step-size carries it.  Batch indices are drawn i.i.d.
uniformly with replacement.  With a bounded parameter space the Euclidean
projection is applied once per iteration, after the full batch sum.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import diversity
from .problems import Dataset, LossModel, Unconstrained, _as_param
from .util import parallel_map, write_csv

__all__ = [
    "SgdConfig",
    "Trajectory",
    "TrajectoryPoint",
    "ParityReport",
    "sgd_step",
    "run_sgd",
    "lemma1_exact_expectation",
    "lemma1_closed_form",
    "tuned_step_size",
    "convergence_parity_experiment",
    "write_trajectory_csv",
]

TRAJECTORY_CSV_HEADER = "k,N_k,dist2_opt,loss,grad_norm2,bs"

FUNCTION_CLASSES = ("strongly_convex", "convex", "smooth", "pl")


@dataclass(frozen=True)
class SgdConfig:
    """Step-size, batch schedule, gradient budget, space, seed, record stride."""

    gamma: float
    batch_schedule: int | Sequence[int]
    budget: int
    space: object = None
    seed: int | Sequence[int] = 0
    record_every: int = 1

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("step-size must be positive")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")
        if self.space is None:
            object.__setattr__(self, "space", Unconstrained())


def _batch_plan(config: SgdConfig) -> list[int]:
    sched = config.batch_schedule
    if isinstance(sched, (int, np.integer)):
        b = int(sched)
        if b < 1:
            raise ValueError("batch size must be at least 1")
        plan = [b] * (config.budget // b)
        if config.budget % b:
            plan.append(config.budget % b)  # truncated final batch keeps N exact
        return plan
    plan = [int(b) for b in sched]
    if any(b < 1 for b in plan):
        raise ValueError("all batch sizes must be at least 1")
    if sum(plan) != config.budget:
        raise ValueError("varying batch schedule must sum to the budget")
    return plan


@dataclass(frozen=True)
class TrajectoryPoint:
    k: int
    n_cum: int
    w: np.ndarray
    dist2_opt: float | None
    loss: float
    grad_norm2: float
    bs: float


@dataclass(frozen=True)
class Trajectory:
    points: tuple[TrajectoryPoint, ...]

    @property
    def final(self) -> TrajectoryPoint:
        return self.points[-1]

    @property
    def final_w(self) -> np.ndarray:
        return self.points[-1].w


def sgd_step(model, dataset, w, batch_size, gamma, rng, space=None):
    """One mini-batch update from w; indices drawn with replacement from rng."""
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    w = _as_param(dataset, w)
    idx = rng.integers(0, dataset.n, size=int(batch_size))
    w_new = w - gamma * model.grad_sum(dataset, idx, w)
    return space.project(w_new) if space is not None else w_new


def _record(model, dataset, k, n_cum, w, w_star) -> TrajectoryPoint:
    stats = diversity.gradient_diversity(model, dataset, w)
    dist2 = None if w_star is None else float(((w - w_star) ** 2).sum())
    return TrajectoryPoint(
        k=k,
        n_cum=n_cum,
        w=w.copy(),
        dist2_opt=dist2,
        loss=model.mean_loss(dataset, w),
        grad_norm2=stats.g,
        bs=stats.bs,
    )


def _run(model, dataset, config, w0, w_star=None, dim=None) -> Trajectory:
    from . import dims as dims_mod  # local import avoids a module cycle

    w = _as_param(dataset, w0).copy()
    if not config.space.contains(w):
        raise ValueError("initial point lies outside the parameter space")
    idx_stream, noise_stream = (
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2)
    )
    plan = _batch_plan(config)
    points = [_record(model, dataset, 0, 0, w, w_star)]
    n_cum = 0
    for k, b in enumerate(plan, start=1):
        if dim is None:
            w = sgd_step(model, dataset, w, b, config.gamma, idx_stream, config.space)
        else:
            idx = idx_stream.integers(0, dataset.n, size=b)
            rows = model.grad_rows(dataset, idx, w)
            noise = dims_mod.draw_dim_noise(dim, rows.shape, noise_stream)
            rows = dims_mod.apply_dim(dim, rows, noise)
            w = config.space.project(w - config.gamma * rows.sum(axis=0))
        n_cum += b
        if k % config.record_every == 0 or k == len(plan):
            points.append(_record(model, dataset, k, n_cum, w, w_star))
    return Trajectory(tuple(points))


def run_sgd(model, dataset, config: SgdConfig, w0, w_star=None) -> Trajectory:
    """Run mini-batch SGD; deterministic per config seed."""
    return _run(model, dataset, config, w0, w_star=w_star)


def lemma1_exact_expectation(model, dataset, w, batch_size, gamma, w_star) -> float:
    """Exact E||w+ - w*||^2 after one unprojected batch, by enumerating all
    n^B equally likely index tuples."""
    w = _as_param(dataset, w)
    w_star = _as_param(dataset, w_star)
    n, b = dataset.n, int(batch_size)
    if n**b > 1_000_000:
        raise ValueError(f"enumeration of {n}^{b} index tuples is too large")
    grads = model.grad_matrix(dataset, w)
    tuples = np.array(list(itertools.product(range(n), repeat=b)), dtype=int)
    sums = grads[tuples].sum(axis=1)
    diffs = (w - w_star)[None, :] - gamma * sums
    return float((diffs**2).sum(axis=1).mean())


def lemma1_closed_form(model, dataset, w, batch_size, gamma, w_star) -> float:
    """E||w+ - w*||^2 after one unprojected batch, in closed form:
    ||w - w*||^2 - 2*gamma*B*<grad F, w - w*> + gamma^2*(B*M2 + B*(B-1)*G)."""
    w = _as_param(dataset, w)
    w_star = _as_param(dataset, w_star)
    b = float(batch_size)
    stats = diversity.gradient_diversity(model, dataset, w)
    full_grad = model.grad_matrix(dataset, w).mean(axis=0)
    diff = w - w_star
    return float(
        diff @ diff
        - 2.0 * gamma * b * (full_grad @ diff)
        + gamma**2 * (b * stats.m2 + b * (b - 1.0) * stats.g)
    )


def tuned_step_size(
    function_class: str,
    epsilon: float,
    *,
    lam: float | None = None,
    beta: float | None = None,
    mu: float | None = None,
    m2: float,
    delta: float = 0.0,
) -> float:
    """Constant step-size reaching epsilon-suboptimality for the class.

    With delta > 0 the step-size is deflated by 1/(1+delta), trading a
    proportionally larger gradient budget for the same guarantee.
    """
    if epsilon <= 0 or m2 <= 0:
        raise ValueError("epsilon and m2 must be positive")
    if function_class == "strongly_convex":
        if lam is None:
            raise ValueError("strongly_convex needs lam")
        base = epsilon * lam / m2
    elif function_class == "convex":
        base = epsilon / m2
    elif function_class == "smooth":
        if beta is None:
            raise ValueError("smooth needs beta")
        base = epsilon / (beta * m2)
    elif function_class == "pl":
        if mu is None or beta is None:
            raise ValueError("pl needs mu and beta")
        base = 2.0 * epsilon * mu / (m2 * beta)
    else:
        raise ValueError(f"unknown function class {function_class!r}")
    return base / (1.0 + delta)


def _budget_for(function_class, epsilon, m2, *, lam, beta, mu, d0, gap0) -> int:
    if function_class == "strongly_convex":
        t = m2 / (2.0 * lam**2 * epsilon) * math.log(2.0 * d0 / epsilon)
    elif function_class == "convex":
        t = m2 * d0 / epsilon**2
    elif function_class == "smooth":
        t = 2.0 * m2 * beta * gap0 / epsilon**2
    else:  # pl
        t = m2 * beta / (4.0 * mu**2 * epsilon) * math.log(2.0 * gap0 / epsilon)
    return max(1, math.ceil(t))


def _suboptimality(function_class, model, dataset, traj, w_star, f_star) -> float:
    if function_class == "strongly_convex":
        return float(((traj.final_w - w_star) ** 2).sum())
    if function_class == "convex":
        starts = np.array([p.w for p in traj.points[:-1]])
        return model.mean_loss(dataset, starts.mean(axis=0)) - f_star
    if function_class == "smooth":
        return min(p.grad_norm2 for p in traj.points[:-1])
    return model.mean_loss(dataset, traj.final_w) - f_star


@dataclass(frozen=True)
class ParityReport:
    """Serial vs mini-batch suboptimality at equal step-size and budget."""

    function_class: str
    batch_size: int
    delta: float
    gamma: float
    budget: int
    serial_mean: float
    minibatch_mean: float
    ratio: float
    n_seeds: int
    min_trajectory_bs: float
    m2_estimate: float


def convergence_parity_experiment(
    model,
    dataset,
    function_class: str,
    epsilon: float,
    delta: float,
    seeds: Sequence[int],
    *,
    lam: float | None = None,
    beta: float | None = None,
    mu: float | None = None,
    w0=None,
    w_star=None,
    f_star: float | None = None,
    pilot_budget: int = 1000,
) -> ParityReport:
    """Compare serial and mini-batch SGD at equal step-size and budget.

    A serial pilot run supplies the gradient second-moment estimate and the
    minimum trajectory batch-size bound; the mini-batch size is then
    floor(delta * min bs) + 1, capped at 1/(2*lam*gamma) for strongly convex
    runs and 1/(2*mu*gamma) for PL runs.
    """
    if function_class not in FUNCTION_CLASSES:
        raise ValueError(f"unknown function class {function_class!r}")
    if not seeds:
        raise ValueError("need at least one seed")
    w0 = np.zeros(dataset.d) if w0 is None else _as_param(dataset, w0)
    if w_star is not None:
        w_star = _as_param(dataset, w_star)
    if f_star is None and w_star is not None:
        f_star = model.mean_loss(dataset, w_star)
    if function_class in ("strongly_convex", "convex") and w_star is None:
        raise ValueError(f"{function_class} needs w_star")
    if function_class in ("convex", "smooth", "pl") and f_star is None:
        raise ValueError(f"{function_class} needs f_star (or w_star)")

    pilot_cfg = SgdConfig(
        gamma=1e-12,  # placeholder; replaced below once m2 is known
        batch_schedule=1,
        budget=pilot_budget,
        seed=seeds[0],
        record_every=max(1, pilot_budget // 200),
    )
    # First pilot pass with a conservative step-size derived from w0 stats.
    m2_w0 = diversity.gradient_diversity(model, dataset, w0).m2
    gamma0 = tuned_step_size(
        function_class, epsilon, lam=lam, beta=beta, mu=mu, m2=max(m2_w0, 1e-300)
    )
    pilot_cfg = replace(pilot_cfg, gamma=gamma0)
    pilot = run_sgd(model, dataset, pilot_cfg, w0, w_star=w_star)
    profile = diversity.diversity_profile(model, dataset, pilot)
    min_bs = profile.min_bs
    if not math.isfinite(min_bs):
        raise ValueError("pilot trajectory is degenerate: no finite batch bound")
    m2_hat = max(profile.max_m2, m2_w0)

    gamma = tuned_step_size(
        function_class, epsilon, lam=lam, beta=beta, mu=mu, m2=m2_hat
    )
    batch = int(delta * min_bs) + 1
    if function_class == "strongly_convex":
        batch = min(batch, int(1.0 / (2.0 * lam * gamma)))
    elif function_class == "pl":
        batch = min(batch, int(1.0 / (2.0 * mu * gamma)))
    batch = max(batch, 1)

    d0 = float(((w0 - w_star) ** 2).sum()) if w_star is not None else 0.0
    gap0 = (model.mean_loss(dataset, w0) - f_star) if f_star is not None else 0.0
    budget = _budget_for(
        function_class, epsilon, m2_hat, lam=lam, beta=beta, mu=mu, d0=d0, gap0=gap0
    )
    dense = function_class in ("convex", "smooth")

    def one_seed(seed):
        out = []
        for b in (1, batch):
            cfg = SgdConfig(
                gamma=gamma,
                batch_schedule=b,
                budget=budget,
                seed=seed,
                record_every=1 if dense else max(1, budget // b),
            )
            traj = run_sgd(model, dataset, cfg, w0, w_star=w_star)
            out.append(_suboptimality(function_class, model, dataset, traj, w_star, f_star))
        return out

    results = np.array(parallel_map(one_seed, list(seeds)))
    serial_mean = float(results[:, 0].mean())
    minibatch_mean = float(results[:, 1].mean())
    return ParityReport(
        function_class=function_class,
        batch_size=batch,
        delta=delta,
        gamma=gamma,
        budget=budget,
        serial_mean=serial_mean,
        minibatch_mean=minibatch_mean,
        ratio=minibatch_mean / serial_mean,
        n_seeds=len(seeds),
        min_trajectory_bs=min_bs,
        m2_estimate=m2_hat,
    )


def write_trajectory_csv(path, trajectory: Trajectory) -> None:
    """Emit `k,N_k,dist2_opt,loss,grad_norm2,bs` rows (inf when unknown)."""
    rows = [
        (
            p.k,
            p.n_cum,
            math.inf if p.dist2_opt is None else p.dist2_opt,
            p.loss,
            p.grad_norm2,
            p.bs,
        )
        for p in trajectory.points
    ]
    write_csv(path, TRAJECTORY_CSV_HEADER, rows)
