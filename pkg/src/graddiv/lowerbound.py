"""Worst-case planar instance: error floors, hull confinement, divergence.

The instance places n unit-norm anchors on the circle with zero mean, uses
quadratic distance losses, and constrains iterates to the unit ball.  Its
batch-size bound has the closed form (||w||^2 + 1) / ||w||^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diversity
from .problems import L2Ball, gen_lowerbound_instance
from .sgd import SgdConfig, run_sgd, sgd_step
from .util import parallel_map, seed_list, write_csv

__all__ = [
    "closed_form_bs",
    "hull_membership",
    "FloorPoint",
    "FloorReport",
    "floor_experiment",
    "one_step_distance_mc",
    "DivergenceReport",
    "divergence_check",
    "write_floor_csv",
]

FLOOR_CSV_HEADER = "delta,B,measured_floor,reference,ratio,seeds"

# Exact gradient second-moment ceiling of the instance on the unit ball.
M2_CEILING_FACTOR = 2.0


def closed_form_bs(w) -> float:
    """Batch-size bound of the planar instance: (||w||^2 + 1) / ||w||^2."""
    sq = float(np.asarray(w, dtype=float) @ np.asarray(w, dtype=float))
    if sq == 0.0:
        return math.inf
    return (sq + 1.0) / sq


def hull_membership(w, points: np.ndarray, slack: float = 1e-12) -> bool:
    """Point-in-convex-polygon test in the plane.

    Vertices are sorted by angle; membership means every edge cross product
    has the same sign within the slack.
    """
    w = np.asarray(w, dtype=float)
    pts = np.asarray(points, dtype=float)
    if w.shape != (2,) or pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("hull membership is only defined in the plane")
    order = np.argsort(np.arctan2(pts[:, 1], pts[:, 0]))
    pts = pts[order]
    nxt = np.roll(pts, -1, axis=0)
    edge = nxt - pts
    rel = w[None, :] - pts
    cross = edge[:, 0] * rel[:, 1] - edge[:, 1] * rel[:, 0]
    return bool(cross.min() >= -slack)


@dataclass(frozen=True)
class FloorPoint:
    delta: float
    batch_size: int
    measured_floor: float
    reference: float
    ratio: float
    n_seeds: int


@dataclass(frozen=True)
class FloorReport:
    gamma: float
    lam: float
    budget: int
    bs_estimate: float
    points: tuple[FloorPoint, ...]


def _pilot_bs_estimate(model, dataset, space, lam, gamma, budget, pilot_seeds) -> float:
    """Mean over pilot serial runs of the minimum trajectory batch bound.

    Pilots start at an anchor point (the largest-radius admissible start),
    where the batch bound of this instance attains its floor of 2.
    """
    w0 = dataset.features[0]

    def one(seed):
        cfg = SgdConfig(
            gamma=gamma,
            batch_schedule=1,
            budget=budget,
            space=space,
            seed=seed,
            record_every=max(1, budget // 100),
        )
        traj = run_sgd(model, dataset, cfg, w0)
        return diversity.diversity_profile(model, dataset, traj).min_bs

    mins = parallel_map(one, list(pilot_seeds))
    finite = [m for m in mins if math.isfinite(m)]
    if not finite:
        raise ValueError("pilot trajectories are degenerate everywhere")
    return float(np.mean(finite))


def floor_experiment(
    n: int,
    lam: float,
    gamma: float,
    delta_grid: Sequence[float],
    budget: int,
    seeds: Sequence[int],
    *,
    pilot_seed: int = 0,
    n_pilot: int = 20,
) -> FloorReport:
    """Stationary error level versus the batch oversize factor delta.

    For each delta the batch size is floor(delta * pilot bs estimate) + 1,
    required to stay at or below 1/(2*lam*gamma).  The reference value is
    (1 + delta) * gamma * M2 / lam with M2 = 2*lam^2, the instance's exact
    second-moment ceiling on the unit ball.
    """
    if budget < 10.0 / (lam * gamma):
        raise ValueError("budget too small to reach the stationary regime")
    model, dataset, space = gen_lowerbound_instance(n, lam)
    cap = 1.0 / (2.0 * lam * gamma)
    bs_hat = _pilot_bs_estimate(
        model, dataset, space, lam, gamma, budget, seed_list(pilot_seed, n_pilot)
    )
    batches = [int(delta * bs_hat) + 1 for delta in delta_grid]
    for delta, b in zip(delta_grid, batches):
        if b > cap:
            raise ValueError(
                f"delta={delta} needs batch size {b} above the admissible cap {cap:.3g}"
            )
    w0 = dataset.features[0]
    m2_ceiling = M2_CEILING_FACTOR * lam**2

    def floor_for(b):
        def one(seed):
            cfg = SgdConfig(
                gamma=gamma,
                batch_schedule=b,
                budget=budget,
                space=space,
                seed=seed,
                record_every=budget,
            )
            traj = run_sgd(model, dataset, cfg, w0)
            return float(traj.final_w @ traj.final_w)

        return float(np.mean(parallel_map(one, list(seeds))))

    points = []
    for delta, b in zip(delta_grid, batches):
        measured = floor_for(b)
        reference = (1.0 + delta) * gamma * m2_ceiling / lam
        points.append(
            FloorPoint(
                delta=float(delta),
                batch_size=b,
                measured_floor=measured,
                reference=reference,
                ratio=measured / reference,
                n_seeds=len(seeds),
            )
        )
    return FloorReport(
        gamma=gamma, lam=lam, budget=budget, bs_estimate=bs_hat, points=tuple(points)
    )


def one_step_distance_mc(
    n: int,
    lam: float,
    gamma: float,
    batch_size: int,
    w,
    trials: int,
    seed=0,
) -> tuple[float, float]:
    """Mean and standard error of ||w+|| after one projected batch from w."""
    model, dataset, space = gen_lowerbound_instance(n, lam)
    w = np.asarray(w, dtype=float)
    rng = np.random.default_rng(seed)
    dists = np.empty(trials)
    for t in range(trials):
        w_new = sgd_step(model, dataset, w, batch_size, gamma, rng, space)
        dists[t] = np.linalg.norm(w_new)
    mean = float(dists.mean())
    stderr = float(dists.std(ddof=1) / math.sqrt(trials)) if trials > 1 else math.inf
    return mean, stderr


@dataclass(frozen=True)
class DivergenceReport:
    batch_size: int
    base_dist: float
    mean_step_dist: float
    stderr: float
    one_step_increase: bool
    initial_dist: float
    mean_terminal_dist: float
    nonconvergent: bool


def divergence_check(
    n: int,
    lam: float,
    gamma: float,
    batch_size: int,
    trials: int,
    steps: int,
    *,
    seed=0,
    traj_trials: int = 64,
) -> DivergenceReport:
    """Verify the expansion regime: batch sizes above 2/(gamma*lam) push the
    iterate away from the optimum in expectation.

    One-step Monte Carlo from a fixed point at radius 1/2, plus full
    trajectories whose terminal distance is compared with the initial one.
    """
    if batch_size <= 2.0 / (gamma * lam):
        raise ValueError("batch size is not in the divergence regime")
    model, dataset, space = gen_lowerbound_instance(n, lam)
    w_start = 0.5 * dataset.features[0]
    base = float(np.linalg.norm(w_start))
    mean, stderr = one_step_distance_mc(
        n, lam, gamma, batch_size, w_start, trials, seed=seed
    )

    def one(run_seed):
        cfg = SgdConfig(
            gamma=gamma,
            batch_schedule=batch_size,
            budget=batch_size * steps,
            space=space,
            seed=run_seed,
            record_every=steps,
        )
        traj = run_sgd(model, dataset, cfg, w_start)
        return float(np.linalg.norm(traj.final_w))

    terminals = parallel_map(one, seed_list(seed, traj_trials))
    mean_terminal = float(np.mean(terminals))
    return DivergenceReport(
        batch_size=batch_size,
        base_dist=base,
        mean_step_dist=mean,
        stderr=stderr,
        one_step_increase=mean - 3.0 * stderr > base,
        initial_dist=base,
        mean_terminal_dist=mean_terminal,
        nonconvergent=mean_terminal >= base,
    )


def write_floor_csv(path, report: FloorReport) -> None:
    rows = [
        (p.delta, p.batch_size, p.measured_floor, p.reference, p.ratio, p.n_seeds)
        for p in report.points
    ]
    write_csv(path, FLOOR_CSV_HEADER, rows)
