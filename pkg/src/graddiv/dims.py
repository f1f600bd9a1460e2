"""Randomized gradient surrogates and their batch-size bounds.

Three mechanisms: dropout (random coordinate mask, no 1/(1-p) rescaling),
additive isotropic Gaussian noise with per-coordinate variance sigma2, and
unbiased norm-preserving sign quantization.  Each has a closed-form
batch-size bound and a Monte Carlo estimator of the same quantity.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import sgd as sgd_mod
from .problems import Dataset, LossModel, _as_param
from .util import fmt_num

__all__ = [
    "Dropout",
    "Sgld",
    "Quantize",
    "DimKind",
    "draw_dim_noise",
    "apply_dim",
    "surrogate_gradient",
    "dim_batch_bound_analytic",
    "dim_batch_bound_mc",
    "McBound",
    "run_sgd_with_dim",
    "write_dim_sweep_csv",
]

DIM_CSV_HEADER = "kind,param,bs,bs_dim_analytic,bs_dim_mc,mc_stderr"


@dataclass(frozen=True)
class Dropout:
    """Zero each gradient coordinate independently with probability p."""

    p: float

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("dropout probability must lie in (0, 1)")


@dataclass(frozen=True)
class Sgld:
    """Add independent N(0, sigma2) noise to each gradient coordinate."""

    sigma2: float

    def __post_init__(self):
        if not self.sigma2 > 0.0:
            raise ValueError("noise variance must be positive")


@dataclass(frozen=True)
class Quantize:
    """Map v to ||v|| * sign(v_l) * eta_l with P(eta_l = 1) = |v_l| / ||v||."""


DimKind = Dropout | Sgld | Quantize


def draw_dim_noise(kind: DimKind, shape, rng: np.random.Generator) -> np.ndarray:
    """Raw mechanism randomness, separated out so coupled runs can share it."""
    if isinstance(kind, Sgld):
        return rng.standard_normal(shape)
    if isinstance(kind, (Dropout, Quantize)):
        return rng.random(shape)
    raise TypeError(f"unknown mechanism {kind!r}")


def apply_dim(kind: DimKind, grads: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Apply a mechanism to gradients (rows along the last axis)."""
    if isinstance(kind, Dropout):
        return grads * (noise >= kind.p)
    if isinstance(kind, Sgld):
        return grads + math.sqrt(kind.sigma2) * noise
    if isinstance(kind, Quantize):
        norms = np.linalg.norm(grads, axis=-1, keepdims=True)
        probs = np.divide(np.abs(grads), norms, out=np.zeros_like(grads), where=norms > 0)
        return norms * np.sign(grads) * (noise < probs)
    raise TypeError(f"unknown mechanism {kind!r}")


def surrogate_gradient(kind: DimKind, g: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random surrogate for one gradient vector."""
    g = np.asarray(g, dtype=float)
    return apply_dim(kind, g, draw_dim_noise(kind, g.shape, rng))


def _bundle(model, dataset, w):
    grads = model.grad_matrix(dataset, w)
    sum_sq = float(np.einsum("ij,ij->", grads, grads))
    total = grads.sum(axis=0)
    sq_of_sum = float(total @ total)
    cross = sq_of_sum - sum_sq
    return grads, sum_sq, sq_of_sum, cross


def dim_batch_bound_analytic(model: LossModel, dataset: Dataset, w, kind: DimKind) -> float:
    """Closed-form batch-size bound of the mechanism's surrogate gradients."""
    grads, sum_sq, sq_of_sum, cross = _bundle(model, dataset, w)
    n, d = grads.shape
    if isinstance(kind, Dropout):
        keep = 1.0 - kind.p
        num = n * keep * sum_sq
        den = keep * sum_sq + keep**2 * cross
    elif isinstance(kind, Sgld):
        num = n * sum_sq + n**2 * d * kind.sigma2
        den = sq_of_sum + n * d * kind.sigma2
    elif isinstance(kind, Quantize):
        q = float((np.linalg.norm(grads, axis=1) * np.abs(grads).sum(axis=1)).sum())
        num = n * q
        den = q + cross
    else:
        raise TypeError(f"unknown mechanism {kind!r}")
    if den <= 1e-30 * num:
        warnings.warn("degenerate surrogate denominator; bound is infinite", stacklevel=2)
        return math.inf
    return num / den


@dataclass(frozen=True)
class McBound:
    value: float
    stderr: float
    trials: int


def dim_batch_bound_mc(
    model: LossModel,
    dataset: Dataset,
    w,
    kind: DimKind,
    trials: int,
    rng: np.random.Generator,
) -> McBound:
    """Monte Carlo batch-size bound n*E[sum ||g_i^s||^2] / E[||sum g_i^s||^2].

    Fresh per-example mechanism randomness every trial; the standard error
    of the ratio comes from the delta method on the two trial means.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    grads = model.grad_matrix(dataset, _as_param(dataset, w))
    n, d = grads.shape
    num_terms = np.empty(trials)
    den_terms = np.empty(trials)
    chunk = max(1, min(trials, int(4_000_000 / max(n * d, 1))))
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        noise = draw_dim_noise(kind, (m, n, d), rng)
        surro = apply_dim(kind, grads[None, :, :], noise)
        num_terms[done : done + m] = np.einsum("tij,tij->t", surro, surro)
        totals = surro.sum(axis=1)
        den_terms[done : done + m] = np.einsum("tj,tj->t", totals, totals)
        done += m
    a, c = float(num_terms.mean()), float(den_terms.mean())
    if c <= 0.0:
        raise ValueError("zero denominator estimate")
    value = n * a / c
    if trials == 1:
        return McBound(value=value, stderr=math.inf, trials=trials)
    cov = np.cov(num_terms, den_terms, ddof=1) / trials
    grad = np.array([n / c, -n * a / c**2])
    var = float(grad @ cov @ grad)
    return McBound(value=value, stderr=math.sqrt(max(var, 0.0)), trials=trials)


def run_sgd_with_dim(model, dataset, config, kind: DimKind, w0, w_star=None):
    """Mini-batch SGD with every sampled gradient passed through the
    mechanism; randomness is i.i.d. across data points and iterations."""
    return sgd_mod._run(model, dataset, config, w0, w_star=w_star, dim=kind)


def _kind_fields(kind: DimKind) -> tuple[str, float]:
    if isinstance(kind, Dropout):
        return "dropout", kind.p
    if isinstance(kind, Sgld):
        return "sgld", kind.sigma2
    return "quant", 0.0


def write_dim_sweep_csv(path, rows) -> None:
    """Emit `kind,param,bs,bs_dim_analytic,bs_dim_mc,mc_stderr` rows.

    Each input row is (kind, bs, analytic, mc: McBound).
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DIM_CSV_HEADER + "\n")
        for kind, bs, analytic, mc in rows:
            name, param = _kind_fields(kind)
            fields = [fmt_num(v) for v in (param, bs, analytic, mc.value, mc.stderr)]
            fh.write(",".join([name] + fields) + "\n")
