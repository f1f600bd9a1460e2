"""Shared plumbing: CSV formatting, seed derivation, worker pool."""

from __future__ import annotations

import hashlib
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

THREADS_ENV = "GRADDIV_THREADS"


def fmt_num(x) -> str:
    """Round-trip-exact decimal text for one CSV field."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        raise ValueError("NaN is not representable in output files")
    return repr(x)


def write_csv(path, header: str, rows: Iterable[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(fmt_num(v) for v in row) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def derive_rng(seed, stream: int = 0) -> np.random.Generator:
    """Independent generator for stream `stream` of master seed `seed`."""
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(stream + 1)[stream])


def seed_list(master_seed: int, count: int) -> list[int]:
    """Deterministic list of independent run seeds from one master seed."""
    return [int(s) for s in np.random.SeedSequence(master_seed).generate_state(count)]


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip()
    try:
        w = int(raw)
    except ValueError:
        w = 0
    if w <= 0:
        w = os.cpu_count() or 1
    return w


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Map preserving item order; worker count capped by GRADDIV_THREADS."""
    workers = min(worker_count(), max(len(items), 1))
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
