import math
from typing import Sequence

import numpy as np

Z95 = 1.96


def ci95(values: Sequence[float]) -> float:
    """Half-width 1.96 * sample std / sqrt(N); 0 for fewer than two values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(Z95 * v.std(ddof=1) / math.sqrt(v.size))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    a = np.asarray(values, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    ranks = np.empty(a.size, dtype=np.float64)
    start = 0
    while start < a.size:
        stop = start + 1
        while stop < a.size and sorted_a[stop] == sorted_a[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman's rho as the Pearson correlation of average ranks."""
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ValueError("spearman needs at least two observations")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if denom == 0.0:
        raise ValueError("zero rank variance: spearman correlation is undefined")
    return float(np.clip((ra @ rb) / denom, -1.0, 1.0))
