"""Pure-Python versions of the forest hot loops (fallback for ``_kernels``).

Both implementations must return identical results; see tests/test_kernels.py.
"""

from __future__ import annotations

import math

import numpy as np

# compiled kernel compares with 128-bit products; keep the same domain here
MAX_TOTAL_WEIGHT = 2_000_000


def midpoint(a: float, b: float) -> float:
    m = (a + b) / 2.0
    if math.isinf(m):
        m = a / 2.0 + b / 2.0
    if m >= b:
        m = a
    return m


def scan_feature(xs, ys, ws, counts) -> tuple[float, int, int] | None:
    """Best cut of one feature's rows, pre-sorted by value.

    Returns ``(threshold, num, den)`` maximizing ``num/den = S_L/n_L + S_R/n_R``
    (S = sum of squared weighted class counts) over cuts between distinct
    consecutive values, first cut winning ties; None if all values are equal.
    """
    xs = xs.tolist() if isinstance(xs, np.ndarray) else list(xs)
    ys = ys.tolist() if isinstance(ys, np.ndarray) else list(ys)
    ws = ws.tolist() if isinstance(ws, np.ndarray) else list(ws)
    t0, t1, t2 = (int(c) for c in counts)
    n = t0 + t1 + t2
    left = [0, 0, 0]
    nl = 0
    best_num = best_den = 0
    best_i = -1
    for i in range(len(xs) - 1):
        wgt = ws[i]
        left[ys[i]] += wgt
        nl += wgt
        if xs[i + 1] == xs[i]:
            continue
        l0, l1, l2 = left
        nr = n - nl
        r0, r1, r2 = t0 - l0, t1 - l1, t2 - l2
        num = (l0 * l0 + l1 * l1 + l2 * l2) * nr + (r0 * r0 + r1 * r1 + r2 * r2) * nl
        den = nl * nr
        if best_i < 0 or num * best_den > best_num * den:
            best_num, best_den, best_i = num, den, i
    if best_i < 0:
        return None
    return midpoint(xs[best_i], xs[best_i + 1]), best_num, best_den


class Forest:
    """Flat node arrays of a whole model, converted to lists once for repeated queries."""

    def __init__(self, feature, threshold, left, right, is_leaf, proba, roots) -> None:
        self.feature = feature.tolist()
        self.threshold = threshold.tolist()
        self.left = left.tolist()
        self.right = right.tolist()
        self.is_leaf = is_leaf.tolist()
        self.proba_ = proba.tolist()
        self.roots = roots.tolist()

    def proba(self, x) -> list[float]:
        """Sum of the leaf class-probability vectors reached by ``x`` in every tree."""
        feature, threshold, left, right, is_leaf = self.feature, self.threshold, self.left, self.right, self.is_leaf
        s0 = s1 = s2 = 0.0
        for node in self.roots:
            while not is_leaf[node]:
                node = left[node] if x[feature[node]] <= threshold[node] else right[node]
            p = self.proba_[node]
            s0 += p[0]
            s1 += p[1]
            s2 += p[2]
        return [s0, s1, s2]

    def proba_batch(self, X) -> np.ndarray:
        rows = np.asarray(X, dtype=np.float64).tolist()
        return np.array([self.proba(r) for r in rows], dtype=np.float64).reshape(-1, 3)
