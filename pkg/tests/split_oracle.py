"""Exhaustive reference for the best Gini split, in exact rational arithmetic."""

from fractions import Fraction


def gini(counts):
    n = sum(counts)
    return 1 - sum(Fraction(c, n) ** 2 for c in counts)


def brute_force_split(X, y, w, features):
    """Return (feature, threshold, decrease) or None, enumerating every (feature, midpoint)."""
    n_rows = len(y)
    total = sum(w)
    parent = [0, 0, 0]
    for label, weight in zip(y, w):
        parent[label] += weight
    parent_imp = gini(parent)
    best = None
    for f in sorted(features):
        values = sorted(set(row[f] for row in X))
        for a, b in zip(values, values[1:]):
            thr = (a + b) / 2
            left, right = [0, 0, 0], [0, 0, 0]
            for i in range(n_rows):
                (left if X[i][f] <= thr else right)[y[i]] += w[i]
            nl, nr = sum(left), sum(right)
            imp = Fraction(nl, total) * gini(left) + Fraction(nr, total) * gini(right)
            if best is None or imp < best[2]:
                best = (f, thr, imp)
    if best is None or not best[2] < parent_imp:
        return None
    return best[0], best[1], parent_imp - best[2]
