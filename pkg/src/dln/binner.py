"""Decision-tree split points for initializing input-binarization thresholds.

Each continuous feature gets its own univariate classification tree, grown
greedily (best-first on Gini decrease) until a leaf budget is exhausted or no
split improves purity.  Split candidates are midpoints between consecutive
distinct sorted feature values; gain ties break toward the smaller threshold.

Gain comparisons are settled in exact rational arithmetic: float scores
prefilter the candidates, then anything within a small relative window of the
float maximum is re-ranked with ``fractions.Fraction`` over the integer class
counts.  This makes tie-breaking a property of the data, not of summation
order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

# Relative window around the float-score maximum inside which candidates are
# re-ranked exactly.  Float error is ~1e-15 relative, so 1e-9 is generous.
_TIE_WINDOW = 1e-9


@dataclass
class _Leaf:
    lo: int  # index range [lo, hi) into the sorted feature
    hi: int
    gain: Fraction  # best achievable impurity decrease, exact
    threshold: float  # split location achieving it
    split: int  # sorted-index position of the split (left gets [lo, split))


def _sum_sq(counts: np.ndarray) -> int:
    return int(np.dot(counts, counts))


def _purity_score(counts: np.ndarray) -> Fraction:
    # n*(1 - gini) summand: sum of squared class counts over segment size.
    n = int(counts.sum())
    if n == 0:
        return Fraction(0)
    return Fraction(_sum_sq(counts), n)


def _best_split(values: np.ndarray, cum: np.ndarray, lo: int, hi: int) -> _Leaf | None:
    """Best candidate split of sorted segment [lo, hi), or None if none helps."""
    seg = values[lo:hi]
    boundaries = np.flatnonzero(seg[1:] != seg[:-1]) + lo + 1
    if boundaries.size == 0:
        return None

    left = cum[boundaries] - cum[lo]  # [n_cand, C]
    right = cum[hi] - cum[boundaries]
    n_left = left.sum(axis=1).astype(float)
    n_right = right.sum(axis=1).astype(float)
    score = (left * left).sum(axis=1) / n_left + (right * right).sum(axis=1) / n_right

    best = score.max()
    window = np.flatnonzero(score >= best - _TIE_WINDOW * abs(best))
    # Exact re-ranking of near-ties; prefer higher score, then smaller threshold.
    best_exact = None
    best_thr = None
    best_pos = None
    for i in window:
        pos = int(boundaries[i])
        exact = Fraction(_sum_sq(left[i]), int(n_left[i])) + Fraction(
            _sum_sq(right[i]), int(n_right[i])
        )
        thr = (values[pos - 1] + values[pos]) / 2.0
        if (
            best_exact is None
            or exact > best_exact
            or (exact == best_exact and thr < best_thr)
        ):
            best_exact, best_thr, best_pos = exact, thr, pos

    parent = _purity_score(cum[hi] - cum[lo])
    gain = best_exact - parent
    if gain <= 0:
        return None
    return _Leaf(lo, hi, gain, best_thr, best_pos)


def fit_tree_bins(feature, labels, max_leaves: int) -> np.ndarray:
    """Sorted internal-node thresholds of a greedy univariate tree.

    Returns an empty array for constant features or pure labels (nothing to
    split); the caller pads with :func:`pad_edges`.
    """
    if max_leaves < 2:
        raise ValueError(f"max_leaves must be >= 2, got {max_leaves}")
    feature = np.asarray(feature, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if feature.shape != labels.shape or feature.ndim != 1:
        raise ValueError("feature and labels must be equal-length 1-D arrays")

    order = np.argsort(feature, kind="stable")
    values = feature[order]
    y = labels[order]
    n_classes = int(y.max()) + 1 if y.size else 0
    onehot = np.zeros((y.size, max(n_classes, 1)), dtype=np.int64)
    if y.size:
        onehot[np.arange(y.size), y] = 1
    cum = np.vstack([np.zeros((1, onehot.shape[1]), dtype=np.int64), np.cumsum(onehot, axis=0)])

    leaves: list[_Leaf] = []
    first = _best_split(values, cum, 0, y.size)
    if first is not None:
        leaves.append(first)
    thresholds: list[float] = []
    n_leaves = 1
    while leaves and n_leaves < max_leaves:
        # Best-first: largest exact gain, ties toward the smaller threshold,
        # then the earlier segment.
        best_i = 0
        for i in range(1, len(leaves)):
            cand, cur = leaves[i], leaves[best_i]
            if cand.gain > cur.gain or (
                cand.gain == cur.gain
                and (cand.threshold, cand.lo) < (cur.threshold, cur.lo)
            ):
                best_i = i
        leaf = leaves.pop(best_i)
        thresholds.append(leaf.threshold)
        n_leaves += 1
        for lo, hi in ((leaf.lo, leaf.split), (leaf.split, leaf.hi)):
            child = _best_split(values, cum, lo, hi)
            if child is not None:
                leaves.append(child)
    return np.asarray(sorted(thresholds), dtype=float)


def pad_edges(edges, feature, neurons_per_feature: int) -> np.ndarray:
    """Pad ``edges`` with feature quantiles until exactly ``neurons_per_feature`` remain.

    Quantiles are taken at equally spaced probabilities i/(m+1); candidates
    duplicating an existing edge are skipped.  Degenerate features fall back
    to progressively finer uniform grids in (0, 1) so the result always has
    the requested length and is strictly increasing.
    """
    edges = [float(e) for e in np.asarray(edges, dtype=float)]
    m = int(neurons_per_feature)
    if m < len(edges):
        raise ValueError(
            f"neurons_per_feature={m} smaller than existing edge count {len(edges)}"
        )
    feature = np.asarray(feature, dtype=float)

    def try_add(candidates):
        for c in candidates:
            if len(edges) >= m:
                return
            c = float(c)
            if all(abs(c - e) > 1e-12 for e in edges):
                edges.append(c)

    if feature.size:
        probs = np.arange(1, m + 1) / (m + 1)
        try_add(np.quantile(feature, probs))
    denom = m + 1
    while len(edges) < m:
        denom *= 2
        try_add(np.arange(1, denom) / denom)
    return np.asarray(sorted(edges), dtype=float)
