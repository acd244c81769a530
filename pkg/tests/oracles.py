"""Independent oracles shared by the test suite.

Everything here is deliberately written the slow, obvious way (explicit
loops, finite differences, exhaustive pair counting) so it stays independent
of the implementation paths it checks.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_oracle(a, b):
    """Plain triple-loop matrix product."""
    a = [list(map(float, row)) for row in a]
    b = [list(map(float, row)) for row in b]
    n, k = len(a), len(a[0])
    m = len(b[0])
    assert len(b) == k
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def numeric_gradient(fn, x, h=1e-4):
    """Central finite differences of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(x)
        flat[i] = orig - h
        f_minus = fn(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_gradient_error(analytic, numeric):
    """Max absolute deviation normalized by the numeric gradient's scale."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric))) / scale


def pairwise_auc_oracle(scores, labels):
    """AUC by exhaustive comparison of every positive/negative pair."""
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                total += 1.0
            elif sp == sn:
                total += 0.5
    return total / (len(pos) * len(neg))


def max_log_density_ratio(sample_a, sample_b, n_bins=100, min_count=500):
    """Histogram estimate of the largest absolute log density ratio.

    Bins are equal-count quantile bins of the pooled sample; only bins where
    both samples have at least ``min_count`` observations enter the maximum
    (sparser bins carry too much estimator noise to be meaningful).
    Returns ``(max_ratio, n_qualifying_bins)``.
    """
    sample_a = np.asarray(sample_a, dtype=np.float64)
    sample_b = np.asarray(sample_b, dtype=np.float64)
    pooled = np.concatenate([sample_a, sample_b])
    quantiles = np.linspace(0.0, 1.0, n_bins + 1)
    edges = np.quantile(pooled, quantiles)
    edges = np.unique(edges)
    edges[0] = -np.inf
    edges[-1] = np.inf
    count_a, _ = np.histogram(sample_a, bins=edges)
    count_b, _ = np.histogram(sample_b, bins=edges)
    # identical totals make raw count ratios density ratios
    assert sample_a.size == sample_b.size
    qualifying = (count_a >= min_count) & (count_b >= min_count)
    if not np.any(qualifying):
        return 0.0, 0
    ratios = np.abs(np.log(count_a[qualifying] / count_b[qualifying]))
    return float(ratios.max()), int(qualifying.sum())


def eer_threshold_oracle(scores, labels):
    """EER from the interpolated ROC curve, built point by point.

    Walks the descending-score threshold sweep, reduces to one operating
    point per false-accept rate (best miss rate), and intersects the
    piecewise-linear miss-rate curve with the diagonal.
    """
    pairs = sorted(zip(scores, labels), key=lambda p: -p[0])
    n_pos = sum(1 for _, y in pairs if y == 1)
    n_neg = len(pairs) - n_pos
    points = {0.0: 1.0}
    tp = fp = 0
    i = 0
    while i < len(pairs):
        j = i
        while j + 1 < len(pairs) and pairs[j + 1][0] == pairs[i][0]:
            j += 1
        for k in range(i, j + 1):
            if pairs[k][1] == 1:
                tp += 1
            else:
                fp += 1
        far = fp / n_neg
        miss = 1.0 - tp / n_pos
        points[far] = min(points.get(far, 1.0), miss)
        i = j + 1
    points[1.0] = min(points.get(1.0, 0.0), 0.0)
    xs = sorted(points)
    for a, b in zip(xs, xs[1:]):
        d1 = points[a] - a
        d2 = points[b] - b
        if d1 == 0.0:
            return a
        if d1 > 0.0 >= d2:
            u = d1 / (d1 - d2)
            return a + u * (b - a)
    return xs[-1]


def laplace_cdf(x, scale):
    if x < 0:
        return 0.5 * math.exp(x / scale)
    return 1.0 - 0.5 * math.exp(-x / scale)
