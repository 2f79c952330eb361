"""Quantitative instruments: Fréchet and kernel distances, cosine similarity,
patch/slide Pearson correlation, 1-D Wasserstein distance, rank AUC, bootstrap
confidence intervals, and permutation tests.

Everything here is pure and deterministic given its seed. Constant-input
Pearson returns an explicit undefined marker instead of a silent zero so
marker averages cannot be corrupted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EIG_CLIP_TOL = -1e-8


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise MetricError("covariance must be symmetric within 1e-10")
        eigs = np.linalg.eigvalsh(self.cov)
        if eigs.min() < EIG_CLIP_TOL:
            raise MetricError(f"covariance has eigenvalue {eigs.min()} below tolerance")

    @staticmethod
    def from_features(feats: np.ndarray) -> "GaussianStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise MetricError("need a [n>=2, d] feature matrix")
        mean = feats.mean(axis=0)
        x = feats - mean
        cov = x.T @ x / (feats.shape[0] - 1)
        return GaussianStats(mean, (cov + cov.T) / 2.0, feats.shape[0])


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    eigs, vecs = np.linalg.eigh(cov)
    eigs = np.clip(eigs, 0.0, None)
    return (vecs * np.sqrt(eigs)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2(Sa Sb)^(1/2)).

    The cross square root is computed via the symmetric eigendecomposition
    of Sa^(1/2) Sb Sa^(1/2), which is similar to Sa Sb but Hermitian.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError("feature dimensions differ")
    delta = a.mean - b.mean
    s1h = _psd_sqrt(a.cov)
    inner = s1h @ b.cov @ s1h
    eigs = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if eigs.min() < EIG_CLIP_TOL * max(1.0, np.abs(eigs).max()):
        raise MetricError("cross term is not PSD within tolerance")
    trace_sqrt = np.sqrt(np.clip(eigs, 0.0, None)).sum()
    return float(delta @ delta + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)


def kid(feats_a: np.ndarray, feats_b: np.ndarray, degree: int = 3) -> float:
    """Unbiased squared MMD with the polynomial kernel (x.y/d + 1)^degree.

    Diagonals are excluded from the within-set sums, and (for matched sample
    counts) from the cross term too, so a set compared with itself scores
    exactly zero. The estimator may be slightly negative near zero.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    m, n = a.shape[0], b.shape[0]
    if m < 2 or n < 2:
        raise MetricError("KID needs at least 2 samples per side")
    d = a.shape[1]

    def k(x, y):
        return (x @ y.T / d + 1.0) ** degree

    kaa = k(a, a)
    kbb = k(b, b)
    kab = k(a, b)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    if m == n:
        cross = (kab.sum() - np.trace(kab)) / (m * (m - 1))
    else:
        cross = kab.mean()
    return float(term_a + term_b - 2.0 * cross)


def cosine_similarity_mean(a_rows: np.ndarray, b_rows: np.ndarray) -> float:
    a = np.asarray(a_rows, dtype=np.float64)
    b = np.asarray(b_rows, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError("paired rows must have identical shape")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise MetricError("zero-norm row in cosine similarity")
    return float(np.mean((a * b).sum(axis=1) / (na * nb)))


@dataclass(frozen=True)
class PearsonUndefined:
    """Explicit not-a-value for degenerate correlations (never a silent 0)."""

    reason: str


def pearson(x: np.ndarray, y: np.ndarray):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise MetricError("pearson inputs must have equal length")
    if x.size < 2:
        raise MetricError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0:
        return PearsonUndefined("first input is constant")
    if sy == 0.0:
        return PearsonUndefined("second input is constant")
    return float((xc * yc).sum() / (sx * sy))


def patch_pcc(pred_patches: np.ndarray, true_patches: np.ndarray):
    """Mean over patches of pixel-wise Pearson; degenerate patches are skipped
    (undefined if every patch is degenerate)."""
    if pred_patches.shape != true_patches.shape:
        raise MetricError("patch stacks must have identical shape")
    vals = []
    for p, t in zip(pred_patches, true_patches):
        r = pearson(p.ravel(), t.ravel())
        if not isinstance(r, PearsonUndefined):
            vals.append(r)
    if not vals:
        return PearsonUndefined("all patches degenerate")
    return float(np.mean(vals))


def slide_pcc(pred_patches: np.ndarray, true_patches: np.ndarray, slide_index):
    """Pearson across slides of per-slide aggregated patch-mean intensities."""
    slide_index = np.asarray(slide_index)
    if len(slide_index) != len(pred_patches):
        raise MetricError("slide index length mismatch")
    slides = sorted(set(slide_index.tolist()))
    pred_means = [pred_patches[slide_index == s].mean() for s in slides]
    true_means = [true_patches[slide_index == s].mean() for s in slides]
    return pearson(np.array(pred_means), np.array(true_means))


def wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 1-D Wasserstein distance.

    Equal sample counts reduce to the mean absolute difference of sorted
    samples; otherwise the piecewise-constant CDF difference is integrated.
    """
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise MetricError("wasserstein1 needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    grid = np.sort(np.concatenate([a, b]))
    deltas = np.diff(grid)
    ca = np.searchsorted(a, grid[:-1], side="right") / a.size
    cb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(ca - cb) * deltas))


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    s = scores[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auc(pos_scores: np.ndarray, neg_scores: np.ndarray) -> float:
    """Rank-based Mann-Whitney AUC; ties credited 0.5."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise MetricError("auc needs nonempty score sets")
    ranks = _average_ranks(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    ci_low: float
    ci_high: float
    iterations: int
    seed: int

    def row(self) -> str:
        return f"{self.name}\t{self.value:.6g}\t{self.ci_low:.6g}\t{self.ci_high:.6g}"


def bootstrap(metric_fn, data, iterations: int = 25, seed: int = 0,
              name: str = "metric") -> MetricReport:
    """Resample-with-replacement CI; the point value comes from the full data.

    `data` is an array resampled along axis 0, or a tuple of arrays resampled
    with a shared index. The 2.5/97.5 empirical percentiles are rounded
    outward to the nearest order statistic, which keeps the interval honest
    at small iteration counts where the tail quantiles are unresolved.
    """
    if iterations < 1:
        raise MetricError("iterations must be >= 1")
    rng = np.random.default_rng(seed)
    is_tuple = isinstance(data, tuple)
    n = data[0].shape[0] if is_tuple else data.shape[0]
    point = float(metric_fn(data))
    values = []
    for _ in range(iterations):
        idx = rng.integers(0, n, size=n)
        sample = tuple(d[idx] for d in data) if is_tuple else data[idx]
        values.append(float(metric_fn(sample)))
    lo = np.percentile(values, 2.5, method="lower")
    hi = np.percentile(values, 97.5, method="higher")
    return MetricReport(name=name, value=point, ci_low=float(lo), ci_high=float(hi),
                        iterations=iterations, seed=seed)


def permutation_test_means(a: np.ndarray, b: np.ndarray,
                           iterations: int = 10_000, seed: int = 0) -> float:
    """Two-sided permutation p-value for a difference in group means."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    observed = abs(a.mean() - b.mean())
    pooled = np.concatenate([a, b])
    hits = 0
    for _ in range(iterations):
        perm = rng.permutation(pooled)
        stat = abs(perm[: a.size].mean() - perm[a.size:].mean())
        if stat >= observed:
            hits += 1
    return (hits + 1) / (iterations + 1)


def paired_permutation_test(a: np.ndarray, b: np.ndarray,
                            iterations: int = 10_000, seed: int = 0) -> float:
    """Two-sided sign-flip permutation test on paired differences."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise MetricError("paired test needs equal-length arrays")
    rng = np.random.default_rng(seed)
    diff = a - b
    observed = abs(diff.mean())
    hits = 0
    for _ in range(iterations):
        signs = rng.choice([-1.0, 1.0], size=diff.size)
        if abs((diff * signs).mean()) >= observed:
            hits += 1
    return (hits + 1) / (iterations + 1)
