"""Embedding-space diagnostics.

Hypersphere coverage histograms (how evenly the embeddings fill randomly
sampled directions), individual vs. cumulative negative-contribution
curves as a function of anchor similarity, the positive-pair amplification
factor, and PCA projections.  Each diagnostic has a CSV renderer; plotting
is left to external tooling.
"""

import io
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CoverageHistogram",
    "ContributionCurves",
    "coverage_histogram",
    "uniformity_stat",
    "contribution_curves",
    "aggregate_contribution_curves",
    "positive_factor",
    "pca_project",
    "coverage_csv",
    "curves_csv",
    "pca_csv",
]

N_SIM_BINS = 100  # similarity axis split into bins of width 0.02 over [-1, 1]


@dataclass(frozen=True)
class CoverageHistogram:
    """Counts of embeddings assigned to their closest direction bin."""

    bin_directions: np.ndarray
    counts: np.ndarray
    seed: int


def coverage_histogram(embeddings: np.ndarray, B: int = 500, seed: int = 0) -> CoverageHistogram:
    """Assign every embedding to the direction bin of maximum cosine
    similarity; bins are seeded normalized Gaussian draws, ties go to the
    lowest bin index."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError("need a non-empty 2-D embedding matrix")
    if B < 1:
        raise ValueError(f"need at least one bin, got B={B}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 4]))
    dirs = rng.standard_normal((B, embeddings.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assign = np.argmax(embeddings @ dirs.T, axis=1)
    counts = np.bincount(assign, minlength=B)
    return CoverageHistogram(bin_directions=dirs, counts=counts, seed=int(seed))


def uniformity_stat(h: CoverageHistogram) -> float:
    """Coefficient of variation of the bin counts; 0 for perfectly even
    coverage, sqrt(B - 1) for a single-bin point mass."""
    counts = np.asarray(h.counts, dtype=np.float64)
    return float(counts.std() / counts.mean())


@dataclass(frozen=True)
class ContributionCurves:
    """Loss contributions of negatives grouped by similarity to the anchor.

    ``individual`` is the weight exp((s - 1) / tau) at each bin center,
    ``histogram`` the negative count per bin, and ``cumulative`` the summed
    weight per bin; the two weight curves are normalized to max 1.
    """

    bin_edges: np.ndarray
    individual: np.ndarray
    cumulative: np.ndarray
    histogram: np.ndarray


def _sim_bin_edges() -> np.ndarray:
    return np.linspace(-1.0, 1.0, N_SIM_BINS + 1)


def _bin_of(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # right-open bins, except the last bin which includes s = 1
    return np.clip(np.searchsorted(edges, values, side="right") - 1, 0, N_SIM_BINS - 1)


def contribution_curves(similarities: np.ndarray, tau: float) -> ContributionCurves:
    """Contribution curves for one anchor's negatives.

    Weights are computed with the maximum similarity shifted out of the
    exponent, which cancels under max-normalization and avoids underflow at
    small temperatures.
    """
    s = np.asarray(similarities, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("need at least one negative similarity")
    if s.min() < -1.0 or s.max() > 1.0:
        raise ValueError("similarities must lie in [-1, 1]")
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")

    edges = _sim_bin_edges()
    centers = 0.5 * (edges[:-1] + edges[1:])
    individual = np.exp((centers - centers.max()) / tau)
    individual /= individual.max()

    idx = _bin_of(s, edges)
    hist = np.bincount(idx, minlength=N_SIM_BINS)
    weights = np.exp((s - s.max()) / tau)
    cumulative = np.bincount(idx, weights=weights, minlength=N_SIM_BINS)
    cumulative /= cumulative.max()
    return ContributionCurves(
        bin_edges=edges, individual=individual, cumulative=cumulative, histogram=hist
    )


def aggregate_contribution_curves(S: np.ndarray, tau: float, mode: str = "pooled") -> ContributionCurves:
    """Curves aggregated over all anchors of a square similarity matrix.

    ``pooled`` (default) pools every off-diagonal similarity into one curve
    set; ``mean`` averages the per-anchor normalized curves and renormalizes.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 2:
        raise ValueError("need a square similarity matrix with N >= 2")
    n = S.shape[0]
    off = ~np.eye(n, dtype=bool)
    if mode == "pooled":
        return contribution_curves(S[off], tau)
    if mode != "mean":
        raise ValueError(f"mode must be 'pooled' or 'mean', got {mode!r}")
    per = [contribution_curves(S[i][off[i]], tau) for i in range(n)]
    hist = np.sum([c.histogram for c in per], axis=0)
    cumulative = np.mean([c.cumulative for c in per], axis=0)
    cumulative /= cumulative.max()
    return ContributionCurves(
        bin_edges=per[0].bin_edges,
        individual=per[0].individual,
        cumulative=cumulative,
        histogram=hist,
    )


def positive_factor(S: np.ndarray, tau) -> np.ndarray:
    """Per-anchor amplification of the whole negative sum by the positive
    pair: exp((1 - s_ii) / tau_i)."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[1] < S.shape[0]:
        raise ValueError(f"need a matrix with a key column per anchor, got {S.shape}")
    n = S.shape[0]
    taus = np.asarray(tau, dtype=np.float64)
    if taus.ndim == 0:
        taus = np.full(n, float(taus))
    if taus.shape != (n,) or np.any(taus <= 0):
        raise ValueError("tau must be a positive scalar or length-N vector")
    diag = S[np.arange(n), np.arange(n)]
    return np.exp((1.0 - diag) / taus)


def pca_project(embeddings: np.ndarray, components: int = 3, return_basis: bool = False):
    """Leading principal components of mean-centered data.

    Returns (coordinates, explained_variance_ratios).  Components are
    ordered by descending eigenvalue of the covariance matrix, with each
    direction's sign fixed so its largest-magnitude loading is positive.
    With ``return_basis`` the full orthonormal eigenvector matrix is
    appended to the result (columns in component order).
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("embeddings must be 2-D")
    n, d = X.shape
    if n <= components:
        raise ValueError(f"need more than {components} samples, got {n}")
    if components < 1 or components > d:
        raise ValueError(f"components must be in [1, {d}], got {components}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.maximum(eigvals[order], 0.0)
    eigvecs = eigvecs[:, order]
    for j in range(d):
        i = np.argmax(np.abs(eigvecs[:, j]))
        if eigvecs[i, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    total = eigvals.sum()
    ratios = eigvals[:components] / total if total > 0 else np.zeros(components)
    coords = centered @ eigvecs[:, :components]
    if return_basis:
        return coords, ratios, eigvecs
    return coords, ratios


def coverage_csv(h: CoverageHistogram) -> str:
    buf = io.StringIO()
    buf.write("bin,count\n")
    for i, c in enumerate(h.counts):
        buf.write(f"{i},{int(c)}\n")
    return buf.getvalue()


def curves_csv(c: ContributionCurves) -> str:
    buf = io.StringIO()
    buf.write("bin_center,histogram,individual,cumulative\n")
    centers = 0.5 * (c.bin_edges[:-1] + c.bin_edges[1:])
    for mid, h, ind, cum in zip(centers, c.histogram, c.individual, c.cumulative):
        buf.write(f"{mid!r},{int(h)},{ind!r},{cum!r}\n")
    return buf.getvalue()


def pca_csv(coords: np.ndarray, labels) -> str:
    labels = np.asarray(labels)
    buf = io.StringIO()
    buf.write("index,label,pc1,pc2,pc3\n")
    for i, (row, lab) in enumerate(zip(coords, labels)):
        buf.write(f"{i},{int(lab)},{row[0]!r},{row[1]!r},{row[2]!r}\n")
    return buf.getvalue()
