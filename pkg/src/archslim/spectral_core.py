"""Per-layer variance analysis of convolution filters.

A conv layer's weights (filters, in_channels, k, k) are flattened to a
matrix with one row per filter, each row centered, and the filter-by-filter
sample covariance eigendecomposed. The resulting descending eigenvalues give
a cumulative contribution curve; the kept-filter count for a layer is the
smallest prefix of eigen-directions whose cumulative share of total variance
reaches the requested threshold.

All analysis runs in float64 regardless of storage dtype. Every function is
pure and deterministic, so layers may be analyzed concurrently without
affecting results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DeltaOutOfRange,
    NoConvergence,
    NotPSD,
    NotSymmetric,
    WrongRank,
    ZeroSamples,
    ZeroVariance,
)


@dataclass(frozen=True)
class FlatFilterMatrix:
    """Filters flattened to rows: (num_filters, in_channels * k * k), float64."""

    values: np.ndarray
    layer_name: str = ""

    def __post_init__(self):
        v = self.values
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise WrongRank(f"flat filter matrix must be 2-D and non-empty, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError(f"non-finite entries in flat matrix {self.layer_name!r}")

    @property
    def num_filters(self) -> int:
        return self.values.shape[0]

    @property
    def params_per_filter(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LayerSpectrum:
    """Eigen-spectrum of one layer plus the derived kept-filter decision.

    eigenvalues  descending, >= 0, one per filter
    alpha        cumulative contribution curve, non-decreasing, ends at 1
    selected     smallest n with alpha[n-1] >= delta
    info_measure trace of the filter covariance divided by k**2
    """

    layer_name: str
    eigenvalues: np.ndarray
    alpha: np.ndarray
    selected: int
    info_measure: float
    delta: float


def flatten_filters(tensor: np.ndarray, layer_name: str = "") -> FlatFilterMatrix:
    """Squeeze rank-4 conv weights to one row per filter, row-major."""
    tensor = np.asarray(tensor)
    if tensor.ndim != 4:
        raise WrongRank(
            f"expected rank-4 conv weights, got rank {tensor.ndim}"
            + (f" in {layer_name!r}" if layer_name else "")
        )
    flat = tensor.reshape(tensor.shape[0], -1).astype(np.float64)
    return FlatFilterMatrix(values=flat, layer_name=layer_name)


def center_rows(m: FlatFilterMatrix) -> FlatFilterMatrix:
    """Subtract each row's mean so every filter variable has zero mean."""
    centered = m.values - m.values.mean(axis=1, keepdims=True)
    return FlatFilterMatrix(values=centered, layer_name=m.layer_name)


def standardize_rows(m: FlatFilterMatrix) -> FlatFilterMatrix:
    """Center rows and divide by their sample standard deviation.

    Rows with zero variance are left at zero rather than dividing by zero;
    such filters contribute nothing to the spectrum either way.
    """
    centered = m.values - m.values.mean(axis=1, keepdims=True)
    if m.params_per_filter < 2:
        raise ZeroSamples(
            f"need at least 2 parameters per filter to standardize, got {m.params_per_filter}"
        )
    std = centered.std(axis=1, ddof=1, keepdims=True)
    scaled = np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)
    return FlatFilterMatrix(values=scaled, layer_name=m.layer_name)


def covariance(m: FlatFilterMatrix) -> np.ndarray:
    """Sample covariance across filters: M @ M.T / (D - 1) for row-centered M."""
    d = m.params_per_filter
    if d < 2:
        raise ZeroSamples(f"need at least 2 parameters per filter, got {d}")
    sigma = m.values @ m.values.T / (d - 1)
    # matmul round-off can leave asymmetry of a few ulp; make symmetry exact
    return (sigma + sigma.T) / 2.0


def eigenvalues_descending(sigma: np.ndarray) -> np.ndarray:
    """Eigenvalues of a symmetric PSD matrix, non-increasing, clamped at zero.

    Values with magnitude inside the round-off band 1e-9 * trace are treated
    as exact zeros on both sides: without this, a rank-deficient layer picks
    up ulp-sized junk dimensions at delta = 1. Anything below the band means
    the matrix is not a covariance.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {sigma.shape}")
    scale = np.abs(sigma).max()
    if scale > 0 and np.abs(sigma - sigma.T).max() > 1e-9 * scale:
        raise NotSymmetric("matrix is not symmetric within 1e-9 relative tolerance")
    try:
        eigs = np.linalg.eigvalsh(sigma)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(f"eigen solver failed: {exc}") from exc
    eigs = eigs[::-1].copy()
    trace = float(np.trace(sigma))
    band = 1e-9 * max(trace, 0.0)
    if eigs[-1] < -band:
        raise NotPSD(
            f"eigenvalue {eigs[-1]:.3e} below round-off band {-band:.3e}; "
            "matrix is not positive semidefinite"
        )
    eigs[eigs < band] = 0.0
    return eigs


def cumulative_contribution(eigs: np.ndarray) -> np.ndarray:
    """Fraction of total eigenvalue mass carried by each top-n prefix."""
    eigs = np.asarray(eigs, dtype=np.float64)
    if eigs.size == 0:
        raise ValueError("empty eigenvalue list")
    if np.any(eigs < 0) or np.any(np.diff(eigs) > 0):
        raise ValueError("eigenvalues must be non-negative and non-increasing")
    cum = np.cumsum(eigs)
    total = cum[-1]
    if total <= 0:
        raise ZeroVariance("all eigenvalues are zero")
    return cum / total


def select_count(alpha: np.ndarray, delta: float) -> int:
    """Smallest n whose cumulative contribution alpha[n-1] reaches delta."""
    if not 0.0 <= delta <= 1.0:
        raise DeltaOutOfRange(f"delta must be in [0, 1], got {delta}")
    alpha = np.asarray(alpha, dtype=np.float64)
    hits = np.nonzero(alpha >= delta)[0]
    if hits.size == 0:
        # alpha ends at 1 up to 1e-12; only reachable when delta == 1 and the
        # curve tops out a round-off short of it, so everything is kept
        return int(alpha.size)
    return int(hits[0]) + 1


def information_measure(sigma: np.ndarray, k: int) -> float:
    """Total filter variance normalized by kernel area: |trace| / k**2."""
    if k < 1:
        raise ValueError(f"kernel size must be >= 1, got {k}")
    return float(abs(np.trace(np.asarray(sigma, dtype=np.float64)))) / (k * k)


def analyze_layer(
    tensor: np.ndarray,
    delta: float,
    layer_name: str = "",
    zscore: bool = False,
) -> LayerSpectrum:
    """Full spectral pass over one conv layer: flatten, center, eigendecompose.

    Raises ZeroVariance / ZeroSamples / NotPSD with the layer name attached;
    callers decide how to handle degenerate layers.
    """
    if not 0.0 <= delta <= 1.0:
        raise DeltaOutOfRange(f"delta must be in [0, 1], got {delta}")
    flat = flatten_filters(tensor, layer_name)
    k = int(np.asarray(tensor).shape[-1])
    try:
        rows = standardize_rows(flat) if zscore else center_rows(flat)
        sigma = covariance(rows)
        eigs = eigenvalues_descending(sigma)
        alpha = cumulative_contribution(eigs)
    except (ZeroSamples, ZeroVariance, NotPSD) as exc:
        raise type(exc)(f"layer {layer_name!r}: {exc}") from exc
    selected = select_count(alpha, delta)
    return LayerSpectrum(
        layer_name=layer_name,
        eigenvalues=eigs,
        alpha=alpha,
        selected=selected,
        info_measure=information_measure(sigma, k),
        delta=float(delta),
    )
