"""Kernel two-sample distance used as the alignment loss between feature sets.

Multi-RBF maximum mean discrepancy, biased V-statistic form. The biased
estimator is nonnegative by construction, which keeps the adaptation loss
well behaved near zero.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class KernelSpec:
    """Mixture of RBF kernels: sum_j w_j * exp(-dist2 / (2 * sigma_j^2))."""

    bandwidths: tuple[float, ...]
    weights: tuple[float, ...]

    def __post_init__(self):
        if len(self.bandwidths) == 0:
            raise ConfigError("kernel spec needs at least one bandwidth")
        if len(self.weights) != len(self.bandwidths):
            raise ConfigError("one weight per bandwidth required")
        if any(s <= 0 for s in self.bandwidths):
            raise ConfigError(f"bandwidths must be positive, got {self.bandwidths}")
        if any(w < 0 for w in self.weights):
            raise ConfigError(f"weights must be nonnegative, got {self.weights}")
        total = float(sum(self.weights))
        if total <= 0:
            raise ConfigError("weights must not all be zero")
        if abs(total - 1.0) > 1e-9:
            object.__setattr__(self, "weights", tuple(w / total for w in self.weights))

    @classmethod
    def single(cls, sigma: float) -> "KernelSpec":
        return cls((float(sigma),), (1.0,))

    @classmethod
    def around(cls, sigma: float) -> "KernelSpec":
        """Default three-kernel ladder {sigma/2, sigma, 2*sigma}, equal weights."""
        return cls((sigma / 2.0, sigma, 2.0 * sigma), (1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0))


def kernel_matrix(x: Tensor, y: Tensor, spec: KernelSpec) -> Tensor:
    """Entrywise mixture-RBF kernel between two sample sets [m x e], [k x e]."""
    if x.ndim != 2 or y.ndim != 2:
        raise ShapeError(f"kernel_matrix needs 2D sample sets, got {x.shape}, {y.shape}")
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"embedding dims disagree: {x.shape[1]} vs {y.shape[1]}")
    dist2 = ad.sq_euclidean_pairwise(x, y)
    out = None
    for sigma, w in zip(spec.bandwidths, spec.weights):
        term = ad.mul(ad.exp(ad.mul(dist2, Tensor(-0.5 / (sigma * sigma)))), Tensor(w))
        out = term if out is None else ad.add(out, term)
    return out


def mmd2(x: Tensor, y: Tensor, spec: KernelSpec) -> Tensor:
    """Biased squared MMD: mean K(X,X) + mean K(Y,Y) - 2 mean K(X,Y)."""
    if x.shape[0] < 1 or y.shape[0] < 1:
        raise ShapeError(f"mmd2 needs nonempty sample sets, got {x.shape[0]} and {y.shape[0]} rows")
    kxx = kernel_matrix(x, x, spec).mean()
    kyy = kernel_matrix(y, y, spec).mean()
    kxy = kernel_matrix(x, y, spec).mean()
    return ad.sub(ad.add(kxx, kyy), ad.mul(kxy, Tensor(2.0)))


def median_heuristic(x: np.ndarray | Tensor, y: np.ndarray | Tensor) -> float:
    """Median pairwise Euclidean distance over the pooled sample, zeros excluded."""
    xa = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    ya = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    pooled = np.concatenate([xa, ya], axis=0)
    if pooled.shape[0] < 2:
        raise ShapeError(f"median heuristic needs at least 2 points, got {pooled.shape[0]}")
    diff = pooled[:, None, :] - pooled[None, :, :]
    dist = np.sqrt(np.einsum("ijd,ijd->ij", diff, diff))
    upper = dist[np.triu_indices(pooled.shape[0], k=1)]
    upper = upper[upper > 0.0]
    if upper.size == 0:
        warnings.warn("all points identical; falling back to bandwidth 1.0")
        return 1.0
    return float(np.median(upper))


def default_spec(x, y) -> KernelSpec:
    """Kernel ladder centered on the median-heuristic bandwidth of the pooled data."""
    return KernelSpec.around(median_heuristic(x, y))
