"""Principal-component projection used as the student's feature extractor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ValidationError


@dataclass(frozen=True)
class PcaTransform:
    mean: np.ndarray  # (P,)
    components: np.ndarray  # (D, P), orthonormal rows
    explained_variance: np.ndarray  # (D,), descending

    @property
    def n_components(self):
        return self.components.shape[0]

    @property
    def n_features(self):
        return self.components.shape[1]

    def transform(self, x):
        return transform(self, x)


def fit(data, d) -> PcaTransform:
    """Fit the top-``d`` principal directions of ``data`` (n x P).

    Components come from the eigendecomposition of the sample covariance
    (divisor n - 1, or 1 when n == 1) and are sign-fixed so that each
    component's largest-magnitude entry is positive.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DimensionError(f"expected a 2-D array, got shape {data.shape}")
    n, p = data.shape
    if d < 1 or d > min(n, p):
        raise DimensionError(f"cannot extract {d} components from {n}x{p} data")
    if not np.all(np.isfinite(data)):
        raise ValidationError("PCA input contains non-finite values")

    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:d]
    evals = np.clip(evals[order], 0.0, None)
    components = evecs[:, order].T.copy()

    pivot = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(d), pivot])
    signs[signs == 0] = 1.0
    components *= signs[:, None]
    return PcaTransform(mean, components, evals)


def transform(t: PcaTransform, x):
    """Project one sample (P,) or a batch (n, P) onto the components."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.n_features:
        raise DimensionError(f"expected {t.n_features} features, got {x.shape[-1]}")
    return (x - t.mean) @ t.components.T


def inverse_transform(t: PcaTransform, z):
    return np.asarray(z, dtype=np.float64) @ t.components + t.mean
