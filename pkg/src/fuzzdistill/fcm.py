"""Fuzzy c-means clustering, used to place the initial rule antecedents."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, DimensionError, ValidationError

log = logging.getLogger(__name__)

SIGMA_MIN = 1e-2
_CHUNK = 4096


@dataclass
class FcmResult:
    centers: np.ndarray  # (R, D)
    memberships: np.ndarray  # (n, R), rows sum to 1
    m: float
    iterations_run: int
    objective_history: list = field(default_factory=list)
    degenerate: bool = False


def squared_distances(x, centers):
    """Exact ``||x_i - c_r||^2`` for every pair, computed in row chunks."""
    out = np.empty((x.shape[0], centers.shape[0]))
    for start in range(0, x.shape[0], _CHUNK):
        diff = x[start:start + _CHUNK, None, :] - centers[None, :, :]
        out[start:start + _CHUNK] = np.einsum("nrd,nrd->nr", diff, diff)
    return out


def memberships_from_distances(d2, m):
    """u_ir proportional to d2_ir^(-1/(m-1)); a zero distance takes the whole mass."""
    zero = d2 <= 0.0
    with np.errstate(divide="ignore"):
        logw = -np.log(d2) / (m - 1.0)
    hit = zero.any(axis=1)
    logw[hit] = np.where(zero[hit], 0.0, -np.inf)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def weighted_centers(x, u, m):
    um = u ** m
    return (um.T @ x) / um.sum(axis=0)[:, None]


def objective(x, u, centers, m):
    return float(np.sum(u ** m * squared_distances(x, centers)))


def fcm_cluster(features, r, m=2.0, max_iter=100, tol=1e-4, seed=0) -> FcmResult:
    """Cluster ``features`` (n x D) into ``r`` fuzzy clusters.

    Memberships start from a seeded uniform Dirichlet draw. Iteration stops
    when the largest center displacement falls below ``tol`` or after
    ``max_iter`` rounds. The objective after every round is kept in
    ``objective_history``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"expected (n, D) features, got shape {x.shape}")
    n = x.shape[0]
    if r < 2 or r > n:
        raise ValidationError(f"need 2 <= r <= n, got r={r}, n={n}")
    if m <= 1.0:
        raise ValidationError(f"fuzziness m must exceed 1, got {m}")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    if not np.all(np.isfinite(x)):
        raise ValidationError("features contain non-finite values")

    if np.all(x == x[0]):
        warnings.warn(DegenerateInput("all samples identical; returning a repeated center"))
        return FcmResult(
            centers=np.repeat(x[:1], r, axis=0),
            memberships=np.full((n, r), 1.0 / r),
            m=m,
            iterations_run=0,
            degenerate=True,
        )

    rng = np.random.default_rng(seed)
    u = rng.dirichlet(np.ones(r), size=n)
    centers = weighted_centers(x, u, m)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        u = memberships_from_distances(squared_distances(x, centers), m)
        history.append(objective(x, u, centers, m))
        new_centers = weighted_centers(x, u, m)
        shift = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if shift < tol:
            break
    u = memberships_from_distances(squared_distances(x, centers), m)
    history.append(objective(x, u, centers, m))
    log.debug("fcm: %d iterations, objective %.6g", it, history[-1])
    return FcmResult(centers, u, m, it, history)


def init_rules(res: FcmResult, features, sigma_min=SIGMA_MIN):
    """Rule centers and per-dimension widths from a clustering result.

    Width is the membership-weighted (u^m) standard deviation of each
    dimension around the cluster center, floored at ``sigma_min``.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.shape[0] != res.memberships.shape[0] or x.shape[1] != res.centers.shape[1]:
        raise DimensionError("features do not match the clustering result")
    um = res.memberships ** res.m
    total = um.sum(axis=0)[:, None]
    # E_u[x^2] - 2 c E_u[x] + c^2, with E_u the u^m-weighted mean
    ex = (um.T @ x) / total
    ex2 = (um.T @ (x * x)) / total
    c = res.centers
    var = np.clip(ex2 - 2.0 * c * ex + c * c, 0.0, None)
    sigmas = np.maximum(np.sqrt(var), sigma_min)
    return c.copy(), sigmas
