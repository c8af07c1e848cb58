"""Geometry of the consensus subspace under a weighted inner product.

A stacked state is an (m, d) array whose rows are the per-user blocks
w_1, ..., w_m (block-major storage, one contiguous row per user). The
consensus subspace H collects states with all rows equal; the space
carries the inner product <x, z> = sum_i lam_i x_i' z_i for nonnegative
user weights lam summing to one. Its orthogonal complement is
{x : sum_i lam_i x_i = 0}.

The weighted reductions below always run in ascending user index on a
single thread, so results are bit-reproducible.
"""

from __future__ import annotations

import numpy as np

Array = np.ndarray

__all__ = [
    "as_weights",
    "as_stacked",
    "stack_copies",
    "weighted_inner",
    "weighted_norm",
    "consensus_mean",
    "project_consensus",
    "reflect_consensus",
    "complement_residual",
]

_WEIGHT_SUM_TOL = 1e-12


def as_weights(lam, m: int | None = None) -> Array:
    """Validate and return user weights: nonnegative, summing to one."""
    lam = np.asarray(lam, dtype=float)
    if lam.ndim != 1:
        raise ValueError("weights must be a vector")
    if m is not None and lam.shape[0] != m:
        raise ValueError(f"expected {m} weights, got {lam.shape[0]}")
    if np.any(lam < 0):
        raise ValueError("weights must be nonnegative")
    if abs(float(lam.sum()) - 1.0) > _WEIGHT_SUM_TOL:
        raise ValueError(f"weights must sum to 1, got {float(lam.sum())!r}")
    return lam


def as_stacked(x) -> Array:
    """Validate a stacked state: an (m, d) array with m >= 1."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"stacked state must be (m, d) with m >= 1, got {x.shape}")
    return x


def stack_copies(v, m: int) -> Array:
    """Stack m copies of the d-vector v into an (m, d) state."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("expected a vector")
    return np.tile(v, (m, 1))


def _check_pair(x: Array, z: Array) -> None:
    if x.shape != z.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {z.shape}")


def weighted_inner(x, z, lam) -> float:
    """Weighted inner product sum_i lam_i x_i' z_i."""
    x = as_stacked(x)
    z = as_stacked(z)
    _check_pair(x, z)
    lam = as_weights(lam, x.shape[0])
    return float(lam @ np.einsum("ij,ij->i", x, z))


def weighted_norm(x, lam) -> float:
    """Norm induced by the weighted inner product."""
    # Clip tiny negative round-off from the quadratic form.
    return float(np.sqrt(max(weighted_inner(x, x, lam), 0.0)))


def consensus_mean(x, lam) -> Array:
    """Weighted average block, the common row of the projection onto H."""
    x = as_stacked(x)
    lam = as_weights(lam, x.shape[0])
    return lam @ x


def project_consensus(x, lam) -> Array:
    """Project onto H: every row of the output equals the weighted average."""
    x = as_stacked(x)
    return stack_copies(consensus_mean(x, lam), x.shape[0])


def reflect_consensus(x, lam) -> Array:
    """Reflect through H: row i of the output is 2 wbar - x_i."""
    x = as_stacked(x)
    return 2.0 * consensus_mean(x, lam) - x


def complement_residual(x, lam) -> float:
    """Norm of sum_i lam_i x_i; zero exactly when x lies in the complement of H."""
    x = as_stacked(x)
    return float(np.linalg.norm(consensus_mean(x, lam)))
