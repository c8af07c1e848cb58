"""Type-II Anderson extrapolation of a fixed-point iteration.

Given recent inputs U = [u_{t-tau}, ..., u_t] of a nonexpansive map and
their images T = [T u_{t-tau}, ..., T u_t], the accelerated step replaces
the plain update T u_t by T pi* where

    pi* = argmin_{pi' 1 = 1} ||(U - T) pi||  =  G^+ 1 / (1' G^+ 1),
    G = (U - T)' (U - T).

The weights are affine (they sum to one) but are not constrained to be
nonnegative. Everything here is server-side bookkeeping: no extra
communication is implied by keeping the memory matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray

__all__ = [
    "DegenerateWeights",
    "AndersonConfig",
    "AndersonMemory",
    "anderson_weights",
    "accelerated_step",
]

_DENOM_TOL = 1e-14


class DegenerateWeights(RuntimeError):
    """The normalization 1' G^+ 1 vanished; callers fall back to a plain step."""


@dataclass(frozen=True)
class AndersonConfig:
    """Acceleration settings.

    ``tau`` is the memory size (tau = 0 reproduces the plain iteration
    exactly). ``ridge`` is added to G before pseudo-inversion; None selects
    the automatic value 1e-10 * trace(G) / ncols, which keeps the
    frequently near-singular G well-posed once residuals shrink. ``mode``
    chooses the accelerated sequence: "u" extrapolates the server state
    itself, "projected" extrapolates the averaged model and rebuilds the
    server state from it. Singular values below ``svd_tol`` times the
    largest are treated as zero.
    """

    tau: int = 0
    ridge: float | None = None
    mode: str = "u"
    svd_tol: float = 1e-12

    def __post_init__(self) -> None:
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.ridge is not None and self.ridge < 0:
            raise ValueError("ridge must be nonnegative")
        if self.mode not in ("u", "projected"):
            raise ValueError(f"unknown acceleration mode {self.mode!r}")
        if self.svd_tol <= 0:
            raise ValueError("svd_tol must be positive")


class AndersonMemory:
    """Sliding window of the last tau+1 (input, mapped) column pairs.

    Columns are flattened state vectors stored oldest to newest. Until the
    window fills, whatever columns are available are used.
    """

    def __init__(self, tau: int):
        if tau < 0:
            raise ValueError("tau must be >= 0")
        self.tau = tau
        self._inputs: list[Array] = []
        self._mapped: list[Array] = []

    def __len__(self) -> int:
        return len(self._inputs)

    def push(self, inp: Array, mapped: Array) -> None:
        inp = np.asarray(inp, dtype=float).ravel()
        mapped = np.asarray(mapped, dtype=float).ravel()
        if inp.shape != mapped.shape:
            raise ValueError("input and mapped columns must have equal length")
        self._inputs.append(inp)
        self._mapped.append(mapped)
        while len(self._inputs) > self.tau + 1:  # slide: drop oldest
            self._inputs.pop(0)
            self._mapped.pop(0)

    def inputs(self) -> Array:
        return np.column_stack(self._inputs)

    def mapped(self) -> Array:
        return np.column_stack(self._mapped)

    def newest_mapped(self) -> Array:
        return self._mapped[-1].copy()


def anderson_weights(memory: AndersonMemory, ridge: float | None = None,
                     svd_tol: float = 1e-12) -> Array:
    """Affine least-squares weights pi* = G^+ 1 / (1' G^+ 1).

    Raises DegenerateWeights when the normalizing scalar is numerically
    zero (for instance when all residual columns vanish at a fixed point).
    """
    n = len(memory)
    if n == 0:
        raise ValueError("memory is empty")
    if n == 1:
        return np.ones(1)
    resid = memory.inputs() - memory.mapped()
    G = resid.T @ resid
    trace = float(np.trace(G))
    # Residuals at (sub)normal-underflow scale mean the iteration already
    # sits at a fixed point; treat that as degenerate rather than feeding
    # an ill-scaled matrix to the SVD.
    if not np.isfinite(trace) or trace < 1e-300:
        raise DegenerateWeights(f"residual Gram trace {trace!r} is not usable")
    if ridge is None:
        ridge = 1e-10 * trace / n
    if ridge > 0:
        G = G + ridge * np.eye(n)
    try:
        Ginv = np.linalg.pinv(G, rcond=svd_tol)
    except np.linalg.LinAlgError as exc:
        raise DegenerateWeights("pseudo-inverse did not converge") from exc
    num = Ginv @ np.ones(n)
    den = float(num.sum())
    if not np.isfinite(den) or abs(den) < _DENOM_TOL or not np.all(np.isfinite(num)):
        raise DegenerateWeights(f"1' G^+ 1 = {den!r} is numerically unusable")
    return num / den


def accelerated_step(memory: AndersonMemory, config: AndersonConfig) -> Array:
    """Extrapolated state T pi*, falling back to the newest mapped column.

    The fallback covers both the single-column warm-up and degenerate
    weights, in which case the result is exactly the plain fixed-point
    step.
    """
    if len(memory) == 0:
        raise ValueError("memory is empty")
    if len(memory) == 1:
        return memory.newest_mapped()
    try:
        pi = anderson_weights(memory, config.ridge, config.svd_tol)
    except DegenerateWeights:
        return memory.newest_mapped()
    return memory.mapped() @ pi
