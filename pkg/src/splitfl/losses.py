"""Per-user objective functions with proximal maps, reflectors and envelopes.

Every loss exposes the same small surface: value, (sub)gradient, proximal
map ``argmin_x ||x - w||^2/(2 eta) + f(x)``, reflector ``2 prox - id``,
Moreau envelope value, and a k-step local gradient update. Losses are
immutable after construction and all methods are pure functions, so
instances can be shared freely across threads.
"""

from __future__ import annotations

import math
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

Array = np.ndarray

__all__ = [
    "ProxSolverSpec",
    "CLOSED_FORM",
    "GRADIENT_DESCENT",
    "UserLoss",
    "Quadratic",
    "Logistic",
    "ScalarShiftedQuadratic",
    "AbsoluteDeviation",
    "NegPartQuadratic",
]


@dataclass(frozen=True)
class ProxSolverSpec:
    """How proximal maps are evaluated.

    ``closed_form`` uses the per-loss analytic solution and is rejected by
    losses that have none. ``gradient_descent`` minimizes
    ``f(x) + ||x - w||^2 / (2 eta)`` with ``inner_steps`` fixed-size
    gradient steps starting from ``w``; when ``inner_step_size`` is None, a
    conservative ``1 / (L + 1/eta)`` step is derived from the loss'
    smoothness bound L, which guarantees descent on the inner objective.
    """

    mode: str = "closed_form"
    inner_steps: int = 100
    inner_step_size: float | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("closed_form", "gradient_descent"):
            raise ValueError(f"unknown prox solver mode {self.mode!r}")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_step_size is not None and self.inner_step_size <= 0:
            raise ValueError("inner_step_size must be positive")


CLOSED_FORM = ProxSolverSpec()
GRADIENT_DESCENT = ProxSolverSpec(mode="gradient_descent")


def _as_vector(w, dim: int) -> Array:
    w = np.asarray(w, dtype=float)
    if w.shape != (dim,):
        raise ValueError(f"expected vector of shape ({dim},), got {w.shape}")
    return w


class UserLoss(ABC):
    """One user's objective function.

    Subclasses hold the data payload and implement ``value``, ``gradient``
    and, where available, a closed-form proximal map.
    """

    dim: int

    @abstractmethod
    def value(self, w) -> float:
        """Objective value f(w)."""

    @abstractmethod
    def gradient(self, w) -> Array:
        """Gradient of f at w (a subgradient where f is nonsmooth)."""

    def smoothness_bound(self) -> float:
        """Upper bound on the gradient Lipschitz constant (conservative)."""
        return 1.0

    # --- proximal calculus ------------------------------------------------

    def _prox_closed_form(self, w: Array, eta: float) -> Array | None:
        """Analytic prox, or None if the loss has no closed form."""
        return None

    def prox(self, w, eta: float, spec: ProxSolverSpec = CLOSED_FORM) -> Array:
        """Proximal map: argmin_x ||x - w||^2/(2 eta) + f(x)."""
        w = _as_vector(w, self.dim)
        if eta <= 0:
            raise ValueError("eta must be positive")
        if spec.mode == "closed_form":
            out = self._prox_closed_form(w, eta)
            if out is None:
                raise ValueError(
                    f"{type(self).__name__} has no closed-form proximal map; "
                    "use a gradient_descent ProxSolverSpec"
                )
            return out
        step = spec.inner_step_size
        if step is None:
            step = 1.0 / (self.smoothness_bound() + 1.0 / eta)
        x = w.copy()
        for _ in range(spec.inner_steps):
            x = x - step * (self.gradient(x) + (x - w) / eta)
        return x

    def reflector(self, w, eta: float, spec: ProxSolverSpec = CLOSED_FORM) -> Array:
        """Reflected proximal map 2 prox(w) - w."""
        w = _as_vector(w, self.dim)
        return 2.0 * self.prox(w, eta, spec) - w

    def envelope_value(self, w, eta: float, spec: ProxSolverSpec = CLOSED_FORM) -> float:
        """Moreau envelope value f(p) + ||p - w||^2/(2 eta) with p = prox(w)."""
        w = _as_vector(w, self.dim)
        p = self.prox(w, eta, spec)
        diff = p - w
        return self.value(p) + float(diff @ diff) / (2.0 * eta)

    # --- local gradient updates --------------------------------------------

    @property
    def n_samples(self) -> int | None:
        """Number of data rows, or None for losses without sample data."""
        return None

    def batch_gradient(self, w: Array, rows: slice) -> Array:
        raise NotImplementedError(f"{type(self).__name__} has no sample rows")

    def grad_step_k(self, w, eta: float, k: int, batch: int | None = None,
                    rng: np.random.Generator | None = None) -> Array:
        """Apply ``x <- x - eta * grad f(x)`` k times, optionally on minibatches.

        With ``batch`` set, the rows are pre-partitioned into fixed contiguous
        batches of size ``batch`` which are cycled in order and reshuffled at
        every epoch boundary using ``rng``; the batch gradient is scaled by
        n/|batch| so it is an unbiased estimate of the full gradient. The
        update is deterministic given the rng state.
        """
        w = _as_vector(w, self.dim)
        if eta <= 0:
            raise ValueError("eta must be positive")
        if k < 1:
            raise ValueError("k must be >= 1")
        x = w.copy()
        if batch is None:
            for _ in range(k):
                x = x - eta * self.gradient(x)
            return x
        n = self.n_samples
        if n is None:
            raise ValueError(f"{type(self).__name__} has no sample rows to batch")
        if not 1 <= batch <= n:
            raise ValueError(f"batch size must be in [1, {n}], got {batch}")
        if rng is None:
            raise ValueError("minibatch updates require an rng")
        n_batches = math.ceil(n / batch)
        order = np.empty(0, dtype=int)
        pos = n_batches
        for _ in range(k):
            if pos >= n_batches:  # epoch boundary: reshuffle batch order
                order = rng.permutation(n_batches)
                pos = 0
            j = int(order[pos])
            pos += 1
            rows = slice(j * batch, min((j + 1) * batch, n))
            x = x - eta * self.batch_gradient(x, rows)
        return x


class Quadratic(UserLoss):
    """Linear least squares, f(w) = ||A w - b||^2 / 2."""

    def __init__(self, A, b):
        A = np.array(A, dtype=float, order="C")
        b = np.array(b, dtype=float)
        if A.ndim != 2:
            raise ValueError("A must be a matrix")
        if b.shape != (A.shape[0],):
            raise ValueError(f"b must have {A.shape[0]} entries, got {b.shape}")
        self.A = A
        self.b = b
        self.dim = A.shape[1]
        self.gram = A.T @ A
        self.atb = A.T @ b
        self._eig: tuple[Array, Array] | None = None

    def _eigh(self) -> tuple[Array, Array]:
        # Cached spectral factorization of the Gram matrix; eigenvalues are
        # clipped at zero so rank-deficient designs stay exactly singular.
        if self._eig is None:
            vals, vecs = np.linalg.eigh(self.gram)
            self._eig = (np.maximum(vals, 0.0), vecs)
        return self._eig

    def value(self, w) -> float:
        w = _as_vector(w, self.dim)
        r = self.A @ w - self.b
        return 0.5 * float(r @ r)

    def gradient(self, w) -> Array:
        w = _as_vector(w, self.dim)
        return self.gram @ w - self.atb

    def smoothness_bound(self) -> float:
        return float(np.sum(self.A * self.A))

    def _prox_closed_form(self, w: Array, eta: float) -> Array:
        # Solves (I + eta A'A) x = w + eta A'b in the eigenbasis of A'A.
        vals, vecs = self._eigh()
        y = vecs.T @ (w + eta * self.atb)
        return vecs @ (y / (1.0 + eta * vals))

    @property
    def n_samples(self) -> int:
        return self.A.shape[0]

    def batch_gradient(self, w: Array, rows: slice) -> Array:
        Ab = self.A[rows]
        scale = self.A.shape[0] / Ab.shape[0]
        return scale * (Ab.T @ (Ab @ w - self.b[rows]))


class Logistic(UserLoss):
    """Binary logistic regression with an optional ridge term.

    f(w) = sum_j log(1 + exp(-y_j a_j' w)) + reg_weight * ||w||^2 / 2,
    with labels y in {-1, +1}.
    """

    def __init__(self, A, y, reg_weight: float = 0.0):
        A = np.array(A, dtype=float, order="C")
        y = np.array(y, dtype=float)
        if A.ndim != 2:
            raise ValueError("A must be a matrix")
        if y.shape != (A.shape[0],):
            raise ValueError(f"y must have {A.shape[0]} entries, got {y.shape}")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise ValueError("labels must be -1 or +1")
        if reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        self.A = A
        self.y = y
        self.reg_weight = float(reg_weight)
        self.dim = A.shape[1]

    def value(self, w) -> float:
        w = _as_vector(w, self.dim)
        margins = self.y * (self.A @ w)
        loss = float(np.sum(np.logaddexp(0.0, -margins)))
        return loss + 0.5 * self.reg_weight * float(w @ w)

    def gradient(self, w) -> Array:
        from scipy.special import expit

        w = _as_vector(w, self.dim)
        margins = self.y * (self.A @ w)
        return self.A.T @ (-self.y * expit(-margins)) + self.reg_weight * w

    def smoothness_bound(self) -> float:
        return 0.25 * float(np.sum(self.A * self.A)) + self.reg_weight

    @property
    def n_samples(self) -> int:
        return self.A.shape[0]

    def batch_gradient(self, w: Array, rows: slice) -> Array:
        from scipy.special import expit

        Ab = self.A[rows]
        yb = self.y[rows]
        scale = self.A.shape[0] / Ab.shape[0]
        margins = yb * (Ab @ w)
        return scale * (Ab.T @ (-yb * expit(-margins))) + self.reg_weight * w


class ScalarShiftedQuadratic(UserLoss):
    """One-dimensional quadratic f(w) = (a/2) (w - c)^2 with curvature a > 0."""

    dim = 1

    def __init__(self, a: float, c: float):
        if a <= 0:
            raise ValueError("curvature a must be positive")
        self.a = float(a)
        self.c = float(c)

    def value(self, w) -> float:
        w = _as_vector(w, 1)
        return 0.5 * self.a * float((w[0] - self.c) ** 2)

    def gradient(self, w) -> Array:
        w = _as_vector(w, 1)
        return self.a * (w - self.c)

    def smoothness_bound(self) -> float:
        return self.a

    def _prox_closed_form(self, w: Array, eta: float) -> Array:
        return (w + eta * self.a * self.c) / (1.0 + eta * self.a)


class AbsoluteDeviation(UserLoss):
    """Euclidean distance to an anchor, f(w) = ||w - c||_2 (1-Lipschitz).

    The subgradient at w = c is taken to be zero, which keeps the anchor a
    fixed point of gradient steps.
    """

    def __init__(self, c):
        c = np.array(c, dtype=float)
        if c.ndim != 1:
            raise ValueError("anchor c must be a vector")
        self.c = c
        self.dim = c.shape[0]

    def value(self, w) -> float:
        w = _as_vector(w, self.dim)
        return float(np.linalg.norm(w - self.c))

    def gradient(self, w) -> Array:
        w = _as_vector(w, self.dim)
        r = w - self.c
        n = np.linalg.norm(r)
        if n == 0.0:
            return np.zeros(self.dim)
        return r / n

    def _prox_closed_form(self, w: Array, eta: float) -> Array:
        # Block soft-shrink toward the anchor.
        r = w - self.c
        n = np.linalg.norm(r)
        if n <= eta:
            return self.c.copy()
        return self.c + (1.0 - eta / n) * r


class NegPartQuadratic(UserLoss):
    """One-dimensional f(w) = ((-w)_+)^2 / 2: quadratic on the negative axis.

    Its reflector equals w |-> max(w, 0) exactly when eta = 1, and is then
    idempotent.
    """

    dim = 1

    def value(self, w) -> float:
        w = _as_vector(w, 1)
        return 0.5 * float(min(w[0], 0.0) ** 2)

    def gradient(self, w) -> Array:
        w = _as_vector(w, 1)
        return np.minimum(w, 0.0)

    def _prox_closed_form(self, w: Array, eta: float) -> Array:
        return np.where(w >= 0.0, w, w / (1.0 + eta))

    def reflector(self, w, eta: float, spec: ProxSolverSpec = CLOSED_FORM) -> Array:
        if eta != 1.0:
            warnings.warn(
                "the negative-part quadratic reflector is idempotent only at eta=1",
                RuntimeWarning,
                stacklevel=2,
            )
        return super().reflector(w, eta, spec)
