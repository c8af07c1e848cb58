"""Synthetic federated problems, reference solutions and run metrics.

Least-squares instances draw design matrices with i.i.d. standard normal
entries, a shared ground truth, and per-user Gaussian noise; user ground
truths can optionally be shifted by a controlled amount to raise data
heterogeneity. Logistic instances draw labels from the sigmoid model of a
shared parameter vector. Reference solutions come from direct normal
equations (least squares) or a backtracking gradient oracle (logistic).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import scipy.linalg

from .consensus import as_weights, consensus_mean, weighted_norm
from .losses import (
    CLOSED_FORM,
    AbsoluteDeviation,
    Logistic,
    NegPartQuadratic,
    ProxSolverSpec,
    Quadratic,
    ScalarShiftedQuadratic,
    UserLoss,
)

if TYPE_CHECKING:
    from .scheme import IterateState, SchemeParams

Array = np.ndarray

__all__ = [
    "GenSpec",
    "FederatedProblem",
    "RoundMetrics",
    "generate",
    "gen_least_squares",
    "gen_logistic",
    "desk_least_squares",
    "desk_logistic",
    "solve_global_ls",
    "oracle_logistic",
    "fedprox_fixed_point",
    "fedavg_fixed_point",
    "taylor_fixed_point",
    "heterogeneity_measure",
    "compute_metrics",
    "save_problem",
    "load_problem",
]


@dataclass(frozen=True)
class GenSpec:
    """Parameters of a synthetic problem family.

    ``noise_var`` and ``hetero_shift`` only apply to least squares; a shift
    of zero reproduces the shared-ground-truth setup.
    """

    kind: str  # "least_squares" | "logistic"
    m: int
    d: int
    n_i: int
    seed: int = 0
    noise_var: float = 0.25
    hetero_shift: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("least_squares", "logistic"):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if min(self.m, self.d, self.n_i) < 1:
            raise ValueError("m, d and n_i must all be >= 1")
        if self.noise_var < 0:
            raise ValueError("noise_var must be nonnegative")
        if self.hetero_shift < 0:
            raise ValueError("hetero_shift must be nonnegative")


def desk_least_squares(seed: int = 0, noise_var: float = 0.25,
                       hetero_shift: float = 0.0) -> GenSpec:
    """Desk-scale least squares: small enough for second-scale experiments."""
    return GenSpec("least_squares", m=10, d=20, n_i=200, seed=seed,
                   noise_var=noise_var, hetero_shift=hetero_shift)


def desk_logistic(seed: int = 0) -> GenSpec:
    """Desk-scale logistic regression instance."""
    return GenSpec("logistic", m=5, d=20, n_i=200, seed=seed)


@dataclass
class FederatedProblem:
    """A collection of user losses with weights and optional reference data."""

    users: list[UserLoss]
    weights: Array
    dim: int
    true_solution: Array | None = None
    true_optimum: float | None = None
    gen: GenSpec | None = None
    _fedprox_cache: dict[float, Array] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self.weights = as_weights(self.weights, len(self.users))
        for loss in self.users:
            if loss.dim != self.dim:
                raise ValueError("all users must share the problem dimension")

    @property
    def m(self) -> int:
        return len(self.users)

    def objective(self, x) -> float:
        """Weighted objective sum_i lam_i f_i(x) at a single d-vector."""
        return float(sum(li * loss.value(x) for li, loss in zip(self.weights, self.users)))

    def objective_gradient(self, x) -> Array:
        g = np.zeros(self.dim)
        for li, loss in zip(self.weights, self.users):
            g += li * loss.gradient(x)
        return g

    def regularized_objective(self, x, eta: float,
                              spec: ProxSolverSpec = CLOSED_FORM) -> float:
        """Weighted sum of per-user Moreau envelopes at a single d-vector."""
        return float(sum(li * loss.envelope_value(x, eta, spec)
                         for li, loss in zip(self.weights, self.users)))

    def regularized_gradient(self, x, eta: float,
                             spec: ProxSolverSpec = CLOSED_FORM) -> Array:
        """Gradient of the envelope objective: sum_i lam_i (x - prox_i(x)) / eta."""
        x = np.asarray(x, dtype=float)
        g = np.zeros(self.dim)
        for li, loss in zip(self.weights, self.users):
            g += li * (x - loss.prox(x, eta, spec))
        return g / eta


def uniform_weights(m: int) -> Array:
    return np.full(m, 1.0 / m)


# --- generators -------------------------------------------------------------


def generate(spec: GenSpec) -> FederatedProblem:
    """Generate the problem described by ``spec`` (deterministic in its seed)."""
    if spec.kind == "least_squares":
        return gen_least_squares(spec)
    return gen_logistic(spec)


def gen_least_squares(spec: GenSpec) -> FederatedProblem:
    """Least-squares users b_i = A_i (w* + shift_i) + eps_i.

    Draw order per user is fixed (design, noise, shift direction) and the
    noise is drawn at unit scale before scaling by sigma, so instances with
    the same seed share their design and noise structure across noise_var
    and hetero_shift sweeps.
    """
    if spec.kind != "least_squares":
        raise ValueError("spec.kind must be 'least_squares'")
    rng = np.random.default_rng(spec.seed)
    w_star = rng.standard_normal(spec.d)
    sigma = math.sqrt(spec.noise_var)
    users: list[UserLoss] = []
    for _ in range(spec.m):
        A = rng.standard_normal((spec.n_i, spec.d))
        noise = rng.standard_normal(spec.n_i)
        direction = rng.standard_normal(spec.d)
        truth = w_star
        if spec.hetero_shift > 0:
            truth = w_star + spec.hetero_shift * direction / np.linalg.norm(direction)
        users.append(Quadratic(A, A @ truth + sigma * noise))
    problem = FederatedProblem(users, uniform_weights(spec.m), spec.d, gen=spec)
    problem.true_solution = solve_global_ls(problem)
    problem.true_optimum = problem.objective(problem.true_solution)
    return problem


def gen_logistic(spec: GenSpec, w0=None) -> FederatedProblem:
    """Logistic users with labels drawn from the sigmoid model of a shared w0.

    Each user's loss carries a ridge term reg * ||w||^2 / 2 with
    reg = 1 / (m n_i), i.e. a per-user penalty ||w||^2 / (2 m n_i), which
    also makes the aggregate objective strictly convex. ``w0`` fixes the
    label-generating parameter instead of drawing it (useful for probing
    the label mechanism).
    """
    from scipy.special import expit

    if spec.kind != "logistic":
        raise ValueError("spec.kind must be 'logistic'")
    rng = np.random.default_rng(spec.seed)
    w0 = rng.standard_normal(spec.d) if w0 is None else np.asarray(w0, dtype=float)
    reg = 1.0 / (spec.m * spec.n_i)
    users: list[UserLoss] = []
    for _ in range(spec.m):
        A = rng.standard_normal((spec.n_i, spec.d))
        probs = expit(A @ w0)
        y = np.where(rng.random(spec.n_i) < probs, 1.0, -1.0)
        users.append(Logistic(A, y, reg_weight=reg))
    problem = FederatedProblem(users, uniform_weights(spec.m), spec.d, gen=spec)
    problem.true_solution = oracle_logistic(problem)
    problem.true_optimum = problem.objective(problem.true_solution)
    return problem


# --- reference solutions -----------------------------------------------------


def _quad_parts(loss: UserLoss) -> tuple[Array, Array]:
    """Normal-equation pieces (A'A, A'b) of a quadratic-family loss."""
    if isinstance(loss, Quadratic):
        return loss.gram, loss.atb
    if isinstance(loss, ScalarShiftedQuadratic):
        return np.array([[loss.a]]), np.array([loss.a * loss.c])
    raise ValueError(f"{type(loss).__name__} is not a quadratic-family loss")


def solve_global_ls(problem: FederatedProblem) -> Array:
    """Exact minimizer of the weighted least-squares objective.

    Solves sum_i lam_i A_i'A_i w = sum_i lam_i A_i'b_i with a dense
    symmetric positive-definite factorization.
    """
    M = np.zeros((problem.dim, problem.dim))
    v = np.zeros(problem.dim)
    for li, loss in zip(problem.weights, problem.users):
        G, c = _quad_parts(loss)
        M += li * G
        v += li * c
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(M), v)
    except scipy.linalg.LinAlgError as exc:
        raise ArithmeticError("normal matrix is singular") from exc


def oracle_logistic(problem: FederatedProblem, tol: float = 1e-10,
                    max_iter: int = 10_000_000, w_init=None) -> Array:
    """Minimizer of the aggregate logistic objective to gradient norm tol.

    Deterministic full-gradient descent with Armijo backtracking; the step
    doubles after every accepted iterate so the line search stays cheap.
    """
    for loss in problem.users:
        if not isinstance(loss, Logistic):
            raise ValueError("oracle_logistic needs all-logistic users")
    w = np.zeros(problem.dim) if w_init is None else np.array(w_init, dtype=float)
    fw = problem.objective(w)
    g = problem.objective_gradient(w)
    step = 1.0
    for _ in range(max_iter):
        gnorm2 = float(g @ g)
        if math.sqrt(gnorm2) <= tol:
            return w
        # Sufficient-decrease tests are meaningless once the predicted drop
        # falls below the float resolution of the objective; from there the
        # last accepted step is below the smoothness threshold and plain
        # fixed-step descent keeps contracting the gradient.
        resolution = 1e-13 * max(1.0, abs(fw))
        if 0.5 * step * gnorm2 > resolution:
            step *= 2.0
            while True:
                w_new = w - step * g
                f_new = problem.objective(w_new)
                if f_new <= fw - 0.5 * step * gnorm2:
                    break
                step *= 0.5
                if 0.5 * step * gnorm2 <= resolution:
                    w_new = w - step * g
                    f_new = problem.objective(w_new)
                    break
        else:
            w_new = w - step * g
            f_new = problem.objective(w_new)
        w, fw = w_new, f_new
        g = problem.objective_gradient(w)
    raise RuntimeError(f"gradient norm above {tol} after {max_iter} iterations")


def fedprox_fixed_point(problem: FederatedProblem, eta: float) -> Array:
    """Fixed point of the averaged proximal map at constant step eta.

    For quadratic-family users every prox is affine, so the fixed point of
    w -> sum_i lam_i prox_i(w) solves a single dense linear system. The
    result is the consensus block of the minimizer of the envelope
    objective; it is cached per eta on the problem.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    cached = problem._fedprox_cache.get(eta)
    if cached is not None:
        return cached.copy()
    d = problem.dim
    I = np.eye(d)
    Jbar = np.zeros((d, d))
    rbar = np.zeros(d)
    for li, loss in zip(problem.weights, problem.users):
        G, c = _quad_parts(loss)
        M = I + eta * G
        Jbar += li * np.linalg.solve(M, I)
        rbar += li * np.linalg.solve(M, eta * c)
    out = np.linalg.solve(I - Jbar, rbar)
    problem._fedprox_cache[eta] = out.copy()
    return out


def fedavg_fixed_point(problem: FederatedProblem, eta: float, k: int) -> Array:
    """Closed-form fixed point of k-local-step averaged gradient descent.

    Solves
        (sum_i lam_i (1/k) sum_{j<k} G_i (I - eta G_i)^j) w
            = sum_i lam_i (1/k) sum_{j<k} (I - eta G_i)^j c_i
    with G_i = A_i'A_i and c_i = A_i'b_i. For k > 1 the iteration only
    converges when every eta G_i has spectrum inside (0, 2), which is
    enforced; for k = 1 the formula reduces to the normal equations and no
    step-size restriction applies.
    """
    if eta <= 0:
        raise ValueError("eta must be positive")
    if k < 1:
        raise ValueError("k must be >= 1")
    d = problem.dim
    M = np.zeros((d, d))
    v = np.zeros(d)
    for li, loss in zip(problem.weights, problem.users):
        G, c = _quad_parts(loss)
        if k > 1:
            qmax = float(np.linalg.eigvalsh(G)[-1])
            if eta * qmax >= 2.0:
                raise ValueError(
                    f"eta too large for convergence: eta * lambda_max = {eta * qmax!r} >= 2"
                )
        S = np.zeros((d, d))
        P = np.eye(d)
        step_mat = np.eye(d) - eta * G
        for _ in range(k):
            S += P
            P = P @ step_mat
        S /= k
        M += li * (G @ S)
        v += li * (S @ c)
    return np.linalg.solve(M, v)


def taylor_fixed_point(problem: FederatedProblem, eta_k_minus_1: float) -> Array:
    """Small-step approximation of the k-step fixed point.

    Replaces the local polynomial (1/k) sum_j (I - eta G)^j by
    I - (eta (k-1) / 2) G, so the result depends on eta and k only through
    their product eta (k-1).
    """
    if eta_k_minus_1 < 0:
        raise ValueError("eta_k_minus_1 must be nonnegative")
    s = 0.5 * eta_k_minus_1
    d = problem.dim
    M = np.zeros((d, d))
    v = np.zeros(d)
    for li, loss in zip(problem.weights, problem.users):
        G, c = _quad_parts(loss)
        M += li * (G - s * (G @ G))
        v += li * (c - s * (G @ c))
    return np.linalg.solve(M, v)


def heterogeneity_measure(problem: FederatedProblem) -> float:
    """Mean squared per-user gradient norm at the global solution:
    (1/m) sum_i ||grad f_i(w*)||^2. Zero exactly when users share w*.
    """
    if problem.true_solution is None:
        raise ValueError("problem has no reference solution")
    w = problem.true_solution
    return float(np.mean([float(np.sum(loss.gradient(w) ** 2)) for loss in problem.users]))


# --- metrics -----------------------------------------------------------------


@dataclass(frozen=True)
class RoundMetrics:
    """Per-round measurements of a run, evaluated at the consensus block."""

    t: int
    objective: float
    optimality_gap: float
    regularized_gap: float | None
    consensus_residual: float
    eta: float
    wall_ms: float
    accelerated: bool
    ergodic_gap: float | None = None

    _GAP_SLACK = -1e-9

    def __post_init__(self) -> None:
        for gap in (self.optimality_gap, self.regularized_gap, self.ergodic_gap):
            if gap is not None and gap < self._GAP_SLACK:
                raise ValueError(f"gap {gap!r} below numerical slack")


def _quad_family(problem: FederatedProblem) -> bool:
    return all(isinstance(loss, (Quadratic, ScalarShiftedQuadratic))
               for loss in problem.users)


def compute_metrics(state: "IterateState", problem: FederatedProblem,
                    params: "SchemeParams", t: int,
                    wall_ms: float = 0.0) -> RoundMetrics:
    """Metrics of the current state: objective, gaps and consensus residual.

    The regularized gap compares the envelope objective against its value
    at the averaged-prox fixed point; it is only reported for constant eta
    on quadratic-family problems, where that fixed point has a closed form.
    """
    if problem.true_optimum is None:
        raise ValueError("problem oracles have not been computed")
    lam = problem.weights
    xbar = consensus_mean(state.w, lam)
    obj = problem.objective(xbar)
    gap = obj - problem.true_optimum

    reg_gap = None
    if params.eta.is_constant and _quad_family(problem):
        eta = params.eta.c
        w_reg = fedprox_fixed_point(problem, eta)
        reg_gap = (problem.regularized_objective(xbar, eta)
                   - problem.regularized_objective(w_reg, eta))

    residual = weighted_norm(state.w - consensus_mean(state.w, lam), lam)

    ergodic_gap = None
    if params.ergodic_average and state.ergodic_den > 0:
        from .scheme import ergodic_average

        xe = consensus_mean(ergodic_average(state), lam)
        ergodic_gap = problem.objective(xe) - problem.true_optimum

    return RoundMetrics(
        t=t, objective=obj, optimality_gap=gap, regularized_gap=reg_gap,
        consensus_residual=residual, eta=params.eta.value(t),
        wall_ms=wall_ms, accelerated=state.accelerated, ergodic_gap=ergodic_gap,
    )


# --- problem container -------------------------------------------------------

_FORMAT = "splitfl-problem"
_FORMAT_VERSION = 1


def _encode_loss(loss: UserLoss) -> dict:
    if isinstance(loss, Quadratic):
        return {"variant": "quadratic", "shape": list(loss.A.shape),
                "a": loss.A.ravel().tolist(), "b": loss.b.tolist()}
    if isinstance(loss, Logistic):
        return {"variant": "logistic", "shape": list(loss.A.shape),
                "a": loss.A.ravel().tolist(), "y": loss.y.tolist(),
                "reg_weight": loss.reg_weight}
    if isinstance(loss, ScalarShiftedQuadratic):
        return {"variant": "scalar_shifted_quadratic", "curvature": loss.a,
                "center": loss.c}
    if isinstance(loss, AbsoluteDeviation):
        return {"variant": "absolute_deviation", "anchor": loss.c.tolist()}
    if isinstance(loss, NegPartQuadratic):
        return {"variant": "neg_part_quadratic"}
    raise ValueError(f"cannot serialize {type(loss).__name__}")


def _decode_loss(payload: dict) -> UserLoss:
    variant = payload["variant"]
    if variant == "quadratic":
        n, d = payload["shape"]
        return Quadratic(np.array(payload["a"]).reshape(n, d), payload["b"])
    if variant == "logistic":
        n, d = payload["shape"]
        return Logistic(np.array(payload["a"]).reshape(n, d), payload["y"],
                        payload["reg_weight"])
    if variant == "scalar_shifted_quadratic":
        return ScalarShiftedQuadratic(payload["curvature"], payload["center"])
    if variant == "absolute_deviation":
        return AbsoluteDeviation(payload["anchor"])
    if variant == "neg_part_quadratic":
        return NegPartQuadratic()
    raise ValueError(f"unknown loss variant {variant!r}")


def save_problem(problem: FederatedProblem, path) -> None:
    """Write the problem to a JSON container (dims, row-major payload, provenance).

    JSON floats round-trip exactly, so load_problem reproduces the problem
    bit for bit.
    """
    doc = {
        "format": _FORMAT,
        "version": _FORMAT_VERSION,
        "gen": None if problem.gen is None else dict(vars(problem.gen)),
        "dim": problem.dim,
        "weights": problem.weights.tolist(),
        "users": [_encode_loss(loss) for loss in problem.users],
        "true_solution": None if problem.true_solution is None
                         else problem.true_solution.tolist(),
        "true_optimum": problem.true_optimum,
    }
    Path(path).write_text(json.dumps(doc))


def load_problem(path) -> FederatedProblem:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != _FORMAT:
        raise ValueError(f"not a {_FORMAT} file")
    if doc.get("version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported container version {doc.get('version')!r}")
    gen = None if doc["gen"] is None else GenSpec(**doc["gen"])
    problem = FederatedProblem(
        users=[_decode_loss(p) for p in doc["users"]],
        weights=np.array(doc["weights"]),
        dim=doc["dim"],
        gen=gen,
    )
    if doc["true_solution"] is not None:
        problem.true_solution = np.array(doc["true_solution"])
    problem.true_optimum = doc["true_optimum"]
    return problem
