"""The grand federated iteration and its named presets.

One parameterized round maps the server state u through

    z   = (1 - alpha_t) u + alpha_t Local(u)          (per-user, in parallel)
    w   = (1 - beta_t)  z + beta_t  P_H(z)            (server averaging)
    u'  = (1 - gamma_t) u + gamma_t w                 (server relaxation)

where Local is either the per-user proximal map with step eta_t or k local
gradient steps. Constant choices of (alpha, beta, gamma) and the local
solver reproduce the classic algorithms; see ``preset``. Partial user
participation keeps absent users' local states and averages only present
blocks with renormalized weights. The expanded dual form of the
half-averaged variant is available as ``fedpi_expanded_round``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from .anderson import AndersonConfig, AndersonMemory, DegenerateWeights, anderson_weights
from .consensus import complement_residual, consensus_mean, stack_copies
from .losses import CLOSED_FORM, GRADIENT_DESCENT, ProxSolverSpec, UserLoss

if TYPE_CHECKING:
    from .experiments import FederatedProblem

Array = np.ndarray

logger = logging.getLogger(__name__)

__all__ = [
    "Schedule",
    "LocalSolver",
    "SchemeParams",
    "IterateState",
    "DualState",
    "RngStreams",
    "PRESET_NAMES",
    "preset",
    "init_state",
    "round",
    "run_scheme",
    "fedpi_expanded_round",
    "ergodic_average",
    "sample_users",
]


@dataclass(frozen=True)
class Schedule:
    """A scalar schedule evaluated at 1-based round indices.

    Kinds: ``constant`` (c), ``inv_t`` (c/t), ``inv_t2`` (c/t^2),
    ``inv_sqrt`` (c/sqrt(t)), ``exp`` (c * ratio^floor(t/period)), and
    ``inv_log`` (c/log(t+2), shifted so the value is defined at t = 1).
    """

    kind: str
    c: float
    ratio: float = 0.5
    period: int = 1

    KINDS = ("constant", "inv_t", "inv_t2", "inv_sqrt", "exp", "inv_log")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.c <= 0:
            raise ValueError("schedule constant c must be positive")
        if self.kind == "exp":
            if not 0.0 < self.ratio < 1.0:
                raise ValueError("exp schedule ratio must be in (0, 1)")
            if self.period < 1:
                raise ValueError("exp schedule period must be >= 1")

    @classmethod
    def constant(cls, c: float) -> "Schedule":
        return cls("constant", c)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def value(self, t: int) -> float:
        if t < 1:
            raise ValueError("round index t is 1-based")
        if self.kind == "constant":
            return self.c
        if self.kind == "inv_t":
            return self.c / t
        if self.kind == "inv_t2":
            return self.c / (t * t)
        if self.kind == "inv_sqrt":
            return self.c / math.sqrt(t)
        if self.kind == "exp":
            return self.c * self.ratio ** (t // self.period)
        return self.c / math.log(t + 2)

    @classmethod
    def parse(cls, text: str) -> "Schedule":
        """Parse specs like ``constant:1e-2``, ``inv_t:1``, ``exp:100:0.5:500``."""
        parts = text.split(":")
        kind = parts[0]
        if kind not in cls.KINDS:
            raise ValueError(f"unknown schedule kind {kind!r} in {text!r}")
        try:
            if kind == "exp":
                if len(parts) != 4:
                    raise ValueError
                return cls("exp", float(parts[1]), float(parts[2]), int(parts[3]))
            if len(parts) != 2:
                raise ValueError
            return cls(kind, float(parts[1]))
        except ValueError as exc:
            raise ValueError(f"malformed schedule spec {text!r}") from exc

    def spec_string(self) -> str:
        if self.kind == "exp":
            return f"exp:{self.c!r}:{self.ratio!r}:{self.period}"
        return f"{self.kind}:{self.c!r}"


@dataclass(frozen=True)
class LocalSolver:
    """How each user computes its local update.

    ``exact_prox`` uses the closed-form proximal map, ``iterative_prox``
    approximates it with inner gradient descent per ``prox_spec``, and
    ``grad_k`` takes ``k`` plain gradient steps (minibatched when ``batch``
    is set).
    """

    kind: str = "exact_prox"
    prox_spec: ProxSolverSpec = GRADIENT_DESCENT
    k: int = 1
    batch: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("exact_prox", "iterative_prox", "grad_k"):
            raise ValueError(f"unknown local solver kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch is not None and self.batch < 1:
            raise ValueError("batch size must be >= 1")

    @classmethod
    def exact_prox(cls) -> "LocalSolver":
        return cls("exact_prox")

    @classmethod
    def iterative_prox(cls, spec: ProxSolverSpec = GRADIENT_DESCENT) -> "LocalSolver":
        return cls("iterative_prox", prox_spec=spec)

    @classmethod
    def grad_k(cls, k: int, batch: int | None = None) -> "LocalSolver":
        return cls("grad_k", k=k, batch=batch)


@dataclass(frozen=True)
class SchemeParams:
    """Schedules, local solver, participation and acceleration for a run."""

    alpha: Schedule
    beta: Schedule
    gamma: Schedule
    eta: Schedule
    local: LocalSolver = field(default_factory=LocalSolver)
    participation: float = 1.0
    anderson: AndersonConfig | None = None
    ergodic_average: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.participation <= 1.0:
            raise ValueError("participation probability must be in (0, 1]")


PRESET_NAMES = (
    "FedAvg",
    "FedProx",
    "FedSplit",
    "FedPi",
    "FedRP",
    "ReflectGrad",
    "ReflectProx",
)

# name -> (alpha, beta, gamma, uses gradient steps locally)
_PRESETS = {
    "fedavg": (1.0, 1.0, 1.0, True),
    "fedprox": (1.0, 1.0, 1.0, False),
    "fedsplit": (2.0, 2.0, 1.0, False),
    "fedpi": (2.0, 2.0, 0.5, False),
    "fedrp": (2.0, 1.0, 1.0, False),
    "reflectgrad": (1.0, 2.0, 1.0, True),
    "reflectprox": (1.0, 2.0, 1.0, False),
}


def preset(name: str, eta: Schedule, k: int = 1,
           local: LocalSolver | None = None,
           participation: float = 1.0,
           anderson: AndersonConfig | None = None,
           ergodic_average: bool = False) -> SchemeParams:
    """Scheme parameters for a named algorithm.

    ``k`` is the number of local gradient steps and is only consumed by the
    gradient-based presets (FedAvg, ReflectGrad). ``local`` overrides the
    preset's local solver, e.g. to approximate proximal maps iteratively
    for losses without a closed form.
    """
    try:
        alpha, beta, gamma, wants_grad = _PRESETS[name.lower()]
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}"
        ) from None
    if k < 1:
        raise ValueError("k must be >= 1")
    if local is None:
        local = LocalSolver.grad_k(k) if wants_grad else LocalSolver.exact_prox()
    return SchemeParams(
        alpha=Schedule.constant(alpha),
        beta=Schedule.constant(beta),
        gamma=Schedule.constant(gamma),
        eta=eta,
        local=local,
        participation=participation,
        anderson=anderson,
        ergodic_average=ergodic_average,
    )


@dataclass
class IterateState:
    """Mutable per-round state: server iterates plus ergodic accumulators.

    After t rounds with averaging enabled, ``ergodic_num`` holds
    sum_s eta_s w_s and ``ergodic_den`` holds sum_s eta_s.
    """

    u: Array
    z: Array
    w: Array
    ergodic_num: Array
    ergodic_den: float
    t: int = 0
    accelerated: bool = False


@dataclass
class DualState:
    """State of the expanded dual iteration: primal w, dual u, local z."""

    w: Array
    u: Array
    z: Array


@dataclass
class RngStreams:
    """Deterministic random streams: one for the server, one per user.

    Streams are spawned from the master seed in a fixed order (server
    first, then users by index), so per-user randomness is independent of
    scheduling and thread count.
    """

    server: np.random.Generator
    users: list[np.random.Generator]

    @classmethod
    def from_seed(cls, seed: int, m: int) -> "RngStreams":
        children = np.random.SeedSequence(seed).spawn(m + 1)
        return cls(
            server=np.random.default_rng(children[0]),
            users=[np.random.default_rng(c) for c in children[1:]],
        )


def init_state(problem: "FederatedProblem", u0=None) -> IterateState:
    """Fresh state at round zero; u0 may be a d-vector or an (m, d) state."""
    m, d = len(problem.users), problem.dim
    if u0 is None:
        u = np.zeros((m, d))
    else:
        u0 = np.asarray(u0, dtype=float)
        u = stack_copies(u0, m) if u0.ndim == 1 else u0.copy()
        if u.shape != (m, d):
            raise ValueError(f"u0 must broadcast to ({m}, {d})")
    return IterateState(
        u=u, z=u.copy(), w=u.copy(),
        ergodic_num=np.zeros((m, d)), ergodic_den=0.0, t=0,
    )


def sample_users(m: int, p: float, rng: np.random.Generator) -> Array:
    """Indices of participating users, each included independently with prob p.

    Empty draws are rejected and redrawn (logged at debug level). p = 1
    short-circuits to the full set without consuming randomness.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError("participation probability must be in (0, 1]")
    if p == 1.0:
        return np.arange(m)
    redraws = 0
    while True:
        mask = rng.random(m) < p
        if mask.any():
            if redraws:
                logger.debug("resampled %d empty participation draws", redraws)
            return np.flatnonzero(mask)
        redraws += 1


def _local_update(loss: UserLoss, u_i: Array, eta: float, local: LocalSolver,
                  rng: np.random.Generator | None) -> Array:
    if local.kind == "exact_prox":
        return loss.prox(u_i, eta, CLOSED_FORM)
    if local.kind == "iterative_prox":
        return loss.prox(u_i, eta, local.prox_spec)
    return loss.grad_step_k(u_i, eta, local.k, local.batch, rng)


def _check_coefficients(params: SchemeParams, alpha: float, beta: float,
                        gamma: float, eta: float, t: int) -> None:
    if eta <= 0:
        raise ValueError(f"eta schedule produced {eta!r} at round {t}")
    if params.anderson is not None:
        # Acceleration assumes a nonexpansive round map.
        if not (0.0 <= alpha <= 2.0 and 0.0 <= beta <= 2.0 and 0.0 <= gamma <= 1.0):
            raise ValueError(
                f"acceleration requires alpha, beta in [0, 2] and gamma in [0, 1]; "
                f"got ({alpha}, {beta}, {gamma}) at round {t}"
            )


def round(state: IterateState, problem: "FederatedProblem", params: SchemeParams,
          rng: RngStreams | None = None,
          memory: AndersonMemory | None = None) -> IterateState:
    """One round of the grand scheme; returns the new state.

    ``rng`` is required for user sampling or minibatch local solvers.
    When ``memory`` is given and acceleration is configured, the plain
    update is pushed into the memory and the returned server state is the
    extrapolated one (falling back to the plain step during warm-up or on
    degenerate weights).
    """
    users = problem.users
    lam = problem.weights
    m, d = len(users), problem.dim
    t = state.t + 1
    alpha = params.alpha.value(t)
    beta = params.beta.value(t)
    gamma = params.gamma.value(t)
    eta = params.eta.value(t)
    _check_coefficients(params, alpha, beta, gamma, eta, t)

    if params.participation < 1.0:
        if rng is None:
            raise ValueError("user sampling requires rng streams")
        present = sample_users(m, params.participation, rng.server)
    else:
        present = np.arange(m)

    # Local updates for present users; absent users carry their local state.
    z = state.z.copy()
    for i in present:
        u_i = state.u[i]
        local_out = _local_update(users[i], u_i, eta, params.local,
                                  rng.users[i] if rng is not None else None)
        z[i] = (1.0 - alpha) * u_i + alpha * local_out

    # Average only present blocks, with weights renormalized over them.
    lam_present = lam[present]
    pbar = (lam_present @ z[present]) / float(lam_present.sum())

    w = (1.0 - beta) * z + beta * pbar
    u_next = (1.0 - gamma) * state.u + gamma * w
    w_used = w
    accelerated = False

    if memory is not None and params.anderson is not None:
        cfg = params.anderson
        if cfg.mode == "u":
            memory.push(state.u.ravel(), u_next.ravel())
        else:
            # Extrapolate the averaged-model sequence; the input column is
            # the consensus mean of the state the local steps consumed.
            memory.push(consensus_mean(state.u, lam), pbar)
        pi = None
        if len(memory) > 1:
            try:
                pi = anderson_weights(memory, cfg.ridge, cfg.svd_tol)
            except DegenerateWeights:
                pi = None
        if pi is not None:
            accelerated = True
            if cfg.mode == "u":
                u_next = (memory.mapped() @ pi).reshape(m, d)
            else:
                p_hat = memory.mapped() @ pi
                w_used = (1.0 - beta) * z + beta * p_hat
                u_next = (1.0 - gamma) * state.u + gamma * w_used

    if params.ergodic_average:
        ergodic_num = state.ergodic_num + eta * w_used
        ergodic_den = state.ergodic_den + eta
    else:
        ergodic_num = state.ergodic_num
        ergodic_den = state.ergodic_den

    return IterateState(
        u=u_next, z=z, w=w_used,
        ergodic_num=ergodic_num, ergodic_den=ergodic_den,
        t=t, accelerated=accelerated,
    )


def run_scheme(problem: "FederatedProblem", params: SchemeParams, rounds: int,
               seed: int = 0, u0=None,
               on_round: Callable[[IterateState], bool | None] | None = None,
               ) -> IterateState:
    """Drive the scheme for up to ``rounds`` rounds from a fresh state.

    ``on_round`` is called with the state after every round; returning True
    stops early. Returns the final state.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    rng = RngStreams.from_seed(seed, len(problem.users))
    state = init_state(problem, u0)
    memory = AndersonMemory(params.anderson.tau) if params.anderson is not None else None
    for _ in range(rounds):
        state = round(state, problem, params, rng, memory)
        if on_round is not None and on_round(state):
            break
    return state


def fedpi_expanded_round(state: DualState, problem: "FederatedProblem",
                         eta: float,
                         spec: ProxSolverSpec = CLOSED_FORM) -> DualState:
    """One round of the expanded dual iteration with constant step eta:

        z  <- prox_eta(w + u)   blockwise
        w  <- P_H(z - u)
        u  <- u + w - z

    The updated dual stays in the complement of the consensus subspace; a
    residual above 1e-10 indicates numerical trouble and raises.
    """
    users = problem.users
    lam = problem.weights
    m = len(users)
    if eta <= 0:
        raise ValueError("eta must be positive")
    z = np.empty_like(state.w)
    v = state.w + state.u
    for i in range(m):
        z[i] = users[i].prox(v[i], eta, spec)
    w = stack_copies(consensus_mean(z - state.u, lam), m)
    u = state.u + w - z
    residual = complement_residual(u, lam)
    if residual > 1e-10:
        raise ArithmeticError(f"dual left the complement subspace: residual {residual!r}")
    return DualState(w=w, u=u, z=z)


def ergodic_average(state: IterateState) -> Array:
    """Step-size weighted running average of the w iterates."""
    if state.ergodic_den <= 0.0:
        raise ValueError("ergodic average is undefined before the first averaged round")
    return state.ergodic_num / state.ergodic_den
