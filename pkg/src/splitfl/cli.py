"""Reproducible experiment driver.

A run is described by an INI config file and/or command-line flags (flags
win). For every seed in the replicate list the driver regenerates the
problem, computes its reference solution, iterates the scheme with metric
capture at a fixed cadence, and writes one CSV stream per seed plus a JSON
summary with the min/max/mean envelope of the final gaps.

Seeding: each replicate seed is both the generation seed and the master
seed of the run's random streams; the master seed spawns one server stream
and one child stream per user (by user index). The derivation is recorded
in the summary under ``seed_derivation``.

Reruns of the same config and seed reproduce every CSV column byte for
byte except ``wall_ms``, which records real elapsed milliseconds since the
seed's run started and is inherently nondeterministic.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .anderson import AndersonConfig, AndersonMemory
from .experiments import (
    FederatedProblem,
    GenSpec,
    RoundMetrics,
    compute_metrics,
    desk_least_squares,
    generate,
)
from .losses import GRADIENT_DESCENT, Logistic
from .scheme import (
    LocalSolver,
    RngStreams,
    Schedule,
    SchemeParams,
    init_state,
    preset,
    round as scheme_round,
)

__all__ = ["RunConfig", "RunRecord", "parse_config", "run", "main"]

DIVERGENCE_GAP = 1e12
SCHEMA_VERSION = 1
SEED_DERIVATION = "SeedSequence(seed).spawn(m+1): child 0 = server, child 1+i = user i"

_DEFAULT_GEN = desk_least_squares()


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved description of one experiment."""

    gen: GenSpec
    preset: str = "FedProx"
    k: int = 1
    eta: Schedule = Schedule.constant(1e-2)
    alpha: Schedule | None = None
    beta: Schedule | None = None
    gamma: Schedule | None = None
    local: str | None = None  # exact_prox | iterative_prox | grad_k
    batch: int | None = None
    participation: float = 1.0
    tau: int | None = None
    anderson_mode: str = "u"
    anderson_ridge: float | None = None
    anderson_svd_tol: float = 1e-12
    ergodic_average: bool = False
    rounds: int = 1000
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    cadence: int = 1

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("run.rounds must be >= 1")
        if not self.seeds:
            raise ValueError("run.seeds must list at least one seed")
        if self.cadence < 1:
            raise ValueError("run.cadence must be >= 1")


@dataclass
class RunRecord:
    """Everything the driver learned from one config: metrics and summary."""

    config: dict
    config_hash: str
    per_seed: dict[int, list[RoundMetrics]]
    summary: dict


# --- config parsing ----------------------------------------------------------

_SECTIONS = {
    "problem": {"kind", "m", "d", "n_i", "noise_var", "hetero_shift"},
    "scheme": {"preset", "k", "eta", "alpha", "beta", "gamma", "local",
               "batch", "participation", "ergodic_average"},
    "anderson": {"tau", "mode", "ridge", "svd_tol"},
    "run": {"rounds", "seeds", "out", "cadence"},
}


def _config_error(path: str, message: str) -> ValueError:
    return ValueError(f"config error at {path}: {message}")


def _parse_bool(path: str, text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise _config_error(path, f"expected a boolean, got {text!r}")


def parse_config(path: str | Path | None = None,
                 flags: dict | None = None) -> RunConfig:
    """Resolve an INI config file and flag overrides into a RunConfig.

    Unknown keys, malformed values and contradictory preset overrides are
    rejected with the offending section.key in the message.
    """
    values: dict[str, dict[str, str]] = {s: {} for s in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ValueError(f"config file {path!r} not found")
        found_keys = 0
        for section in parser.sections():
            if section not in _SECTIONS:
                raise _config_error(section, "unknown section")
            for key, val in parser.items(section):
                if key not in _SECTIONS[section]:
                    raise _config_error(f"{section}.{key}", "unknown key")
                values[section][key] = val
                found_keys += 1
        if found_keys == 0:
            raise ValueError(
                "config file is empty; required keys: problem.kind, scheme.preset, "
                "scheme.eta, run.rounds, run.seeds"
            )

    flags = dict(flags or {})
    flag_to_section = {
        "problem": ("problem", "kind"), "m": ("problem", "m"),
        "d": ("problem", "d"), "n": ("problem", "n_i"),
        "noise_var": ("problem", "noise_var"),
        "hetero_shift": ("problem", "hetero_shift"),
        "preset": ("scheme", "preset"), "k": ("scheme", "k"),
        "eta": ("scheme", "eta"), "alpha": ("scheme", "alpha"),
        "beta": ("scheme", "beta"), "gamma": ("scheme", "gamma"),
        "local": ("scheme", "local"), "batch": ("scheme", "batch"),
        "participation": ("scheme", "participation"),
        "ergodic": ("scheme", "ergodic_average"),
        "tau": ("anderson", "tau"), "anderson_mode": ("anderson", "mode"),
        "rounds": ("run", "rounds"), "seeds": ("run", "seeds"),
        "out": ("run", "out"), "cadence": ("run", "cadence"),
    }
    for flag, value in flags.items():
        if value is None:
            continue
        if flag not in flag_to_section:
            raise _config_error(flag, "unknown flag")
        section, key = flag_to_section[flag]
        values[section][key] = str(value)

    def get(section: str, key: str, default: str | None = None) -> str | None:
        return values[section].get(key, default)

    def parse_typed(section: str, key: str, kind, default):
        raw = get(section, key)
        if raw is None:
            return default
        try:
            return kind(raw)
        except ValueError as exc:
            raise _config_error(f"{section}.{key}", str(exc)) from exc

    kind = get("problem", "kind", _DEFAULT_GEN.kind)
    if kind not in ("least_squares", "logistic"):
        raise _config_error("problem.kind", f"unknown kind {kind!r}")
    default_m = 5 if kind == "logistic" else _DEFAULT_GEN.m
    gen = GenSpec(
        kind=kind,
        m=parse_typed("problem", "m", int, default_m),
        d=parse_typed("problem", "d", int, _DEFAULT_GEN.d),
        n_i=parse_typed("problem", "n_i", int, _DEFAULT_GEN.n_i),
        noise_var=parse_typed("problem", "noise_var", float, _DEFAULT_GEN.noise_var),
        hetero_shift=parse_typed("problem", "hetero_shift", float,
                                 _DEFAULT_GEN.hetero_shift),
    )

    def parse_schedule(key: str, default: Schedule | None) -> Schedule | None:
        raw = get("scheme", key)
        if raw is None:
            return default
        try:
            return Schedule.parse(raw)
        except ValueError as exc:
            raise _config_error(f"scheme.{key}", str(exc)) from exc

    preset_name = get("scheme", "preset", "FedProx")
    k = parse_typed("scheme", "k", int, None)
    local = get("scheme", "local")
    if local is not None and local not in ("exact_prox", "iterative_prox", "grad_k"):
        raise _config_error("scheme.local", f"unknown local solver {local!r}")
    grad_preset = preset_name.lower() in ("fedavg", "reflectgrad")
    if k is not None and not grad_preset and local not in ("grad_k",):
        raise _config_error(
            "scheme.k",
            f"k is only consumed by gradient-step local solvers; preset "
            f"{preset_name!r} uses a proximal local step (set scheme.local = grad_k "
            "to override)",
        )
    batch = parse_typed("scheme", "batch", int, None)
    if batch is not None and not (grad_preset or local == "grad_k"):
        raise _config_error(
            "scheme.batch", "minibatches require a gradient-step local solver")

    tau = parse_typed("anderson", "tau", int, None)
    mode = get("anderson", "mode", "u")
    if mode == "proj":
        mode = "projected"
    if mode not in ("u", "projected"):
        raise _config_error("anderson.mode", f"expected u or proj, got {mode!r}")
    ridge = parse_typed("anderson", "ridge", float, None)
    svd_tol = parse_typed("anderson", "svd_tol", float, 1e-12)

    seeds_raw = get("run", "seeds", "0")
    try:
        seeds = tuple(int(s) for s in seeds_raw.split(",") if s.strip() != "")
    except ValueError as exc:
        raise _config_error("run.seeds", f"malformed seed list {seeds_raw!r}") from exc

    erg_raw = get("scheme", "ergodic_average")
    try:
        return RunConfig(
            gen=gen,
            preset=preset_name,
            k=k if k is not None else 1,
            eta=parse_schedule("eta", Schedule.constant(1e-2)),
            alpha=parse_schedule("alpha", None),
            beta=parse_schedule("beta", None),
            gamma=parse_schedule("gamma", None),
            local=local,
            batch=batch,
            participation=parse_typed("scheme", "participation", float, 1.0),
            tau=tau,
            anderson_mode=mode,
            anderson_ridge=ridge,
            anderson_svd_tol=svd_tol,
            ergodic_average=(_parse_bool("scheme.ergodic_average", erg_raw)
                             if erg_raw is not None else False),
            rounds=parse_typed("run", "rounds", int, 1000),
            seeds=seeds,
            out=get("run", "out", "runs"),
            cadence=parse_typed("run", "cadence", int, 1),
        )
    except ValueError as exc:
        if str(exc).startswith("config error"):
            raise
        raise ValueError(f"config error: {exc}") from exc


def _scheme_params(config: RunConfig, problem: FederatedProblem) -> SchemeParams:
    local = None
    if config.local == "exact_prox":
        local = LocalSolver.exact_prox()
    elif config.local == "iterative_prox":
        local = LocalSolver.iterative_prox()
    elif config.local == "grad_k":
        local = LocalSolver.grad_k(config.k, config.batch)
    elif config.local is None and any(isinstance(u, Logistic) for u in problem.users):
        # No closed-form prox for logistic losses: approximate iteratively.
        local = LocalSolver.iterative_prox(GRADIENT_DESCENT)
    anderson = None
    if config.tau is not None:
        anderson = AndersonConfig(tau=config.tau, mode=config.anderson_mode,
                                  ridge=config.anderson_ridge,
                                  svd_tol=config.anderson_svd_tol)
    params = preset(
        config.preset, eta=config.eta, k=config.k, local=local,
        participation=config.participation, anderson=anderson,
        ergodic_average=config.ergodic_average,
    )
    if config.batch is not None and params.local.kind == "grad_k":
        params = dataclasses.replace(
            params, local=LocalSolver.grad_k(params.local.k, config.batch))
    overrides = {}
    for name in ("alpha", "beta", "gamma"):
        sched = getattr(config, name)
        if sched is not None:
            overrides[name] = sched
    if overrides:
        params = dataclasses.replace(params, **overrides)
    return params


# --- execution ----------------------------------------------------------------

_CSV_HEADER = ("round", "objective", "gap", "regularized_gap",
               "consensus_residual", "eta", "wall_ms", "accelerated")


def _metric_row(mm: RoundMetrics) -> tuple:
    return (mm.t, repr(mm.objective), repr(mm.optimality_gap),
            "" if mm.regularized_gap is None else repr(mm.regularized_gap),
            repr(mm.consensus_residual), repr(mm.eta), repr(mm.wall_ms),
            int(mm.accelerated))


def _capture_rounds(rounds: int, cadence: int) -> list[int]:
    ts = list(range(cadence, rounds + 1, cadence))
    if not ts or ts[-1] != rounds:
        ts.append(rounds)
    return ts


def _run_seed(config: RunConfig, seed: int, out_dir: Path) -> dict:
    problem = generate(dataclasses.replace(config.gen, seed=seed))
    params = _scheme_params(config, problem)
    if params.local.batch is not None:
        n_min = min(u.n_samples or 0 for u in problem.users)
        if params.local.batch > n_min:
            raise ValueError(
                f"config error at scheme.batch: batch {params.local.batch} exceeds "
                f"the smallest user sample count {n_min}")

    capture = set(_capture_rounds(config.rounds, config.cadence))
    rng = RngStreams.from_seed(seed, problem.m)
    state = init_state(problem)
    memory = AndersonMemory(params.anderson.tau) if params.anderson else None
    metrics: list[RoundMetrics] = []
    diverged = False
    started = time.perf_counter()
    for t in range(1, config.rounds + 1):
        state = scheme_round(state, problem, params, rng, memory)
        if t in capture:
            wall_ms = (time.perf_counter() - started) * 1e3
            mm = compute_metrics(state, problem, params, t, wall_ms=wall_ms)
            metrics.append(mm)
            if not np.isfinite(mm.optimality_gap) or mm.optimality_gap > DIVERGENCE_GAP:
                diverged = True
                break

    csv_path = out_dir / f"seed_{seed}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for mm in metrics:
            writer.writerow(_metric_row(mm))
    final = metrics[-1]
    return {
        "seed": seed,
        "diverged": diverged,
        "rounds_run": final.t,
        "final_gap": final.optimality_gap,
        "final_consensus_residual": final.consensus_residual,
        "csv": csv_path.name,
        "_metrics": metrics,
    }


def _config_dict(config: RunConfig) -> dict:
    doc = dataclasses.asdict(config)
    doc["gen"] = dict(vars(config.gen))
    for key in ("eta", "alpha", "beta", "gamma"):
        sched = getattr(config, key)
        doc[key] = None if sched is None else sched.spec_string()
    doc["seeds"] = list(config.seeds)
    return doc


def run(config: RunConfig) -> RunRecord:
    """Execute the configured run for every seed and write CSV/JSON outputs."""
    out_dir = Path(config.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_doc = _config_dict(config)
    config_hash = hashlib.sha256(
        json.dumps(config_doc, sort_keys=True).encode()).hexdigest()

    results: list[dict] = []
    with ThreadPoolExecutor(max_workers=min(4, len(config.seeds))) as pool:
        futures = [pool.submit(_run_seed, config, seed, out_dir)
                   for seed in config.seeds]
        for future in futures:
            results.append(future.result())

    per_seed = {r["seed"]: r.pop("_metrics") for r in results}
    final_gaps = [r["final_gap"] for r in results]
    summary = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "config": config_doc,
        "config_hash": config_hash,
        "seed_derivation": SEED_DERIVATION,
        "seeds": results,
        "final_gap": {
            "mean": float(np.mean(final_gaps)),
            "min": float(np.min(final_gaps)),
            "max": float(np.max(final_gaps)),
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    return RunRecord(config=config_doc, config_hash=config_hash,
                     per_seed=per_seed, summary=summary)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="splitfl",
        description="Run federated operator-splitting experiments on synthetic problems.",
    )
    parser.add_argument("--config", help="INI config file (flags override it)")
    parser.add_argument("--preset", help="FedAvg|FedProx|FedSplit|FedPi|FedRP|"
                                         "ReflectGrad|ReflectProx")
    parser.add_argument("--rounds", type=int)
    parser.add_argument("--eta", help="schedule spec, e.g. constant:1e-5, inv_t:1.0, "
                                      "exp:100:0.5:500, inv_log:100")
    parser.add_argument("--k", type=int, help="local gradient steps")
    parser.add_argument("--batch", type=int, help="local minibatch size")
    parser.add_argument("--participation", type=float)
    parser.add_argument("--tau", type=int, help="Anderson memory size")
    parser.add_argument("--anderson-mode", dest="anderson_mode", choices=("u", "proj"))
    parser.add_argument("--seeds", help="comma-separated replicate seeds")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--cadence", type=int, help="rounds between metric rows")
    parser.add_argument("--ergodic", action="store_const", const="true",
                        help="enable step-size weighted iterate averaging")
    parser.add_argument("--problem", choices=("least_squares", "logistic"))
    parser.add_argument("--m", type=int, help="number of users")
    parser.add_argument("--d", type=int, help="model dimension")
    parser.add_argument("--n", type=int, help="samples per user")
    parser.add_argument("--noise-var", dest="noise_var", type=float)
    parser.add_argument("--hetero-shift", dest="hetero_shift", type=float)
    args = parser.parse_args(argv)

    flags = {k: v for k, v in vars(args).items() if k != "config"}
    try:
        config = parse_config(args.config, flags)
        record = run(config)
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    diverged = [r["seed"] for r in record.summary["seeds"] if r["diverged"]]
    gap = record.summary["final_gap"]
    print(f"wrote {len(record.per_seed)} seed stream(s) to {config.out}; "
          f"final gap mean={gap['mean']:.3e} min={gap['min']:.3e} max={gap['max']:.3e}")
    if diverged:
        print(f"error: seeds diverged: {diverged}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
