"""Shared fixtures: small deterministic problem instances."""

from __future__ import annotations

import numpy as np
import pytest

import splitfl as sf


@pytest.fixture(scope="session")
def desk_ls():
    """Desk-scale least-squares problem (m=10, d=20, n_i=200)."""
    return sf.generate(sf.desk_least_squares(seed=2024))


@pytest.fixture(scope="session")
def small_ls():
    """Small least-squares problem for fast per-round comparisons."""
    return sf.generate(sf.GenSpec("least_squares", m=4, d=6, n_i=30, seed=7))


@pytest.fixture(scope="session")
def tightness_pair():
    """The two scalar users f(w) = (w+1)^2/2 and f(w) = (w-1)^2, weights 1/2.

    The weighted objective is minimized at w = 1/3.
    """
    users = [
        sf.ScalarShiftedQuadratic(1.0, -1.0),
        sf.ScalarShiftedQuadratic(2.0, 1.0),
    ]
    problem = sf.FederatedProblem(users, np.array([0.5, 0.5]), 1)
    problem.true_solution = np.array([1.0 / 3.0])
    problem.true_optimum = problem.objective(problem.true_solution)
    return problem


@pytest.fixture(scope="session")
def homogeneous_pair():
    """Scalar users f(w) = (w+1)^2/2 and f(w) = (w-1)^2/2, weights 1/2."""
    users = [
        sf.ScalarShiftedQuadratic(1.0, -1.0),
        sf.ScalarShiftedQuadratic(1.0, 1.0),
    ]
    problem = sf.FederatedProblem(users, np.array([0.5, 0.5]), 1)
    problem.true_solution = np.array([0.0])
    problem.true_optimum = problem.objective(problem.true_solution)
    return problem
