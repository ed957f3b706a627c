#!/usr/bin/env python3
"""
Tests for conjugate gradients, the Uzawa solver and the inf-sup estimate.

The level 3 stability checks take minutes; they only run when
NCP3_SLOW_TESTS=1 is set in the environment.

Usage:
    python -m pytest tests/test_solver.py
    NCP3_SLOW_TESTS=1 python -m pytest tests/test_solver.py
"""

import os
import sys
import unittest
from dataclasses import replace
from unittest.mock import patch

import numpy as np
import scipy.linalg
import scipy.sparse as sp

SOLVER_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if SOLVER_DIR not in sys.path:
    sys.path.insert(0, SOLVER_DIR)

from analysis import prepare_level
from assembly import assemble_system
from mesh import build_cube_mesh
from solver import (
    IndefiniteMatrixError,
    InnerSolverError,
    SolverConfig,
    SolverError,
    estimate_infsup,
    free_stiffness,
    infsup_constant,
    is_positive_definite,
    pcg,
    schur_rayleigh_quotient,
    solve_stokes,
)
from spaces import build_pressure_dofs, build_velocity_dofs

SLOW = os.environ.get("NCP3_SLOW_TESTS") == "1"
DIRECT = SolverConfig(inner_solver="direct")


def laplacian_1d(n):
    return sp.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]).tocsr()


class SolverConfigTests(unittest.TestCase):
    def test_defaults(self):
        config = SolverConfig()
        self.assertEqual(config.outer_tol, 1e-10)
        self.assertEqual(config.inner_tol, 1e-12)
        self.assertEqual(config.inner_solver, "cg")

    def test_invalid_values(self):
        for kwargs in ({"outer_tol": 0.0}, {"inner_tol": 2.0}, {"outer_tol": 1e-10, "inner_tol": 1e-10},
                       {"max_outer": 0}, {"inner_solver": "gmres"}, {"preconditioner": "ilu"}):
            with self.assertRaises(ValueError, msg=str(kwargs)):
                SolverConfig(**kwargs)


class PcgTests(unittest.TestCase):
    def test_solves_spd_system(self):
        A = laplacian_1d(50)
        rhs = np.random.default_rng(1).standard_normal(50)
        x, iterations = pcg(A, rhs, tol=1e-12, maxiter=200)
        self.assertLessEqual(np.linalg.norm(A @ x - rhs), 1e-11 * np.linalg.norm(rhs))
        self.assertLessEqual(iterations, 50)

    def test_jacobi_preconditioner_and_callable_operator(self):
        A = laplacian_1d(30) + sp.diags(np.linspace(1.0, 10.0, 30))
        rhs = np.ones(30)
        inverse_diagonal = 1.0 / A.diagonal()
        x, _ = pcg(lambda v: A @ v, rhs, tol=1e-12, maxiter=200, preconditioner=lambda r: inverse_diagonal * r)
        np.testing.assert_allclose(A @ x, rhs, atol=1e-10)

    def test_zero_rhs(self):
        x, iterations = pcg(laplacian_1d(5), np.zeros(5), tol=1e-12, maxiter=10)
        self.assertEqual(iterations, 0)
        self.assertFalse(x.any())

    def test_indefinite_matrix(self):
        with self.assertRaises(IndefiniteMatrixError):
            pcg(sp.diags([1.0, -1.0]), np.array([0.0, 1.0]), tol=1e-12, maxiter=10)

    def test_iteration_limit(self):
        with self.assertRaises(InnerSolverError):
            pcg(laplacian_1d(100), np.ones(100), tol=1e-14, maxiter=3)


class PositiveDefiniteTests(unittest.TestCase):
    def test_witness(self):
        self.assertTrue(is_positive_definite(laplacian_1d(20)))
        self.assertFalse(is_positive_definite(sp.diags([1.0, -1.0, 2.0])))
        self.assertFalse(is_positive_definite(sp.csr_matrix(np.array([[1.0, 2.0], [0.0, 1.0]]))))


class UzawaTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        _, cls.vdofs, cls.pdofs, cls.system = prepare_level(1)

    def test_direct_solution_satisfies_momentum_equation(self):
        solution = solve_stokes(self.system, DIRECT)
        A, B = self.system.stiffness, self.system.divergence
        residual = A @ solution.velocity - B.T @ solution.pressure - self.system.load
        self.assertLessEqual(np.linalg.norm(residual), 1e-8 * np.linalg.norm(self.system.load))
        self.assertAlmostEqual(self.pdofs.mean(solution.pressure), 0.0, delta=1e-12)
        self.assertGreater(solution.uzawa_iterations, 0)
        self.assertEqual(len(solution.residual_history), solution.uzawa_iterations + 1)

    def test_constraint_is_satisfied(self):
        solution = solve_stokes(self.system, DIRECT)
        B, M = self.system.divergence, self.system.pressure_mass
        defect = B @ solution.velocity
        # M^-1 norm of the discrete divergence
        size = float(np.sqrt(defect @ scipy.linalg.solve(M.toarray(), defect)))
        self.assertLessEqual(size, 1e-8 * solution.residual_history[0])

    def test_inner_cg_matches_direct(self):
        direct = solve_stokes(self.system, DIRECT)
        iterative = solve_stokes(self.system, SolverConfig())
        scale = np.linalg.norm(direct.velocity)
        self.assertLessEqual(np.linalg.norm(direct.velocity - iterative.velocity), 1e-7 * scale)
        self.assertGreater(iterative.inner_iterations, 0)

    def test_zero_forcing_gives_zero_solution(self):
        quiet = replace(self.system, load=np.zeros_like(self.system.load))
        solution = solve_stokes(quiet, DIRECT)
        self.assertEqual(solution.uzawa_iterations, 0)
        self.assertFalse(solution.velocity.any())
        self.assertFalse(solution.pressure.any())

    def test_unconstrained_system_rejected(self):
        mesh = build_cube_mesh(1)
        vdofs, pdofs = build_velocity_dofs(mesh), build_pressure_dofs(mesh)
        raw = assemble_system(mesh, vdofs, pdofs, lambda p: np.ones_like(p))
        with self.assertRaises(SolverError):
            solve_stokes(raw)

    def test_residual_history_is_non_increasing(self):
        for system in (self.system, prepare_level(2)[3]):
            history = solve_stokes(system, DIRECT).residual_history
            self.assertGreater(len(history), 2)
            for before, after in zip(history, history[1:]):
                self.assertLessEqual(after, before * (1.0 + 1e-6))

    def test_iteration_count_is_deterministic(self):
        first = solve_stokes(self.system, DIRECT)
        second = solve_stokes(self.system, DIRECT)
        self.assertEqual(first.uzawa_iterations, second.uzawa_iterations)
        np.testing.assert_allclose(second.velocity, first.velocity, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(second.pressure, first.pressure, rtol=1e-12, atol=1e-14)

    def test_constant_pressure_has_zero_rayleigh_quotient(self):
        quotient = schur_rayleigh_quotient(self.system, self.pdofs.constant_vector, DIRECT)
        self.assertLessEqual(abs(quotient), 1e-16)


class InfSupTests(unittest.TestCase):
    def test_estimate_matches_dense_generalized_eigenproblem(self):
        _, _, pdofs, system = prepare_level(1)
        A = system.stiffness.toarray()
        B = system.divergence.toarray()
        M = system.pressure_mass.toarray()
        schur = B @ np.linalg.solve(A, B.T)
        basis = scipy.linalg.null_space(pdofs.mean_functional[None, :])
        expected = scipy.linalg.eigh(basis.T @ schur @ basis, basis.T @ M @ basis, eigvals_only=True)[0]

        config = SolverConfig(inner_solver="direct", eig_tol=1e-10, eig_block=8, max_eig_iterations=2000)
        estimate = estimate_infsup(system, config)
        self.assertGreater(expected, 0.0)
        self.assertAlmostEqual(estimate.eigenvalue, expected, delta=1e-6 * expected)
        self.assertAlmostEqual(estimate.beta, np.sqrt(estimate.eigenvalue), places=12)
        self.assertAlmostEqual(infsup_constant(system, config), estimate.beta, delta=1e-6 * estimate.beta)

    def test_schur_right_hand_sides_annihilate_constants(self):
        _, _, pdofs, system = prepare_level(1)
        config = SolverConfig(inner_solver="direct", eig_block=4, max_eig_iterations=2000)
        with patch("solver.pcg", wraps=pcg) as spy:
            estimate = estimate_infsup(system, config)
        self.assertGreater(estimate.beta, 0.0)
        self.assertGreater(spy.call_count, 0)
        for call in spy.call_args_list:
            rhs = call.args[1]
            scale = max(float(np.abs(rhs).max()), 1.0)
            self.assertLessEqual(abs(float(pdofs.constant_vector @ rhs)), 1e-12 * scale * len(rhs))

    def test_iterative_inner_solver_agrees_with_direct(self):
        _, _, _, system = prepare_level(1)
        direct = estimate_infsup(system, SolverConfig(inner_solver="direct", eig_block=8, max_eig_iterations=2000))
        iterative = estimate_infsup(system, SolverConfig(eig_block=8, max_eig_iterations=2000))
        self.assertAlmostEqual(iterative.beta, direct.beta, delta=1e-5 * direct.beta)

    @unittest.skipUnless(SLOW, "set NCP3_SLOW_TESTS=1 to run the level 1-3 inf-sup study")
    def test_infsup_is_bounded_below_on_levels_one_to_three(self):
        config = SolverConfig(inner_solver="direct", eig_block=8, max_eig_iterations=2000)
        betas = [estimate_infsup(prepare_level(level)[3], config).beta for level in (1, 2, 3)]
        self.assertTrue(all(beta > 0.0 for beta in betas))
        self.assertLessEqual(max(betas) / min(betas), 1.5)


class StiffnessWitnessTests(unittest.TestCase):
    def test_levels_one_and_two(self):
        for level in (1, 2):
            self.assertTrue(is_positive_definite(free_stiffness(prepare_level(level)[3])), msg=f"level {level}")

    @unittest.skipUnless(SLOW, "set NCP3_SLOW_TESTS=1 to run the level 3 witness")
    def test_level_three(self):
        self.assertTrue(is_positive_definite(free_stiffness(prepare_level(3)[3])))


if __name__ == "__main__":
    unittest.main()
