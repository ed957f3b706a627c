#!/usr/bin/env python3
"""
Tests for the manufactured solution, error norms, divergence checks and the convergence report.

The full convergence study on levels 1-3 takes minutes; it only runs when
NCP3_SLOW_TESTS=1 is set in the environment.

Usage:
    python -m pytest tests/test_analysis.py
    NCP3_SLOW_TESTS=1 python -m pytest tests/test_analysis.py
"""

import csv
import io
import os
import sys
import unittest
from unittest.mock import patch

import numpy as np
import sympy

SOLVER_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if SOLVER_DIR not in sys.path:
    sys.path.insert(0, SOLVER_DIR)

from analysis import (
    DIVERGENCE_SAMPLES,
    ConvergenceReport,
    ExactSolution,
    LevelResult,
    _table_float,
    convergence_study,
    divergence_check,
    divergence_sample_points,
    error_norms,
    measure_level,
    velocity_norm_1h,
)
from element import DIVERGENCE_FORMULAS, labeled_cube_tet
from mesh import TetMesh, build_cube_mesh, derive_connectivity
from solver import SolverConfig, SolverError
from spaces import build_pressure_dofs, build_velocity_dofs, interpolate_conforming, project_pressure

SLOW = os.environ.get("NCP3_SLOW_TESTS") == "1"
DIRECT = SolverConfig(inner_solver="direct")

# Measured errors on levels 1-3: (velocity L2, velocity broken H1, pressure L2)
MEASURED_ERRORS = {
    1: (0.262e+00, 0.395e+01, 0.266e+02),
    2: (0.200e-01, 0.461e+00, 0.227e+01),
    3: (0.216e-02, 0.110e+00, 0.600e+00),
}
MEASURED_RATES = {
    2: (3.71, 3.10, 3.55),
    3: (3.21, 2.07, 1.92),
}


class CubicFlow:
    """Cubic velocity and quadratic pressure, reproduced exactly by the discrete spaces."""

    def velocity(self, points):
        x, y, z = np.moveaxis(np.asarray(points), -1, 0)
        return np.stack([x ** 3 - y * z, x * y * z, z ** 2 + y], axis=-1)

    def velocity_gradient(self, points):
        x, y, z = np.moveaxis(np.asarray(points), -1, 0)
        zero, one = np.zeros_like(x), np.ones_like(x)
        return np.stack([
            np.stack([3 * x ** 2, -z, -y], axis=-1),
            np.stack([y * z, x * z, x * y], axis=-1),
            np.stack([zero, one, 2 * z], axis=-1),
        ], axis=-2)

    def pressure(self, points):
        x, y, _ = np.moveaxis(np.asarray(points), -1, 0)
        return x ** 2 + y - 0.75


def sample_points(count, seed=5):
    return np.random.default_rng(seed).random((count, 3))


class ExactSolutionTests(unittest.TestCase):
    def setUp(self):
        self.exact = ExactSolution()

    def test_velocity_is_divergence_free(self):
        self.assertLessEqual(float(np.abs(self.exact.divergence(sample_points(100))).max()), 1e-12)

    def test_velocity_vanishes_on_boundary(self):
        points = sample_points(20)
        for axis in range(3):
            for side in (0.0, 1.0):
                face = points.copy()
                face[:, axis] = side
                self.assertLessEqual(float(np.abs(self.exact.velocity(face)).max()), 1e-14)

    def test_gradient_matches_finite_differences(self):
        h = 1e-6
        points = sample_points(10, seed=6)
        grads = self.exact.velocity_gradient(points)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = h
            column = (self.exact.velocity(points + step) - self.exact.velocity(points - step)) / (2 * h)
            np.testing.assert_allclose(column, grads[..., axis], atol=1e-6)

    def test_forcing_matches_symbolic_derivation(self):
        x, y, z = sympy.symbols("x y z")
        a = lambda t: t ** 2 * (1 - t) ** 2
        g = 2 ** 9 * a(x) * a(y) * a(z)
        u = [-sympy.diff(g, z), sympy.diff(g, z), sympy.diff(g, x) - sympy.diff(g, y)]
        p = 100 * sympy.sin(2 * sympy.pi * x)
        f = [-sum(sympy.diff(c, v, 2) for v in (x, y, z)) + sympy.diff(p, w) for c, w in zip(u, (x, y, z))]
        forcing = sympy.lambdify((x, y, z), f, "numpy")

        points = np.vstack([[0.5, 0.5, 0.5], sample_points(4, seed=7)])
        expected = np.array([forcing(*point) for point in points], dtype=float)
        np.testing.assert_allclose(self.exact.forcing(points), expected, rtol=1e-10, atol=1e-10)

    def test_pressure_has_zero_mean(self):
        nodes, weights = np.polynomial.legendre.leggauss(20)
        mean = 0.5 * weights @ self.exact.pressure(np.column_stack([0.5 * (nodes + 1), np.zeros((20, 2))]))
        self.assertAlmostEqual(float(mean), 0.0, places=12)


class ErrorNormTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.mesh = build_cube_mesh(1)
        cls.dofmap = build_velocity_dofs(cls.mesh)
        cls.pdofs = build_pressure_dofs(cls.mesh)
        cls.flow = CubicFlow()

    def test_interpolated_cubic_flow_has_zero_error(self):
        velocity = interpolate_conforming(self.dofmap, self.flow.velocity)
        pressure = project_pressure(self.mesh, self.pdofs, self.flow.pressure)
        norms = error_norms(self.mesh, self.dofmap, velocity, self.flow, self.pdofs, pressure=pressure)
        self.assertLessEqual(norms.l2_velocity, 1e-12)
        self.assertLessEqual(norms.h1_velocity, 1e-11)
        self.assertLessEqual(norms.l2_pressure, 1e-12)

    def test_pressure_error_ignores_constant_shift(self):
        pressure = project_pressure(self.mesh, self.pdofs, self.flow.pressure) + 5.0 * self.pdofs.constant_vector
        velocity = interpolate_conforming(self.dofmap, self.flow.velocity)
        norms = error_norms(self.mesh, self.dofmap, velocity, self.flow, self.pdofs, pressure=pressure)
        # sqrt of a cancelled difference, so only about half the digits survive
        self.assertLessEqual(norms.l2_pressure, 1e-6)

    def test_missing_pressure_reports_zero(self):
        norms = error_norms(self.mesh, self.dofmap, np.zeros(self.dofmap.n_dofs), self.flow)
        self.assertEqual(norms.l2_pressure, 0.0)
        self.assertGreater(norms.l2_velocity, 0.0)

    def test_threaded_norms_match_serial(self):
        velocity = interpolate_conforming(self.dofmap, lambda p: np.sin(p))
        with patch("assembly.CHUNK_SIZE", 4):
            threaded = error_norms(self.mesh, self.dofmap, velocity, self.flow, threads=3)
        serial = error_norms(self.mesh, self.dofmap, velocity, self.flow)
        self.assertAlmostEqual(threaded.h1_velocity, serial.h1_velocity, places=12)

    def test_mesh_norm_of_constant_field(self):
        velocity = interpolate_conforming(self.dofmap, lambda p: np.tile([1.0, 0.0, 0.0], (len(p), 1)))
        self.assertAlmostEqual(velocity_norm_1h(self.mesh, self.dofmap, velocity), 1.0, places=12)
        self.assertEqual(velocity_norm_1h(self.mesh, self.dofmap, np.zeros(self.dofmap.n_dofs)), 0.0)


class DivergenceCheckTests(unittest.TestCase):
    def test_single_bubble_on_labeled_tet(self):
        verts = labeled_cube_tet()
        mesh = derive_connectivity(TetMesh(verts, np.array([[0, 1, 2, 3]])))
        dofmap = build_velocity_dofs(mesh)
        points = divergence_sample_points(1)[0] @ verts
        for i in (0, 4, 8):
            coeffs = np.zeros(dofmap.n_dofs)
            coeffs[dofmap.bubble_dofs(0)[i]] = 1.0
            expected = float(np.abs(DIVERGENCE_FORMULAS[i](*points.T)).max())
            self.assertAlmostEqual(divergence_check(mesh, dofmap, coeffs), expected, places=12)

    def test_sample_points_differ_between_tets(self):
        points = divergence_sample_points(3)
        self.assertEqual(points.shape, (3, DIVERGENCE_SAMPLES, 4))
        np.testing.assert_allclose(points.sum(axis=-1), 1.0, atol=1e-14)
        self.assertTrue((points >= 0.0).all())
        self.assertFalse(np.allclose(points[0], points[1]))
        self.assertFalse(np.allclose(points[1], points[2]))
        np.testing.assert_array_equal(points, divergence_sample_points(3))

    def test_bubble_on_second_tet_uses_its_own_points(self):
        verts = labeled_cube_tet()
        shifted = verts + np.array([2.0, 0.0, 0.0])
        mesh = derive_connectivity(TetMesh(np.vstack([verts, shifted]), np.array([[0, 1, 2, 3], [4, 5, 6, 7]])))
        dofmap = build_velocity_dofs(mesh)
        coeffs = np.zeros(dofmap.n_dofs)
        coeffs[dofmap.bubble_dofs(1)[0]] = 1.0
        points = divergence_sample_points(2)[1] @ verts
        expected = float(np.abs(DIVERGENCE_FORMULAS[0](*points.T)).max())
        self.assertAlmostEqual(divergence_check(mesh, dofmap, coeffs), expected, places=12)

    def test_zero_velocity(self):
        mesh = build_cube_mesh(1)
        dofmap = build_velocity_dofs(mesh)
        self.assertEqual(divergence_check(mesh, dofmap, np.zeros(dofmap.n_dofs)), 0.0)


class ReportTests(unittest.TestCase):
    def make_row(self, level, errors, iterations=60):
        row = LevelResult(level=level, tets=12 * 8 ** (level - 1), velocity_dofs=100 * level,
                          pressure_dofs=10 * level, uzawa_iterations=iterations)
        row.l2_velocity, row.h1_velocity, row.l2_pressure = errors
        return row

    def test_table_float_format(self):
        self.assertEqual(_table_float(0.0168), "0.168E-01")
        self.assertEqual(_table_float(29.5), "0.295E+02")
        self.assertEqual(_table_float(0.9999), "0.100E+01")
        self.assertEqual(_table_float(float("nan")), "-")

    def test_rates(self):
        report = ConvergenceReport()
        report.add(self.make_row(1, (0.16, 4.0, 8.0)))
        report.add(self.make_row(2, (0.01, 0.5, 2.0)))
        self.assertEqual(report.rows[0].rates, (0.0, 0.0, 0.0))
        np.testing.assert_allclose(report.rows[1].rates, (4.0, 3.0, 2.0))
        self.assertTrue(report.all_solved)

    def test_markdown_layout(self):
        report = ConvergenceReport()
        report.add(self.make_row(1, (0.231, 3.56, 29.5)))
        report.add(self.make_row(2, (0.0168, 0.421, 1.88)))
        lines = report.to_markdown().splitlines()
        self.assertEqual(len(lines), 4)
        self.assertIn("0.168E-01", lines[3])
        self.assertIn("3.8", lines[3])
        self.assertIn(" 0.0 ", lines[2])
        self.assertNotIn("β_h", lines[0])

    def test_csv_round_trip(self):
        report = ConvergenceReport()
        row = self.make_row(1, (0.231, 3.56, 29.5))
        row.infsup = 0.25
        row.divergence = 2.5e-12
        row.velocity_norm = 3.75
        report.add(row)
        records = list(csv.DictReader(io.StringIO(report.to_csv())))
        self.assertEqual(len(records), 1)
        self.assertAlmostEqual(float(records[0]["divergence"]), 2.5e-12)
        self.assertAlmostEqual(float(records[0]["velocity_norm_1h"]), 3.75)
        self.assertEqual(records[0]["rate_l2_velocity"], "0.000")
        self.assertAlmostEqual(float(records[0]["l2_pressure"]), 29.5)
        self.assertAlmostEqual(float(records[0]["infsup"]), 0.25)

    def test_failed_level_is_reported(self):
        with patch("analysis.solve_level", side_effect=SolverError("no convergence")):
            row = measure_level(1)
        self.assertFalse(row.solved)
        self.assertEqual(row.status, "failed: no convergence")
        report = ConvergenceReport()
        report.add(row)
        self.assertFalse(report.all_solved)
        self.assertIn("failed: no convergence", report.to_markdown())


class ConvergenceStudyTests(unittest.TestCase):
    def test_rejects_empty_study(self):
        with self.assertRaises(ValueError):
            convergence_study(0)

    def test_two_levels(self):
        report = convergence_study(2, DIRECT)
        self.assertEqual(len(report.rows), 2)
        self.assertTrue(report.all_solved)
        first, second = report.rows
        self.assertEqual(first.rates, (0.0, 0.0, 0.0))
        self.assertLess(second.l2_velocity, first.l2_velocity / 4.0)
        self.assertLess(second.h1_velocity, first.h1_velocity / 2.0)
        self.assertEqual(second.tets, 96)
        self.assertGreater(second.velocity_norm, 0.0)
        self.assertLessEqual(second.divergence, 1e-6 * second.velocity_norm)
        self.assertGreater(second.uzawa_iterations, 1)
        self.assertLess(second.uzawa_iterations, 300)

    @unittest.skipUnless(SLOW, "set NCP3_SLOW_TESTS=1 to run the level 1-3 study")
    def test_measured_error_profile(self):
        report = convergence_study(3, SolverConfig(), threads=2)
        self.assertTrue(report.all_solved)
        for row in report.rows:
            for measured, expected in zip((row.l2_velocity, row.h1_velocity, row.l2_pressure),
                                          MEASURED_ERRORS[row.level]):
                self.assertAlmostEqual(measured, expected, delta=0.1 * expected, msg=f"level {row.level}")
            self.assertGreaterEqual(row.uzawa_iterations, 20)
            self.assertLessEqual(row.uzawa_iterations, 300)
            self.assertGreater(row.velocity_norm, 0.0)
            if row.level >= 2:
                self.assertLessEqual(row.divergence, 1e-6 * row.velocity_norm)
                for measured, expected in zip(row.rates, MEASURED_RATES[row.level]):
                    self.assertAlmostEqual(measured, expected, delta=0.2, msg=f"level {row.level}")


if __name__ == "__main__":
    unittest.main()
