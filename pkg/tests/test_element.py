#!/usr/bin/env python3
"""
Tests for the nine mapped divergence bubbles of a physical tetrahedron.

Usage:
    python -m pytest tests/test_element.py
"""

import os
import sys
import unittest

import numpy as np

SOLVER_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if SOLVER_DIR not in sys.path:
    sys.path.insert(0, SOLVER_DIR)

from element import (
    CUBE_LABEL_VERTICES,
    DIVERGENCE_FORMULAS,
    N_BUBBLES,
    AffineMap,
    ElementBubbleSet,
    SingularMapError,
    affine_maps,
    barycentric_coordinates,
    bubble_divergences,
    bubble_face_moments,
    bubble_gradients,
    divergence_gram,
    gram_rank_and_condition,
    labeled_cube_tet,
    orderings,
    piola_bubble,
    search_cube_numbering,
)
from reference import REFERENCE_BUBBLE, eval_bubble


def random_tet(rng):
    """Positively oriented tet with a reasonable shape."""
    while True:
        verts = rng.random((4, 3))
        det = np.linalg.det(verts[1:] - verts[0])
        if abs(det) > 0.05:
            if det < 0:
                verts[[1, 2]] = verts[[2, 1]]
            return verts


def points_inside(verts, count, rng):
    return rng.dirichlet(np.ones(4), size=count) @ verts


class OrderingTests(unittest.TestCase):
    def test_nine_distinct_permutations(self):
        perms = orderings()
        self.assertEqual(len(perms), N_BUBBLES)
        self.assertEqual(len(set(perms)), 9)
        for perm in perms:
            self.assertEqual(sorted(perm), [0, 1, 2, 3])
        self.assertEqual(perms[0], (0, 1, 2, 3))

    def test_map_determinant_is_six_volumes(self):
        rng = np.random.default_rng(1)
        verts = random_tet(rng)
        volume = abs(np.linalg.det(verts[1:] - verts[0])) / 6.0
        for amap in affine_maps(verts):
            self.assertAlmostEqual(abs(amap.determinant), 6.0 * volume, places=13)
            np.testing.assert_allclose(amap.jacobian @ amap.inverse, np.eye(3), atol=1e-12)

    def test_barycentric_coordinates_of_vertices(self):
        verts = random_tet(np.random.default_rng(2))
        np.testing.assert_allclose(barycentric_coordinates(verts, verts), np.eye(4), atol=1e-12)

    def test_degenerate_tet_rejected(self):
        flat = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]])
        with self.assertRaises(SingularMapError):
            AffineMap.from_vertices(flat)


class CubeNumberingTests(unittest.TestCase):
    def test_search_finds_the_unique_labelling(self):
        result = search_cube_numbering()
        # 58 non-coplanar corner quadruples, 24 orders each
        self.assertEqual(result.assignments_tried, 58 * 24)
        self.assertEqual(result.unique_assignment, CUBE_LABEL_VERTICES)
        self.assertIn((0, 1, 2, 3), result.matches[0].conventions)

    def test_divergences_match_cube_formulas(self):
        verts = labeled_cube_tet()
        rng = np.random.default_rng(4)
        points = points_inside(verts, 30, rng)
        for div, formula in zip(bubble_divergences(verts), DIVERGENCE_FORMULAS):
            np.testing.assert_allclose(div(points), formula(*points.T), atol=1e-12)


class MappedBubbleTests(unittest.TestCase):
    def test_identity_map_gives_reference_bubble(self):
        points = np.random.default_rng(5).dirichlet(np.ones(4), size=10)[:, 1:]
        np.testing.assert_allclose(piola_bubble(AffineMap.identity(), points), eval_bubble(points), atol=1e-15)

    def test_gradient_trace_equals_divergence(self):
        rng = np.random.default_rng(6)
        for _ in range(3):
            verts = random_tet(rng)
            points = points_inside(verts, 15, rng)
            for amap, div in zip(affine_maps(verts), bubble_divergences(verts)):
                trace = np.trace(bubble_gradients(amap, points), axis1=-2, axis2=-1)
                scale = max(1.0, float(np.abs(div(points)).max()))
                np.testing.assert_allclose(trace, div(points), atol=1e-10 * scale)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(7)
        h = 1e-6
        for _ in range(3):
            verts = random_tet(rng)
            points = points_inside(verts, 5, rng)
            for amap in affine_maps(verts):
                jac = bubble_gradients(amap, points)
                scale = max(1.0, float(np.abs(jac).max()))
                for axis in range(3):
                    step = np.zeros(3)
                    step[axis] = h
                    column = (piola_bubble(amap, points + step) - piola_bubble(amap, points - step)) / (2 * h)
                    np.testing.assert_allclose(column, jac[..., axis], atol=1e-5 * scale)

    def test_divergences_have_zero_mean(self):
        rng = np.random.default_rng(8)
        verts = random_tet(rng)
        for div in bubble_divergences(verts):
            self.assertAlmostEqual(div.integrate(verts), 0.0, delta=1e-12)

    def test_mapped_face_moments_vanish(self):
        rng = np.random.default_rng(9)
        for _ in range(2):
            verts = random_tet(rng)
            moments = bubble_face_moments(verts)
            self.assertEqual(moments.shape, (9, 4, 3, 6))
            self.assertLessEqual(float(np.abs(moments).max()), 1e-11)

    def test_perturbed_bubble_has_nonzero_moments(self):
        verts = random_tet(np.random.default_rng(10))
        moments = bubble_face_moments(verts, REFERENCE_BUBBLE.perturbed(2, (1, 0, 0), 1))
        self.assertGreater(float(np.abs(moments).max()), 1e-4)

    def test_bubble_set_shapes(self):
        verts = random_tet(np.random.default_rng(11))
        bubbles = ElementBubbleSet.from_vertices(verts)
        points = points_inside(verts, 4, np.random.default_rng(12))
        self.assertEqual(bubbles.values(points).shape, (9, 4, 3))
        self.assertEqual(bubbles.gradients(points).shape, (9, 4, 3, 3))


class DivergenceGramTests(unittest.TestCase):
    def test_gram_is_nonsingular(self):
        rng = np.random.default_rng(13)
        for verts in (labeled_cube_tet(), random_tet(rng), random_tet(rng)):
            rank, condition = gram_rank_and_condition(verts)
            self.assertEqual(rank, 9)
            self.assertTrue(np.isfinite(condition))
            self.assertGreater(float(np.linalg.eigvalsh(divergence_gram(verts)).min()), 0.0)


if __name__ == "__main__":
    unittest.main()
