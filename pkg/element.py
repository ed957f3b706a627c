"""Per-element bubble enrichment: the 9 vertex orderings, affine maps, Piola-mapped bubbles and their divergences."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from reference import (
    REFERENCE_BUBBLE,
    ReferenceBubble,
    face_moments,
    quadrature,
)

logger = logging.getLogger("ncp3")


class SingularMapError(ValueError):
    """Affine map with (numerically) zero Jacobian determinant."""


# Cube-vertex labels of the nine orderings and the local slot each label occupies.
LABEL_SLOTS = {1: 0, 6: 1, 7: 2, 2: 3}
LABELED_ORDERINGS: tuple[tuple[int, int, int, int], ...] = (
    (1, 6, 7, 2), (1, 7, 2, 6), (1, 2, 6, 7),
    (6, 7, 1, 2), (6, 1, 2, 7), (6, 2, 7, 1),
    (7, 1, 6, 2), (7, 2, 1, 6), (2, 1, 7, 6),
)
ORDERINGS: tuple[tuple[int, int, int, int], ...] = tuple(
    tuple(LABEL_SLOTS[label] for label in labels) for labels in LABELED_ORDERINGS
)
N_BUBBLES = len(ORDERINGS)

# Unit-cube corners carrying labels 1, 6, 7, 2 (result of search_cube_numbering).
CUBE_LABEL_VERTICES: dict[int, tuple[float, float, float]] = {
    1: (0.0, 0.0, 0.0),
    6: (1.0, 0.0, 1.0),
    7: (1.0, 1.0, 1.0),
    2: (1.0, 0.0, 0.0),
}

# Divergence of bubble i on the labeled cube tetrahedron, in cube coordinates.
DIVERGENCE_FORMULAS = (
    lambda x, y, z: 4 * (y - z) * (2 * y + x - 2 * z),
    lambda x, y, z: -4 * y * (x - 2 * y),
    lambda x, y, z: 4 * (x - z) * (x - 2 * z),
    lambda x, y, z: 4 * y * (y + z - 1),
    lambda x, y, z: 4 * (2 * x + y - z - 1) * (x - 1),
    lambda x, y, z: 4 * (2 * x - y - z - 1) * (x - z),
    lambda x, y, z: 4 * (x - 1) * (2 * x - y - 1),
    lambda x, y, z: 4 * (2 * x + y - 2 * z - 1) * (x - z),
    lambda x, y, z: 4 * (x - 1) * (x + z - 1),
)


def orderings() -> tuple[tuple[int, int, int, int], ...]:
    """Local-slot permutations; ordering o sends reference vertex x^k to slot o[k]."""
    return ORDERINGS


def labeled_cube_tet() -> np.ndarray:
    """Vertices of the labeled cube tetrahedron in slot order."""
    by_slot = sorted(LABEL_SLOTS, key=LABEL_SLOTS.get)
    return np.array([CUBE_LABEL_VERTICES[label] for label in by_slot])


def barycentric_coordinates(points, vertices) -> np.ndarray:
    """Barycentric coordinates of physical points in a tetrahedron, shape (..., 4)."""
    verts = np.asarray(vertices, dtype=float)
    pts = np.asarray(points, dtype=float)
    edges = (verts[1:] - verts[0]).T
    tail = (pts - verts[0]) @ np.linalg.inv(edges).T
    return np.concatenate([1.0 - tail.sum(axis=-1, keepdims=True), tail], axis=-1)


# ---------------------------------------------------------------------------
# Numbering oracle
# ---------------------------------------------------------------------------

@dataclass
class NumberingMatch:
    assignment: dict[int, tuple[float, float, float]]
    conventions: list[tuple[int, int, int, int]]


@dataclass
class NumberingSearchResult:
    matches: list[NumberingMatch] = field(default_factory=list)
    assignments_tried: int = 0

    @property
    def unique_assignment(self) -> dict[int, tuple[float, float, float]] | None:
        if len(self.matches) != 1:
            return None
        return self.matches[0].assignment


def search_cube_numbering(n_points: int = 20, seed: int = 0, tol: float = 1e-11) -> NumberingSearchResult:
    """Brute-force the cube corners behind labels 1, 6, 7, 2.

    Every ordered choice of 4 distinct unit-cube corners is combined with every
    convention for which ordering position receives each reference vertex. An
    assignment matches when, for some convention, the divergence
    4 l1 (l1 - l2 - l3) of all nine orderings reproduces DIVERGENCE_FORMULAS
    at random sample points.
    """
    corners = [tuple(float(c) for c in corner) for corner in itertools.product((0, 1), repeat=3)]
    labels = sorted(LABEL_SLOTS, key=LABEL_SLOTS.get)
    rng = np.random.default_rng(seed)
    points = rng.random((n_points, 3))
    targets = np.stack([formula(*points.T) for formula in DIVERGENCE_FORMULAS], axis=1)

    conventions = list(itertools.permutations(range(4)))
    ordering_slots = np.array(ORDERINGS)
    # slot feeding reference coordinate x^k, k = 1..3, per convention and ordering
    slots = np.array([[o[list(c[1:])] for o in ordering_slots] for c in conventions])

    result = NumberingSearchResult()
    for chosen in itertools.permutations(range(8), 4):
        verts = np.array([corners[i] for i in chosen])
        if abs(np.linalg.det(verts[1:] - verts[0])) < 1e-12:
            continue
        result.assignments_tried += 1
        lam = barycentric_coordinates(points, verts)
        coords = lam[:, slots]
        div = 4.0 * coords[..., 0] * (coords[..., 0] - coords[..., 1] - coords[..., 2])
        error = np.abs(div - targets[:, None, :]).max(axis=(0, 2))
        matched = [conventions[k] for k in np.flatnonzero(error <= tol)]
        if matched:
            assignment = {label: corners[i] for label, i in zip(labels, chosen)}
            result.matches.append(NumberingMatch(assignment, matched))
    logger.debug(f"Cube numbering search: {len(result.matches)} match(es) in {result.assignments_tried} assignments")
    return result


# ---------------------------------------------------------------------------
# Affine maps and mapped bubbles
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AffineMap:
    """x = J x^ + t, mapping the reference tetrahedron onto an ordered physical one."""

    jacobian: np.ndarray
    translation: np.ndarray
    inverse: np.ndarray
    determinant: float

    @classmethod
    def from_vertices(cls, vertices) -> "AffineMap":
        verts = np.asarray(vertices, dtype=float)
        jacobian = (verts[1:] - verts[0]).T
        det = float(np.linalg.det(jacobian))
        size = max(float(np.abs(jacobian).max()), np.finfo(float).tiny)
        if abs(det) <= 1e-13 * size ** 3:
            raise SingularMapError(f"Degenerate tetrahedron (det J = {det:.3e})")
        return cls(jacobian, verts[0].copy(), np.linalg.inv(jacobian), det)

    @classmethod
    def identity(cls) -> "AffineMap":
        return cls(np.eye(3), np.zeros(3), np.eye(3), 1.0)

    def __call__(self, reference_points) -> np.ndarray:
        return np.asarray(reference_points, dtype=float) @ self.jacobian.T + self.translation

    def pull_back(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.translation) @ self.inverse.T


def affine_maps(vertices) -> tuple[AffineMap, ...]:
    """The nine maps F_i for a tetrahedron given in local slot order."""
    verts = np.asarray(vertices, dtype=float)
    return tuple(AffineMap.from_vertices(verts[list(o)]) for o in ORDERINGS)


def piola_bubble(amap: AffineMap, points, bubble: ReferenceBubble = REFERENCE_BUBBLE) -> np.ndarray:
    """J b^(F^-1(x)), without a 1/det J factor."""
    return bubble.evaluate(amap.pull_back(points)) @ amap.jacobian.T


def bubble_gradients(amap: AffineMap, points, bubble: ReferenceBubble = REFERENCE_BUBBLE) -> np.ndarray:
    """Physical Jacobian J (grad^ b^) J^-1 of the mapped bubble, shape (..., 3, 3)."""
    reference = bubble.jacobian(amap.pull_back(points))
    return np.einsum("ij,...jk,kl->...il", amap.jacobian, reference, amap.inverse)


# ---------------------------------------------------------------------------
# P2 polynomials in physical coordinates
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class P2Polynomial:
    """c + l.x + x^T Q x with symmetric Q."""

    constant: float
    linear: np.ndarray
    quadratic: np.ndarray

    @classmethod
    def affine_product(cls, first: tuple[float, np.ndarray], second: tuple[float, np.ndarray]) -> "P2Polynomial":
        (a, g), (b, h) = first, second
        g, h = np.asarray(g, dtype=float), np.asarray(h, dtype=float)
        return cls(a * b, a * h + b * g, 0.5 * (np.outer(g, h) + np.outer(h, g)))

    def __call__(self, points) -> np.ndarray:
        x = np.asarray(points, dtype=float)
        return self.constant + x @ self.linear + np.einsum("...i,ij,...j->...", x, self.quadratic, x)

    def __add__(self, other: "P2Polynomial") -> "P2Polynomial":
        return P2Polynomial(self.constant + other.constant, self.linear + other.linear, self.quadratic + other.quadratic)

    def scaled(self, factor: float) -> "P2Polynomial":
        return P2Polynomial(factor * self.constant, factor * self.linear, factor * self.quadratic)

    def coefficients(self) -> np.ndarray:
        """Coefficients in the monomial order of P2_EXPONENTS (physical coordinates)."""
        q = self.quadratic
        return np.array([
            self.constant, *self.linear,
            q[0, 0], 2 * q[0, 1], 2 * q[0, 2], q[1, 1], 2 * q[1, 2], q[2, 2],
        ])

    def integrate(self, vertices) -> float:
        amap = AffineMap.from_vertices(vertices)
        rule = quadrature("tet", 2)
        return abs(amap.determinant) * float(rule.weights @ self(amap(rule.points)))


def _barycentric_affine(vertices) -> list[tuple[float, np.ndarray]]:
    """Each barycentric coordinate as (value at origin, gradient)."""
    verts = np.asarray(vertices, dtype=float)
    inverse = np.linalg.inv((verts[1:] - verts[0]).T)
    result = [(float(-row @ verts[0]), row) for row in inverse]
    value0 = 1.0 - sum(a for a, _ in result)
    grad0 = -inverse.sum(axis=0)
    return [(value0, grad0)] + result


def bubble_divergences(vertices) -> tuple[P2Polynomial, ...]:
    """div b_i = 4 l_b (l_b - l_c - l_d) for ordering (a, b, c, d), as physical P2 polynomials."""
    lam = _barycentric_affine(vertices)
    result = []
    for _, b, c, d in ORDERINGS:
        difference = (lam[b][0] - lam[c][0] - lam[d][0], lam[b][1] - lam[c][1] - lam[d][1])
        result.append(P2Polynomial.affine_product(lam[b], difference).scaled(4.0))
    return tuple(result)


def bubble_face_moments(vertices, bubble: ReferenceBubble = REFERENCE_BUBBLE) -> np.ndarray:
    """P2 face moments of all nine mapped bubbles, shape (9, 4, 3, 6)."""
    verts = np.asarray(vertices, dtype=float)
    return np.stack([
        face_moments(lambda x, m=amap: piola_bubble(m, x, bubble), verts) for amap in affine_maps(verts)
    ])


def divergence_gram(vertices) -> np.ndarray:
    """L2(T) Gram matrix of the nine bubble divergences."""
    verts = np.asarray(vertices, dtype=float)
    amap = AffineMap.from_vertices(verts)
    rule = quadrature("tet", 4)
    points = amap(rule.points)
    values = np.stack([div(points) for div in bubble_divergences(verts)])
    return abs(amap.determinant) * (values * rule.weights) @ values.T


def gram_rank_and_condition(vertices, rtol: float = 1e-10) -> tuple[int, float]:
    eigenvalues = np.linalg.eigvalsh(divergence_gram(vertices))
    rank = int(np.count_nonzero(eigenvalues > rtol * eigenvalues.max()))
    return rank, float(eigenvalues.max() / eigenvalues.min())


@dataclass(frozen=True, eq=False)
class ElementBubbleSet:
    vertices: np.ndarray
    maps: tuple[AffineMap, ...]
    divergences: tuple[P2Polynomial, ...]

    @classmethod
    def from_vertices(cls, vertices) -> "ElementBubbleSet":
        verts = np.asarray(vertices, dtype=float)
        return cls(verts, affine_maps(verts), bubble_divergences(verts))

    def values(self, points) -> np.ndarray:
        """Bubble values at physical points, shape (9, ..., 3)."""
        return np.stack([piola_bubble(m, points) for m in self.maps])

    def gradients(self, points) -> np.ndarray:
        return np.stack([bubble_gradients(m, points) for m in self.maps])
