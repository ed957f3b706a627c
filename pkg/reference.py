"""Reference tetrahedron data: polynomials, quadrature, Lagrange P3, modal P2 and the P4 bubble.

Everything in this module lives on the unit reference tetrahedron

    T^ = {x^1, x^2, x^3 >= 0, x^1 + x^2 + x^3 <= 1}

with vertices x^0 = origin, x^1 = e1, x^2 = e2, x^3 = e3 and barycentric
coordinates (1 - x^1 - x^2 - x^3, x^1, x^2, x^3). Objects are immutable and the
evaluation functions are pure, so they can be shared between threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Callable, Iterable, Mapping

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import roots_jacobi

logger = logging.getLogger("ncp3")

Exponent = tuple[int, int, int]

REFERENCE_VERTICES = np.array([
    [0.0, 0.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
])
REFERENCE_VOLUME = Fraction(1, 6)

# Gradients of the reference barycentric coordinates with respect to x^.
REFERENCE_GRAD_LAMBDA = np.array([
    [-1.0, -1.0, -1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
])

# Local entity numbering shared by every module.
LOCAL_EDGES: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
# Face k is the face opposite local vertex k.
LOCAL_FACES: tuple[tuple[int, int, int], ...] = ((1, 2, 3), (0, 2, 3), (0, 1, 3), (0, 1, 2))

MAX_TET_DEGREE = 30
MAX_TRIANGLE_DEGREE = 30


class UnsupportedQuadratureError(ValueError):
    """Raised when a quadrature rule of the requested degree is not available."""


# ---------------------------------------------------------------------------
# Exact polynomials
# ---------------------------------------------------------------------------

class Polynomial3:
    """Polynomial in three variables with exact rational coefficients.

    Coefficients are stored as a map from monomial exponents (i, j, k) to
    ``Fraction``. Floating-point evaluation is derived from the rationals.
    """

    __slots__ = ("_coeffs", "degree_bound", "_exponents", "_values")

    def __init__(self, coeffs: Mapping[Exponent, object] | None = None, degree_bound: int | None = None):
        cleaned: dict[Exponent, Fraction] = {}
        for exponent, value in (coeffs or {}).items():
            exponent = tuple(int(e) for e in exponent)
            if len(exponent) != 3 or min(exponent) < 0:
                raise ValueError(f"Invalid monomial exponent {exponent}")
            value = Fraction(value)
            if value != 0:
                cleaned[exponent] = cleaned.get(exponent, Fraction(0)) + value
        self._coeffs = {e: c for e, c in cleaned.items() if c != 0}
        if degree_bound is None:
            degree_bound = max(self.total_degree, 0)
        if self.total_degree > degree_bound:
            raise ValueError(f"Polynomial of degree {self.total_degree} exceeds declared bound {degree_bound}")
        self.degree_bound = degree_bound
        self._exponents = np.array(sorted(self._coeffs), dtype=float).reshape(-1, 3)
        self._values = np.array([float(self._coeffs[e]) for e in sorted(self._coeffs)], dtype=float)

    @classmethod
    def constant(cls, value) -> "Polynomial3":
        return cls({(0, 0, 0): value})

    @classmethod
    def variable(cls, axis: int) -> "Polynomial3":
        exponent = [0, 0, 0]
        exponent[axis] = 1
        return cls({tuple(exponent): 1})

    @property
    def coeffs(self) -> dict[Exponent, Fraction]:
        return dict(self._coeffs)

    @property
    def total_degree(self) -> int:
        """Total degree, -1 for the zero polynomial."""
        if not self._coeffs:
            return -1
        return max(sum(e) for e in self._coeffs)

    def is_zero(self) -> bool:
        return not self._coeffs

    def coefficient(self, exponent: Exponent) -> Fraction:
        return self._coeffs.get(tuple(exponent), Fraction(0))

    def derivative(self, axis: int) -> "Polynomial3":
        result: dict[Exponent, Fraction] = {}
        for exponent, value in self._coeffs.items():
            if exponent[axis] == 0:
                continue
            lowered = list(exponent)
            lowered[axis] -= 1
            result[tuple(lowered)] = value * exponent[axis]
        return Polynomial3(result, max(self.degree_bound - 1, 0))

    def integrate_reference(self) -> Fraction:
        """Exact integral over the reference tetrahedron."""
        return sum((c * monomial_integral("tet", e) for e, c in self._coeffs.items()), Fraction(0))

    def __call__(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        if not self._coeffs:
            return np.zeros(pts.shape[:-1])
        powers = np.prod(pts[..., None, :] ** self._exponents, axis=-1)
        return powers @ self._values

    def __add__(self, other: "Polynomial3") -> "Polynomial3":
        if not isinstance(other, Polynomial3):
            other = Polynomial3.constant(other)
        merged = dict(self._coeffs)
        for exponent, value in other._coeffs.items():
            merged[exponent] = merged.get(exponent, Fraction(0)) + value
        return Polynomial3(merged, max(self.degree_bound, other.degree_bound))

    __radd__ = __add__

    def __neg__(self) -> "Polynomial3":
        return Polynomial3({e: -c for e, c in self._coeffs.items()}, self.degree_bound)

    def __sub__(self, other: "Polynomial3") -> "Polynomial3":
        if not isinstance(other, Polynomial3):
            other = Polynomial3.constant(other)
        return self + (-other)

    def __mul__(self, other) -> "Polynomial3":
        if isinstance(other, Polynomial3):
            product: dict[Exponent, Fraction] = {}
            for e1, c1 in self._coeffs.items():
                for e2, c2 in other._coeffs.items():
                    key = (e1[0] + e2[0], e1[1] + e2[1], e1[2] + e2[2])
                    product[key] = product.get(key, Fraction(0)) + c1 * c2
            return Polynomial3(product, self.degree_bound + other.degree_bound)
        factor = Fraction(other)
        return Polynomial3({e: c * factor for e, c in self._coeffs.items()}, self.degree_bound)

    __rmul__ = __mul__

    def __eq__(self, other) -> bool:
        if not isinstance(other, Polynomial3):
            return NotImplemented
        return self._coeffs == other._coeffs

    def __hash__(self) -> int:
        return hash(frozenset(self._coeffs.items()))

    def __repr__(self) -> str:
        terms = " + ".join(f"{c}*x^{e[0]}y^{e[1]}z^{e[2]}" for e, c in sorted(self._coeffs.items(), reverse=True))
        return f"Polynomial3({terms or '0'})"


def _terms(*pairs: tuple[str, Exponent]) -> dict[Exponent, Fraction]:
    return {exponent: Fraction(value) for value, exponent in pairs}


# Components of the P4 bubble, x = x^1, y = x^2, z = x^3.
BUBBLE_COEFFICIENTS: tuple[dict[Exponent, Fraction], ...] = (
    _terms(
        ("263/12", (4, 0, 0)), ("38", (3, 1, 0)), ("265/3", (3, 0, 1)), ("29", (2, 2, 0)),
        ("96", (2, 1, 1)), ("209/2", (2, 0, 2)), ("-16", (1, 3, 0)), ("42", (1, 2, 1)),
        ("42", (1, 1, 2)), ("103/3", (1, 0, 3)), ("7/6", (0, 4, 0)), ("-1", (0, 2, 2)),
        ("-335/12", (0, 0, 4)), ("-253/6", (3, 0, 0)), ("-87/2", (2, 1, 0)), ("-119", (2, 0, 1)),
        ("21/2", (1, 2, 0)), ("-56", (1, 1, 1)), ("-65", (1, 0, 2)), ("112/3", (0, 0, 3)),
        ("703/28", (2, 0, 0)), ("7/2", (1, 1, 0)), ("251/7", (1, 0, 1)), ("-41/28", (0, 2, 0)),
        ("2/7", (0, 1, 1)), ("-169/14", (0, 0, 2)), ("-181/42", (1, 0, 0)), ("13/21", (0, 1, 0)),
        ("73/840", (0, 0, 0)),
    ),
    _terms(
        ("-233/3", (3, 1, 0)), ("67/9", (3, 0, 1)), ("-233/2", (2, 2, 0)), ("-235", (2, 1, 1)),
        ("163/6", (2, 0, 2)), ("-203/3", (1, 3, 0)), ("-225", (1, 2, 1)), ("-209", (1, 1, 2)),
        ("301/9", (1, 0, 3)), ("-64/3", (0, 3, 1)), ("-21", (0, 2, 2)), ("-16/3", (0, 1, 3)),
        ("113/18", (3, 0, 0)), ("1105/8", (2, 1, 0)), ("155/24", (2, 0, 1)), ("1025/8", (1, 2, 0)),
        ("1077/4", (1, 1, 1)), ("-469/24", (1, 0, 2)), ("79/8", (0, 3, 0)), ("417/8", (0, 2, 1)),
        ("289/8", (0, 1, 2)), ("-199/72", (0, 0, 3)), ("-625/56", (2, 0, 0)), ("-505/7", (1, 1, 0)),
        ("-94/7", (1, 0, 1)), ("-447/28", (0, 2, 0)), ("-251/7", (0, 1, 1)), ("317/56", (1, 0, 0)),
        ("625/84", (0, 1, 0)), ("101/42", (0, 0, 1)), ("-383/630", (0, 0, 0)),
    ),
    _terms(
        ("-10", (3, 1, 0)), ("-10", (3, 0, 1)), ("1", (2, 2, 0)), ("119", (2, 1, 1)),
        ("-15", (2, 0, 2)), ("16", (1, 3, 0)), ("145", (1, 2, 1)), ("129", (1, 1, 2)),
        ("16", (0, 3, 1)), ("11", (0, 2, 2)), ("-29/4", (0, 0, 4)), ("-93/8", (2, 1, 0)),
        ("-61/8", (2, 0, 1)), ("-301/8", (1, 2, 0)), ("-693/4", (1, 1, 1)), ("-141/8", (1, 0, 2)),
        ("-13/4", (0, 3, 0)), ("-321/8", (0, 2, 1)), ("-193/8", (0, 1, 2)), ("77/8", (0, 0, 3)),
        ("181/56", (2, 0, 0)), ("363/14", (1, 1, 0)), ("307/14", (1, 0, 1)), ("389/56", (0, 2, 0)),
        ("199/7", (0, 1, 1)), ("-563/168", (1, 0, 0)), ("-33/8", (0, 1, 0)), ("-263/84", (0, 0, 1)),
        ("103/210", (0, 0, 0)),
    ),
)


def bubble_divergence_target() -> Polynomial3:
    """The prescribed bubble divergence 4 x^1 (x^1 - x^2 - x^3)."""
    x, y, z = (Polynomial3.variable(axis) for axis in range(3))
    return 4 * x * (x - y - z)


@dataclass(frozen=True)
class ReferenceBubble:
    """Vector P4 bubble on the reference tetrahedron, one Polynomial3 per component."""

    components: tuple[Polynomial3, Polynomial3, Polynomial3]

    @classmethod
    def from_table(cls, table: Iterable[Mapping[Exponent, object]] = BUBBLE_COEFFICIENTS) -> "ReferenceBubble":
        return cls(tuple(Polynomial3(coeffs, 4) for coeffs in table))

    @classmethod
    def zero(cls) -> "ReferenceBubble":
        return cls((Polynomial3(), Polynomial3(), Polynomial3()))

    def perturbed(self, component: int, exponent: Exponent, delta) -> "ReferenceBubble":
        """Copy with one coefficient shifted by ``delta``."""
        bump = Polynomial3({exponent: delta})
        parts = list(self.components)
        parts[component] = parts[component] + bump
        return ReferenceBubble(tuple(parts))

    @cached_property
    def _jacobian_polynomials(self) -> tuple[tuple[Polynomial3, ...], ...]:
        return tuple(tuple(comp.derivative(axis) for axis in range(3)) for comp in self.components)

    def divergence(self) -> Polynomial3:
        return sum((self._jacobian_polynomials[i][i] for i in range(3)), Polynomial3())

    def evaluate(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.stack([comp(pts) for comp in self.components], axis=-1)

    def jacobian(self, points) -> np.ndarray:
        """Jacobian d(b)_i / dx^j, shape (..., 3, 3)."""
        pts = np.asarray(points, dtype=float)
        rows = [np.stack([d(pts) for d in row], axis=-1) for row in self._jacobian_polynomials]
        return np.stack(rows, axis=-2)


REFERENCE_BUBBLE = ReferenceBubble.from_table()


def eval_bubble(point, bubble: ReferenceBubble = REFERENCE_BUBBLE) -> np.ndarray:
    """Value of the reference bubble at one point or an array of points."""
    return bubble.evaluate(point)


def grad_bubble(point, bubble: ReferenceBubble = REFERENCE_BUBBLE) -> np.ndarray:
    """Jacobian of the reference bubble, rows are components."""
    return bubble.jacobian(point)


def bubble_divergence_defect(bubble: ReferenceBubble = REFERENCE_BUBBLE) -> Polynomial3:
    """div b^ - 4x^1(x^1 - x^2 - x^3); the zero polynomial for a valid bubble."""
    return bubble.divergence() - bubble_divergence_target()


# ---------------------------------------------------------------------------
# Quadrature
# ---------------------------------------------------------------------------

def monomial_integral(cell: str, exponents: Iterable[int]) -> Fraction:
    """Exact integral of a monomial over the reference tetrahedron or triangle."""
    exponents = tuple(int(e) for e in exponents)
    dim = {"tet": 3, "triangle": 2}.get(cell)
    if dim is None or len(exponents) != dim:
        raise ValueError(f"Bad monomial {exponents} for cell '{cell}'")
    numerator = math.prod(math.factorial(e) for e in exponents)
    return Fraction(numerator, math.factorial(sum(exponents) + dim))


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    cell: str
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def barycentric(self) -> np.ndarray:
        return np.column_stack([1.0 - self.points.sum(axis=1), self.points])

    def __len__(self) -> int:
        return len(self.weights)


def _gauss_jacobi_unit(n: int, alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes/weights on [0, 1] for the weight (1 - a)^alpha."""
    if alpha == 0:
        nodes, weights = leggauss(n)
    else:
        nodes, weights = roots_jacobi(n, alpha, 0.0)
    return (1.0 + nodes) / 2.0, weights / 2.0 ** (alpha + 1)


def _collapsed_tet_rule(degree: int) -> QuadratureRule:
    n = max(1, math.ceil((degree + 1) / 2))
    a, wa = _gauss_jacobi_unit(n, 2.0)
    b, wb = _gauss_jacobi_unit(n, 1.0)
    c, wc = _gauss_jacobi_unit(n, 0.0)
    A, B, C = np.meshgrid(a, b, c, indexing="ij")
    WA, WB, WC = np.meshgrid(wa, wb, wc, indexing="ij")
    points = np.column_stack([
        A.ravel(),
        (B * (1.0 - A)).ravel(),
        (C * (1.0 - A) * (1.0 - B)).ravel(),
    ])
    return QuadratureRule("tet", points, (WA * WB * WC).ravel(), 2 * n - 1)


def _collapsed_triangle_rule(degree: int) -> QuadratureRule:
    n = max(1, math.ceil((degree + 1) / 2))
    a, wa = _gauss_jacobi_unit(n, 1.0)
    b, wb = _gauss_jacobi_unit(n, 0.0)
    A, B = np.meshgrid(a, b, indexing="ij")
    WA, WB = np.meshgrid(wa, wb, indexing="ij")
    points = np.column_stack([A.ravel(), (B * (1.0 - A)).ravel()])
    return QuadratureRule("triangle", points, (WA * WB).ravel(), 2 * n - 1)


@lru_cache(maxsize=None)
def quadrature(cell: str, degree: int) -> QuadratureRule:
    """Quadrature rule on the reference cell exact for polynomials up to ``degree``."""
    if cell not in ("tet", "triangle"):
        raise ValueError(f"Unknown cell type '{cell}' (expected 'tet' or 'triangle')")
    limit = MAX_TET_DEGREE if cell == "tet" else MAX_TRIANGLE_DEGREE
    if not isinstance(degree, (int, np.integer)) or degree < 0:
        raise UnsupportedQuadratureError(f"Quadrature degree must be a non-negative integer, got {degree!r}")
    if degree > limit:
        raise UnsupportedQuadratureError(f"Unsupported {cell} quadrature degree {degree} (maximum {limit})")
    if degree <= 1:
        if cell == "tet":
            return QuadratureRule("tet", np.array([[0.25, 0.25, 0.25]]), np.array([float(REFERENCE_VOLUME)]), 1)
        return QuadratureRule("triangle", np.array([[1.0 / 3.0, 1.0 / 3.0]]), np.array([0.5]), 1)
    rule = _collapsed_tet_rule(degree) if cell == "tet" else _collapsed_triangle_rule(degree)
    logger.debug(f"Built {cell} quadrature: degree {rule.degree}, {len(rule)} points")
    return rule


def quadrature_monomial_error(rule: QuadratureRule) -> float:
    """Largest error of ``rule`` over all monomials up to its degree."""
    dim = rule.points.shape[1]
    worst = 0.0
    for total in range(rule.degree + 1):
        for exponents in _exponents_of_degree(total, dim):
            approx = float(np.dot(rule.weights, np.prod(rule.points ** np.array(exponents), axis=1)))
            worst = max(worst, abs(approx - float(monomial_integral(rule.cell, exponents))))
    return worst


def _exponents_of_degree(total: int, dim: int) -> Iterable[tuple[int, ...]]:
    if dim == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _exponents_of_degree(total - first, dim - 1):
            yield (first,) + rest


# ---------------------------------------------------------------------------
# Cubic Lagrange basis
# ---------------------------------------------------------------------------

def _p3_nodes() -> np.ndarray:
    nodes = [np.eye(4)[k] for k in range(4)]
    for i, j in LOCAL_EDGES:
        near_i = np.zeros(4)
        near_i[i], near_i[j] = 2.0 / 3.0, 1.0 / 3.0
        near_j = np.zeros(4)
        near_j[i], near_j[j] = 1.0 / 3.0, 2.0 / 3.0
        nodes.extend([near_i, near_j])
    for face in LOCAL_FACES:
        centroid = np.zeros(4)
        centroid[list(face)] = 1.0 / 3.0
        nodes.append(centroid)
    return np.array(nodes)


# Barycentric coordinates of the 20 P3 nodes: 4 vertices, 2 per edge
# (first node nearer the edge's first local vertex), 1 per face.
P3_NODES = _p3_nodes()
N_P3 = 20


def p3_values(bary) -> np.ndarray:
    """The 20 cubic Lagrange basis functions at barycentric points, shape (..., 20)."""
    lam = np.asarray(bary, dtype=float)
    out = []
    for k in range(4):
        l = lam[..., k]
        out.append(0.5 * l * (3.0 * l - 1.0) * (3.0 * l - 2.0))
    for i, j in LOCAL_EDGES:
        li, lj = lam[..., i], lam[..., j]
        out.append(4.5 * li * lj * (3.0 * li - 1.0))
        out.append(4.5 * li * lj * (3.0 * lj - 1.0))
    for a, b, c in LOCAL_FACES:
        out.append(27.0 * lam[..., a] * lam[..., b] * lam[..., c])
    return np.stack(out, axis=-1)


def p3_bary_derivatives(bary) -> np.ndarray:
    """Derivatives of the P3 basis with respect to each barycentric coordinate, shape (..., 20, 4)."""
    lam = np.asarray(bary, dtype=float)
    out = np.zeros(lam.shape[:-1] + (N_P3, 4))
    for k in range(4):
        l = lam[..., k]
        out[..., k, k] = 0.5 * (27.0 * l * l - 18.0 * l + 2.0)
    for e, (i, j) in enumerate(LOCAL_EDGES):
        li, lj = lam[..., i], lam[..., j]
        first, second = 4 + 2 * e, 5 + 2 * e
        out[..., first, i] = 4.5 * lj * (6.0 * li - 1.0)
        out[..., first, j] = 4.5 * li * (3.0 * li - 1.0)
        out[..., second, j] = 4.5 * li * (6.0 * lj - 1.0)
        out[..., second, i] = 4.5 * lj * (3.0 * lj - 1.0)
    for f, (a, b, c) in enumerate(LOCAL_FACES):
        node = 16 + f
        out[..., node, a] = 27.0 * lam[..., b] * lam[..., c]
        out[..., node, b] = 27.0 * lam[..., a] * lam[..., c]
        out[..., node, c] = 27.0 * lam[..., a] * lam[..., b]
    return out


def to_barycentric(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    return np.concatenate([1.0 - pts.sum(axis=-1, keepdims=True), pts], axis=-1)


def eval_p3_basis(point) -> np.ndarray:
    """P3 Lagrange basis values at reference point(s), shape (..., 20)."""
    return p3_values(to_barycentric(point))


def grad_p3_basis(point) -> np.ndarray:
    """Reference gradients of the P3 Lagrange basis, shape (..., 20, 3)."""
    return p3_bary_derivatives(to_barycentric(point)) @ REFERENCE_GRAD_LAMBDA


def face_node_integral_ratio() -> float:
    """Integral of the face-node P3 function over its face divided by the face area (9/20)."""
    rule = quadrature("triangle", 3)
    s, t = rule.points[:, 0], rule.points[:, 1]
    bary = np.column_stack([1.0 - s - t, s, t, np.zeros_like(s)])
    values = p3_values(bary)[:, 16 + 3]
    return float(values @ rule.weights / 0.5)


# ---------------------------------------------------------------------------
# Modal P2 (pressure) basis
# ---------------------------------------------------------------------------

P2_EXPONENTS: tuple[Exponent, ...] = (
    (0, 0, 0),
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (2, 0, 0), (1, 1, 0), (1, 0, 1), (0, 2, 0), (0, 1, 1), (0, 0, 2),
)
N_P2 = len(P2_EXPONENTS)


def eval_p2_basis(points) -> np.ndarray:
    """Monomial P2 basis at reference point(s), shape (..., 10)."""
    pts = np.asarray(points, dtype=float)
    return np.prod(pts[..., None, :] ** np.array(P2_EXPONENTS, dtype=float), axis=-1)


def p2_reference_mass() -> np.ndarray:
    """Exact reference mass matrix of the modal P2 basis."""
    mass = np.empty((N_P2, N_P2))
    for a, ea in enumerate(P2_EXPONENTS):
        for b, eb in enumerate(P2_EXPONENTS):
            mass[a, b] = float(monomial_integral("tet", np.add(ea, eb)))
    return mass


def p2_reference_moments() -> np.ndarray:
    """Exact reference integrals of the modal P2 basis functions."""
    return np.array([float(monomial_integral("tet", e)) for e in P2_EXPONENTS])


# ---------------------------------------------------------------------------
# Face moments
# ---------------------------------------------------------------------------

FACE_TEST_EXPONENTS: tuple[tuple[int, int], ...] = ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


def face_moments(field: Callable[[np.ndarray], np.ndarray], vertices, degree: int = 6) -> np.ndarray:
    """P2 moments of a vector field on the four faces of a tetrahedron.

    Returns an array of shape (4, 3, 6): face, component, face test monomial
    in face-local coordinates (s, t).
    """
    verts = np.asarray(vertices, dtype=float)
    rule = quadrature("triangle", degree)
    s, t = rule.points[:, 0], rule.points[:, 1]
    tests = np.stack([s ** i * t ** j for i, j in FACE_TEST_EXPONENTS], axis=-1)
    moments = np.empty((4, 3, len(FACE_TEST_EXPONENTS)))
    for f, (a, b, c) in enumerate(LOCAL_FACES):
        edge1, edge2 = verts[b] - verts[a], verts[c] - verts[a]
        jac = np.linalg.norm(np.cross(edge1, edge2))
        points = verts[a] + s[:, None] * edge1 + t[:, None] * edge2
        values = field(points)
        moments[f] = jac * np.einsum("q,qc,qm->cm", rule.weights, values, tests)
    return moments


def verify_face_moments(bubble: ReferenceBubble = REFERENCE_BUBBLE) -> float:
    """Largest absolute P2 face moment of ``bubble`` over the reference faces (72 integrals)."""
    return float(np.abs(face_moments(bubble.evaluate, REFERENCE_VERTICES)).max())
