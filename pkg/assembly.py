"""Element kernels and global assembly of the Stokes saddle-point system.

The local velocity block has 69 DOFs: 60 conforming P3 component DOFs
(node-major, component-minor) followed by the nine mapped bubbles. Kernels are
vectorized over chunks of elements; reference-cell tables are shared by every
element, so the only per-element work is the affine geometry.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.io
import scipy.sparse as sp

from element import N_BUBBLES, ORDERINGS
from mesh import TetMesh
from reference import (
    N_P2,
    N_P3,
    REFERENCE_BUBBLE,
    REFERENCE_GRAD_LAMBDA,
    eval_p2_basis,
    p3_bary_derivatives,
    p3_values,
    quadrature,
)
from spaces import LOCAL_CONFORMING_DOFS, LOCAL_VELOCITY_DOFS, PressureDofMap, VelocityDofMap

logger = logging.getLogger("ncp3")

STIFFNESS_DEGREE = 6
DIVERGENCE_DEGREE = 4
MASS_DEGREE = 4
LOAD_DEGREE = 14
CHUNK_SIZE = 256

VectorField = Callable[[np.ndarray], np.ndarray]


class DegenerateElementError(ValueError):
    """Tetrahedron with (numerically) zero volume."""


# ---------------------------------------------------------------------------
# Reference tables
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReferenceTables:
    """Element-independent basis data at a set of reference points."""

    points: np.ndarray
    weights: np.ndarray | None
    p3: np.ndarray
    p3_bary: np.ndarray
    p2: np.ndarray
    bubble_values: np.ndarray
    bubble_jacobians: np.ndarray
    bubble_divergence: np.ndarray

    @classmethod
    def at_points(cls, points, weights=None) -> "ReferenceTables":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        bary = np.column_stack([1.0 - points.sum(axis=1), points])
        # bubble i sees the reference point (l_o1, l_o2, l_o3) for ordering o
        bubble_points = np.stack([bary[:, list(o[1:])] for o in ORDERINGS])
        jacobians = REFERENCE_BUBBLE.jacobian(bubble_points)
        return cls(
            points=points,
            weights=None if weights is None else np.asarray(weights, dtype=float),
            p3=p3_values(bary),
            p3_bary=p3_bary_derivatives(bary),
            p2=eval_p2_basis(points),
            bubble_values=REFERENCE_BUBBLE.evaluate(bubble_points),
            bubble_jacobians=jacobians,
            bubble_divergence=np.trace(jacobians, axis1=-2, axis2=-1),
        )


@lru_cache(maxsize=None)
def reference_tables(degree: int) -> ReferenceTables:
    rule = quadrature("tet", degree)
    return ReferenceTables.at_points(rule.points, rule.weights)


# ---------------------------------------------------------------------------
# Element geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ElementGeometry:
    vertices: np.ndarray
    jacobian: np.ndarray
    determinant: np.ndarray
    grad_lambda: np.ndarray
    bubble_jacobians: np.ndarray
    bubble_inverses: np.ndarray

    @classmethod
    def from_vertices(cls, vertices, first_index: int = 0) -> "ElementGeometry":
        verts = np.asarray(vertices, dtype=float).reshape(-1, 4, 3)
        jacobian = np.transpose(verts[:, 1:] - verts[:, :1], (0, 2, 1))
        det = np.linalg.det(jacobian)
        size = np.abs(jacobian).max(axis=(1, 2))
        bad = np.flatnonzero(np.abs(det) <= 1e-13 * size ** 3)
        if len(bad):
            raise DegenerateElementError(
                f"Degenerate tetrahedron {first_index + int(bad[0])} (det J = {det[bad[0]]:.3e})"
            )
        inverse = np.linalg.inv(jacobian)
        grad_lambda = np.einsum("kr,erd->ekd", REFERENCE_GRAD_LAMBDA, inverse)
        ordered = verts[:, np.array(ORDERINGS)]
        bubble_jacobians = np.transpose(ordered[:, :, 1:] - ordered[:, :, :1], (0, 1, 3, 2))
        return cls(verts, jacobian, det, grad_lambda, bubble_jacobians, np.linalg.inv(bubble_jacobians))

    def __len__(self) -> int:
        return len(self.vertices)

    @property
    def abs_det(self) -> np.ndarray:
        return np.abs(self.determinant)

    def physical_points(self, tables: ReferenceTables) -> np.ndarray:
        return self.vertices[:, None, 0, :] + np.einsum("qr,edr->eqd", tables.points, self.jacobian)

    def conforming_gradients(self, tables: ReferenceTables) -> np.ndarray:
        """Physical gradients of the 20 P3 functions, shape (E, q, 20, 3)."""
        return np.einsum("qnk,ekd->eqnd", tables.p3_bary, self.grad_lambda)

    def bubble_values(self, tables: ReferenceTables) -> np.ndarray:
        """Mapped bubble values, shape (E, q, 9, 3)."""
        return np.einsum("eiab,iqb->eqia", self.bubble_jacobians, tables.bubble_values)

    def bubble_gradients(self, tables: ReferenceTables) -> np.ndarray:
        """Mapped bubble Jacobians, shape (E, q, 9, 3, 3)."""
        return np.einsum("eiab,iqbc,eicd->eqiad", self.bubble_jacobians, tables.bubble_jacobians,
                         self.bubble_inverses)

    def weighted(self, tables: ReferenceTables) -> np.ndarray:
        return self.abs_det[:, None] * tables.weights[None, :]


# ---------------------------------------------------------------------------
# Local kernels
# ---------------------------------------------------------------------------

def local_stiffness(geom: ElementGeometry, tables: ReferenceTables) -> np.ndarray:
    n = len(geom)
    wdet = geom.weighted(tables)
    gl = geom.conforming_gradients(tables)
    gb = geom.bubble_gradients(tables)
    scalar = np.einsum("eq,eqnd,eqmd->enm", wdet, gl, gl)
    block = np.zeros((n, LOCAL_VELOCITY_DOFS, LOCAL_VELOCITY_DOFS))
    block[:, :LOCAL_CONFORMING_DOFS, :LOCAL_CONFORMING_DOFS] = np.einsum(
        "enm,cd->encmd", scalar, np.eye(3)).reshape(n, LOCAL_CONFORMING_DOFS, LOCAL_CONFORMING_DOFS)
    mixed = np.einsum("eq,eqnd,eqicd->enci", wdet, gl, gb).reshape(n, LOCAL_CONFORMING_DOFS, N_BUBBLES)
    block[:, :LOCAL_CONFORMING_DOFS, LOCAL_CONFORMING_DOFS:] = mixed
    block[:, LOCAL_CONFORMING_DOFS:, :LOCAL_CONFORMING_DOFS] = mixed.transpose(0, 2, 1)
    block[:, LOCAL_CONFORMING_DOFS:, LOCAL_CONFORMING_DOFS:] = np.einsum("eq,eqicd,eqjcd->eij", wdet, gb, gb)
    return block


def local_divergence(geom: ElementGeometry, tables: ReferenceTables) -> np.ndarray:
    """Entries (div phi_j, q_k) over each element, shape (E, 10, 69)."""
    n = len(geom)
    wdet = geom.weighted(tables)
    gl = geom.conforming_gradients(tables)
    block = np.empty((n, N_P2, LOCAL_VELOCITY_DOFS))
    block[:, :, :LOCAL_CONFORMING_DOFS] = np.einsum(
        "eq,qk,eqnc->eknc", wdet, tables.p2, gl).reshape(n, N_P2, LOCAL_CONFORMING_DOFS)
    reference = np.einsum("q,qk,iq->ki", tables.weights, tables.p2, tables.bubble_divergence)
    block[:, :, LOCAL_CONFORMING_DOFS:] = geom.abs_det[:, None, None] * reference[None]
    return block


def local_pressure_mass(geom: ElementGeometry, tables: ReferenceTables) -> np.ndarray:
    reference = np.einsum("q,qk,ql->kl", tables.weights, tables.p2, tables.p2)
    return geom.abs_det[:, None, None] * reference[None]


def local_load(geom: ElementGeometry, tables: ReferenceTables, forcing: VectorField) -> np.ndarray:
    n = len(geom)
    points = geom.physical_points(tables)
    values = np.asarray(forcing(points.reshape(-1, 3)), dtype=float).reshape(points.shape)
    wdet = geom.weighted(tables)
    load = np.empty((n, LOCAL_VELOCITY_DOFS))
    load[:, :LOCAL_CONFORMING_DOFS] = np.einsum("eq,qn,eqc->enc", wdet, tables.p3, values).reshape(n, -1)
    load[:, LOCAL_CONFORMING_DOFS:] = np.einsum("eq,eqia,eqa->ei", wdet, geom.bubble_values(tables), values)
    return load


def evaluate_velocity(geom: ElementGeometry, tables: ReferenceTables, local: np.ndarray,
                      gradients: bool = True) -> tuple[np.ndarray, np.ndarray | None]:
    """Discrete velocity (E, q, 3) and its Jacobian (E, q, 3, 3) from local coefficients (E, 69)."""
    conforming = local[:, :LOCAL_CONFORMING_DOFS].reshape(-1, N_P3, 3)
    bubbles = local[:, LOCAL_CONFORMING_DOFS:]
    values = np.einsum("qn,enc->eqc", tables.p3, conforming)
    values += np.einsum("eqic,ei->eqc", geom.bubble_values(tables), bubbles)
    if not gradients:
        return values, None
    grads = np.einsum("eqnd,enc->eqcd", geom.conforming_gradients(tables), conforming)
    grads += np.einsum("eqicd,ei->eqcd", geom.bubble_gradients(tables), bubbles)
    return values, grads


def evaluate_pressure(tables: ReferenceTables, local: np.ndarray) -> np.ndarray:
    return np.einsum("qk,ek->eq", tables.p2, local)


@dataclass(frozen=True, eq=False)
class ElementMatrices:
    stiffness: np.ndarray
    divergence: np.ndarray
    mass: np.ndarray


def element_matrices(vertices) -> ElementMatrices:
    """Local 69x69 stiffness, 10x69 divergence and 10x10 mass blocks of one tetrahedron."""
    geom = ElementGeometry.from_vertices(vertices)
    return ElementMatrices(
        stiffness=local_stiffness(geom, reference_tables(STIFFNESS_DEGREE))[0],
        divergence=local_divergence(geom, reference_tables(DIVERGENCE_DEGREE))[0],
        mass=local_pressure_mass(geom, reference_tables(MASS_DEGREE))[0],
    )


# ---------------------------------------------------------------------------
# Global assembly
# ---------------------------------------------------------------------------

def _chunks(n: int) -> list[slice]:
    return [slice(start, min(start + CHUNK_SIZE, n)) for start in range(0, n, CHUNK_SIZE)]


def map_element_chunks(mesh: TetMesh, work: Callable[[slice, ElementGeometry], object], threads: int) -> list:
    def task(chunk: slice):
        geom = ElementGeometry.from_vertices(mesh.vertices[mesh.tets[chunk]], first_index=chunk.start)
        return work(chunk, geom)

    chunks = _chunks(mesh.n_tets)
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(task, chunks))
    return [task(chunk) for chunk in chunks]


def _assemble_matrix(mesh: TetMesh, shape: tuple[int, int], row_map: np.ndarray, col_map: np.ndarray,
                     kernel: Callable[[ElementGeometry, ReferenceTables], np.ndarray], degree: int,
                     threads: int) -> sp.csr_matrix:
    tables = reference_tables(degree)

    def work(chunk: slice, geom: ElementGeometry) -> sp.csr_matrix:
        blocks = kernel(geom, tables)
        rows = np.broadcast_to(row_map[chunk][:, :, None], blocks.shape).ravel()
        cols = np.broadcast_to(col_map[chunk][:, None, :], blocks.shape).ravel()
        return sp.coo_matrix((blocks.ravel(), (rows, cols)), shape=shape).tocsr()

    total = sp.csr_matrix(shape)
    for part in map_element_chunks(mesh, work, threads):
        total = total + part
    total = sp.csr_matrix(total)
    total.sum_duplicates()
    total.sort_indices()
    return total


def assemble_stiffness(mesh: TetMesh, dofmap: VelocityDofMap, threads: int = 1) -> sp.csr_matrix:
    l2g = dofmap.local_to_global
    return _assemble_matrix(mesh, (dofmap.n_dofs, dofmap.n_dofs), l2g, l2g, local_stiffness,
                            STIFFNESS_DEGREE, threads)


def assemble_divergence(mesh: TetMesh, dofmap: VelocityDofMap, pdofs: PressureDofMap,
                        threads: int = 1) -> sp.csr_matrix:
    return _assemble_matrix(mesh, (pdofs.n_dofs, dofmap.n_dofs), pdofs.local_to_global,
                            dofmap.local_to_global, local_divergence, DIVERGENCE_DEGREE, threads)


def assemble_pressure_mass(mesh: TetMesh, pdofs: PressureDofMap, threads: int = 1) -> sp.csr_matrix:
    l2g = pdofs.local_to_global
    return _assemble_matrix(mesh, (pdofs.n_dofs, pdofs.n_dofs), l2g, l2g, local_pressure_mass,
                            MASS_DEGREE, threads)


def assemble_load(mesh: TetMesh, dofmap: VelocityDofMap, forcing: VectorField, threads: int = 1,
                  degree: int = LOAD_DEGREE) -> np.ndarray:
    tables = reference_tables(degree)

    def work(chunk: slice, geom: ElementGeometry) -> np.ndarray:
        local = local_load(geom, tables, forcing)
        return np.bincount(dofmap.local_to_global[chunk].ravel(), weights=local.ravel(), minlength=dofmap.n_dofs)

    return np.sum(map_element_chunks(mesh, work, threads), axis=0) if mesh.n_tets else np.zeros(dofmap.n_dofs)


# ---------------------------------------------------------------------------
# Saddle-point system
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SaddleSystem:
    """A u - B^T p = f, B u = 0, with the pressure mass M for preconditioning and norms."""

    stiffness: sp.csr_matrix
    divergence: sp.csr_matrix
    pressure_mass: sp.csr_matrix
    load: np.ndarray
    velocity_dofs: VelocityDofMap
    pressure_dofs: PressureDofMap
    constrained: np.ndarray | None = None

    @property
    def is_constrained(self) -> bool:
        return self.constrained is not None

    @property
    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.velocity_dofs.n_dofs, dtype=bool)
        if self.constrained is not None:
            mask[self.constrained] = False
        return mask


def assemble_system(mesh: TetMesh, dofmap: VelocityDofMap, pdofs: PressureDofMap, forcing: VectorField,
                    threads: int = 1) -> SaddleSystem:
    started = time.perf_counter()
    system = SaddleSystem(
        stiffness=assemble_stiffness(mesh, dofmap, threads),
        divergence=assemble_divergence(mesh, dofmap, pdofs, threads),
        pressure_mass=assemble_pressure_mass(mesh, pdofs, threads),
        load=assemble_load(mesh, dofmap, forcing, threads),
        velocity_dofs=dofmap,
        pressure_dofs=pdofs,
    )
    logger.info(
        f"Assembled system: {dofmap.n_dofs} velocity + {pdofs.n_dofs} pressure DOFs, "
        f"nnz(A)={system.stiffness.nnz} in {time.perf_counter() - started:.2f}s"
    )
    return system


def apply_dirichlet(system: SaddleSystem, boundary: np.ndarray) -> SaddleSystem:
    """Homogeneous Dirichlet elimination: identity rows/columns in A, zero columns in B, zero load."""
    boundary = np.unique(np.asarray(boundary, dtype=np.int64))
    keep = np.ones(system.velocity_dofs.n_dofs)
    keep[boundary] = 0.0
    free = sp.diags(keep)
    stiffness = (free @ system.stiffness @ free + sp.diags(1.0 - keep)).tocsr()
    divergence = (system.divergence @ free).tocsr()
    for matrix in (stiffness, divergence):
        matrix.eliminate_zeros()
        matrix.sort_indices()
    load = system.load * keep
    return replace(system, stiffness=stiffness, divergence=divergence, load=load, constrained=boundary)


def export_matrix(matrix, path: str | Path, comment: str = "") -> None:
    """Write a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)
