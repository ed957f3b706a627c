"""Global degree-of-freedom maps for the enriched P3 velocity and discontinuous P2 pressure."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from element import AffineMap, N_BUBBLES, affine_maps, piola_bubble
from mesh import TetMesh, derive_connectivity
from reference import (
    LOCAL_EDGES,
    N_P2,
    N_P3,
    eval_p2_basis,
    p2_reference_mass,
    p2_reference_moments,
    p3_values,
    quadrature,
)

logger = logging.getLogger("ncp3")

LOCAL_CONFORMING_DOFS = 3 * N_P3
LOCAL_VELOCITY_DOFS = LOCAL_CONFORMING_DOFS + N_BUBBLES


@dataclass(frozen=True, eq=False)
class VelocityDofMap:
    """Numbering of conforming P3 nodes and per-element bubbles.

    Nodes are numbered vertices first, then two per edge (the first one nearer
    the smaller-id endpoint), then one per face. Scalar node ``n`` carries the
    velocity DOFs ``3n + c``; bubble ``i`` of tet ``t`` is DOF ``3 N_c + 9t + i``.
    ``local_to_global`` rows list the 60 conforming DOFs node-major followed by
    the 9 bubbles.
    """

    n_vertices: int
    n_edges: int
    n_faces: int
    n_tets: int
    local_nodes: np.ndarray
    local_to_global: np.ndarray
    node_coords: np.ndarray
    boundary_nodes: np.ndarray

    @property
    def n_conforming(self) -> int:
        return self.n_vertices + 2 * self.n_edges + self.n_faces

    @property
    def bubble_offset(self) -> int:
        return 3 * self.n_conforming

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_conforming + N_BUBBLES * self.n_tets

    def bubble_dofs(self, tet: int) -> np.ndarray:
        return self.bubble_offset + N_BUBBLES * tet + np.arange(N_BUBBLES)


@dataclass(frozen=True, eq=False)
class PressureDofMap:
    """Ten monomial coefficients per tet, in the tet's own reference coordinates."""

    n_tets: int
    local_to_global: np.ndarray
    mean_functional: np.ndarray
    constant_vector: np.ndarray
    domain_volume: float

    @property
    def n_dofs(self) -> int:
        return N_P2 * self.n_tets

    def mean(self, pressure: np.ndarray) -> float:
        return float(self.mean_functional @ pressure)

    def project_mean_zero(self, pressure: np.ndarray) -> np.ndarray:
        return pressure - self.mean(pressure) * self.constant_vector


def build_velocity_dofs(mesh: TetMesh) -> VelocityDofMap:
    if not mesh.has_connectivity:
        mesh = derive_connectivity(mesh)
    tets = mesh.tets
    n_v, n_e, n_f, n_t = mesh.n_vertices, mesh.n_edges, mesh.n_faces, mesh.n_tets

    nodes = np.empty((n_t, N_P3), dtype=np.int64)
    nodes[:, :4] = tets
    for k, (a, b) in enumerate(LOCAL_EDGES):
        base = n_v + 2 * mesh.tet_edges[:, k]
        flipped = (tets[:, a] > tets[:, b]).astype(np.int64)
        nodes[:, 4 + 2 * k] = base + flipped
        nodes[:, 5 + 2 * k] = base + 1 - flipped
    nodes[:, 16:] = n_v + 2 * n_e + mesh.tet_faces

    conforming = (3 * nodes[:, :, None] + np.arange(3)).reshape(n_t, LOCAL_CONFORMING_DOFS)
    n_c = n_v + 2 * n_e + n_f
    bubbles = 3 * n_c + N_BUBBLES * np.arange(n_t)[:, None] + np.arange(N_BUBBLES)
    local_to_global = np.hstack([conforming, bubbles])

    lo, hi = mesh.vertices[mesh.edges[:, 0]], mesh.vertices[mesh.edges[:, 1]]
    edge_nodes = np.stack([(2 * lo + hi) / 3.0, (lo + 2 * hi) / 3.0], axis=1).reshape(-1, 3)
    face_nodes = mesh.vertices[mesh.faces].mean(axis=1)
    node_coords = np.vstack([mesh.vertices, edge_nodes, face_nodes])

    boundary_nodes = np.concatenate([
        mesh.vertex_boundary,
        np.repeat(mesh.edge_boundary, 2),
        mesh.face_boundary,
    ])
    dofmap = VelocityDofMap(n_v, n_e, n_f, n_t, nodes, local_to_global, node_coords, boundary_nodes)
    logger.debug(f"Velocity DOFs: N_c={dofmap.n_conforming}, total={dofmap.n_dofs}")
    return dofmap


def build_pressure_dofs(mesh: TetMesh) -> PressureDofMap:
    n_t = mesh.n_tets
    volumes = np.abs(mesh.volumes())
    domain_volume = float(volumes.sum())
    # |det J| = 6 |T|
    moments = 6.0 * volumes[:, None] * p2_reference_moments()[None, :]
    constant = np.zeros((n_t, N_P2))
    constant[:, 0] = 1.0
    return PressureDofMap(
        n_tets=n_t,
        local_to_global=np.arange(N_P2 * n_t).reshape(n_t, N_P2),
        mean_functional=moments.ravel() / domain_volume,
        constant_vector=constant.ravel(),
        domain_volume=domain_volume,
    )


def boundary_dofs(mesh: TetMesh, dofmap: VelocityDofMap) -> np.ndarray:
    """All three components of every conforming node on the boundary; never bubble DOFs."""
    nodes = np.flatnonzero(dofmap.boundary_nodes)
    return (3 * nodes[:, None] + np.arange(3)).ravel()


def interpolate_conforming(dofmap: VelocityDofMap, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Velocity vector with nodal values of ``func`` and zero bubble coefficients."""
    coeffs = np.zeros(dofmap.n_dofs)
    coeffs[:dofmap.bubble_offset] = np.asarray(func(dofmap.node_coords), dtype=float).reshape(-1)
    return coeffs


def project_pressure(mesh: TetMesh, pdofs: PressureDofMap, func: Callable[[np.ndarray], np.ndarray],
                     degree: int = 8) -> np.ndarray:
    """Element-wise L2 projection of a scalar function onto the P2 pressure space."""
    rule = quadrature("tet", degree)
    basis = eval_p2_basis(rule.points)
    coords = mesh.tet_vertices()
    edges = coords[:, 1:] - coords[:, :1]
    points = coords[:, :1] + np.einsum("qk,tkd->tqd", rule.points, edges)
    values = np.asarray(func(points.reshape(-1, 3)), dtype=float).reshape(len(coords), -1)
    rhs = np.einsum("q,qk,tq->tk", rule.weights, basis, values)
    return np.linalg.solve(p2_reference_mass(), rhs.T).T.ravel()


def tet_velocity_values(mesh: TetMesh, dofmap: VelocityDofMap, coeffs: np.ndarray, tet: int,
                        bary) -> np.ndarray:
    """Discrete velocity inside one tet at barycentric points, shape (n, 3)."""
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    local = np.asarray(coeffs)[dofmap.local_to_global[tet]]
    values = p3_values(bary) @ local[:LOCAL_CONFORMING_DOFS].reshape(N_P3, 3)
    verts = mesh.vertices[mesh.tets[tet]]
    points = bary @ verts
    for amap, d in zip(affine_maps(verts), local[LOCAL_CONFORMING_DOFS:]):
        if d != 0.0:
            values = values + d * piola_bubble(amap, points)
    return values


def tet_pressure_values(mesh: TetMesh, pdofs: PressureDofMap, pressure: np.ndarray, tet: int,
                        points) -> np.ndarray:
    """Discrete pressure inside one tet at physical points."""
    amap = AffineMap.from_vertices(mesh.vertices[mesh.tets[tet]])
    local = np.asarray(pressure)[pdofs.local_to_global[tet]]
    return eval_p2_basis(amap.pull_back(points)) @ local
