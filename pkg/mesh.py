"""Tetrahedral meshes: the structured 12-tetrahedra unit-cube family, connectivity, validation and text I/O."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from reference import LOCAL_EDGES, LOCAL_FACES

logger = logging.getLogger("ncp3")

# Vertex order of the face opposite local vertex k, oriented with the outward normal.
OUTWARD_FACES: tuple[tuple[int, int, int], ...] = ((1, 2, 3), (0, 3, 2), (0, 1, 3), (0, 2, 1))


class MeshError(ValueError):
    """Invalid mesh input."""


class NonManifoldMeshError(MeshError):
    """A face is shared by more than two tetrahedra."""


class MeshFormatError(MeshError):
    """Malformed mesh file."""


@dataclass(frozen=True)
class Face:
    vertex_ids: tuple[int, int, int]
    adjacent_tets: tuple[int, ...]
    is_boundary: bool


@dataclass(frozen=True)
class Edge:
    vertex_ids: tuple[int, int]
    is_boundary: bool


@dataclass(frozen=True)
class Tetrahedron:
    vertex_ids: tuple[int, int, int, int]
    volume: float


@dataclass(frozen=True, eq=False)
class TetMesh:
    """Tetrahedral mesh.

    ``vertices`` (nV, 3) and ``tets`` (nT, 4) are always present. The
    connectivity arrays are filled by :func:`derive_connectivity`:

    - ``faces`` (nF, 3) sorted vertex ids, ``face_tets`` (nF, 2) with -1 for a
      missing neighbour, ``tet_faces`` (nT, 4) where entry k is the face
      opposite local vertex k.
    - ``edges`` (nE, 2) sorted vertex ids, ``tet_edges`` (nT, 6) in
      ``LOCAL_EDGES`` order.
    - boundary flags for faces, edges and vertices.
    """

    vertices: np.ndarray
    tets: np.ndarray
    faces: np.ndarray | None = None
    face_tets: np.ndarray | None = None
    tet_faces: np.ndarray | None = None
    edges: np.ndarray | None = None
    tet_edges: np.ndarray | None = None
    face_boundary: np.ndarray | None = None
    edge_boundary: np.ndarray | None = None
    vertex_boundary: np.ndarray | None = None

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    @property
    def n_faces(self) -> int:
        return 0 if self.faces is None else len(self.faces)

    @property
    def n_edges(self) -> int:
        return 0 if self.edges is None else len(self.edges)

    @property
    def has_connectivity(self) -> bool:
        return self.faces is not None

    def volumes(self) -> np.ndarray:
        """Signed volumes of the tetrahedra."""
        return signed_volumes(self.vertices, self.tets)

    def tet_vertices(self, index=slice(None)) -> np.ndarray:
        """Coordinates of tetrahedron vertices, shape (..., 4, 3)."""
        return self.vertices[self.tets[index]]

    def tetrahedron(self, index: int) -> Tetrahedron:
        ids = tuple(int(v) for v in self.tets[index])
        return Tetrahedron(ids, float(signed_volumes(self.vertices, self.tets[index:index + 1])[0]))

    def face(self, index: int) -> Face:
        self._require_connectivity()
        adjacent = tuple(int(t) for t in self.face_tets[index] if t >= 0)
        return Face(tuple(int(v) for v in self.faces[index]), adjacent, bool(self.face_boundary[index]))

    def edge(self, index: int) -> Edge:
        self._require_connectivity()
        return Edge(tuple(int(v) for v in self.edges[index]), bool(self.edge_boundary[index]))

    def _require_connectivity(self) -> None:
        if not self.has_connectivity:
            raise MeshError("Mesh connectivity has not been derived")


def signed_volumes(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    coords = np.asarray(vertices, dtype=float)[np.asarray(tets)]
    edges = coords[:, 1:] - coords[:, :1]
    return np.linalg.det(edges) / 6.0


# ---------------------------------------------------------------------------
# Structured unit-cube meshes
# ---------------------------------------------------------------------------

def _cube_template() -> np.ndarray:
    """12 positively oriented tets of the unit cube; corners 4a+2b+c, center 8.

    Storage order is also the bubble slot order: slots 0 and 1 hold the ends
    of the face diagonal (swapped when needed for positive orientation), slot 2
    the remaining corner of that face triangle and slot 3 the cube center.
    """
    corners = np.array(list(itertools.product((0.0, 1.0), repeat=3)))
    points = np.vstack([corners, [[0.5, 0.5, 0.5]]])
    tets = []
    for axis, side in itertools.product(range(3), (0.0, 1.0)):
        on_face = [i for i in range(8) if corners[i, axis] == side]
        # corners are already in lexicographic order
        low = on_face[0]
        high = next(i for i in on_face if np.count_nonzero(corners[i] != corners[low]) == 2)
        others = [i for i in on_face if i not in (low, high)]
        for other in others:
            tet = [low, high, other, 8]
            coords = points[tet]
            if np.linalg.det(coords[1:] - coords[0]) < 0:
                tet[0], tet[1] = tet[1], tet[0]
            tets.append(tet)
    return np.array(tets, dtype=np.int64)


CUBE_TEMPLATE = _cube_template()


def build_cube_mesh(n: int) -> TetMesh:
    """Unit cube split into n^3 cells of 12 tetrahedra each, connectivity included."""
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise MeshError(f"Cells per axis must be a positive integer, got {n!r}")
    n = int(n)
    ticks = np.linspace(0.0, 1.0, n + 1)
    grid = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), axis=-1).reshape(-1, 3)
    cell = np.array(list(itertools.product(range(n), repeat=3)), dtype=np.int64)
    centers = (cell + 0.5) / n
    vertices = np.vstack([grid, centers])

    offsets = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)
    corner_ijk = cell[:, None, :] + offsets[None, :, :]
    corner_ids = corner_ijk[..., 0] * (n + 1) ** 2 + corner_ijk[..., 1] * (n + 1) + corner_ijk[..., 2]
    center_ids = (n + 1) ** 3 + np.arange(len(cell))
    local_to_global = np.column_stack([corner_ids, center_ids])
    tets = local_to_global[:, CUBE_TEMPLATE].reshape(-1, 4)

    mesh = derive_connectivity(TetMesh(vertices, tets))
    logger.debug(f"Built cube mesh n={n}: {mesh.n_vertices} vertices, {mesh.n_tets} tets")
    return mesh


def level_cells(level: int) -> int:
    """Cells per axis of refinement level ``level`` (level 1 is a single cube)."""
    if level < 1:
        raise MeshError(f"Mesh level must be >= 1, got {level}")
    return 2 ** (level - 1)


# ---------------------------------------------------------------------------
# Connectivity
# ---------------------------------------------------------------------------

def _pair_owners(inverse: np.ndarray, owners: np.ndarray, n_entities: int) -> np.ndarray:
    """First and second owner of each deduplicated entity, -1 if absent."""
    result = np.full((n_entities, 2), -1, dtype=np.int64)
    order = np.argsort(inverse, kind="stable")
    sorted_ids = inverse[order]
    first = np.ones(len(sorted_ids), dtype=bool)
    first[1:] = sorted_ids[1:] != sorted_ids[:-1]
    result[sorted_ids[first], 0] = owners[order[first]]
    result[sorted_ids[~first], 1] = owners[order[~first]]
    return result


def derive_connectivity(mesh: TetMesh) -> TetMesh:
    tets = np.asarray(mesh.tets, dtype=np.int64)
    n_tets, n_vertices = len(tets), len(mesh.vertices)
    if tets.ndim != 2 or tets.shape[1] != 4:
        raise MeshError(f"Tetrahedra must have shape (n, 4), got {tets.shape}")
    if n_tets and (tets.min() < 0 or tets.max() >= n_vertices):
        raise MeshError("Tetrahedron references a vertex outside the vertex list")

    local_faces = np.sort(tets[:, LOCAL_FACES], axis=2).reshape(-1, 3)
    faces, face_inverse, face_counts = np.unique(local_faces, axis=0, return_inverse=True, return_counts=True)
    face_inverse = face_inverse.reshape(-1)
    if len(face_counts) and face_counts.max() > 2:
        worst = int(np.argmax(face_counts))
        raise NonManifoldMeshError(
            f"Face {tuple(int(v) for v in faces[worst])} is shared by {face_counts[worst]} tetrahedra"
        )
    owners = np.repeat(np.arange(n_tets), 4)
    face_tets = _pair_owners(face_inverse, owners, len(faces))

    local_edges = np.sort(tets[:, LOCAL_EDGES], axis=2).reshape(-1, 2)
    edges, edge_inverse = np.unique(local_edges, axis=0, return_inverse=True)
    edge_inverse = edge_inverse.reshape(-1)

    face_boundary = face_tets[:, 1] < 0
    boundary_faces = faces[face_boundary]
    vertex_boundary = np.zeros(n_vertices, dtype=bool)
    vertex_boundary[boundary_faces.ravel()] = True

    edge_keys = edges[:, 0] * n_vertices + edges[:, 1]
    face_edge_pairs = boundary_faces[:, [(0, 1), (0, 2), (1, 2)]].reshape(-1, 2)
    edge_boundary = np.zeros(len(edges), dtype=bool)
    edge_boundary[np.searchsorted(edge_keys, face_edge_pairs[:, 0] * n_vertices + face_edge_pairs[:, 1])] = True

    return replace(
        mesh,
        tets=tets,
        faces=faces,
        face_tets=face_tets,
        tet_faces=face_inverse.reshape(n_tets, 4),
        edges=edges,
        tet_edges=edge_inverse.reshape(n_tets, 6),
        face_boundary=face_boundary,
        edge_boundary=edge_boundary,
        vertex_boundary=vertex_boundary,
    )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _outward_normals(coords: np.ndarray, local_face: int) -> np.ndarray:
    a, b, c = OUTWARD_FACES[local_face]
    return np.cross(coords[:, b] - coords[:, a], coords[:, c] - coords[:, a])


def validate(mesh: TetMesh, volume_tol: float = 1e-14) -> list[str]:
    """List of invariant violations, empty for a valid mesh. Never raises."""
    problems: list[str] = []
    vertices = np.asarray(mesh.vertices, dtype=float)
    tets = np.asarray(mesh.tets)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        return [f"vertices: expected shape (n, 3), got {vertices.shape}"]
    if tets.ndim != 2 or tets.shape[1] != 4:
        return [f"tetrahedra: expected shape (n, 4), got {tets.shape}"]

    for v in np.flatnonzero(~np.isfinite(vertices).all(axis=1)):
        problems.append(f"vertex {v}: non-finite coordinates")
    bad_refs = (tets < 0) | (tets >= len(vertices))
    for t in np.flatnonzero(bad_refs.any(axis=1)):
        problems.append(f"tet {t}: vertex index out of range {tuple(int(v) for v in tets[t])}")
    if problems:
        return problems
    tets = tets.astype(np.int64)

    sorted_tets = np.sort(tets, axis=1)
    for t in np.flatnonzero((np.diff(sorted_tets, axis=1) == 0).any(axis=1)):
        problems.append(f"tet {t}: repeated vertex {tuple(int(v) for v in tets[t])}")

    volumes = signed_volumes(vertices, tets)
    scale = max(float(np.ptp(vertices, axis=0).max()) if len(vertices) else 1.0, 1.0) ** 3
    for t in np.flatnonzero(volumes <= volume_tol * scale):
        problems.append(f"tet {t}: non-positive signed volume {volumes[t]:.3e}")

    _, first_index, counts = np.unique(sorted_tets, axis=0, return_index=True, return_counts=True)
    for i in np.flatnonzero(counts > 1):
        problems.append(f"tet {first_index[i]}: duplicated {counts[i]} times (non-manifold)")

    local_faces = np.sort(tets[:, LOCAL_FACES], axis=2).reshape(-1, 3)
    faces, inverse, face_counts = np.unique(local_faces, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    for f in np.flatnonzero(face_counts > 2):
        problems.append(f"face {tuple(int(v) for v in faces[f])}: non-manifold, shared by {face_counts[f]} tetrahedra")

    interior = np.flatnonzero(face_counts == 2)
    if len(interior):
        owners = np.repeat(np.arange(len(tets)), 4)
        order = np.argsort(inverse, kind="stable")
        coords = vertices[tets]
        normals = np.stack([_outward_normals(coords, k) for k in range(4)], axis=1).reshape(-1, 3)
        starts = np.searchsorted(inverse[order], interior)
        first, second = order[starts], order[starts + 1]
        dots = np.einsum("ij,ij->i", normals[first], normals[second])
        for f, a, b, d in zip(interior, owners[first], owners[second], dots):
            if d >= 0:
                problems.append(
                    f"face {tuple(int(v) for v in faces[f])}: non-manifold, tets {a} and {b} lie on the same side"
                )
    return problems


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def write_mesh(mesh: TetMesh, path: str | Path) -> None:
    """Vertex count, coordinates, tet count, 4 indices per line."""
    lines = [str(mesh.n_vertices)]
    lines.extend(" ".join(f"{c:.17g}" for c in row) for row in mesh.vertices)
    lines.append(str(mesh.n_tets))
    lines.extend(" ".join(str(int(v)) for v in row) for row in mesh.tets)
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh(path: str | Path) -> TetMesh:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise MeshFormatError(f"Cannot read mesh file {path}: {exc}") from exc
    rows = [line.split("#", 1)[0].split() for line in text.splitlines()]
    rows = [row for row in rows if row]
    try:
        n_vertices = int(rows[0][0])
        vertices = np.array([[float(x) for x in row] for row in rows[1:1 + n_vertices]], dtype=float)
        n_tets = int(rows[1 + n_vertices][0])
        tets = np.array([[int(x) for x in row] for row in rows[2 + n_vertices:2 + n_vertices + n_tets]], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise MeshFormatError(f"Malformed mesh file {path}: {exc}") from exc
    if vertices.shape != (n_vertices, 3) or tets.shape != (n_tets, 4):
        raise MeshFormatError(
            f"Malformed mesh file {path}: expected {n_vertices} vertices and {n_tets} tetrahedra"
        )
    if len(rows) != 2 + n_vertices + n_tets:
        raise MeshFormatError(f"Malformed mesh file {path}: trailing data after tetrahedra")
    return derive_connectivity(TetMesh(vertices, tets))
