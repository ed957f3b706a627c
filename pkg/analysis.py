"""Manufactured solution, error norms, divergence checks and the convergence study report."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

from assembly import (
    LOAD_DEGREE,
    ElementGeometry,
    ReferenceTables,
    SaddleSystem,
    apply_dirichlet,
    assemble_system,
    evaluate_pressure,
    evaluate_velocity,
    reference_tables,
    map_element_chunks,
)
from mesh import TetMesh, build_cube_mesh, level_cells
from solver import Solution, SolverConfig, SolverError, estimate_infsup, solve_stokes
from spaces import (
    LOCAL_CONFORMING_DOFS,
    PressureDofMap,
    VelocityDofMap,
    boundary_dofs,
    build_pressure_dofs,
    build_velocity_dofs,
)

logger = logging.getLogger("ncp3")

ERROR_DEGREE = LOAD_DEGREE
NORM_DEGREE = 8
DIVERGENCE_SAMPLES = 10
DIVERGENCE_SEED = 20240611


class ExactSolution:
    """u = (-g_z, g_z, g_x - g_y), g = 2^9 a(x) a(y) a(z), a(t) = t^2 (1-t)^2; p = 100 sin(2 pi x)."""

    amplitude = 2.0 ** 9
    pressure_amplitude = 100.0

    def __init__(self):
        a = Polynomial([0.0, 0.0, 1.0, -2.0, 1.0])
        self._a = [a.deriv(k) if k else a for k in range(4)]

    def _g(self, points: np.ndarray, dx: int, dy: int, dz: int) -> np.ndarray:
        x, y, z = points[..., 0], points[..., 1], points[..., 2]
        return self.amplitude * self._a[dx](x) * self._a[dy](y) * self._a[dz](z)

    def velocity(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        gz = self._g(pts, 0, 0, 1)
        return np.stack([-gz, gz, self._g(pts, 1, 0, 0) - self._g(pts, 0, 1, 0)], axis=-1)

    def velocity_gradient(self, points) -> np.ndarray:
        """Rows are gradients of the velocity components, shape (..., 3, 3)."""
        pts = np.asarray(points, dtype=float)
        gxz, gyz, gzz = self._g(pts, 1, 0, 1), self._g(pts, 0, 1, 1), self._g(pts, 0, 0, 2)
        gxx, gxy, gyy = self._g(pts, 2, 0, 0), self._g(pts, 1, 1, 0), self._g(pts, 0, 2, 0)
        row_z = np.stack([gxz, gyz, gzz], axis=-1)
        row_3 = np.stack([gxx - gxy, gxy - gyy, gxz - gyz], axis=-1)
        return np.stack([-row_z, row_z, row_3], axis=-2)

    def velocity_laplacian(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        lap_gz = self._g(pts, 2, 0, 1) + self._g(pts, 0, 2, 1) + self._g(pts, 0, 0, 3)
        lap_gx = self._g(pts, 3, 0, 0) + self._g(pts, 1, 2, 0) + self._g(pts, 1, 0, 2)
        lap_gy = self._g(pts, 2, 1, 0) + self._g(pts, 0, 3, 0) + self._g(pts, 0, 1, 2)
        return np.stack([-lap_gz, lap_gz, lap_gx - lap_gy], axis=-1)

    def divergence(self, points) -> np.ndarray:
        return np.trace(self.velocity_gradient(points), axis1=-2, axis2=-1)

    def pressure(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return self.pressure_amplitude * np.sin(2.0 * np.pi * pts[..., 0])

    def pressure_gradient(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        dx = 2.0 * np.pi * self.pressure_amplitude * np.cos(2.0 * np.pi * pts[..., 0])
        zeros = np.zeros_like(dx)
        return np.stack([dx, zeros, zeros], axis=-1)

    def forcing(self, points) -> np.ndarray:
        """f = -Laplace(u) + grad(p)."""
        return -self.velocity_laplacian(points) + self.pressure_gradient(points)


@dataclass
class ErrorNorms:
    l2_velocity: float
    h1_velocity: float
    l2_pressure: float


def _velocity_of(solution: Solution | np.ndarray) -> np.ndarray:
    return np.asarray(getattr(solution, "velocity", solution), dtype=float)


def error_norms(mesh: TetMesh, dofmap: VelocityDofMap, solution: Solution | np.ndarray,
                exact: ExactSolution, pdofs: PressureDofMap | None = None,
                pressure: np.ndarray | None = None, threads: int = 1) -> ErrorNorms:
    """L2 and broken H1 velocity errors, and the mean-shifted L2 pressure error.

    The pressure comes from ``solution.pressure`` unless given explicitly; with
    no pressure at all the pressure error is reported as 0.
    """
    velocity = _velocity_of(solution)
    if pressure is None:
        pressure = getattr(solution, "pressure", None)
    if pressure is not None and pdofs is None:
        pdofs = build_pressure_dofs(mesh)
    tables = reference_tables(ERROR_DEGREE)

    def work(chunk: slice, geom: ElementGeometry) -> np.ndarray:
        wdet = geom.weighted(tables)
        points = geom.physical_points(tables)
        values, grads = evaluate_velocity(geom, tables, velocity[dofmap.local_to_global[chunk]])
        sums = np.zeros(4)
        sums[0] = np.sum(wdet * np.sum((exact.velocity(points) - values) ** 2, axis=-1))
        sums[1] = np.sum(wdet * np.sum((exact.velocity_gradient(points) - grads) ** 2, axis=(-2, -1)))
        if pressure is not None:
            local = np.asarray(pressure)[pdofs.local_to_global[chunk]]
            diff = exact.pressure(points) - evaluate_pressure(tables, local)
            sums[2] = np.sum(wdet * diff ** 2)
            sums[3] = np.sum(wdet * diff)
        return sums

    totals = np.sum(map_element_chunks(mesh, work, threads), axis=0)
    volume = float(np.abs(mesh.volumes()).sum())
    pressure_sq = max(totals[2] - totals[3] ** 2 / volume, 0.0) if pressure is not None else 0.0
    return ErrorNorms(math.sqrt(totals[0]), math.sqrt(totals[1]), math.sqrt(pressure_sq))


def velocity_norm_1h(mesh: TetMesh, dofmap: VelocityDofMap, solution: Solution | np.ndarray,
                     threads: int = 1) -> float:
    """Mesh-dependent norm sqrt(||v||_0^2 + ||grad_h v||_0^2)."""
    velocity = _velocity_of(solution)
    tables = reference_tables(NORM_DEGREE)

    def work(chunk: slice, geom: ElementGeometry) -> float:
        values, grads = evaluate_velocity(geom, tables, velocity[dofmap.local_to_global[chunk]])
        wdet = geom.weighted(tables)
        return float(np.sum(wdet * (np.sum(values ** 2, axis=-1) + np.sum(grads ** 2, axis=(-2, -1)))))

    return math.sqrt(sum(map_element_chunks(mesh, work, threads)))


def divergence_sample_points(n_tets: int, samples: int = DIVERGENCE_SAMPLES,
                             seed: int = DIVERGENCE_SEED) -> np.ndarray:
    """Random barycentric points drawn independently for every tet, shape (n_tets, samples, 4)."""
    return np.random.default_rng(seed).dirichlet(np.ones(4), size=(n_tets, samples))


def divergence_check(mesh: TetMesh, dofmap: VelocityDofMap, solution: Solution | np.ndarray,
                     samples: int = DIVERGENCE_SAMPLES, seed: int = DIVERGENCE_SEED) -> float:
    """Largest |div u_h| over ``samples`` random points per tet."""
    velocity = _velocity_of(solution)
    bary = divergence_sample_points(mesh.n_tets, samples, seed)

    def work(chunk: slice, geom: ElementGeometry) -> float:
        local = velocity[dofmap.local_to_global[chunk]]
        points = bary[chunk]
        n, s = points.shape[:2]
        tables = ReferenceTables.at_points(points[..., 1:].reshape(-1, 3))
        # trace(J G J^-1) = trace(G): bubble divergences need no geometry
        p3_grads = np.einsum("esnk,ekd->esnd", tables.p3_bary.reshape(n, s, -1, 4), geom.grad_lambda)
        conforming = local[:, :LOCAL_CONFORMING_DOFS].reshape(n, -1, 3)
        div = np.einsum("esnd,end->es", p3_grads, conforming)
        div += np.einsum("ies,ei->es", tables.bubble_divergence.reshape(-1, n, s),
                         local[:, LOCAL_CONFORMING_DOFS:])
        return float(np.abs(div).max())

    return max(map_element_chunks(mesh, work, 1), default=0.0)


# ---------------------------------------------------------------------------
# Convergence study
# ---------------------------------------------------------------------------

@dataclass
class LevelRun:
    level: int
    mesh: TetMesh
    velocity_dofs: VelocityDofMap
    pressure_dofs: PressureDofMap
    system: SaddleSystem
    solution: Solution


def prepare_level(level: int, exact: ExactSolution | None = None, threads: int = 1
                  ) -> tuple[TetMesh, VelocityDofMap, PressureDofMap, SaddleSystem]:
    """Mesh, DOF maps and the constrained system of one refinement level."""
    exact = exact or ExactSolution()
    mesh = build_cube_mesh(level_cells(level))
    vdofs = build_velocity_dofs(mesh)
    pdofs = build_pressure_dofs(mesh)
    system = assemble_system(mesh, vdofs, pdofs, exact.forcing, threads)
    return mesh, vdofs, pdofs, apply_dirichlet(system, boundary_dofs(mesh, vdofs))


def solve_level(level: int, config: SolverConfig = SolverConfig(), threads: int = 1,
                exact: ExactSolution | None = None, prepared: tuple | None = None) -> LevelRun:
    """Solve one level; ``prepared`` reuses the output of prepare_level for the same level and forcing."""
    mesh, vdofs, pdofs, system = prepared or prepare_level(level, exact, threads)
    logger.info(f"Level {level}: {mesh.n_tets} tets, solving")
    solution = solve_stokes(system, config)
    return LevelRun(level, mesh, vdofs, pdofs, system, solution)


@dataclass
class LevelResult:
    level: int
    tets: int
    velocity_dofs: int = 0
    pressure_dofs: int = 0
    l2_velocity: float = math.nan
    h1_velocity: float = math.nan
    l2_pressure: float = math.nan
    rates: tuple[float, float, float] = (math.nan, math.nan, math.nan)
    uzawa_iterations: int = 0
    wall_time: float = 0.0
    divergence: float = math.nan
    velocity_norm: float = math.nan
    infsup: float | None = None
    status: str = "ok"

    @property
    def solved(self) -> bool:
        return self.status == "ok"


def _table_float(value: float) -> str:
    """Scientific notation with a 0.xxx mantissa and 3 significant digits, e.g. 0.168E-01."""
    if value is None or not math.isfinite(value):
        return "-"
    if value == 0.0:
        return "0.000E+00"
    exponent = math.floor(math.log10(abs(value))) + 1
    mantissa = round(value / 10.0 ** exponent, 3)
    if abs(mantissa) >= 1.0:
        mantissa /= 10.0
        exponent += 1
    return f"{mantissa:.3f}E{exponent:+03d}"


def _rate(value: float) -> str:
    return "-" if not math.isfinite(value) else f"{value:.1f}"


@dataclass
class ConvergenceReport:
    rows: list[LevelResult] = field(default_factory=list)

    COLUMNS = ("grid", "l2_velocity", "rate_l2_velocity", "h1_velocity", "rate_h1_velocity",
               "l2_pressure", "rate_l2_pressure", "uzawa_iterations", "velocity_dofs",
               "pressure_dofs", "wall_time", "divergence", "velocity_norm_1h", "status")

    @property
    def all_solved(self) -> bool:
        return bool(self.rows) and all(row.solved for row in self.rows)

    def add(self, row: LevelResult) -> None:
        """Append a row and compute its rates against the previous one."""
        if not self.rows:
            row.rates = (0.0, 0.0, 0.0) if row.solved else row.rates
        else:
            prev = self.rows[-1]
            if prev.solved and row.solved:
                row.rates = tuple(
                    math.log2(a / b) if a > 0 and b > 0 else math.nan
                    for a, b in ((prev.l2_velocity, row.l2_velocity),
                                 (prev.h1_velocity, row.h1_velocity),
                                 (prev.l2_pressure, row.l2_pressure))
                )
        self.rows.append(row)

    def to_markdown(self) -> str:
        has_infsup = any(row.infsup is not None for row in self.rows)
        header = ["grid", "‖u−u_h‖₀", "rate", "‖∇(u−u_h)‖₀", "rate", "‖p−p_h‖₀", "rate", "#Uz",
                  "velocity DOFs", "pressure DOFs", "time (s)"]
        if has_infsup:
            header.append("β_h")
        body = []
        for row in self.rows:
            if not row.solved:
                cells = [str(row.level), *["-"] * 7, str(row.velocity_dofs), str(row.pressure_dofs),
                         f"{row.wall_time:.1f}"]
                if has_infsup:
                    cells.append("-")
                cells[1] = row.status
                body.append(cells)
                continue
            cells = [
                str(row.level),
                _table_float(row.l2_velocity), _rate(row.rates[0]),
                _table_float(row.h1_velocity), _rate(row.rates[1]),
                _table_float(row.l2_pressure), _rate(row.rates[2]),
                str(row.uzawa_iterations), str(row.velocity_dofs), str(row.pressure_dofs),
                f"{row.wall_time:.1f}",
            ]
            if has_infsup:
                cells.append("-" if row.infsup is None else f"{row.infsup:.4f}")
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["| " + " | ".join(c.rjust(w) for c, w in zip(header, widths)) + " |",
                 "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
        lines.extend("| " + " | ".join(c.rjust(w) for c, w in zip(cells, widths)) + " |" for cells in body)
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        columns = list(self.COLUMNS)
        if any(row.infsup is not None for row in self.rows):
            columns.append("infsup")
        writer.writerow(columns)
        for row in self.rows:
            values = [
                row.level, f"{row.l2_velocity:.6e}", f"{row.rates[0]:.3f}", f"{row.h1_velocity:.6e}",
                f"{row.rates[1]:.3f}", f"{row.l2_pressure:.6e}", f"{row.rates[2]:.3f}",
                row.uzawa_iterations, row.velocity_dofs, row.pressure_dofs, f"{row.wall_time:.3f}",
                f"{row.divergence:.3e}", f"{row.velocity_norm:.6e}", row.status,
            ]
            if len(columns) > len(self.COLUMNS):
                values.append("" if row.infsup is None else f"{row.infsup:.6e}")
            writer.writerow(values)
        return buffer.getvalue()


def measure_level(level: int, config: SolverConfig = SolverConfig(), threads: int = 1,
                  exact: ExactSolution | None = None, with_infsup: bool = False,
                  prepared: tuple | None = None) -> LevelResult:
    """Solve one level and collect its report row; solver failures mark the row instead of raising."""
    exact = exact or ExactSolution()
    started = time.perf_counter()
    row = LevelResult(level=level, tets=12 * level_cells(level) ** 3)
    try:
        run = solve_level(level, config, threads, exact, prepared)
    except SolverError as exc:
        logger.error(f"❌ Level {level} failed: {exc}")
        row.status = f"failed: {exc}"
        row.wall_time = time.perf_counter() - started
        return row
    norms = error_norms(run.mesh, run.velocity_dofs, run.solution, exact, run.pressure_dofs, threads=threads)
    row.velocity_dofs = run.velocity_dofs.n_dofs
    row.pressure_dofs = run.pressure_dofs.n_dofs
    row.l2_velocity, row.h1_velocity, row.l2_pressure = norms.l2_velocity, norms.h1_velocity, norms.l2_pressure
    row.uzawa_iterations = run.solution.uzawa_iterations
    row.divergence = divergence_check(run.mesh, run.velocity_dofs, run.solution)
    row.velocity_norm = velocity_norm_1h(run.mesh, run.velocity_dofs, run.solution, threads)
    if with_infsup:
        try:
            row.infsup = estimate_infsup(run.system, config).beta
        except SolverError as exc:
            logger.warning(f"⚠️ Inf-sup estimate failed on level {level}: {exc}")
    row.wall_time = time.perf_counter() - started
    return row


def convergence_study(levels: int, config: SolverConfig = SolverConfig(), threads: int = 1,
                      with_infsup: bool = False) -> ConvergenceReport:
    """Levels 1..levels on the structured cube family, with rates log2(e_{k-1}/e_k)."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    exact = ExactSolution()
    report = ConvergenceReport()
    for level in range(1, levels + 1):
        row = measure_level(level, config, threads, exact, with_infsup)
        report.add(row)
        if row.solved:
            logger.info(
                f"📊 Level {level}: |u-u_h|={row.l2_velocity:.3e} |grad(u-u_h)|={row.h1_velocity:.3e} "
                f"|p-p_h|={row.l2_pressure:.3e} #Uz={row.uzawa_iterations}"
            )
    return report
