"""Uzawa-type Schur-complement Krylov solver for the constrained saddle-point system, plus stability diagnostics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import factorized, splu

from assembly import SaddleSystem

logger = logging.getLogger("ncp3")

INNER_SOLVERS = ("cg", "direct")
PRECONDITIONERS = ("jacobi", "none")


class SolverError(RuntimeError):
    """Base class for solver failures."""


class InnerSolverError(SolverError):
    """Inner velocity solve did not converge."""


class IndefiniteMatrixError(SolverError):
    """Non-positive curvature met inside conjugate gradients."""


class EigenIterationError(SolverError):
    """Inverse iteration for the inf-sup constant did not converge."""


@dataclass(frozen=True)
class SolverConfig:
    outer_tol: float = 1e-10
    inner_tol: float = 1e-12
    max_outer: int = 500
    max_inner: int = 20000
    preconditioner: str = "jacobi"
    inner_solver: str = "cg"
    eig_tol: float = 1e-6
    eig_block: int = 4
    max_eig_iterations: int = 200
    seed: int = 20240611

    def __post_init__(self):
        for name in ("outer_tol", "inner_tol", "eig_tol"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.inner_tol > self.outer_tol / 10.0:
            raise ValueError(
                f"inner_tol ({self.inner_tol}) must be at most outer_tol/10 ({self.outer_tol / 10.0})"
            )
        for name in ("max_outer", "max_inner", "eig_block", "max_eig_iterations"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.inner_solver not in INNER_SOLVERS:
            raise ValueError(f"inner_solver must be one of {INNER_SOLVERS}, got '{self.inner_solver}'")
        if self.preconditioner not in PRECONDITIONERS:
            raise ValueError(f"preconditioner must be one of {PRECONDITIONERS}, got '{self.preconditioner}'")


@dataclass
class Solution:
    velocity: np.ndarray
    pressure: np.ndarray
    uzawa_iterations: int
    residual_history: list[float] = field(default_factory=list)
    inner_iterations: int = 0
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# Conjugate gradients
# ---------------------------------------------------------------------------

def pcg(matrix, rhs: np.ndarray, *, tol: float, maxiter: int,
        preconditioner: Callable[[np.ndarray], np.ndarray] | None = None,
        x0: np.ndarray | None = None) -> tuple[np.ndarray, int]:
    """Preconditioned CG; stops when ||r|| <= tol ||b||. Returns (x, iterations)."""
    apply = matrix if callable(matrix) else (lambda v: matrix @ v)
    precondition = preconditioner or (lambda v: v)
    b_norm = float(np.linalg.norm(rhs))
    x = np.zeros_like(rhs, dtype=float) if x0 is None else np.array(x0, dtype=float)
    if b_norm == 0.0:
        return np.zeros_like(x), 0
    r = rhs - apply(x) if x0 is not None else rhs.astype(float, copy=True)
    if np.linalg.norm(r) <= tol * b_norm:
        return x, 0
    z = precondition(r)
    d = z.copy()
    rz = float(r @ z)
    for iteration in range(1, maxiter + 1):
        ad = apply(d)
        curvature = float(d @ ad)
        if curvature <= 0.0:
            raise IndefiniteMatrixError(f"Non-positive curvature {curvature:.3e} at CG iteration {iteration}")
        alpha = rz / curvature
        x += alpha * d
        r -= alpha * ad
        if np.linalg.norm(r) <= tol * b_norm:
            return x, iteration
        z = precondition(r)
        rz_next = float(r @ z)
        d = z + (rz_next / rz) * d
        rz = rz_next
    raise InnerSolverError(
        f"CG did not converge in {maxiter} iterations (residual {np.linalg.norm(r) / b_norm:.3e})"
    )


class InnerSolver:
    """Repeated solves with the constrained stiffness matrix."""

    def __init__(self, matrix: sp.spmatrix, config: SolverConfig):
        self.matrix = sp.csr_matrix(matrix)
        self.config = config
        self.iterations = 0
        self.solves = 0
        diagonal = self.matrix.diagonal()
        if np.any(diagonal <= 0.0):
            raise IndefiniteMatrixError("Stiffness matrix has a non-positive diagonal entry")
        self._inverse_diagonal = 1.0 / diagonal
        self._direct = factorized(self.matrix.tocsc()) if config.inner_solver == "direct" else None

    def _jacobi(self, residual: np.ndarray) -> np.ndarray:
        return self._inverse_diagonal * residual

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        self.solves += 1
        if self._direct is not None:
            return self._direct(rhs)
        preconditioner = self._jacobi if self.config.preconditioner == "jacobi" else None
        x, iterations = pcg(self.matrix, rhs, tol=self.config.inner_tol, maxiter=self.config.max_inner,
                            preconditioner=preconditioner)
        self.iterations += iterations
        return x


# ---------------------------------------------------------------------------
# Uzawa iteration
# ---------------------------------------------------------------------------

def solve_stokes(system: SaddleSystem, config: SolverConfig = SolverConfig()) -> Solution:
    """Conjugate-residual Uzawa on the pressure Schur complement B A^-1 B^T, preconditioned by the pressure mass.

    Each step minimizes the M^-1-norm of the Schur residual over the Krylov
    space, so ``residual_history`` is non-increasing. The pressure iterate and
    every search direction are kept mean-zero; the velocity direction is
    carried along so each step costs one inner solve.
    """
    if not system.is_constrained:
        raise SolverError("Dirichlet conditions must be applied before solving")
    started = time.perf_counter()
    B = system.divergence
    pdofs = system.pressure_dofs
    inner = InnerSolver(system.stiffness, config)
    mass_solve = factorized(sp.csc_matrix(system.pressure_mass))

    def precondition(residual: np.ndarray) -> np.ndarray:
        return pdofs.project_mean_zero(mass_solve(residual))

    velocity = inner.solve(system.load)
    pressure = np.zeros(pdofs.n_dofs)
    residual = -(B @ velocity)
    z = precondition(residual)
    delta = float(residual @ z)
    history = [float(np.sqrt(max(delta, 0.0)))]
    if delta <= 0.0:
        return Solution(velocity, pressure, 0, history, inner.iterations, time.perf_counter() - started)

    initial = np.sqrt(delta)
    direction = z.copy()
    velocity_direction = inner.solve(B.T @ z)
    schur_direction = B @ velocity_direction
    rho = float(z @ schur_direction)
    for iteration in range(1, config.max_outer + 1):
        q = precondition(schur_direction)
        curvature = float(schur_direction @ q)
        if rho <= 0.0 or curvature <= 0.0:
            raise IndefiniteMatrixError(f"Schur complement lost positivity at Uzawa iteration {iteration}")
        alpha = rho / curvature
        pressure += alpha * direction
        velocity += alpha * velocity_direction
        residual -= alpha * schur_direction
        z -= alpha * q
        history.append(float(np.sqrt(max(float(residual @ z), 0.0))))
        logger.debug(f"Uzawa {iteration}: residual {history[-1] / initial:.3e}")
        if history[-1] <= config.outer_tol * initial:
            break
        w = inner.solve(B.T @ z)
        schur_z = B @ w
        rho_next = float(z @ schur_z)
        beta = rho_next / rho
        direction = z + beta * direction
        velocity_direction = w + beta * velocity_direction
        schur_direction = schur_z + beta * schur_direction
        rho = rho_next
    else:
        raise SolverError(
            f"Uzawa iteration did not converge in {config.max_outer} steps "
            f"(relative residual {history[-1] / initial:.3e})"
        )

    elapsed = time.perf_counter() - started
    logger.info(f"Uzawa converged in {iteration} iterations ({inner.iterations} inner CG steps, {elapsed:.2f}s)")
    return Solution(velocity, pdofs.project_mean_zero(pressure), iteration, history, inner.iterations, elapsed)


# ---------------------------------------------------------------------------
# Stability diagnostics
# ---------------------------------------------------------------------------

def is_positive_definite(matrix) -> bool:
    """Sparse LDL^T witness: symmetric-mode LU with diagonal pivots only, all pivots positive."""
    A = sp.csc_matrix(matrix)
    if A.shape[0] != A.shape[1]:
        return False
    if A.shape[0] == 0:
        return True
    if abs(A - A.T).max() > 1e-12 * max(abs(A).max(), 1.0):
        return False
    try:
        lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                  options={"SymmetricMode": True})
    except RuntimeError:
        return False
    if not np.array_equal(lu.perm_r, lu.perm_c):
        return False
    return bool(np.all(lu.U.diagonal() > 0.0))


def free_stiffness(system: SaddleSystem) -> sp.csr_matrix:
    """Constrained stiffness restricted to the free velocity DOFs."""
    free = np.flatnonzero(system.free_mask)
    return sp.csr_matrix(system.stiffness)[free][:, free]


def schur_rayleigh_quotient(system: SaddleSystem, pressure: np.ndarray,
                            config: SolverConfig = SolverConfig()) -> float:
    """(q^T B A^-1 B^T q) / (q^T M q) for one pressure vector."""
    inner = InnerSolver(system.stiffness, config)
    B = system.divergence
    numerator = float((B.T @ pressure) @ inner.solve(B.T @ pressure))
    return numerator / float(pressure @ (system.pressure_mass @ pressure))


@dataclass
class InfSupEstimate:
    beta: float
    eigenvalue: float
    iterations: int
    history: list[float] = field(default_factory=list)


def estimate_infsup(system: SaddleSystem, config: SolverConfig = SolverConfig()) -> InfSupEstimate:
    """Smallest eigenvalue of B A^-1 B^T q = mu M q on mean-zero pressures, by block inverse iteration.

    Each sweep solves S Y = M X with the Schur CG, then applies Rayleigh-Ritz
    on span(Y). beta = sqrt(mu).
    """
    if not system.is_constrained:
        raise SolverError("Dirichlet conditions must be applied before estimating the inf-sup constant")
    B, M = system.divergence, system.pressure_mass
    pdofs = system.pressure_dofs
    inner = InnerSolver(system.stiffness, config)
    mass_solve = factorized(sp.csc_matrix(M))

    def project(block: np.ndarray) -> np.ndarray:
        return block - np.outer(pdofs.constant_vector, pdofs.mean_functional @ block)

    def deflate(functional: np.ndarray) -> np.ndarray:
        # dual vectors must annihilate the constant pressure to lie in range(S)
        return functional - pdofs.mean_functional * (pdofs.constant_vector @ functional)

    def schur(vector: np.ndarray) -> np.ndarray:
        return B @ inner.solve(B.T @ vector)

    def schur_solve(rhs: np.ndarray) -> np.ndarray:
        solution, _ = pcg(schur, deflate(rhs), tol=config.outer_tol, maxiter=config.max_outer,
                          preconditioner=lambda r: project(mass_solve(r)[:, None])[:, 0])
        return solution

    block_size = min(config.eig_block, max(pdofs.n_dofs - 1, 1))
    rng = np.random.default_rng(config.seed)
    X = project(rng.standard_normal((pdofs.n_dofs, block_size)))
    previous = None
    history: list[float] = []
    for iteration in range(1, config.max_eig_iterations + 1):
        Y = project(np.column_stack([schur_solve(M @ X[:, j]) for j in range(X.shape[1])]))
        Q, _ = np.linalg.qr(Y)
        SQ = np.column_stack([schur(Q[:, j]) for j in range(Q.shape[1])])
        reduced_s = Q.T @ SQ
        reduced_m = Q.T @ (M @ Q)
        values, vectors = scipy.linalg.eigh(0.5 * (reduced_s + reduced_s.T), 0.5 * (reduced_m + reduced_m.T))
        X = Q @ vectors
        current = float(values[0])
        history.append(current)
        logger.debug(f"Inf-sup sweep {iteration}: mu_min = {current:.10e}")
        if previous is not None and abs(current - previous) <= config.eig_tol * abs(current):
            return InfSupEstimate(float(np.sqrt(max(current, 0.0))), current, iteration, history)
        previous = current
    raise EigenIterationError(f"Inverse iteration did not converge in {config.max_eig_iterations} sweeps")


def infsup_constant(system: SaddleSystem, config: SolverConfig = SolverConfig()) -> float:
    return estimate_infsup(system, config).beta
