"""NCP3 Stokes - nonconforming P3 / discontinuous P2 Stokes solver on tetrahedral meshes.

Subcommands:
    verify   bubble constraints, numbering oracle, quadrature self-tests
    solve    one refinement level of the manufactured problem
    study    convergence table over levels 1..k
    infsup   discrete inf-sup constant per level
    mesh     write a structured cube mesh
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from analysis import ConvergenceReport, convergence_study, measure_level, prepare_level
from assembly import export_matrix
from element import CUBE_LABEL_VERTICES, bubble_face_moments, gram_rank_and_condition, search_cube_numbering
from mesh import build_cube_mesh, level_cells, validate, write_mesh
from reference import (
    REFERENCE_BUBBLE,
    ReferenceBubble,
    UnsupportedQuadratureError,
    bubble_divergence_defect,
    face_node_integral_ratio,
    quadrature,
    quadrature_monomial_error,
    verify_face_moments,
)
from solver import SolverConfig, SolverError, estimate_infsup

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(message)s",
    datefmt="%H:%M:%S"
)
logger = logging.getLogger("ncp3")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_CONFIG = 2

MAX_LEVEL = 6
LARGE_LEVEL = 5
ENV_PREFIX = "NCP3_"
DEFAULT_SETTINGS = "solver-settings.json"


class ConfigError(ValueError):
    """Invalid command-line, environment or settings-file configuration."""


def _setup_file_logging(log_file_path: str):
    """Add a file handler so run milestones are also written to a log file.

    Same format as the console, with the date added to the timestamp.
    """
    # Remove any existing file handlers to avoid duplicates on repeated runs.
    for handler in logger.handlers[:]:
        if isinstance(handler, logging.FileHandler):
            handler.close()
            logger.removeHandler(handler)

    if not log_file_path:
        return
    try:
        file_handler = logging.FileHandler(log_file_path, encoding="utf-8")
        file_handler.setLevel(logging.INFO)
        file_handler.setFormatter(logging.Formatter(
            "%(asctime)s | %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        ))
        logger.addHandler(file_handler)
        logger.debug(f"📝 Logging to {log_file_path}")
    except (OSError, IOError) as e:
        logger.warning(f"⚠️ Could not open log file '{log_file_path}': {e}")


# Run configuration (set by settings file, environment and CLI args)
class RunConfig:
    command: str = "verify"
    levels: int = 3
    outer_tol: float = 1e-10
    inner_tol: float = 1e-12
    max_outer: int = 500
    max_inner: int = 20000
    preconditioner: str = "jacobi"  # "jacobi" or "none"
    inner_solver: str = "cg"  # "cg" or "direct"
    format: str = "markdown"  # "markdown" or "csv"
    out: str = None
    seed: int = 20240611
    threads: int = 1
    log_file: str = "solver-log.txt"
    allow_large: bool = False  # levels >= 5 are opt-in
    with_infsup: bool = False
    export_matrices: str = None
    eig_tol: float = 1e-6
    eig_block: int = 4
    max_eig_iterations: int = 200

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            outer_tol=self.outer_tol,
            inner_tol=self.inner_tol,
            max_outer=self.max_outer,
            max_inner=self.max_inner,
            preconditioner=self.preconditioner,
            inner_solver=self.inner_solver,
            eig_tol=self.eig_tol,
            eig_block=self.eig_block,
            max_eig_iterations=self.max_eig_iterations,
            seed=self.seed,
        )


config = RunConfig()

# key -> (type, check, message)
SETTINGS_SCHEMA = {
    "levels": (int, lambda v: 1 <= v <= MAX_LEVEL, f"an integer between 1 and {MAX_LEVEL}"),
    "outer_tol": (float, lambda v: 0 < v < 1, "a number in (0, 1)"),
    "inner_tol": (float, lambda v: 0 < v < 1, "a number in (0, 1)"),
    "max_outer": (int, lambda v: v >= 1, "a positive integer"),
    "max_inner": (int, lambda v: v >= 1, "a positive integer"),
    "preconditioner": (str, lambda v: v in ("jacobi", "none"), "'jacobi' or 'none'"),
    "inner_solver": (str, lambda v: v in ("cg", "direct"), "'cg' or 'direct'"),
    "format": (str, lambda v: v in ("markdown", "csv"), "'markdown' or 'csv'"),
    "out": (str, lambda v: True, "a string"),
    "seed": (int, lambda v: v >= 0, "a non-negative integer"),
    "threads": (int, lambda v: v >= 1, "a positive integer"),
    "log_file": (str, lambda v: True, "a string"),
    "allow_large": (bool, lambda v: True, "a boolean"),
    "eig_tol": (float, lambda v: 0 < v < 1, "a number in (0, 1)"),
    "eig_block": (int, lambda v: v >= 1, "a positive integer"),
    "max_eig_iterations": (int, lambda v: v >= 1, "a positive integer"),
}


def parse_args(argv=None):
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", dest="config_file", type=str, default=None,
        help=f"JSON settings file. Defaults to {DEFAULT_SETTINGS} if it exists."
    )
    common.add_argument(
        "--levels", type=int, default=None,
        help="Refinement level (solve, mesh) or finest level (study, infsup); level k has 2^(k-1) cubes per axis. Default: 3"
    )
    common.add_argument("--outer-tol", dest="outer_tol", type=float, default=None,
                        help="Relative Uzawa residual tolerance. Default: 1e-10")
    common.add_argument("--inner-tol", dest="inner_tol", type=float, default=None,
                        help="Relative tolerance of the inner velocity CG. Default: 1e-12")
    common.add_argument("--inner-solver", dest="inner_solver", choices=("cg", "direct"), default=None,
                        help="Velocity solver inside Uzawa. Default: cg")
    common.add_argument("--format", choices=("markdown", "csv"), default=None,
                        help="Report format. Default: markdown")
    common.add_argument("--out", type=str, default=None, help="Output file. Default: stdout")
    common.add_argument("--seed", type=int, default=None, help="Random seed. Default: 20240611")
    common.add_argument("--threads", type=int, default=None, help="Assembly threads. Default: 1")
    common.add_argument("--log-file", dest="log_file", type=str, default=None,
                        help="Run log file. Default: solver-log.txt")
    common.add_argument("--allow-large", dest="allow_large", action="store_true", default=None,
                        help=f"Permit levels >= {LARGE_LEVEL}")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="Only warnings and errors")
    verbosity.add_argument("--verbose", action="store_true", help="Per-iteration debug output")

    parser = argparse.ArgumentParser(
        description="NCP3 Stokes - nonconforming P3 / discontinuous P2 Stokes solver",
        usage="python main.py {verify,solve,study,infsup,mesh} [options]"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("verify", parents=[common], help="Run the element verification suite")
    solve = commands.add_parser("solve", parents=[common], help="Solve one level of the manufactured problem")
    solve.add_argument("--export-matrices", dest="export_matrices", type=str, default=None,
                       help="Write A, B and M in Matrix Market format using this path prefix")
    study = commands.add_parser("study", parents=[common], help="Convergence study over levels 1..k")
    study.add_argument("--with-infsup", dest="with_infsup", action="store_true",
                       help="Add the inf-sup estimate to each row")
    commands.add_parser("infsup", parents=[common], help="Inf-sup constant for levels 1..k")
    commands.add_parser("mesh", parents=[common], help="Write the structured cube mesh of one level")
    return parser.parse_args(argv)


def load_settings_file(settings_file: str) -> dict:
    """Load settings from a JSON file."""
    try:
        with open(settings_file, "r") as f:
            return json.load(f)
    except FileNotFoundError:
        return {}
    except json.JSONDecodeError as e:
        logger.error(f"Invalid JSON in {settings_file}: {e}")
        return {}


def validate_settings(spec: dict) -> bool:
    """Validate a settings dictionary. Every bad key is logged; returns True if all are valid."""
    if not isinstance(spec, dict):
        logger.error("Invalid config: settings must be a JSON object")
        return False
    valid = True
    for key, value in spec.items():
        if key not in SETTINGS_SCHEMA:
            logger.warning(f"Unknown config key '{key}', ignoring")
            continue
        kind, check, message = SETTINGS_SCHEMA[key]
        if value is None and key == "out":
            continue
        if kind is float:
            ok_type = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif kind is int:
            ok_type = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok_type = isinstance(value, kind)
        if not ok_type or not check(value):
            logger.error(f"Invalid config: '{key}' must be {message}")
            valid = False
    return valid


def read_env_settings(environ=None) -> dict:
    """Settings from NCP3_* environment variables, converted to the schema types."""
    environ = os.environ if environ is None else environ
    spec = {}
    for key, (kind, _, message) in SETTINGS_SCHEMA.items():
        name = ENV_PREFIX + key.upper()
        if name not in environ:
            continue
        raw = environ[name].strip()
        try:
            if kind is bool:
                if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(raw)
                spec[key] = raw.lower() in ("1", "true", "yes")
            else:
                spec[key] = kind(raw)
        except ValueError:
            raise ConfigError(f"Invalid config: {name}='{raw}' must be {message}")
    return spec


def apply_settings_to_config(spec: dict):
    """Apply a validated settings dictionary to the global config object."""
    for key, value in spec.items():
        if key in SETTINGS_SCHEMA:
            kind = SETTINGS_SCHEMA[key][0]
            setattr(config, key, float(value) if kind is float else value)


def reset_config():
    """Restore class defaults on the global config object."""
    for key in list(vars(config)):
        delattr(config, key)


def apply_config(args, environ=None):
    """Apply settings: CLI args override environment, environment overrides the settings file."""
    reset_config()
    config.command = args.command

    if args.config_file:
        if not os.path.exists(args.config_file):
            raise ConfigError(f"Settings file '{args.config_file}' not found")
        spec = load_settings_file(args.config_file)
        source = args.config_file
    else:
        default_settings = os.path.join(os.path.dirname(os.path.abspath(__file__)), DEFAULT_SETTINGS)
        spec = load_settings_file(default_settings) if os.path.exists(default_settings) else {}
        source = DEFAULT_SETTINGS
    if spec:
        if not validate_settings(spec):
            raise ConfigError(f"Settings file {source} has invalid values")
        apply_settings_to_config(spec)
        logger.debug(f"📄 Loaded config from {source}")

    env_spec = read_env_settings(environ)
    if not validate_settings(env_spec):
        raise ConfigError("Environment overrides have invalid values")
    apply_settings_to_config(env_spec)

    cli_spec = {
        key: getattr(args, key) for key in SETTINGS_SCHEMA
        if getattr(args, key, None) is not None
    }
    if not validate_settings(cli_spec):
        raise ConfigError("Command-line options have invalid values")
    apply_settings_to_config(cli_spec)
    config.with_infsup = bool(getattr(args, "with_infsup", False))
    config.export_matrices = getattr(args, "export_matrices", None)

    if config.levels >= LARGE_LEVEL and not config.allow_large and config.command != "mesh":
        raise ConfigError(f"Level {config.levels} is large; pass --allow-large to run it")
    try:
        config.solver_config()
    except ValueError as e:
        raise ConfigError(f"Invalid config: {e}")

    if getattr(args, "quiet", False):
        logger.setLevel(logging.WARNING)
    elif getattr(args, "verbose", False):
        logger.setLevel(logging.DEBUG)
    else:
        logger.setLevel(logging.INFO)

    # Set up log file handler after the full config has been applied.
    _setup_file_logging(config.log_file)


def write_output(text: str, out: str = None):
    if out:
        Path(out).write_text(text)
        logger.info(f"💾 Wrote {out}")
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def render_report(report: ConvergenceReport, fmt: str) -> str:
    return report.to_csv() if fmt == "csv" else report.to_markdown()


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _random_tet(rng: np.random.Generator) -> np.ndarray:
    while True:
        verts = rng.random((4, 3))
        det = np.linalg.det(verts[1:] - verts[0])
        if abs(det) > 1e-2:
            return verts if det > 0 else verts[[1, 0, 2, 3]]


def _quadrature_check(cell: str, degrees) -> CheckResult:
    worst, checked = 0.0, []
    for degree in degrees:
        try:
            rule = quadrature(cell, degree)
        except UnsupportedQuadratureError as e:
            return CheckResult(f"{cell} quadrature", False, str(e))
        worst = max(worst, quadrature_monomial_error(rule))
        checked.append(degree)
    span = f"degrees {min(checked)}-{max(checked)}" if checked else "no degrees"
    return CheckResult(f"{cell} quadrature", worst <= 1e-14, f"{span}, max monomial error {worst:.2e}")


def run_checks(bubble: ReferenceBubble = REFERENCE_BUBBLE, tet_degrees=range(1, 15),
               triangle_degrees=range(1, 9), seed: int = 20240611) -> list[CheckResult]:
    results = []
    moment = verify_face_moments(bubble)
    results.append(CheckResult("bubble face moments", moment <= 1e-12, f"max |moment| = {moment:.2e}"))

    defect = bubble_divergence_defect(bubble)
    results.append(CheckResult(
        "divergence identity", defect.is_zero(),
        "div b = 4x(x-y-z) exactly" if defect.is_zero() else f"defect {defect}"))

    mean = bubble.divergence().integrate_reference()
    results.append(CheckResult("divergence mean", mean == 0, f"integral of div b = {mean}"))

    degrees = [c.total_degree for c in bubble.components]
    results.append(CheckResult("bubble degree", degrees == [4, 4, 4], f"component degrees {degrees}"))

    search = search_cube_numbering(seed=seed)
    found = search.unique_assignment
    results.append(CheckResult(
        "cube numbering", found == CUBE_LABEL_VERTICES,
        f"{len(search.matches)} matching assignment(s) of {search.assignments_tried}"))

    results.append(_quadrature_check("tet", tet_degrees))
    results.append(_quadrature_check("triangle", triangle_degrees))

    ratio = face_node_integral_ratio()
    results.append(CheckResult("face node integral", abs(ratio - 0.45) <= 1e-14, f"ratio = {ratio:.15f}"))

    rng = np.random.default_rng(seed)
    tet = _random_tet(rng)
    rank, condition = gram_rank_and_condition(tet)
    results.append(CheckResult("divergence gram", rank == 9, f"rank {rank}, condition {condition:.3e}"))

    mapped = float(np.abs(bubble_face_moments(tet, bubble)).max())
    results.append(CheckResult("mapped face moments", mapped <= 1e-11, f"max |moment| = {mapped:.2e}"))
    return results


def cmd_verify(bubble: ReferenceBubble = REFERENCE_BUBBLE, **kwargs) -> int:
    results = run_checks(bubble, seed=config.seed, **kwargs)
    lines = [f"{'✅' if r.passed else '❌'} {r.name}: {r.detail}" for r in results]
    write_output("\n".join(lines) + "\n", config.out)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error(f"❌ Verification failed: {', '.join(failed)}")
        return EXIT_FAILURE
    logger.info(f"✅ All {len(results)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# solve / study / infsup / mesh
# ---------------------------------------------------------------------------

def cmd_solve(level: int) -> int:
    logger.info(f"🧮 Solving level {level} ({level_cells(level)}^3 cubes)")
    prepared = prepare_level(level, threads=config.threads)
    if config.export_matrices:
        system = prepared[3]
        for name, matrix in (("A", system.stiffness), ("B", system.divergence), ("M", system.pressure_mass)):
            path = f"{config.export_matrices}{name}.mtx"
            export_matrix(matrix, path, comment=f"level {level} {name}")
            logger.info(f"💾 Wrote {path}")
    row = measure_level(level, config.solver_config(), config.threads, prepared=prepared)
    report = ConvergenceReport()
    report.add(row)
    write_output(render_report(report, config.format), config.out)
    if not row.solved:
        return EXIT_FAILURE
    logger.info(f"   max |div u_h| = {row.divergence:.3e} (||u_h||_1,h = {row.velocity_norm:.3e})")
    return EXIT_OK


def cmd_study(levels: int) -> int:
    logger.info(f"📊 Convergence study, levels 1..{levels}")
    report = convergence_study(levels, config.solver_config(), config.threads, config.with_infsup)
    write_output(render_report(report, config.format), config.out)
    if not report.all_solved:
        logger.error("❌ Some levels failed")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_infsup(levels: int) -> int:
    solver_config = config.solver_config()
    betas = []
    for level in range(1, levels + 1):
        _, _, _, system = prepare_level(level, threads=config.threads)
        try:
            estimate = estimate_infsup(system, solver_config)
        except SolverError as e:
            logger.error(f"❌ Level {level}: {e}")
            return EXIT_FAILURE
        betas.append(estimate.beta)
        logger.info(f"   Level {level}: beta_h = {estimate.beta:.6f} ({estimate.iterations} sweeps)")

    if config.format == "csv":
        lines = ["level,beta,ratio"]
        lines += [f"{k + 1},{b:.6e},{'' if k == 0 else f'{betas[k - 1] / b:.4f}'}" for k, b in enumerate(betas)]
    else:
        lines = ["| level | β_h | ratio |", "|------:|----:|------:|"]
        lines += [f"| {k + 1} | {b:.6f} | {'-' if k == 0 else f'{betas[k - 1] / b:.3f}'} |"
                  for k, b in enumerate(betas)]
    write_output("\n".join(lines) + "\n", config.out)

    ratios = [betas[k - 1] / betas[k] for k in range(1, len(betas))]
    if any(b <= 0 for b in betas):
        logger.error("❌ Non-positive inf-sup constant")
        return EXIT_FAILURE
    if any(r > 1.5 for r in ratios):
        logger.warning(f"⚠️ beta_h decreases under refinement: ratios {[round(r, 3) for r in ratios]}")
    return EXIT_OK


def cmd_mesh(level: int) -> int:
    mesh = build_cube_mesh(level_cells(level))
    problems = validate(mesh)
    if problems:
        for problem in problems[:10]:
            logger.error(f"❌ {problem}")
        return EXIT_FAILURE
    out = config.out or f"cube-level{level}.mesh"
    write_mesh(mesh, out)
    logger.info(f"💾 Wrote level {level} mesh ({mesh.n_vertices} vertices, {mesh.n_tets} tets) to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        apply_config(args)
    except ConfigError as e:
        logger.error(f"❌ {e}")
        return EXIT_BAD_CONFIG

    logger.info(f"🚀 NCP3 Stokes: {config.command}")
    if config.command == "verify":
        return cmd_verify()
    if config.command == "solve":
        return cmd_solve(config.levels)
    if config.command == "study":
        return cmd_study(config.levels)
    if config.command == "infsup":
        return cmd_infsup(config.levels)
    return cmd_mesh(config.levels)


if __name__ == "__main__":
    sys.exit(main())
