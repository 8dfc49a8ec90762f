import functools
import sys
from pathlib import Path

import click
import numpy as np
from dotenv import load_dotenv
from loguru import logger

from . import clustering, detection, export, gridmodel, matcore, simkit
from .errors import MtdGridError, ValidationError
from .schemas import OracleCase, OracleReport, RunConfig, RunSummary, WindowSummary, validated

load_dotenv()

DATA_DIR = Path(__file__).parent / "data"
DEFAULT_CASE = DATA_DIR / "rts24.case"
LOG_FORMAT = "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <level>{message}</level>"
EXIT_DETECTED = 3


def configure_logging(level: str) -> None:
    logger.remove()
    logger.add(sys.stderr, level=level, format=LOG_FORMAT)


def summary(ctx: click.Context, message: str, **style) -> None:
    click.echo(click.style(message, **style) if style else message, err=ctx.obj["summary_err"])


def handle_errors(func):
    """Map library errors onto the exit-code contract (1 input, 2 numerical)."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except MtdGridError as e:
            click.echo(click.style(f"✗ {type(e).__name__}: {e}", fg="red"), err=True)
            ctx.exit(e.exit_code)
        except FileNotFoundError as e:
            click.echo(click.style(f"✗ File not found: {e.filename}", fg="red"), err=True)
            ctx.exit(1)

    return wrapper


def make_config(**kwargs) -> RunConfig:
    return validated(RunConfig, "options", **kwargs)


def slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in label).strip("_")


def out_dir_option(func):
    return click.option(
        "--out-dir",
        envvar="MTD_GRID_OUT_DIR",
        default="mtd_out",
        show_default=True,
        type=click.Path(file_okay=False, path_type=Path),
        help="Output directory (or set MTD_GRID_OUT_DIR env var)",
    )(func)


def scenario_options(func):
    for opt in reversed(
        [
            click.option("--scenario", required=True, type=click.Path(dir_okay=False, path_type=Path), help="Scenario file"),
            click.option("--theta", type=float, help="Clustering coarseness (default: scenario value or automatic)"),
            click.option("--safety", type=float, help="Threshold safety factor"),
            click.option("--seed", type=int, help="Noise RNG seed"),
            click.option("--noise-std", type=float, help="Measurement noise standard deviation (p.u.)"),
            click.option("--dt", type=float, help="Integration step (s)"),
        ]
    ):
        func = opt(func)
    return func


@click.group()
@click.option(
    "--log-level",
    envvar="MTD_GRID_LOG_LEVEL",
    default="WARNING",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    help="Log level (or set MTD_GRID_LOG_LEVEL env var)",
)
@click.option("-v", "--verbose", count=True, help="-v for INFO, -vv for DEBUG")
@click.option(
    "--summary-stream",
    type=click.Choice(["stdout", "stderr"]),
    default="stderr",
    show_default=True,
    help="Where the human-readable summary goes",
)
@click.pass_context
def cli(ctx: click.Context, log_level: str, verbose: int, summary_stream: str):
    """Moving-target detection of false data injection in power grid measurements."""
    level = log_level.upper()
    if verbose:
        level = "INFO" if verbose == 1 else "DEBUG"
    configure_logging(level)
    ctx.obj = {"summary_err": summary_stream == "stderr", "log_level": level}


# ============================================================================
# cluster
# ============================================================================

@cli.command(name="cluster")
@click.option("--case", "case_path", default=str(DEFAULT_CASE), show_default=True,
              type=click.Path(dir_okay=False, path_type=Path), help="Grid case file")
@click.option("--loading", "loadings", multiple=True, type=float, default=(1.0,), show_default=True,
              help="Load-bus demand scale; repeat for several operating points")
@click.option("--theta", type=float, help="Clustering coarseness (default: automatic)")
@click.option("--outputs", multiple=True, help="Measured states or state blocks (default: all states)")
@out_dir_option
@click.pass_context
@handle_errors
def cluster_command(ctx, case_path: Path, loadings: tuple[float, ...], theta: float | None,
                    outputs: tuple[str, ...], out_dir: Path):
    """Cluster the measurements at one or more loadings and verify error-system stability."""
    cfg = make_config(command="cluster", case=case_path, out_dir=out_dir, theta=theta)
    provider = gridmodel.CaseModelProvider(gridmodel.parse_case(cfg.case), list(outputs) or None)

    results = []
    for scale in loadings:
        model = provider.model(scale)
        cs, _, _ = clustering.cluster_model(model, cfg.theta)
        report = clustering.verify_error_stability(model, cs)
        label = model.loading_label
        clustering.write_clusterset(cs, cfg.out_dir / f"clusters_{slug(label)}.txt")
        (cfg.out_dir / f"stability_{slug(label)}.json").write_text(report.model_dump_json(indent=2) + "\n")
        results.append((label, cs))
        status = click.style("PASS", fg="green") if report.passed else click.style("FAIL", fg="red")
        summary(ctx, f"{label}: {cs.K} clusters ({len(cs.singletons)} singletons) at θ={cs.theta:.3g}, error system {status}")

    for (la, ca), (lb, cb) in zip(results, results[1:]):
        differ = set(ca.memberships()) != set(cb.memberships())
        summary(ctx, f"memberships {la} vs {lb}: {'differ' if differ else 'identical'}")


# ============================================================================
# calibrate
# ============================================================================

@cli.command(name="calibrate")
@scenario_options
@out_dir_option
@click.pass_context
@handle_errors
def calibrate_command(ctx, scenario: Path, theta, safety, seed, noise_std, dt, out_dir: Path):
    """Calibrate per-cluster thresholds on an attack-free scenario."""
    cfg = make_config(command="calibrate", scenario=scenario, out_dir=out_dir, theta=theta,
                      safety=safety, seed=seed, noise_std=noise_std, dt=dt)
    spec = cfg.apply(simkit.parse_scenario(cfg.scenario))
    if spec.attacks:
        raise ValidationError(f"{cfg.scenario}: calibration scenarios must not contain [attack] lines")

    provider = simkit.default_provider(spec)
    table = detection.calibrate_scenario(provider, spec)
    path = cfg.out_dir / "thresholds.txt"
    path.write_text(detection.serialize_thresholds(table))

    for th in table.entries:
        covered = sum(e is not None for e in th.epsilon)
        summary(ctx, f"{th.loading_label}: {covered} thresholds, uncovered: {' '.join(th.uncovered) or '-'}")
    summary(ctx, f"✓ Thresholds written to {path}", fg="green")


# ============================================================================
# run
# ============================================================================

@cli.command(name="run")
@scenario_options
@click.option("--thresholds", "thresholds_path", type=click.Path(dir_okay=False, path_type=Path),
              help="Threshold table from 'calibrate' (default: calibrate on a step sweep over every load bus)")
@click.option("--trace-stride", default=10, show_default=True, type=click.IntRange(min=1),
              help="Keep every n-th sample in trace.csv and detection.csv")
@out_dir_option
@click.pass_context
@handle_errors
def run_command(ctx, scenario: Path, theta, safety, seed, noise_std, dt, thresholds_path: Path | None,
                trace_stride: int, out_dir: Path):
    """Simulate a scenario and run the moving-target detector.

    Exits 0 when nothing fired and 3 when an attack was detected.
    """
    cfg = make_config(command="run", scenario=scenario, thresholds=thresholds_path, out_dir=out_dir,
                      theta=theta, safety=safety, seed=seed, noise_std=noise_std, dt=dt)
    spec = cfg.apply(simkit.parse_scenario(cfg.scenario))
    table = detection.read_thresholds(cfg.thresholds) if cfg.thresholds else None

    provider = simkit.default_provider(spec)
    trace = simkit.simulate_scenario(spec, provider)
    report = detection.run_detector(provider, spec, trace, table)

    export.write_trace_csv(trace, cfg.out_dir / "trace.csv", trace_stride)
    export.write_detection_csv(report, cfg.out_dir / "detection.csv", trace_stride)
    (cfg.out_dir / "thresholds.txt").write_text(detection.serialize_thresholds(report.thresholds))
    for target in sorted({a.target for a in spec.attacks}):
        export.write_cluster_csv(report, trace, target, cfg.out_dir / f"cluster_{slug(target)}.csv", trace_stride)

    windows = [
        WindowSummary(
            start=s,
            end=e,
            target=a.target,
            detected=report.detections_in(s, e) > 0,
            first_detection_time=report.first_detection_in(s, e),
        )
        for s, e, a in spec.attack_windows
    ]
    inside = sum(report.detections_in(w.start, w.end) for w in windows)
    result = RunSummary(
        scenario=cfg.scenario.name,
        n_steps=trace.n_steps,
        n_fired=report.n_fired,
        flagged=report.flagged,
        isolated=report.isolated,
        ambiguous_pairs=[list(p) for p in report.ambiguous_pairs],
        uncovered=report.uncovered,
        first_detection_time=report.first_detection_time,
        windows=windows,
        fired_outside_windows=report.n_fired - inside,
        attack_detected=report.n_fired > 0,
    )
    (cfg.out_dir / "summary.json").write_text(result.model_dump_json(indent=2) + "\n")

    if result.attack_detected:
        summary(ctx, f"⚠ Attack detected at t={result.first_detection_time:g} s; flagged: {' '.join(result.flagged)}",
                fg="yellow", bold=True)
        for w in windows:
            mark = "✓" if w.detected else "✗"
            summary(ctx, f"  {mark} {w.target} [{w.start:g}, {w.end:g}) first={w.first_detection_time}")
        ctx.exit(EXIT_DETECTED)
    summary(ctx, "✓ No attack detected", fg="green")


# ============================================================================
# oracle
# ============================================================================

def _quadrature_rel(A: np.ndarray, G: np.ndarray, W: np.ndarray, C: np.ndarray, project: bool, dt: float) -> float:
    decay = -matcore.decompose_semistable(A).max_stable_real if project else -float(np.max(np.linalg.eigvals(A).real))
    Wq = matcore.oracle_gramian_quadrature(A, G, horizon=30.0 / decay, dt=dt, project=project)
    exact, approx = np.trace(C @ W @ C.T), np.trace(C @ Wq @ C.T)
    if not project:
        return float(np.linalg.norm(W - Wq, "fro") / np.linalg.norm(W, "fro"))
    return float(abs(exact - approx) / abs(exact))


def _pair_rel(model: gridmodel.LinearModel, pairs) -> float:
    gramian = matcore.semistable_gramian(model.A, model.G, decomposition=model.semistability)
    phi = clustering.compute_phi(model, gramian)
    v = clustering.measurement_direction(model.semistability, model.C)
    worst = 0.0
    for i, j in pairs:
        fast = clustering.pair_distance(phi, v, i, j)
        if not np.isfinite(fast):
            continue
        p_i, p_j = clustering.unit_coefficients(v, (i, j), phi)
        slow = clustering.h2_pair_condition(model, i, j, p_i, p_j)
        scale = max(slow, fast)
        if scale > 0:
            worst = max(worst, abs(fast - slow) / scale)
    return worst


@cli.command(name="oracle")
@click.option("--batch", default=20, show_default=True, type=click.IntRange(min=1), help="Random stable systems")
@click.option("--seed", default=0, show_default=True, type=click.IntRange(min=0))
@click.option("--size", default=5, show_default=True, type=click.IntRange(min=2), help="States per random system")
@click.option("--tolerance", default=1e-6, show_default=True, type=float, help="Tolerance for random systems")
@click.option("--pairs", default=10, show_default=True, type=click.IntRange(min=0),
              help="Random semistable systems for the pairwise H2 check")
@click.option("--case", "case_path", type=click.Path(dir_okay=False, path_type=Path),
              help="Also check the model of this case file")
@click.option("--case-tolerance", default=1e-5, show_default=True, type=float)
@out_dir_option
@click.pass_context
@handle_errors
def oracle_command(ctx, batch, seed, size, tolerance, pairs, case_path, case_tolerance, out_dir):
    """Compare Lyapunov and Φ-based results with brute-force quadrature and H2 oracles."""
    cfg = make_config(command="oracle", case=case_path, out_dir=out_dir, seed=seed)
    rng = np.random.default_rng(seed)
    cases: list[OracleCase] = []
    passed = True

    lyap = 0.0
    for _ in range(batch):
        A, G = matcore.random_stable_system(size, 2, rng)
        W = matcore.solve_lyapunov(A, G @ G.T)
        lyap = max(lyap, _quadrature_rel(A, G, W, np.eye(size), project=False, dt=0.01))
    pair = 0.0
    for _ in range(pairs):
        A, G = matcore.random_semistable_system(size + 1, 2, rng)
        model = gridmodel.LinearModel.from_matrices(A, G)
        pair = max(pair, _pair_rel(model, [(i, j) for i in range(model.l) for j in range(i + 1, model.l)]))
    cases.append(OracleCase(name=f"random[n={size}]", lyapunov_max_rel=lyap, pair_max_rel=pair))
    passed &= max(lyap, pair) <= tolerance

    if cfg.case is not None:
        model = gridmodel.CaseModelProvider(gridmodel.parse_case(cfg.case)).model(1.0)
        gramian = matcore.semistable_gramian(model.A, model.G, decomposition=model.semistability)
        energy = _quadrature_rel(model.A, model.G, gramian.W_c, model.C, project=True, dt=0.005)
        neighbours = _pair_rel(model, [(i, i + 1) for i in range(model.l - 1)])
        cases.append(OracleCase(name=cfg.case.stem, lyapunov_max_rel=energy, pair_max_rel=neighbours))
        passed &= max(energy, neighbours) <= case_tolerance

    worst = max(max(c.lyapunov_max_rel, c.pair_max_rel) for c in cases)
    report = OracleReport(seed=seed, batch=batch, tolerance=tolerance, cases=cases, max_rel=worst, passed=passed)
    (cfg.out_dir / "oracle_report.json").write_text(report.model_dump_json(indent=2) + "\n")

    for c in cases:
        summary(ctx, f"{c.name}: lyapunov {c.lyapunov_max_rel:.3g}, pairwise {c.pair_max_rel:.3g}")
    if not passed:
        summary(ctx, "✗ Oracle check FAILED", fg="red", bold=True)
        ctx.exit(2)
    summary(ctx, "✓ Oracle check passed", fg="green")
