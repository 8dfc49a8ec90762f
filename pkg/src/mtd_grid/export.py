"""CSV export of simulation traces and detection reports via polars frames."""
from pathlib import Path

import numpy as np
import polars as pl
from loguru import logger

from .detection import DetectionReport
from .simkit import SimulationTrace

TIME_DECIMALS = 9


def _times(t: np.ndarray) -> np.ndarray:
    return np.round(t, TIME_DECIMALS)


# ============================================================================
# Traces
# ============================================================================

def trace_frame(trace: SimulationTrace, stride: int = 1) -> pl.DataFrame:
    """Wide frame: ``t`` then x:, y:, y_tilde: and d: columns, one row per kept sample."""
    idx = np.arange(0, trace.n_steps, max(stride, 1))
    columns: dict[str, np.ndarray] = {"t": _times(trace.t[idx])}
    for prefix, labels, data in (
        ("x", trace.state_labels, trace.x),
        ("y", trace.output_labels, trace.y),
        ("y_tilde", trace.output_labels, trace.y_tilde),
        ("d", [f"bus{b}" for b in trace.load_buses], trace.d),
    ):
        for row, label in enumerate(labels):
            columns[f"{prefix}:{label}"] = data[row, idx]
    return pl.DataFrame(columns)


def write_trace_csv(trace: SimulationTrace, path: Path, stride: int = 1) -> Path:
    df = trace_frame(trace, stride)
    df.write_csv(path)
    logger.info(f"Wrote {df.height} trace rows to {path}")
    return path


def read_trace_csv(path: Path | str) -> pl.DataFrame:
    return pl.read_csv(path)


# ============================================================================
# Detection report
# ============================================================================

DETECTION_COLUMNS = ["t", "cluster", "i", "j", "residual", "epsilon", "fired"]


def detection_frame(report: DetectionReport, stride: int = 1) -> pl.DataFrame:
    """Strongest pair per cluster every ``stride`` samples, plus every fired pair.

    Cluster numbers refer to the ClusterSet of the interval containing t;
    measurement indices are 1-based.
    """
    parts = []
    for iv in report.intervals:
        th = iv.thresholds.epsilon
        cs = iv.clusterset
        pairs = cs.pairs()
        local = np.arange(0, iv.stop - iv.start)
        local = local[(local + iv.start) % max(stride, 1) == 0]
        for k in range(cs.K):
            if th[k] is None:
                continue
            best = iv.cluster_argmax[k, local]
            # cluster_argmax indexes the interval's pair list
            ii = np.array([pairs[p][1] for p in best])
            jj = np.array([pairs[p][2] for p in best])
            r = iv.cluster_max[k, local]
            parts.append(
                pl.DataFrame(
                    {
                        "t": _times(report.t[local + iv.start]),
                        "cluster": np.full(local.size, k + 1),
                        "i": ii + 1,
                        "j": jj + 1,
                        "residual": r,
                        "epsilon": np.full(local.size, th[k]),
                        "fired": r >= th[k],
                    }
                )
            )
    if report.n_fired:
        parts.append(
            pl.DataFrame(
                {
                    "t": _times(report.fired_times()),
                    "cluster": report.fired_cluster + 1,
                    "i": report.fired_i + 1,
                    "j": report.fired_j + 1,
                    "residual": report.fired_residual,
                    "epsilon": report.fired_epsilon,
                    "fired": np.ones(report.n_fired, dtype=bool),
                }
            )
        )
    if not parts:
        return pl.DataFrame(
            schema={"t": pl.Float64, "cluster": pl.Int64, "i": pl.Int64, "j": pl.Int64,
                    "residual": pl.Float64, "epsilon": pl.Float64, "fired": pl.Boolean}
        )
    df = pl.concat([p.with_columns(pl.col(["cluster", "i", "j"]).cast(pl.Int64)) for p in parts])
    return (
        df.sort(["t", "cluster", "i", "j"], maintain_order=True)
        .unique(subset=["t", "cluster", "i", "j"], keep="first", maintain_order=True)
        .select(DETECTION_COLUMNS)
    )


def summary_lines(report: DetectionReport) -> list[str]:
    first = report.first_detection_time
    return [
        "# summary",
        f"# n_fired: {report.n_fired}",
        f"# first_detection_time: {'none' if first is None else repr(first)}",
        f"# flagged: {' '.join(report.flagged) or '-'}",
        f"# isolated: {' '.join(report.isolated) or '-'}",
        f"# uncovered: {' '.join(report.uncovered) or '-'}",
    ]


def write_detection_csv(report: DetectionReport, path: Path, stride: int = 1) -> Path:
    df = detection_frame(report, stride)
    text = df.write_csv()
    path.write_text(text + "\n".join(summary_lines(report)) + "\n")
    logger.info(f"Wrote {df.height} detection rows to {path}")
    return path


def read_detection_csv(path: Path | str) -> tuple[pl.DataFrame, dict[str, str]]:
    """Rows and the summary block (key -> raw text)."""
    path = Path(path)
    df = pl.read_csv(path, comment_prefix="#", schema_overrides={"fired": pl.Boolean})
    summary = {}
    for line in path.read_text().splitlines():
        if line.startswith("# ") and ":" in line:
            key, _, value = line[2:].partition(":")
            summary[key.strip()] = value.strip()
    return df, summary


# ============================================================================
# Plot-ready cluster data
# ============================================================================

def cluster_frame(report: DetectionReport, trace: SimulationTrace, target: str, stride: int = 1) -> pl.DataFrame:
    """Long frame for the cluster holding ``target``: t, member, y_tilde, residual, epsilon."""
    parts = []
    for iv in report.intervals:
        cs = iv.clusterset
        if target not in cs.labels:
            continue
        k = cs.cluster_of(cs.labels.index(target))
        eps = iv.thresholds.epsilon[k]
        steps = np.arange(iv.start, iv.stop)
        steps = steps[steps % max(stride, 1) == 0]
        for m in cs.clusters[k]:
            parts.append(
                pl.DataFrame(
                    {
                        "t": _times(trace.t[steps]),
                        "member": [cs.labels[m]] * steps.size,
                        "y_tilde": trace.y_tilde[m, steps],
                        "residual": iv.cluster_max[k, steps - iv.start] if eps is not None else np.full(steps.size, np.nan),
                        "epsilon": np.full(steps.size, np.nan if eps is None else eps),
                    }
                )
            )
    if not parts:
        return pl.DataFrame(
            schema={"t": pl.Float64, "member": pl.Utf8, "y_tilde": pl.Float64, "residual": pl.Float64, "epsilon": pl.Float64}
        )
    return pl.concat(parts).sort(["t", "member"], maintain_order=True)


def write_cluster_csv(report: DetectionReport, trace: SimulationTrace, target: str, path: Path, stride: int = 1) -> Path:
    df = cluster_frame(report, trace, target, stride)
    df.write_csv(path)
    return path
