"""
Intra-cluster residual checks, threshold calibration, the moving-target
detection driver and a Luenberger observer baseline.

For a cluster with coefficients p, the pair residual |p_j·ỹ_i − p_i·ỹ_j|
stays small while the measurements respond to load disturbances and grows
when one of them is corrupted.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from loguru import logger
from scipy.signal import place_poles

from . import textformat
from .clustering import ClusterSet, cluster_model
from .errors import EmptyCluster, NotHurwitz, ParseError
from .gridmodel import LinearModel, ModelProvider
from .schemas import ScenarioSpec
from .simkit import SimulationTrace, simulate_scenario

EPSILON_FLOOR = 1e-9
DEFAULT_SAFETY = 1.5


# ============================================================================
# Residuals
# ============================================================================

def residual_pair(y_tilde_i: float, y_tilde_j: float, p_i: float, p_j: float) -> float:
    return abs(p_j * y_tilde_i - p_i * y_tilde_j)


@dataclass(frozen=True)
class PairTable:
    """Intra-cluster pairs of a ClusterSet as parallel arrays, ordered (k, i, j)."""

    k: np.ndarray
    i: np.ndarray
    j: np.ndarray
    p_i: np.ndarray
    p_j: np.ndarray

    @classmethod
    def from_clusterset(cls, cs: ClusterSet) -> "PairTable":
        rows = cs.pairs()
        if not rows:
            empty = np.zeros(0, dtype=int)
            return cls(empty, empty, empty, np.zeros(0), np.zeros(0))
        k, i, j, p_i, p_j = (np.array(col) for col in zip(*rows))
        return cls(k.astype(int), i.astype(int), j.astype(int), p_i.astype(float), p_j.astype(float))

    def __len__(self) -> int:
        return self.k.shape[0]

    def signed(self, Y: np.ndarray) -> np.ndarray:
        """p_j·ỹ_i − p_i·ỹ_j for every pair; Y is l×T, result is pairs×T."""
        return self.p_j[:, None] * Y[self.i] - self.p_i[:, None] * Y[self.j]


def smooth_signed(S: np.ndarray, window: int) -> np.ndarray:
    """Causal moving average along time over ``window`` samples (fewer at the start)."""
    if window <= 1 or S.shape[1] == 0:
        return S
    c = np.cumsum(S, axis=1)
    out = c.copy()
    out[:, window:] = c[:, window:] - c[:, :-window]
    counts = np.minimum(np.arange(1, S.shape[1] + 1), window)
    return out / counts


def residuals(Y: np.ndarray, pairs: PairTable, smoothing_steps: int = 0) -> np.ndarray:
    return np.abs(smooth_signed(pairs.signed(Y), smoothing_steps))


# ============================================================================
# Thresholds
# ============================================================================

@dataclass(frozen=True)
class Thresholds:
    """Per-cluster ε for one ClusterSet; None marks an uncovered singleton."""

    loading_label: str
    theta: float
    safety: float
    smoothing: float
    epsilon: tuple[float | None, ...]
    members: tuple[tuple[str, ...], ...]

    def matches(self, cs: ClusterSet) -> bool:
        return (
            self.loading_label == cs.loading_label
            and self.theta == cs.theta
            and self.members == tuple(tuple(cs.labels[i] for i in c) for c in cs.clusters)
        )

    @property
    def uncovered(self) -> list[str]:
        return [m[0] for m, eps in zip(self.members, self.epsilon) if eps is None]


@dataclass
class ThresholdTable:
    entries: list[Thresholds] = field(default_factory=list)

    def lookup(self, cs: ClusterSet, smoothing: float) -> Thresholds | None:
        return next((e for e in self.entries if e.matches(cs) and e.smoothing == smoothing), None)


def calibrate_threshold(
    trace: SimulationTrace,
    cs: ClusterSet,
    safety: float = DEFAULT_SAFETY,
    *,
    steps: np.ndarray | None = None,
    smoothing_steps: int = 0,
    smoothing: float = 0.0,
    floor: float = EPSILON_FLOOR,
) -> Thresholds:
    """ε_k = max(safety · max residual over time and pairs of cluster k, floor).

    ``steps`` restricts calibration to a boolean mask of trace samples.

    Raises:
        EmptyCluster: every cluster is a singleton.
    """
    pairs = PairTable.from_clusterset(cs)
    if len(pairs) == 0:
        raise EmptyCluster("all clusters are singletons; there is nothing to calibrate")
    Y = trace.y_tilde if steps is None else trace.y_tilde[:, steps]
    R = residuals(Y, pairs, smoothing_steps)
    peak = R.max(axis=1) if R.shape[1] else np.zeros(len(pairs))

    eps: list[float | None] = []
    for k, members in enumerate(cs.clusters):
        if len(members) < 2:
            eps.append(None)
            continue
        eps.append(max(safety * float(peak[pairs.k == k].max()), floor))
    th = Thresholds(
        loading_label=cs.loading_label,
        theta=cs.theta,
        safety=safety,
        smoothing=smoothing,
        epsilon=tuple(eps),
        members=tuple(tuple(cs.labels[i] for i in c) for c in cs.clusters),
    )
    logger.info(f"Calibrated {sum(e is not None for e in eps)} thresholds for {cs.loading_label} (safety {safety:g})")
    return th


def serialize_thresholds(table: ThresholdTable) -> str:
    lines = ["# detection thresholds"]
    for th in table.entries:
        lines += [
            "",
            "[thresholds]",
            f"loading = {th.loading_label}",
            f"theta = {textformat.fmt(th.theta)}",
            f"safety = {textformat.fmt(th.safety)}",
            f"smoothing = {textformat.fmt(th.smoothing)}",
        ]
        for k, (eps, members) in enumerate(zip(th.epsilon, th.members)):
            value = "uncovered" if eps is None else textformat.fmt(eps)
            lines.append(f"{k + 1}: {value} | {' '.join(members)}")
    return "\n".join(lines) + "\n"


def parse_thresholds(text: str, source: str = "<string>") -> ThresholdTable:
    doc = textformat.tokenize(text, source)
    doc.expect_only({"thresholds"})
    entries = []
    for sec in doc.named("thresholds"):
        meta: dict[str, textformat.Token] = {}
        eps: list[float | None] = []
        members: list[tuple[str, ...]] = []
        for rec in sec.records:
            if len(rec) >= 3 and rec[1].text == "=":
                meta[rec[0].text] = rec[2]
                continue
            head = rec[0]
            if not head.text.endswith(":") or len(rec) < 4 or rec[2].text != "|":
                raise doc.fail(head, "expected 'k: epsilon | labels' or 'key = value'")
            if head.text[:-1] != str(len(eps) + 1):
                raise doc.fail(head, "cluster numbers must run 1, 2, 3, ...")
            eps.append(None if rec[1].text == "uncovered" else doc.float_(rec[1]))
            members.append(tuple(rec.texts[3:]))
        for key in ("loading", "theta", "safety", "smoothing"):
            if key not in meta:
                raise ParseError(f"[thresholds] needs '{key} = ...'", source, sec.line, 1)
        entries.append(
            Thresholds(
                loading_label=meta["loading"].text,
                theta=doc.float_(meta["theta"]),
                safety=doc.float_(meta["safety"]),
                smoothing=doc.float_(meta["smoothing"]),
                epsilon=tuple(eps),
                members=tuple(members),
            )
        )
    return ThresholdTable(entries)


def read_thresholds(path: Path | str) -> ThresholdTable:
    path = Path(path)
    return parse_thresholds(path.read_text(), str(path))


# ============================================================================
# Single-step check
# ============================================================================

@dataclass(frozen=True)
class FiredPair:
    k: int
    i: int
    j: int
    residual: float


def detect_step(y_tilde: np.ndarray, cs: ClusterSet, epsilon) -> list[FiredPair]:
    """Pairs with r_ij ≥ ε_k, ordered by cluster, then i, then j."""
    fired = []
    for k, i, j, p_i, p_j in cs.pairs():
        eps = epsilon[k]
        if eps is None:
            continue
        r = residual_pair(y_tilde[i], y_tilde[j], p_i, p_j)
        if r >= eps:
            fired.append(FiredPair(k, i, j, r))
    return fired


def majority_vote(fired: list[tuple[int, int]]) -> int | None:
    """Index shared by strictly more fired pairs than any other, if it appears at least twice."""
    counts: dict[int, int] = {}
    for i, j in fired:
        counts[i] = counts.get(i, 0) + 1
        counts[j] = counts.get(j, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if ranked and ranked[0][1] >= 2 and (len(ranked) == 1 or ranked[1][1] < ranked[0][1]):
        return ranked[0][0]
    return None


# ============================================================================
# Moving-target driver
# ============================================================================

@dataclass
class IntervalResult:
    """Detector state for one economic-dispatch interval."""

    index: int
    start: int
    stop: int
    clusterset: ClusterSet
    thresholds: Thresholds
    cluster_max: np.ndarray
    cluster_argmax: np.ndarray


@dataclass
class DetectionReport:
    """Fired pairs are stored column-wise; measurement indices are 0-based."""

    t: np.ndarray
    labels: tuple[str, ...]
    fired_step: np.ndarray
    fired_cluster: np.ndarray
    fired_i: np.ndarray
    fired_j: np.ndarray
    fired_residual: np.ndarray
    fired_epsilon: np.ndarray
    intervals: list[IntervalResult]
    isolated: list[str]
    ambiguous_pairs: list[tuple[str, str]]
    uncovered: list[str]

    @property
    def n_fired(self) -> int:
        return int(self.fired_step.shape[0])

    @property
    def flagged(self) -> list[str]:
        idx = sorted(set(self.fired_i.tolist()) | set(self.fired_j.tolist()))
        return [self.labels[i] for i in idx]

    @property
    def first_detection_time(self) -> float | None:
        return float(self.t[self.fired_step[0]]) if self.n_fired else None

    @property
    def thresholds(self) -> ThresholdTable:
        return ThresholdTable([iv.thresholds for iv in self.intervals])

    def fired_times(self) -> np.ndarray:
        return self.t[self.fired_step]

    def detections_in(self, start: float, stop: float) -> int:
        ft = self.fired_times()
        return int(np.count_nonzero((ft >= start - 1e-9) & (ft < stop - 1e-9)))

    def first_detection_in(self, start: float, stop: float) -> float | None:
        ft = self.fired_times()
        hit = ft[(ft >= start - 1e-9) & (ft < stop - 1e-9)]
        return float(hit[0]) if hit.size else None

    def fired_pairs(self):
        for s, k, i, j, r, e in zip(
            self.fired_step, self.fired_cluster, self.fired_i, self.fired_j, self.fired_residual, self.fired_epsilon
        ):
            yield float(self.t[s]), int(k), int(i), int(j), float(r), float(e)


def _intervals(trace: SimulationTrace) -> list[tuple[int, int, int]]:
    bounds = np.flatnonzero(np.diff(trace.interval)) + 1
    starts = np.concatenate([[0], bounds])
    stops = np.concatenate([bounds, [trace.n_steps]])
    return [(int(trace.interval[s]), int(s), int(e)) for s, e in zip(starts, stops)]


def calibrate_scenario(
    provider: ModelProvider,
    scenario: ScenarioSpec,
    trace: SimulationTrace | None = None,
) -> ThresholdTable:
    """One Thresholds entry per distinct loading, calibrated over all intervals run at it."""
    if trace is None:
        trace = simulate_scenario(scenario, provider)
    smoothing_steps = int(round(scenario.smoothing_window / scenario.dt))
    masks: dict[float, np.ndarray] = {}
    for q, start, stop in _intervals(trace):
        mask = masks.setdefault(scenario.loading_at(q), np.zeros(trace.n_steps, dtype=bool))
        mask[start:stop] = True
    table = ThresholdTable()
    for scale, mask in masks.items():
        cs = cluster_model(provider.model(scale), scenario.theta)[0]
        table.entries.append(
            calibrate_threshold(
                trace,
                cs,
                scenario.safety,
                steps=mask,
                smoothing_steps=smoothing_steps,
                smoothing=scenario.smoothing_window,
            )
        )
    return table


def calibrate_sweep(
    provider: ModelProvider,
    scenario: ScenarioSpec,
    scale: float,
    cs: ClusterSet | None = None,
) -> Thresholds:
    """Thresholds for one loading from a held-out step sweep over every load bus.

    The sweep runs on the next seed and carries the scenario's noise only when
    ``calibrate_with_noise`` is set.
    """
    noise = scenario.noise_std if scenario.calibrate_with_noise else 0.0
    sweep = scenario.step_sweep(provider.load_buses, scale, seed=scenario.seed + 1, noise_std=noise)
    if cs is None:
        cs = cluster_model(provider.model(scale), scenario.theta)[0]
    logger.info(f"Calibrating {cs.loading_label} on a {sweep.duration:g} s step sweep")
    return calibrate_threshold(
        simulate_scenario(sweep, provider),
        cs,
        scenario.safety,
        smoothing_steps=int(round(scenario.smoothing_window / scenario.dt)),
        smoothing=scenario.smoothing_window,
    )


def run_detector(
    provider: ModelProvider,
    scenario: ScenarioSpec,
    trace: SimulationTrace | None = None,
    thresholds: ThresholdTable | None = None,
) -> DetectionReport:
    """Re-cluster at every ED interval and run the pair checks on every sample.

    Thresholds come from ``thresholds`` when an entry matches the interval's
    clusters, otherwise from calibrate_sweep at the interval's loading.
    """
    trace = trace if trace is not None else simulate_scenario(scenario, provider)
    smoothing_steps = int(round(scenario.smoothing_window / scenario.dt))
    clustered: dict[float, ClusterSet] = {}
    swept: dict[float, Thresholds] = {}

    steps, clusters, ii, jj, rr, ee = [], [], [], [], [], []
    intervals: list[IntervalResult] = []
    uncovered: list[str] = []
    isolated: set[int] = set()
    ambiguous: set[tuple[int, int]] = set()

    for q, start, stop in _intervals(trace):
        scale = scenario.loading_at(q)
        if scale not in clustered:
            clustered[scale] = cluster_model(provider.model(scale), scenario.theta)[0]
        cs = clustered[scale]
        pairs = PairTable.from_clusterset(cs)

        th = thresholds.lookup(cs, scenario.smoothing_window) if thresholds else None
        if th is None:
            if scale not in swept:
                swept[scale] = calibrate_sweep(provider, scenario, scale, cs)
            th = swept[scale]
        for label in th.uncovered:
            if label not in uncovered:
                uncovered.append(label)

        R = residuals(trace.y_tilde[:, start:stop], pairs, smoothing_steps)
        eps = np.array([np.inf if e is None else e for e in th.epsilon])
        pair_eps = eps[pairs.k] if len(pairs) else np.zeros(0)
        hit = R >= pair_eps[:, None]

        cluster_max = np.zeros((cs.K, stop - start))
        cluster_argmax = np.full((cs.K, stop - start), -1, dtype=int)
        for k in range(cs.K):
            sel = np.flatnonzero(pairs.k == k)
            if sel.size:
                cluster_argmax[k] = sel[np.argmax(R[sel], axis=0)]
                cluster_max[k] = R[sel].max(axis=0)

        t_idx, p_idx = np.nonzero(hit.T)
        if t_idx.size:
            steps.append(t_idx + start)
            clusters.append(pairs.k[p_idx])
            ii.append(pairs.i[p_idx])
            jj.append(pairs.j[p_idx])
            rr.append(R[p_idx, t_idx])
            ee.append(pair_eps[p_idx])
            groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
            for t_k, p in zip(t_idx, p_idx):
                groups.setdefault((int(t_k), int(pairs.k[p])), []).append((int(pairs.i[p]), int(pairs.j[p])))
            for fired in groups.values():
                winner = majority_vote(fired)
                if winner is not None:
                    isolated.add(winner)
                else:
                    ambiguous.update(fired)

        intervals.append(IntervalResult(q, start, stop, cs, th, cluster_max, cluster_argmax))
        logger.info(f"Interval {q} ({cs.loading_label}): {cs.K} clusters, {int(hit.sum())} fired pair-samples")

    def cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    labels = trace.output_labels
    report = DetectionReport(
        t=trace.t,
        labels=labels,
        fired_step=cat(steps, int),
        fired_cluster=cat(clusters, int),
        fired_i=cat(ii, int),
        fired_j=cat(jj, int),
        fired_residual=cat(rr, float),
        fired_epsilon=cat(ee, float),
        intervals=intervals,
        isolated=[labels[i] for i in sorted(isolated)],
        ambiguous_pairs=[(labels[i], labels[j]) for i, j in sorted(ambiguous)],
        uncovered=uncovered,
    )
    if report.n_fired:
        logger.warning(f"Detector fired {report.n_fired} times; first at t={report.first_detection_time:g} s")
    return report


# ============================================================================
# Baseline observer
# ============================================================================

@dataclass(frozen=True)
class ObserverState:
    """Luenberger estimate x_hat, its gain L and the last output residual r_c = C·x_hat − ỹ."""

    x_hat: np.ndarray
    L: np.ndarray
    r_c: np.ndarray
    A_obs: np.ndarray
    C: np.ndarray


def observer_poles(n: int) -> np.ndarray:
    return -1.0 - 0.5 * np.arange(n)


def design_observer_gain(model: LinearModel) -> np.ndarray:
    """Gain L placing the eigenvalues of A − L·C at −1, −1.5, −2, ...

    With a left-invertible C the assignment is direct; otherwise it goes
    through pole placement on the dual pair (Aᵀ, Cᵀ).
    """
    n = model.n
    poles = observer_poles(n)
    if np.linalg.matrix_rank(model.C) == n:
        L = (model.A - np.diag(poles)) @ np.linalg.pinv(model.C)
    else:
        L = place_poles(model.A.T, model.C.T, poles).gain_matrix.T
    worst = float(np.max(sla.eigvals(model.A - L @ model.C).real))
    if worst >= 0:
        raise NotHurwitz(f"observer error dynamics not stable (max Re λ = {worst:.3g})")
    return L


def make_observer(model: LinearModel, x_hat0: np.ndarray | None = None, L: np.ndarray | None = None) -> ObserverState:
    L = design_observer_gain(model) if L is None else L
    x_hat = np.zeros(model.n) if x_hat0 is None else np.asarray(x_hat0, dtype=float)
    return ObserverState(x_hat=x_hat, L=L, r_c=np.zeros(model.l), A_obs=model.A - L @ model.C, C=model.C)


def baseline_observer_step(obs: ObserverState, y_tilde: np.ndarray, dt: float) -> ObserverState:
    """RK4 step of x̂̇ = (A − LC)x̂ + Lỹ; r_c is taken at the consumed sample."""
    u = obs.L @ y_tilde
    A = obs.A_obs
    x = obs.x_hat
    k1 = A @ x + u
    k2 = A @ (x + 0.5 * dt * k1) + u
    k3 = A @ (x + 0.5 * dt * k2) + u
    k4 = A @ (x + dt * k3) + u
    r_c = obs.C @ x - y_tilde
    return ObserverState(
        x_hat=x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4),
        L=obs.L,
        r_c=r_c,
        A_obs=obs.A_obs,
        C=obs.C,
    )


def run_observer(model: LinearModel, trace: SimulationTrace, x_hat0: np.ndarray | None = None) -> np.ndarray:
    """Observer residual r_c for every sample of the trace (l×T)."""
    obs = make_observer(model, x_hat0)
    dt = float(trace.t[1] - trace.t[0]) if trace.n_steps > 1 else 0.0
    out = np.zeros((model.l, trace.n_steps))
    for k in range(trace.n_steps):
        obs = baseline_observer_step(obs, trace.y_tilde[:, k], dt)
        out[:, k] = obs.r_c
    return out


def steady_observer_residual(model: LinearModel, L: np.ndarray, d: np.ndarray) -> np.ndarray:
    """C(A − LC)⁻¹G·d, the residual left by a constant disturbance."""
    return model.C @ sla.solve(model.A - L @ model.C, model.G @ np.asarray(d, dtype=float))
