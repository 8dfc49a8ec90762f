"""Pydantic schemas for case files, scenarios, run configuration and reports."""
import os
from pathlib import Path
from typing import Literal, Optional, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, model_validator
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import ValidationError

M = TypeVar("M", bound=BaseModel)

SWEEP_HOLD = 30.0
SWEEP_LEAD = 1.0
SWEEP_STEP = 0.5


def validated(model_cls: type[M], source: str = "<input>", **data) -> M:
    """Build a model, turning pydantic failures into errors.ValidationError."""
    try:
        return model_cls(**data)
    except PydanticValidationError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(p) for p in err["loc"]) or model_cls.__name__
        raise ValidationError(f"{source}: {loc}: {err['msg']}") from None


# ============================================================================
# Grid case
# ============================================================================

class Bus(BaseModel):
    """Network bus."""
    model_config = ConfigDict(frozen=True)

    id: int = Field(..., ge=1)
    kind: Literal["generator", "load"]


class Branch(BaseModel):
    """Lossless line between two buses."""
    model_config = ConfigDict(frozen=True)

    from_bus: int
    to_bus: int
    b: float = Field(..., gt=0, description="Series susceptance (p.u.)")


class Generator(BaseModel):
    """Swing dynamics plus governor of a generator bus."""
    model_config = ConfigDict(frozen=True)

    bus: int
    J: float = Field(..., gt=0, description="Inertia (s^2)")
    D: float = Field(..., gt=0, description="Damping (p.u.)")
    e_T: float = Field(..., gt=0)
    T_u: float = Field(..., gt=0, description="Turbine time constant (s)")
    T_g: float = Field(..., gt=0, description="Governor time constant (s)")
    K_t: float = Field(..., gt=0)
    r: float = Field(..., gt=0, description="Droop")
    capacity: float = Field(..., gt=0, description="Dispatchable capacity (p.u.)")
    local_demand: float = Field(0.0, ge=0, description="Demand located at the generator bus (p.u.)")


class Load(BaseModel):
    """Structure-preserving load bus."""
    model_config = ConfigDict(frozen=True)

    bus: int
    J: float = Field(..., gt=0)
    D: float = Field(..., gt=0)
    demand: float = Field(..., ge=0, description="Nominal demand (p.u.)")


class GridCase(BaseModel):
    """Parsed network and component parameters; bus order follows the file."""
    model_config = ConfigDict(frozen=True)

    name: str = "case"
    base_mva: float = Field(100.0, gt=0)
    buses: list[Bus]
    branches: list[Branch]
    generators: list[Generator]
    loads: list[Load]

    @model_validator(mode="after")
    def _check_topology(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus id")
        if not self.generators:
            raise ValueError("case needs at least one generator")
        kinds = {b.id: b.kind for b in self.buses}
        for kind, records in (("generator", self.generators), ("load", self.loads)):
            seen = [r.bus for r in records]
            if len(set(seen)) != len(seen):
                raise ValueError(f"duplicate {kind} record")
            for bus in seen:
                if kinds.get(bus) != kind:
                    raise ValueError(f"{kind} record for bus {bus}, which is not a {kind} bus")
            expected = {i for i, k in kinds.items() if k == kind}
            if missing := expected - set(seen):
                raise ValueError(f"{kind} buses without parameters: {sorted(missing)}")
        for br in self.branches:
            if br.from_bus not in kinds or br.to_bus not in kinds:
                raise ValueError(f"branch {br.from_bus}-{br.to_bus} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise ValueError(f"branch {br.from_bus}-{br.to_bus} is a self loop")

        index = {bid: k for k, bid in enumerate(ids)}
        rows = [index[br.from_bus] for br in self.branches]
        cols = [index[br.to_bus] for br in self.branches]
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
        n_comp, _ = connected_components(graph, directed=False)
        if n_comp != 1:
            raise ValueError(f"branch graph has {n_comp} connected components")
        return self

    @property
    def generator_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind == "generator"]

    @property
    def load_buses(self) -> list[int]:
        return [b.id for b in self.buses if b.kind == "load"]

    def generator(self, bus: int) -> Generator:
        return next(g for g in self.generators if g.bus == bus)

    def load(self, bus: int) -> Load:
        return next(ld for ld in self.loads if ld.bus == bus)


# ============================================================================
# Scenario
# ============================================================================

class LoadEvent(BaseModel):
    """Step change of demand at one load bus."""
    model_config = ConfigDict(frozen=True)

    time: float = Field(..., ge=0)
    bus: int
    delta: float = Field(..., description="Demand change (p.u.)")


class AttackWindow(BaseModel):
    """One attack line, possibly repeated ``repeat`` times every ``every`` seconds."""
    model_config = ConfigDict(frozen=True)

    start: float = Field(..., ge=0)
    duration: float = Field(..., gt=0)
    target: str
    kind: Literal["scale", "bias"]
    magnitude: float
    repeat: int = Field(1, ge=1)
    every: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _check_repeat(self):
        if self.repeat > 1 and self.every < self.duration:
            raise ValueError("repeated windows must not overlap (every >= duration)")
        return self

    def windows(self) -> list[tuple[float, float]]:
        return [
            (self.start + k * self.every, self.start + k * self.every + self.duration)
            for k in range(self.repeat)
        ]


class ScenarioSpec(BaseModel):
    """Timeline of load events, attack windows and noise for one simulated run."""
    model_config = ConfigDict(frozen=True)

    case: Path
    loading_label: str = "nominal"
    duration: float = Field(..., gt=0)
    dt: float = Field(0.01, gt=0, le=0.02)
    ed_interval: float = Field(100.0, gt=0)
    loading_schedule: list[float] = Field(default_factory=lambda: [1.0], min_length=1)
    theta: Optional[float] = Field(None, ge=0, description="None selects theta automatically")
    safety: float = Field(1.5, gt=1.0, description="Threshold margin over the calibration peak")
    seed: int = Field(0, ge=0)
    smoothing_window: float = Field(0.0, ge=0, description="Residual moving-average window (s); 0 disables")
    calibrate_with_noise: bool = False
    outputs: Optional[list[str]] = None
    load_events: list[LoadEvent] = Field(default_factory=list)
    attacks: list[AttackWindow] = Field(default_factory=list)
    noise_std: float = Field(0.0, ge=0)
    fluctuation_std: float = Field(0.0, ge=0)
    fluctuation_tau: float = Field(5.0, gt=0)

    @model_validator(mode="after")
    def _check_timeline(self):
        times = [e.time for e in self.load_events]
        if times != sorted(times):
            raise ValueError("load events must be time-ordered")
        starts = [a.start for a in self.attacks]
        if starts != sorted(starts):
            raise ValueError("attacks must be time-ordered")
        if any(s <= 0 for s in self.loading_schedule):
            raise ValueError("loading_schedule entries must be positive")
        if self.last_event_end > self.duration:
            raise ValueError(f"duration {self.duration} ends before the last event ({self.last_event_end})")
        return self

    @property
    def last_event_end(self) -> float:
        ends = [e.time for e in self.load_events]
        ends += [w[1] for a in self.attacks for w in a.windows()]
        return max(ends, default=0.0)

    @property
    def attack_windows(self) -> list[tuple[float, float, AttackWindow]]:
        return sorted(((s, e, a) for a in self.attacks for s, e in a.windows()), key=lambda w: w[0])

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))

    def loading_at(self, interval: int) -> float:
        return self.loading_schedule[min(interval, len(self.loading_schedule) - 1)]

    def attack_free(self, seed: Optional[int] = None, noise_std: Optional[float] = None) -> "ScenarioSpec":
        """Same timeline with the attacks removed."""
        return self.model_copy(
            update={
                "attacks": [],
                "seed": self.seed if seed is None else seed,
                "noise_std": self.noise_std if noise_std is None else noise_std,
            }
        )

    def step_sweep(
        self,
        load_buses,
        scale: float,
        *,
        hold: float = SWEEP_HOLD,
        seed: Optional[int] = None,
        noise_std: Optional[float] = None,
    ) -> "ScenarioSpec":
        """Attack-free run at one loading in which every load bus in turn steps
        by the largest scenario step for ``hold`` seconds and then returns."""
        load_buses = list(load_buses)
        step = max((abs(e.delta) for e in self.load_events), default=0.0) or SWEEP_STEP
        events = []
        for k, bus in enumerate(load_buses):
            on = SWEEP_LEAD + 2 * k * hold
            events += [LoadEvent(time=on, bus=bus, delta=step), LoadEvent(time=on + hold, bus=bus, delta=-step)]
        duration = SWEEP_LEAD + 2 * hold * len(load_buses)
        return self.attack_free(seed, noise_std).model_copy(
            update={
                "loading_label": f"sweep x{scale:g}",
                "duration": duration,
                "ed_interval": duration,
                "loading_schedule": [scale],
                "load_events": events,
            }
        )


# ============================================================================
# Command-line configuration
# ============================================================================

class RunConfig(BaseModel):
    """Validated command-line overrides."""

    command: Literal["cluster", "calibrate", "run", "oracle"]
    case: Optional[Path] = None
    scenario: Optional[Path] = None
    thresholds: Optional[Path] = None
    out_dir: Path = Path("mtd_out")
    theta: Optional[float] = Field(None, ge=0)
    safety: Optional[float] = Field(None, gt=1.0)
    dt: Optional[float] = Field(None, gt=0, le=0.02)
    seed: Optional[int] = Field(None, ge=0)
    noise_std: Optional[float] = Field(None, ge=0)
    log_level: str = "WARNING"

    @model_validator(mode="after")
    def _check_out_dir(self):
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValueError(f"cannot create output directory {self.out_dir}: {exc}") from None
        if not os.access(self.out_dir, os.W_OK):
            raise ValueError(f"output directory {self.out_dir} is not writable")
        return self

    def apply(self, spec: ScenarioSpec) -> ScenarioSpec:
        updates = {
            k: v for k, v in (
                ("theta", self.theta),
                ("safety", self.safety),
                ("dt", self.dt),
                ("seed", self.seed),
                ("noise_std", self.noise_std),
            ) if v is not None
        }
        return spec.model_validate({**spec.model_dump(), **updates}) if updates else spec


# ============================================================================
# Reports (serialized to JSON by the CLI)
# ============================================================================

class StabilityReport(BaseModel):
    """Error-system stability check for one ClusterSet."""

    loading_label: str
    theta: float
    n_clusters: int
    n_singletons: int
    pi_bar_vmax_norm: float
    max_real_pole: Optional[float] = Field(
        None, description="Largest real part among the error-system poles; None when it is identically zero"
    )
    pole_tol: float
    passed: bool


class WindowSummary(BaseModel):
    start: float
    end: float
    target: str
    detected: bool
    first_detection_time: Optional[float] = None


class RunSummary(BaseModel):
    """Outcome of one detection run."""

    scenario: str
    n_steps: int
    n_fired: int
    flagged: list[str]
    isolated: list[str]
    ambiguous_pairs: list[list[str]]
    uncovered: list[str]
    first_detection_time: Optional[float] = None
    windows: list[WindowSummary] = Field(default_factory=list)
    fired_outside_windows: int = 0
    attack_detected: bool


class OracleCase(BaseModel):
    name: str
    lyapunov_max_rel: float
    pair_max_rel: float


class OracleReport(BaseModel):
    """Deviation of the fast routines from their brute-force oracles."""

    seed: int
    batch: int
    tolerance: float
    cases: list[OracleCase]
    max_rel: float
    passed: bool
