"""
Time-domain simulation of the closed-loop grid under load steps, measurement
attacks and measurement noise.

The plant is integrated in deviation coordinates with fixed-step RK4. At each
economic-dispatch boundary the plant matrices switch to the next operating
point and the deviation state carries over.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger

from . import textformat
from .errors import NonFinite, ParseError, UnknownTarget, ValidationError
from .gridmodel import CaseModelProvider, LinearModel, ModelProvider, parse_case
from .schemas import AttackWindow, ScenarioSpec, validated

TIME_EPS = 1e-9
SCENARIO_SECTIONS = {"scenario", "load_event", "attack", "noise", "load_fluctuation"}
SCENARIO_KEYS = {
    "case", "loading_label", "duration", "dt", "ed_interval", "loading_schedule", "theta",
    "safety", "seed", "smoothing_window", "calibrate_with_noise", "outputs",
}


# ============================================================================
# Trace
# ============================================================================

@dataclass(frozen=True)
class SimulationTrace:
    """Sampled signals; columns are time steps."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    y_a: np.ndarray
    y_tilde: np.ndarray
    d: np.ndarray
    interval: np.ndarray
    state_labels: tuple[str, ...]
    output_labels: tuple[str, ...]
    load_buses: tuple[int, ...]

    @property
    def n_steps(self) -> int:
        return self.t.shape[0]

    def output(self, label: str, signal: str = "y_tilde") -> np.ndarray:
        return getattr(self, signal)[self.output_labels.index(label)]

    def mask(self, start: float, stop: float) -> np.ndarray:
        return (self.t >= start - TIME_EPS) & (self.t < stop - TIME_EPS)


# ============================================================================
# Building blocks
# ============================================================================

def step_dynamics(x: np.ndarray, d: np.ndarray, model: LinearModel, dt: float) -> np.ndarray:
    """One RK4 step of ẋ = A x + G d with d held over the step."""
    A, Gd = model.A, model.G @ d
    k1 = A @ x + Gd
    k2 = A @ (x + 0.5 * dt * k1) + Gd
    k3 = A @ (x + 0.5 * dt * k2) + Gd
    k4 = A @ (x + dt * k3) + Gd
    x_next = x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise NonFinite("state became non-finite during integration")
    return x_next


def load_profile_eval(spec: ScenarioSpec, t: float, load_buses) -> np.ndarray:
    """Demand deviation per load channel at time t (piecewise constant)."""
    load_buses = list(load_buses)
    d = np.zeros(len(load_buses))
    for event in spec.load_events:
        if event.time > t + TIME_EPS:
            break
        try:
            d[load_buses.index(event.bus)] += event.delta
        except ValueError:
            raise ValidationError(f"load event at t={event.time} names bus {event.bus}, which is not a load bus") from None
    return d


def inject_attack(y: np.ndarray, script: list[AttackWindow], t: float, labels) -> np.ndarray:
    """Attack signal y_a for the reading y at time t.

    Scale windows give y_a[m] = k·y[m]; bias windows give y_a[m] = magnitude.
    """
    labels = list(labels)
    y_a = np.zeros_like(y, dtype=float)
    for attack in script:
        if attack.target not in labels:
            raise UnknownTarget(f"attack target {attack.target!r} is not a measurement")
        m = labels.index(attack.target)
        for start, end in attack.windows():
            if start - TIME_EPS <= t < end - TIME_EPS:
                y_a[m] += attack.magnitude * y[m] if attack.kind == "scale" else attack.magnitude
    return y_a


def add_noise(y: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    if noise_std == 0:
        return np.array(y, dtype=float, copy=True)
    return y + rng.normal(0.0, noise_std, size=np.shape(y))


def interval_index(t: float, ed_interval: float) -> int:
    return int(np.floor(t / ed_interval + TIME_EPS))


# ============================================================================
# Scenario runner
# ============================================================================

def default_provider(spec: ScenarioSpec) -> CaseModelProvider:
    return CaseModelProvider(parse_case(spec.case), spec.outputs)


def simulate_scenario(spec: ScenarioSpec, provider: ModelProvider | None = None) -> SimulationTrace:
    """Integrate the scenario on the grid t_k = k·dt, k = 0..duration/dt."""
    provider = provider or default_provider(spec)
    steps = spec.n_steps + 1
    t = np.arange(steps) * spec.dt
    intervals = np.array([interval_index(tk, spec.ed_interval) for tk in t])

    model = provider.model(spec.loading_at(0))
    n, l, nd = model.n, model.l, model.G.shape[1]
    if len(provider.load_buses) != nd:
        raise ValidationError(f"provider lists {len(provider.load_buses)} load buses, G has {nd} columns")

    noise_rng, fluct_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(2))
    decay = np.exp(-spec.dt / spec.fluctuation_tau)
    kick = spec.fluctuation_std * np.sqrt(1.0 - decay ** 2)
    fluct = np.zeros(nd)

    X = np.zeros((n, steps))
    Y = np.zeros((l, steps))
    Ya = np.zeros((l, steps))
    Yt = np.zeros((l, steps))
    D = np.zeros((nd, steps))

    x = np.zeros(n)
    current = 0
    logger.info(f"Simulating {spec.duration:g} s at dt={spec.dt:g} ({steps} samples, {intervals[-1] + 1} ED intervals)")
    for k in range(steps):
        if intervals[k] != current:
            current = intervals[k]
            model = provider.model(spec.loading_at(current))
            logger.debug(f"t={t[k]:g}: switching plant to {model.loading_label}")
        d = load_profile_eval(spec, t[k], provider.load_buses)
        if spec.fluctuation_std > 0:
            d = d + fluct
            fluct = decay * fluct + kick * fluct_rng.standard_normal(nd)
        y = model.C @ x
        y_a = inject_attack(model.y0 + y, spec.attacks, t[k], model.output_labels)
        X[:, k], Y[:, k], Ya[:, k], D[:, k] = x, y, y_a, d
        Yt[:, k] = add_noise(y + y_a, spec.noise_std, noise_rng)
        if k + 1 < steps:
            x = step_dynamics(x, d, model, spec.dt)

    return SimulationTrace(
        t=t,
        x=X,
        y=Y,
        y_a=Ya,
        y_tilde=Yt,
        d=D,
        interval=intervals,
        state_labels=model.state_labels,
        output_labels=model.output_labels,
        load_buses=tuple(provider.load_buses),
    )


# ============================================================================
# Scenario files
# ============================================================================

def parse_scenario_text(text: str, source: str = "<string>", base_dir: Path | None = None) -> ScenarioSpec:
    doc = textformat.tokenize(text, source)
    doc.expect_only(SCENARIO_SECTIONS)
    settings = doc.settings(doc.single("scenario"))
    for key, rec in settings.items():
        if key not in SCENARIO_KEYS:
            raise doc.fail(rec[0], f"unknown [scenario] key {key!r}")
    for key in ("case", "duration"):
        if key not in settings:
            raise ParseError(f"[scenario] needs '{key} = ...'", source, doc.single("scenario").line, 1)

    data: dict = {}
    case = Path(settings["case"][0].text)
    data["case"] = case if case.is_absolute() or base_dir is None else base_dir / case
    for key in ("duration", "dt", "ed_interval", "safety", "smoothing_window"):
        if key in settings:
            data[key] = doc.float_(settings[key][0])
    if "loading_label" in settings:
        data["loading_label"] = settings["loading_label"][0].text
    if "seed" in settings:
        data["seed"] = doc.int_(settings["seed"][0])
    if "theta" in settings:
        tok = settings["theta"][0]
        data["theta"] = None if tok.text == "auto" else doc.float_(tok)
    if "loading_schedule" in settings:
        data["loading_schedule"] = [doc.float_(tok) for tok in settings["loading_schedule"]]
    if "outputs" in settings:
        data["outputs"] = settings["outputs"].texts
    if "calibrate_with_noise" in settings:
        tok = settings["calibrate_with_noise"][0]
        if tok.text not in ("true", "false"):
            raise doc.fail(tok, "expected true or false")
        data["calibrate_with_noise"] = tok.text == "true"

    events = []
    for sec in doc.named("load_event"):
        for rec in sec.records:
            doc.arity(rec, 3)
            events.append({"time": doc.float_(rec[0]), "bus": doc.int_(rec[1]), "delta": doc.float_(rec[2])})
    data["load_events"] = events

    attacks = []
    for sec in doc.named("attack"):
        for rec in sec.records:
            if len(rec) not in (5, 9):
                raise doc.fail(rec[0], "expected 'start duration target kind magnitude [repeat N every P]'")
            if rec[3].text not in ("scale", "bias"):
                raise doc.fail(rec[3], f"attack kind must be 'scale' or 'bias', got {rec[3].text!r}")
            attack = {
                "start": doc.float_(rec[0]),
                "duration": doc.float_(rec[1]),
                "target": rec[2].text,
                "kind": rec[3].text,
                "magnitude": doc.float_(rec[4]),
            }
            if len(rec) == 9:
                if rec[5].text != "repeat" or rec[7].text != "every":
                    raise doc.fail(rec[5], "expected 'repeat N every P'")
                attack["repeat"] = doc.int_(rec[6])
                attack["every"] = doc.float_(rec[8])
            attacks.append(attack)
    data["attacks"] = attacks

    if sec := doc.single("noise", required=False):
        noise = doc.settings(sec)
        if "std" in noise:
            data["noise_std"] = doc.float_(noise["std"][0])
    if sec := doc.single("load_fluctuation", required=False):
        fl = doc.settings(sec)
        if "std" in fl:
            data["fluctuation_std"] = doc.float_(fl["std"][0])
        if "tau" in fl:
            data["fluctuation_tau"] = doc.float_(fl["tau"][0])

    return validated(ScenarioSpec, source, **data)


def parse_scenario(path: Path | str) -> ScenarioSpec:
    path = Path(path)
    return parse_scenario_text(path.read_text(), str(path), base_dir=path.parent)


def serialize_scenario(spec: ScenarioSpec) -> str:
    scenario = [
        ["case", "=", str(spec.case)],
        ["loading_label", "=", spec.loading_label],
        ["duration", "=", spec.duration],
        ["dt", "=", spec.dt],
        ["ed_interval", "=", spec.ed_interval],
        ["loading_schedule", "=", *spec.loading_schedule],
        ["theta", "=", "auto" if spec.theta is None else spec.theta],
        ["safety", "=", spec.safety],
        ["seed", "=", spec.seed],
        ["smoothing_window", "=", spec.smoothing_window],
        ["calibrate_with_noise", "=", spec.calibrate_with_noise],
    ]
    if spec.outputs:
        scenario.append(["outputs", "=", *spec.outputs])
    blocks = [("scenario", scenario)]
    if spec.load_events:
        blocks.append(("load_event", [[e.time, e.bus, e.delta] for e in spec.load_events]))
    if spec.attacks:
        rows = []
        for a in spec.attacks:
            row = [a.start, a.duration, a.target, a.kind, a.magnitude]
            if a.repeat > 1 or a.every:
                row += ["repeat", a.repeat, "every", a.every]
            rows.append(row)
        blocks.append(("attack", rows))
    blocks.append(("noise", [["std", "=", spec.noise_std]]))
    if spec.fluctuation_std > 0:
        blocks.append(("load_fluctuation", [["std", "=", spec.fluctuation_std], ["tau", "=", spec.fluctuation_tau]]))
    return textformat.render(blocks)
