"""
Grid case files, DC power flow and the linearized closed-loop grid model.

State ordering is [omega_G, omega_L, P_G, P_L, P_T, a]. P_G is the power a
generator bus sends into the network, P_L the power a load bus draws from
it. The load disturbance d enters the load frequency rows through -J_L^-1.
"""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np
import scipy.linalg as sla
from loguru import logger

from . import textformat
from .errors import InfeasibleDispatch, SingularNetwork, UnknownStateLabel
from .matcore import SemistableDecomposition, decompose_semistable
from .schemas import GridCase, validated

STATE_BLOCKS = ("omega_G", "omega_L", "P_G", "P_L", "P_T", "a")
CASE_SECTIONS = {"system", "bus", "branch", "generator", "load"}
GENERATOR_FIELDS = ("J", "D", "e_T", "T_u", "T_g", "K_t", "r", "capacity", "local_demand")
LOAD_FIELDS = ("J", "D", "demand")


# ============================================================================
# Case files
# ============================================================================

def parse_case_text(text: str, source: str = "<string>") -> GridCase:
    doc = textformat.tokenize(text, source)
    doc.expect_only(CASE_SECTIONS)

    system = doc.settings(doc.single("system"))
    meta = {}
    if "name" in system:
        meta["name"] = " ".join(system["name"].texts)
    if "base_mva" in system:
        meta["base_mva"] = doc.float_(system["base_mva"][0])
    for key in system:
        if key not in ("name", "base_mva"):
            raise doc.fail(system[key][0], f"unknown [system] key {key!r}")

    buses, branches, generators, loads = [], [], [], []
    for sec in doc.named("bus"):
        for rec in sec.records:
            doc.arity(rec, 2)
            if rec[1].text not in ("generator", "load"):
                raise doc.fail(rec[1], f"bus kind must be 'generator' or 'load', got {rec[1].text!r}")
            buses.append({"id": doc.int_(rec[0]), "kind": rec[1].text})
    for sec in doc.named("branch"):
        for rec in sec.records:
            doc.arity(rec, 3)
            branches.append({"from_bus": doc.int_(rec[0]), "to_bus": doc.int_(rec[1]), "b": doc.float_(rec[2])})
    for sec in doc.named("generator"):
        for rec in sec.records:
            doc.arity(rec, len(GENERATOR_FIELDS), len(GENERATOR_FIELDS) + 1)
            values = dict(zip(GENERATOR_FIELDS, (doc.float_(t) for t in rec[1:])))
            generators.append({"bus": doc.int_(rec[0]), **values})
    for sec in doc.named("load"):
        for rec in sec.records:
            doc.arity(rec, len(LOAD_FIELDS) + 1)
            values = dict(zip(LOAD_FIELDS, (doc.float_(t) for t in rec[1:])))
            loads.append({"bus": doc.int_(rec[0]), **values})

    return validated(
        GridCase, source, buses=buses, branches=branches, generators=generators, loads=loads, **meta
    )


def parse_case(path: Path | str) -> GridCase:
    path = Path(path)
    case = parse_case_text(path.read_text(), str(path))
    logger.info(f"Parsed {path.name}: {len(case.generators)} generators, {len(case.loads)} loads")
    return case


def serialize_case(case: GridCase) -> str:
    return textformat.render(
        [
            ("system", [["name", "=", case.name], ["base_mva", "=", case.base_mva]]),
            ("bus", [[b.id, b.kind] for b in case.buses]),
            ("branch", [[br.from_bus, br.to_bus, br.b] for br in case.branches]),
            ("generator", [[g.bus, *(getattr(g, f) for f in GENERATOR_FIELDS)] for g in case.generators]),
            ("load", [[ld.bus, *(getattr(ld, f) for f in LOAD_FIELDS)] for ld in case.loads]),
        ]
    )


# ============================================================================
# Operating point
# ============================================================================

@dataclass(frozen=True)
class OperatingPoint:
    """DC power-flow solution; angles and injections follow case bus order."""

    bus_ids: tuple[int, ...]
    angles: np.ndarray
    injections: np.ndarray
    loading_label: str = "nominal"

    def angle(self, bus: int) -> float:
        return float(self.angles[self.bus_ids.index(bus)])

    def injection(self, bus: int) -> float:
        return float(self.injections[self.bus_ids.index(bus)])


def susceptance_matrix(case: GridCase, angles: np.ndarray | None = None) -> np.ndarray:
    """Bus Laplacian with branch weights b_ij, or b_ij·cos(δi−δj) when angles are given."""
    index = {b.id: k for k, b in enumerate(case.buses)}
    n = len(case.buses)
    B = np.zeros((n, n))
    for br in case.branches:
        i, j = index[br.from_bus], index[br.to_bus]
        w = br.b if angles is None else br.b * np.cos(angles[i] - angles[j])
        B[i, j] -= w
        B[j, i] -= w
        B[i, i] += w
        B[j, j] += w
    return B


def dc_power_flow(
    case: GridCase,
    demand: dict[int, float] | np.ndarray | None = None,
    loading_label: str = "nominal",
) -> OperatingPoint:
    """Proportional-to-capacity dispatch followed by B·δ = P with the first bus as reference.

    ``demand`` gives load-bus demand (dict by bus id or array in load-bus
    order); demand located at generator buses is always the case value.
    """
    load_buses = case.load_buses
    if demand is None:
        load_demand = np.array([case.load(b).demand for b in load_buses])
    elif isinstance(demand, dict):
        load_demand = np.array([demand.get(b, 0.0) for b in load_buses], dtype=float)
    else:
        load_demand = np.asarray(demand, dtype=float)

    local = {g.bus: g.local_demand for g in case.generators}
    capacity = {g.bus: g.capacity for g in case.generators}
    total = float(load_demand.sum()) + sum(local.values())
    cap_total = sum(capacity.values())
    if total > cap_total * (1 + 1e-12):
        raise InfeasibleDispatch(f"demand {total:.4g} p.u. exceeds generation capacity {cap_total:.4g} p.u.")

    bus_ids = tuple(b.id for b in case.buses)
    P = np.zeros(len(bus_ids))
    load_pos = {b: k for k, b in enumerate(load_buses)}
    for k, bid in enumerate(bus_ids):
        if bid in capacity:
            P[k] = capacity[bid] / cap_total * total - local[bid]
        else:
            P[k] = -load_demand[load_pos[bid]]

    B = susceptance_matrix(case)
    angles = np.zeros(len(bus_ids))
    if len(bus_ids) > 1:
        try:
            angles[1:] = sla.solve(B[1:, 1:], P[1:], assume_a="sym")
        except (sla.LinAlgError, ValueError) as exc:
            raise SingularNetwork(f"reduced susceptance matrix is singular: {exc}") from None
        if not np.all(np.isfinite(angles)):
            raise SingularNetwork("reduced susceptance matrix is singular")

    logger.debug(f"dc_power_flow[{loading_label}]: total demand {total:.4f}, angle spread {np.ptp(angles):.4f} rad")
    return OperatingPoint(bus_ids=bus_ids, angles=angles, injections=P, loading_label=loading_label)


# ============================================================================
# Linear model
# ============================================================================

@dataclass(frozen=True)
class LinearModel:
    """Closed-loop matrices (A, G, C), labels, operating state x0 and the semistability certificate."""

    A: np.ndarray
    G: np.ndarray
    C: np.ndarray
    state_labels: tuple[str, ...]
    output_labels: tuple[str, ...]
    n_g: int
    n_l: int
    semistability: SemistableDecomposition
    x0: np.ndarray
    loading_label: str = "nominal"
    operating_point: OperatingPoint | None = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def l(self) -> int:  # noqa: E743
        return self.C.shape[0]

    @property
    def y0(self) -> np.ndarray:
        """Measurement values at the operating point."""
        return self.C @ self.x0

    def output_index(self, label: str) -> int:
        try:
            return self.output_labels.index(label)
        except ValueError:
            raise UnknownStateLabel(f"no measurement named {label!r}") from None

    @classmethod
    def from_matrices(
        cls,
        A,
        G,
        C=None,
        state_labels=None,
        output_labels=None,
        x0=None,
        loading_label: str = "synthetic",
        zero_tol: float | None = None,
    ) -> "LinearModel":
        A = np.asarray(A, dtype=float)
        G = np.asarray(G, dtype=float)
        if G.ndim == 1:
            G = G[:, None]
        n = A.shape[0]
        C = np.eye(n) if C is None else np.asarray(C, dtype=float)
        states = tuple(state_labels or (f"x[{k + 1}]" for k in range(n)))
        if output_labels is None:
            output_labels = states if C.shape[0] == n and np.array_equal(C, np.eye(n)) else (
                f"y[{k + 1}]" for k in range(C.shape[0])
            )
        return cls(
            A=A,
            G=G,
            C=C,
            state_labels=states,
            output_labels=tuple(output_labels),
            n_g=0,
            n_l=G.shape[1],
            semistability=decompose_semistable(A, zero_tol),
            x0=np.zeros(n) if x0 is None else np.asarray(x0, dtype=float),
            loading_label=loading_label,
        )


def state_labels(case: GridCase) -> tuple[str, ...]:
    gens, loads = case.generator_buses, case.load_buses
    return tuple(
        [f"omega_G[{b}]" for b in gens]
        + [f"omega_L[{b}]" for b in loads]
        + [f"P_G[{b}]" for b in gens]
        + [f"P_L[{b}]" for b in loads]
        + [f"P_T[{b}]" for b in gens]
        + [f"a[{b}]" for b in gens]
    )


def linearize(case: GridCase, op: OperatingPoint) -> LinearModel:
    """Assemble A and G block by block around the operating point; C = identity.

    Load-bus damping D is the case value at nominal demand and scales with
    the served demand, so a loading change moves the ω_L diagonal as well as
    the network blocks.
    """
    gens, loads = case.generator_buses, case.load_buses
    ng, nl = len(gens), len(loads)
    n = 2 * (ng + nl) + 2 * ng

    gen = [case.generator(b) for b in gens]
    ld = [case.load(b) for b in loads]
    J_G = np.array([g.J for g in gen])
    D_G = np.array([g.D for g in gen])
    e_T = np.array([g.e_T for g in gen])
    T_u = np.array([g.T_u for g in gen])
    T_g = np.array([g.T_g for g in gen])
    K_t = np.array([g.K_t for g in gen])
    r = np.array([g.r for g in gen])
    J_L = np.array([x.J for x in ld])
    D_L = np.array([x.D for x in ld])

    Y = susceptance_matrix(case, op.angles)
    pos = {bid: k for k, bid in enumerate(op.bus_ids)}
    gi = [pos[b] for b in gens]
    li = [pos[b] for b in loads]

    # a load bus that carries demand damps in proportion to the demand it serves
    nominal = np.array([x.demand for x in ld])
    served = -op.injections[li]
    D_L = np.where(nominal > 0, D_L * served / np.where(nominal > 0, nominal, 1.0), D_L)

    Y_GG, Y_GL = Y[np.ix_(gi, gi)], Y[np.ix_(gi, li)]
    Y_LG, Y_LL = Y[np.ix_(li, gi)], Y[np.ix_(li, li)]

    wG = slice(0, ng)
    wL = slice(ng, ng + nl)
    PG = slice(ng + nl, 2 * ng + nl)
    PL = slice(2 * ng + nl, 2 * (ng + nl))
    PT = slice(2 * (ng + nl), 2 * (ng + nl) + ng)
    av = slice(2 * (ng + nl) + ng, n)

    A = np.zeros((n, n))
    A[wG, wG] = np.diag(-D_G / J_G)
    A[wG, PG] = np.diag(-1.0 / J_G)
    A[wG, PT] = np.diag(1.0 / J_G)
    A[wG, av] = np.diag(e_T / J_G)
    A[wL, wL] = np.diag(-D_L / J_L)
    A[wL, PL] = np.diag(1.0 / J_L)
    A[PG, wG] = Y_GG
    A[PG, wL] = Y_GL
    A[PL, wG] = -Y_LG
    A[PL, wL] = -Y_LL
    A[PT, PT] = np.diag(-1.0 / T_u)
    A[PT, av] = np.diag(K_t / T_u)
    A[av, wG] = np.diag(-1.0 / T_g)
    A[av, av] = np.diag(-r / T_g)

    G = np.zeros((n, nl))
    G[wL, :] = np.diag(-1.0 / J_L)

    # operating-point readings; governor set points absorb the steady mechanical power
    x0 = np.zeros(n)
    x0[PG] = op.injections[gi]
    x0[PL] = -op.injections[li]
    x0[av] = x0[PG] / (K_t + e_T)
    x0[PT] = K_t * x0[av]

    labels = state_labels(case)
    decomp = decompose_semistable(A)
    logger.debug(f"linearize[{op.loading_label}]: n={n}, slowest stable Re λ={decomp.max_stable_real:.4g}")
    return LinearModel(
        A=A,
        G=G,
        C=np.eye(n),
        state_labels=labels,
        output_labels=labels,
        n_g=ng,
        n_l=nl,
        semistability=decomp,
        x0=x0,
        loading_label=op.loading_label,
        operating_point=op,
    )


def select_outputs(model: LinearModel, selection: list[str] | str) -> LinearModel:
    """Restrict C to the named states (block names such as ``P_G`` or exact labels)."""
    names = [selection] if isinstance(selection, str) else list(selection)
    picked: list[int] = []
    for name in names:
        if name == "all":
            idx = list(range(model.n))
        elif name in STATE_BLOCKS:
            idx = [k for k, lab in enumerate(model.state_labels) if lab.startswith(f"{name}[")]
        elif name in model.state_labels:
            idx = [model.state_labels.index(name)]
        else:
            raise UnknownStateLabel(f"unknown state or block {name!r}")
        picked.extend(k for k in idx if k not in picked)
    C = np.eye(model.n)[picked]
    return replace(model, C=C, output_labels=tuple(model.state_labels[k] for k in picked))


# ============================================================================
# Model providers
# ============================================================================

class ModelProvider(Protocol):
    """Hands out the plant model for a demand scale factor."""

    load_buses: list[int]

    def model(self, scale: float) -> LinearModel: ...


class CaseModelProvider:
    """Linearizes a case at scaled load-bus demand, caching one model per scale."""

    def __init__(self, case: GridCase, outputs: list[str] | None = None):
        self.case = case
        self.outputs = outputs
        self.load_buses = case.load_buses
        self._cache: dict[float, LinearModel] = {}

    def operating_point(self, scale: float) -> OperatingPoint:
        demand = {b: self.case.load(b).demand * scale for b in self.load_buses}
        return dc_power_flow(self.case, demand, loading_label=loading_label(scale))

    def model(self, scale: float) -> LinearModel:
        if scale not in self._cache:
            model = linearize(self.case, self.operating_point(scale))
            if self.outputs:
                model = select_outputs(model, self.outputs)
            self._cache[scale] = model
        return self._cache[scale]


class StaticModelProvider:
    """A single fixed model regardless of loading."""

    def __init__(self, model: LinearModel, load_buses: list[int] | None = None):
        self._model = model
        self.load_buses = load_buses or list(range(1, model.G.shape[1] + 1))

    def model(self, scale: float) -> LinearModel:
        return self._model


def loading_label(scale: float) -> str:
    return "nominal" if scale == 1.0 else f"x{scale:g}"
