"""
Measurement clustering from the semistable reachability Gramian.

Two measurements belong together when their disturbance responses are
proportional, which is tested on rows of Φ = C·W_L. Proportionality
coefficients come from the left null vector of the closed-loop matrix where
it is nonzero; measurements outside its support are only grouped with each
other, by signed Φ row norms.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from loguru import logger

from . import textformat
from .errors import CompletionFailure, DimensionMismatch, ParseError, ZeroRestriction
from .gridmodel import LinearModel
from .matcore import Gramian, SemistableDecomposition, semistable_gramian, solve_lyapunov
from .schemas import StabilityReport

SUPPORT_TOL = 1e-9
THETA_GRID = np.logspace(-6, -1, 16)


# ============================================================================
# Types
# ============================================================================

@dataclass(frozen=True)
class PhiMatrix:
    Phi: np.ndarray
    row_norms: np.ndarray

    @property
    def l(self) -> int:
        return self.Phi.shape[0]


@dataclass(frozen=True)
class ClusterSet:
    """Partition of measurement indices (0-based) with unit coefficient vectors and Π."""

    clusters: tuple[tuple[int, ...], ...]
    coefficients: tuple[np.ndarray, ...]
    theta: float
    Pi: np.ndarray
    labels: tuple[str, ...]
    loading_label: str = ""

    @property
    def K(self) -> int:
        return len(self.clusters)

    @property
    def l(self) -> int:
        return self.Pi.shape[1]

    @property
    def singletons(self) -> list[int]:
        return [c[0] for c in self.clusters if len(c) == 1]

    def pairs(self) -> list[tuple[int, int, int, float, float]]:
        """All intra-cluster pairs as (k, i, j, p_i, p_j), ordered by k, then i, then j."""
        out = []
        for k, (members, p) in enumerate(zip(self.clusters, self.coefficients)):
            for a in range(len(members)):
                for b in range(a + 1, len(members)):
                    out.append((k, members[a], members[b], float(p[a]), float(p[b])))
        return out

    def pair_set(self) -> set[tuple[str, str]]:
        return {(self.labels[i], self.labels[j]) for _, i, j, _, _ in self.pairs()}

    def cluster_of(self, index: int) -> int:
        return next(k for k, members in enumerate(self.clusters) if index in members)

    def memberships(self) -> list[frozenset[str]]:
        return [frozenset(self.labels[i] for i in c) for c in self.clusters]


# ============================================================================
# Φ and coefficients
# ============================================================================

def compute_phi(model: LinearModel, gramian: Gramian) -> PhiMatrix:
    if model.C.shape[1] != gramian.W_L.shape[0]:
        raise DimensionMismatch(f"C has {model.C.shape[1]} columns, W_L has {gramian.W_L.shape[0]} rows")
    Phi = model.C @ gramian.W_L
    return PhiMatrix(Phi=Phi, row_norms=np.linalg.norm(Phi, axis=1))


def measurement_direction(decomp: SemistableDecomposition, C: np.ndarray | None = None) -> np.ndarray:
    return decomp.v_max if C is None else C @ decomp.v_max


def supported(v: np.ndarray, members) -> np.ndarray:
    """Which members carry a non-negligible entry of v."""
    scale = max(float(np.linalg.norm(v)), np.finfo(float).tiny)
    return np.abs(v[list(members)]) > SUPPORT_TOL * scale


def unit_coefficients(v: np.ndarray, members, phi: PhiMatrix | None = None) -> np.ndarray:
    """Unit coefficient vector for a set of measurements, first entry nonnegative.

    Members on the support of v take v restricted to them. Members off the
    support take their Φ row norms, signed by alignment with the first
    member's row, which needs ``phi``.

    Raises:
        ZeroRestriction: v vanishes on some members but not on all of them,
            or on all of them and no Φ is given.
    """
    members = list(members)
    on = supported(v, members)
    if on.all():
        p = v[members]
    elif on.any():
        raise ZeroRestriction(
            f"left null vector vanishes on measurements {[m + 1 for m, s in zip(members, on) if not s]} "
            f"but not on {[m + 1 for m, s in zip(members, on) if s]}"
        )
    elif phi is None:
        raise ZeroRestriction(f"left null vector vanishes on measurements {[m + 1 for m in members]}")
    else:
        rows = phi.Phi[members]
        signs = np.where(rows @ rows[0] < 0, -1.0, 1.0)
        p = signs * phi.row_norms[members]
    norm = np.linalg.norm(p)
    if norm == 0:
        p, norm = np.ones(len(members)), np.sqrt(len(members))
    p = p / norm
    return -p if p[0] < 0 else p


def clustering_coefficients(
    decomp: SemistableDecomposition,
    clusters,
    *,
    C: np.ndarray | None = None,
    phi: PhiMatrix | None = None,
) -> list[np.ndarray]:
    """Unit vector per cluster: v_max restricted to the cluster, first entry nonnegative.

    Clusters outside the support of v_max use signed Φ row norms when ``phi``
    is given, otherwise ZeroRestriction is raised.
    """
    v = measurement_direction(decomp, C)
    return [unit_coefficients(v, members, phi) for members in clusters]


def pair_distance(phi: PhiMatrix, v: np.ndarray, i: int, j: int) -> float:
    """‖p_j Φ_i − p_i Φ_j‖ with (p_i, p_j) = unit_coefficients on {i, j}.

    A pair that straddles the support of v is never proportional: inf.
    """
    on = supported(v, (i, j))
    if on[0] != on[1]:
        return float("inf")
    p_i, p_j = unit_coefficients(v, (i, j), phi)
    return float(np.linalg.norm(p_j * phi.Phi[i] - p_i * phi.Phi[j]))


def make_clusterset(
    clusters,
    coefficients,
    theta: float,
    l: int,
    labels=None,
    loading_label: str = "",
) -> ClusterSet:
    """Assemble Π (K×l) from clusters and coefficient vectors, normalizing each vector."""
    clusters = tuple(tuple(int(i) for i in c) for c in clusters)
    coeffs = []
    Pi = np.zeros((len(clusters), l))
    for k, (members, p) in enumerate(zip(clusters, coefficients)):
        p = np.asarray(p, dtype=float)
        p = p / np.linalg.norm(p)
        coeffs.append(p)
        Pi[k, list(members)] = p
    labels = tuple(labels) if labels is not None else tuple(f"y[{k + 1}]" for k in range(l))
    return ClusterSet(
        clusters=clusters,
        coefficients=tuple(coeffs),
        theta=float(theta),
        Pi=Pi,
        labels=labels,
        loading_label=loading_label,
    )


# ============================================================================
# Greedy clustering
# ============================================================================

def form_clusters(
    phi: PhiMatrix,
    decomp: SemistableDecomposition,
    theta: float,
    *,
    C: np.ndarray | None = None,
    labels=None,
    loading_label: str = "",
) -> ClusterSet:
    """Greedy partition: the lowest unassigned index seeds a cluster and takes
    every unassigned j within θ of the seed."""
    v = measurement_direction(decomp, C)
    l = phi.l
    if v.shape[0] != l:
        raise DimensionMismatch(f"left null vector has {v.shape[0]} entries, Φ has {l} rows")

    assigned = np.zeros(l, dtype=bool)
    clusters = []
    for i in range(l):
        if assigned[i]:
            continue
        assigned[i] = True
        members = [i]
        for j in range(i + 1, l):
            if not assigned[j] and pair_distance(phi, v, i, j) <= theta:
                members.append(j)
                assigned[j] = True
        clusters.append(tuple(members))

    coeffs = [unit_coefficients(v, members, phi) for members in clusters]
    cs = make_clusterset(clusters, coeffs, theta, l, labels, loading_label)
    violations = check_cluster_pairs(cs, phi, v, factor=2.0)
    if violations:
        logger.warning(f"{len(violations)} intra-cluster pairs exceed 2θ = {2 * theta:.3g}")
    logger.debug(f"form_clusters: θ={theta:.3g}, K={cs.K}, singletons={len(cs.singletons)}")
    return cs


def check_cluster_pairs(cs: ClusterSet, phi: PhiMatrix, v: np.ndarray, factor: float = 2.0):
    """Intra-cluster pairs whose distance exceeds factor·θ, as (i, j, distance)."""
    bad = []
    for _, i, j, _, _ in cs.pairs():
        dist = pair_distance(phi, v, i, j)
        if dist > factor * cs.theta:
            bad.append((i, j, dist))
    return bad


def select_theta(
    phi: PhiMatrix,
    decomp: SemistableDecomposition,
    grid=None,
    *,
    C: np.ndarray | None = None,
    labels=None,
    loading_label: str = "",
) -> ClusterSet:
    """Smallest θ on the grid for which no cluster is a singleton; the largest θ otherwise."""
    grid = THETA_GRID if grid is None else np.asarray(grid, dtype=float)
    cs = None
    for theta in grid:
        cs = form_clusters(phi, decomp, float(theta), C=C, labels=labels, loading_label=loading_label)
        if not cs.singletons:
            logger.info(f"Selected θ = {theta:.3g} ({cs.K} clusters)")
            return cs
    logger.warning(f"No θ up to {grid[-1]:.3g} avoids singleton clusters; using it with {len(cs.singletons)} singletons")
    return cs


def cluster_model(model: LinearModel, theta: float | None = None, grid=None) -> tuple[ClusterSet, PhiMatrix, Gramian]:
    """Gramian, Φ and clusters for one operating point; θ=None selects θ automatically."""
    gramian = semistable_gramian(model.A, model.G, decomposition=model.semistability)
    phi = compute_phi(model, gramian)
    kwargs = {"C": model.C, "labels": model.output_labels, "loading_label": model.loading_label}
    if theta is None:
        cs = select_theta(phi, model.semistability, grid, **kwargs)
    else:
        cs = form_clusters(phi, model.semistability, theta, **kwargs)
    return cs, phi, gramian


# ============================================================================
# Error-system stability and the H2 pair oracle
# ============================================================================

def orthonormal_completion(Pi: np.ndarray) -> np.ndarray:
    """Rows spanning the orthogonal complement of Π's row space, (l−K)×l."""
    K, l = Pi.shape
    if K == l:
        return np.zeros((0, l))
    M = np.eye(l) - Pi.T @ Pi
    Q, R, _ = sla.qr(M, pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.count_nonzero(diag > 1e-10 * max(diag.max(initial=0.0), 1.0)))
    if rank != l - K:
        raise CompletionFailure(f"complement of Π has rank {rank}, expected {l - K}")
    return Q[:, : l - K].T


def error_system_poles(model: LinearModel, Pi_bar: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Eigenvalues of A that remain poles of Π̄·C·(sI − A)⁻¹·G.

    A mode stays when its residue Π̄·C·r·wᴴ·G (r, w right and left
    eigenvectors with wᴴr = 1) exceeds tol·‖C‖·‖G‖.
    """
    if Pi_bar.shape[0] == 0:
        return np.zeros(0, dtype=complex)
    lam, W, R = sla.eig(model.A, left=True, right=True)
    wr = np.einsum("ij,ij->j", W.conj(), R)
    out = np.linalg.norm(Pi_bar @ model.C @ R, axis=0)
    into = np.linalg.norm(W.conj().T @ model.G, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        residue = np.where(np.abs(wr) > 0, out * into / np.abs(wr), np.inf)
    scale = max(np.linalg.norm(model.C, 2) * np.linalg.norm(model.G, 2), np.finfo(float).tiny)
    return lam[residue > tol * scale]


def verify_error_stability(model: LinearModel, cs: ClusterSet, pole_tol: float = 1e-8) -> StabilityReport:
    """Check that Π̄·v_max vanishes and that the error system Π̄·g(s) has only stable poles."""
    decomp = model.semistability
    Pi_bar = orthonormal_completion(cs.Pi)
    v = measurement_direction(decomp, model.C)
    vmax_norm = float(np.linalg.norm(Pi_bar @ v)) if Pi_bar.shape[0] else 0.0

    poles = error_system_poles(model, Pi_bar, pole_tol)
    max_pole = float(poles.real.max()) if poles.size else None

    passed = vmax_norm <= pole_tol and (max_pole is None or max_pole < -pole_tol)
    report = StabilityReport(
        loading_label=cs.loading_label,
        theta=cs.theta,
        n_clusters=cs.K,
        n_singletons=len(cs.singletons),
        pi_bar_vmax_norm=vmax_norm,
        max_real_pole=max_pole,
        pole_tol=pole_tol,
        passed=passed,
    )
    level = "INFO" if passed else "WARNING"
    logger.log(level, f"Error-system check {'PASS' if passed else 'FAIL'}: ‖Π̄v‖={vmax_norm:.3g}, max pole={max_pole}")
    return report


def h2_pair_condition(model: LinearModel, i: int, j: int, p_i: float, p_j: float) -> float:
    """‖p_j·g_i − p_i·g_j‖_H2 on the stable subspace via the observability Gramian."""
    if not (0 <= i < model.l and 0 <= j < model.l):
        raise DimensionMismatch(f"measurement index out of range for l={model.l}")
    decomp = model.semistability
    c = p_j * model.C[i] - p_i * model.C[j]
    A_bar, G_bar = decomp.project(model.A, model.G)
    c_bar = c @ decomp.U_bar
    M_bar = solve_lyapunov(A_bar.T, np.outer(c_bar, c_bar))
    return float(np.sqrt(max(np.trace(G_bar.T @ M_bar @ G_bar), 0.0)))


# ============================================================================
# Text format
# ============================================================================

def serialize_clusterset(cs: ClusterSet) -> str:
    lines = [
        f"# theta: {textformat.fmt(cs.theta)}",
        f"# operating_point: {cs.loading_label or '-'}",
        f"# measurements: {cs.l}",
        "",
        "[measurements]",
    ]
    lines += [f"{k + 1} {label}" for k, label in enumerate(cs.labels)]
    lines += ["", "[clusters]"]
    for k, (members, p) in enumerate(zip(cs.clusters, cs.coefficients)):
        idx = " ".join(str(i + 1) for i in members)
        coef = " ".join(textformat.fmt(float(x)) for x in p)
        lines.append(f"{k + 1}: {idx} | {coef}")
    return "\n".join(lines) + "\n"


def parse_clusterset(text: str, source: str = "<string>") -> ClusterSet:
    doc = textformat.tokenize(text, source)
    doc.expect_only({"measurements", "clusters"})
    header = {}
    for c in doc.comments:
        key, _, value = c.text.partition(":")
        header[key.strip()] = (value.strip(), c)
    if "theta" not in header:
        raise ParseError("missing '# theta:' header", source, 1, 1)
    theta_text, theta_tok = header["theta"]
    theta = doc.float_(textformat.Token(theta_text, theta_tok.line, theta_tok.column))
    loading = header.get("operating_point", ("", None))[0]
    loading = "" if loading == "-" else loading

    labels = []
    for rec in doc.single("measurements").records:
        doc.arity(rec, 2)
        if doc.int_(rec[0]) != len(labels) + 1:
            raise doc.fail(rec[0], "measurement indices must run 1, 2, 3, ...")
        labels.append(rec[1].text)
    l = len(labels)

    clusters, coeffs = [], []
    for rec in doc.single("clusters").records:
        head = rec[0]
        if not head.text.endswith(":") or doc.int_(textformat.Token(head.text[:-1], head.line, head.column)) != len(clusters) + 1:
            raise doc.fail(head, "expected consecutive cluster number followed by ':'")
        texts = rec.texts
        if "|" not in texts:
            raise doc.fail(head, "missing '|' between indices and coefficients")
        bar = texts.index("|")
        idx = [doc.int_(t) - 1 for t in rec[1:bar]]
        p = [doc.float_(t) for t in rec[bar + 1:]]
        if not idx or len(idx) != len(p):
            raise doc.fail(head, "cluster needs as many coefficients as indices")
        for t, i in zip(rec[1:bar], idx):
            if not 0 <= i < l:
                raise doc.fail(t, f"measurement index {i + 1} out of range")
        clusters.append(tuple(idx))
        coeffs.append(np.array(p))

    flat = [i for c in clusters for i in c]
    if sorted(flat) != list(range(l)):
        raise ParseError("clusters must partition the measurements", source, 1, 1)

    Pi = np.zeros((len(clusters), l))
    for k, (members, p) in enumerate(zip(clusters, coeffs)):
        Pi[k, list(members)] = p
    return ClusterSet(
        clusters=tuple(clusters),
        coefficients=tuple(coeffs),
        theta=theta,
        Pi=Pi,
        labels=tuple(labels),
        loading_label=loading,
    )


def write_clusterset(cs: ClusterSet, path: Path) -> Path:
    path.write_text(serialize_clusterset(cs))
    return path


def read_clusterset(path: Path | str) -> ClusterSet:
    path = Path(path)
    return parse_clusterset(path.read_text(), str(path))
