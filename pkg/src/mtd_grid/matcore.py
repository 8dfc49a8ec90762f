"""
Numerical kernel for semistable linear systems.

Spectral decomposition with the structural zero mode split off, a real
Schur Lyapunov solver, the reachability Gramian of the stable subspace,
a rank-revealing PSD factorization and a brute-force quadrature oracle.

All functions are pure; inputs are never modified.
"""

from dataclasses import dataclass
from typing import Literal

import numpy as np
import scipy.linalg as sla
from loguru import logger

from .errors import (
    DefectiveZeroEigenvalue,
    DimensionMismatch,
    HorizonTooShort,
    NotHurwitz,
    NotPSD,
    NotSemistable,
    NumericalFailure,
)

LYAPUNOV_RTOL = 1e-8
PSD_RANK_RTOL = 1e-10
PSD_NEGATIVE_RTOL = 1e-8
ZERO_TOL_RTOL = 1e-7


# ============================================================================
# Result types
# ============================================================================

@dataclass(frozen=True)
class SemistableDecomposition:
    """Eigen-split of a semistable matrix into its zero mode and stable part.

    Complex conjugate pairs are stored in real block form: the pair
    ``a ± ib`` contributes columns ``Re v, Im v`` to ``U_bar`` and the block
    ``[[a, b], [-b, a]]`` to ``Lambda_bar``.
    """

    u_max: np.ndarray
    v_max: np.ndarray
    U_bar: np.ndarray
    V_bar: np.ndarray
    Lambda_bar: np.ndarray
    eigenvalues: np.ndarray
    zero_tol: float

    @property
    def n(self) -> int:
        return self.u_max.shape[0]

    @property
    def U(self) -> np.ndarray:
        return np.column_stack([self.u_max, self.U_bar])

    @property
    def U_inv(self) -> np.ndarray:
        return np.vstack([self.v_max, self.V_bar.T])

    @property
    def stable_projector(self) -> np.ndarray:
        """Spectral projector onto the stable subspace (annihilates u_max)."""
        return np.eye(self.n) - np.outer(self.u_max, self.v_max)

    @property
    def max_stable_real(self) -> float:
        if self.eigenvalues.shape[0] < 2:
            return -np.inf
        return float(np.max(self.eigenvalues[1:].real))

    def project(self, A: np.ndarray, G: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (Ā, Ḡ) = (V̄ᵀ A Ū, V̄ᵀ G)."""
        return self.V_bar.T @ A @ self.U_bar, self.V_bar.T @ G

    def reassemble(self) -> np.ndarray:
        n = self.n
        Lam = np.zeros((n, n))
        Lam[1:, 1:] = self.Lambda_bar
        return self.U @ Lam @ self.U_inv


@dataclass(frozen=True)
class Gramian:
    """Reachability Gramian W_c and a factor W_L with W_c = W_L W_Lᵀ."""

    W_c: np.ndarray
    W_L: np.ndarray
    rank: int
    W_bar: np.ndarray
    lyapunov_residual: float


# ============================================================================
# Decomposition
# ============================================================================

def _lead(vec: np.ndarray) -> int:
    # first entry that is not numerically zero
    mag = np.abs(vec)
    return int(np.flatnonzero(mag > 1e-6 * mag.max())[0]) if mag.max() > 0 else 0


def _fix_sign(vec: np.ndarray) -> np.ndarray:
    return -vec if vec[_lead(vec)] < 0 else vec


def _fix_phase(vec: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(vec)))
    c = vec[k]
    return vec * (np.conj(c) / abs(c)) if abs(c) > 0 else vec


def _square(A, name: str = "A") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {A.shape}")
    return A


def decompose_semistable(A, zero_tol: float | None = None) -> SemistableDecomposition:
    """Split A into its single structural zero mode and the stable remainder.

    Eigenvalues are ordered by descending real part, then descending
    imaginary part, so ``eigenvalues[0]`` is the zero one.

    Raises:
        NotSemistable: no zero eigenvalue, several semisimple ones, an
            eigenvalue on the imaginary axis away from zero, or Re λ > zero_tol.
        DefectiveZeroEigenvalue: the zero eigenvalue has a Jordan block.
    """
    A = _square(A)
    n = A.shape[0]
    w, vr = sla.eig(A)

    if zero_tol is None:
        scale = float(np.max(np.abs(w.real))) if n else 0.0
        zero_tol = ZERO_TOL_RTOL * scale if scale > 0 else 1e-12

    if np.any(w.real >= zero_tol):
        worst = w[np.argmax(w.real)]
        raise NotSemistable(f"eigenvalue {worst:.6g} lies in the right half plane")

    on_axis = np.abs(w.real) < zero_tol
    at_zero = on_axis & (np.abs(w.imag) < zero_tol)
    if np.any(on_axis & ~at_zero):
        raise NotSemistable("eigenvalues on the imaginary axis away from zero")

    n_zero = int(np.count_nonzero(at_zero))
    if n_zero == 0:
        raise NotSemistable("no eigenvalue at zero; the matrix is Hurwitz")
    if n_zero > 1:
        s = sla.svdvals(A)
        rank_tol = max(zero_tol, n * np.finfo(float).eps * (s[0] if s.size else 0.0))
        geometric = int(np.count_nonzero(s <= rank_tol))
        if geometric < n_zero:
            raise DefectiveZeroEigenvalue(
                f"zero eigenvalue has algebraic multiplicity {n_zero} "
                f"but geometric multiplicity {geometric}"
            )
        raise NotSemistable(f"{n_zero} zero eigenvalues; exactly one is required")

    idx0 = int(np.flatnonzero(at_zero)[0])
    u0 = _fix_sign(vr[:, idx0].real / np.linalg.norm(vr[:, idx0].real))

    reps = [k for k in range(n) if k != idx0 and w[k].imag >= 0]
    reps.sort(key=lambda k: (-w[k].real, -w[k].imag))

    cols = [u0]
    blocks = []
    eigs = [complex(w[idx0])]
    for k in reps:
        lam = w[k]
        if lam.imag == 0:
            vec = vr[:, k].real
            cols.append(_fix_sign(vec / np.linalg.norm(vec)))
            blocks.append(np.array([[lam.real]]))
            eigs.append(complex(lam.real, 0.0))
        else:
            vec = _fix_phase(vr[:, k])
            cols.extend([vec.real, vec.imag])
            blocks.append(np.array([[lam.real, lam.imag], [-lam.imag, lam.real]]))
            eigs.extend([complex(lam), complex(lam.real, -lam.imag)])

    U = np.column_stack(cols)
    cond = np.linalg.cond(U)
    if not np.isfinite(cond) or cond > 1e12:
        raise DefectiveZeroEigenvalue(f"eigenvector basis is numerically singular (cond={cond:.3g})")
    U_inv = sla.inv(U)

    v_row = U_inv[0]
    scale = np.linalg.norm(v_row)
    v_max = v_row / scale
    u_max = U[:, 0] * scale
    if v_max[_lead(v_max)] < 0:
        v_max, u_max = -v_max, -u_max

    Lambda_bar = sla.block_diag(*blocks) if blocks else np.zeros((0, 0))
    logger.debug(f"decompose_semistable: n={n}, zero_tol={zero_tol:.3g}, cond(U)={cond:.3g}")

    return SemistableDecomposition(
        u_max=u_max,
        v_max=v_max,
        U_bar=U[:, 1:],
        V_bar=U_inv[1:].T,
        Lambda_bar=Lambda_bar,
        eigenvalues=np.array(eigs),
        zero_tol=float(zero_tol),
    )


# ============================================================================
# Lyapunov equation
# ============================================================================

def _schur_blocks(T: np.ndarray) -> list[tuple[int, int]]:
    blocks = []
    i, m = 0, T.shape[0]
    while i < m:
        if i + 1 < m and T[i + 1, i] != 0.0:
            blocks.append((i, i + 2))
            i += 2
        else:
            blocks.append((i, i + 1))
            i += 1
    return blocks


def solve_lyapunov(A_stable, Q) -> np.ndarray:
    """Solve A W + W Aᵀ + Q = 0 for Hurwitz A by real Schur back-substitution.

    With A = Z T Zᵀ the equation becomes T Y + Y Tᵀ = -Zᵀ Q Z, solved one
    diagonal block column of T at a time from the last one back.
    """
    A = _square(A_stable, "A_stable")
    Q = _square(Q, "Q")
    m = A.shape[0]
    if Q.shape[0] != m:
        raise DimensionMismatch(f"Q is {Q.shape}, expected ({m}, {m})")
    if m == 0:
        return np.zeros((0, 0))
    Q = 0.5 * (Q + Q.T)

    eigs = sla.eigvals(A)
    if np.max(eigs.real) >= 0:
        raise NotHurwitz(f"max Re λ = {np.max(eigs.real):.3g} is not negative")

    T, Z = sla.schur(A, output="real")
    Qt = Z.T @ Q @ Z
    Y = np.zeros((m, m))
    eye = np.eye(m)
    for s, e in reversed(_schur_blocks(T)):
        rhs = -Qt[:, s:e] - Y[:, e:] @ T[s:e, e:].T
        if e - s == 1:
            Y[:, s] = sla.solve(T + T[s, s] * eye, rhs[:, 0])
        else:
            K = np.kron(np.eye(2), T) + np.kron(T[s:e, s:e], eye)
            Y[:, s:e] = sla.solve(K, rhs.reshape(-1, order="F")).reshape(m, 2, order="F")

    W = Z @ Y @ Z.T
    W = 0.5 * (W + W.T)

    q_norm = np.linalg.norm(Q, "fro")
    residual = np.linalg.norm(A @ W + W @ A.T + Q, "fro")
    if residual > LYAPUNOV_RTOL * q_norm:
        raise NumericalFailure(
            f"Lyapunov residual {residual:.3g} exceeds {LYAPUNOV_RTOL:g}·‖Q‖ = {LYAPUNOV_RTOL * q_norm:.3g}"
        )
    return W


# ============================================================================
# PSD factorization
# ============================================================================

def psd_factor(W, rank_rtol: float = PSD_RANK_RTOL) -> np.ndarray:
    """Pivoted Cholesky factor F (n×r) with F Fᵀ ≈ W, truncated at rank_rtol·trace(W).

    Columns come out in pivot order.
    """
    W = _square(W, "W")
    n = W.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    W = 0.5 * (W + W.T)

    evals = np.linalg.eigvalsh(W)
    w_norm = float(np.max(np.abs(evals)))
    if evals[0] < -PSD_NEGATIVE_RTOL * w_norm:
        raise NotPSD(f"eigenvalue {evals[0]:.3g} below -{PSD_NEGATIVE_RTOL:g}·‖W‖")

    tol = rank_rtol * float(np.trace(W))
    R = W.copy()
    F = np.zeros((n, n))
    free = np.ones(n, dtype=bool)
    rank = 0
    for k in range(n):
        diag = np.where(free, np.diag(R), -np.inf)
        j = int(np.argmax(diag))
        if diag[j] <= tol:
            break
        col = R[:, j] / np.sqrt(R[j, j])
        F[:, k] = col
        R -= np.outer(col, col)
        free[j] = False
        rank = k + 1
    return F[:, :rank]


# ============================================================================
# Semistable Gramian
# ============================================================================

def semistable_gramian(
    A,
    G,
    zero_tol: float | None = None,
    *,
    basis: Literal["right", "left"] = "right",
    decomposition: SemistableDecomposition | None = None,
) -> Gramian:
    """Reachability Gramian of a semistable system on its stable subspace.

    Solves Ā W̄ + W̄ Āᵀ + Ḡ Ḡᵀ = 0 with Ā = V̄ᵀ A Ū, Ḡ = V̄ᵀ G and lifts it back.
    ``basis="right"`` lifts with Ū (W_c = Ū W̄ Ūᵀ, the Gramian of the
    stable-projected impulse response); ``basis="left"`` lifts with V̄. The two
    coincide when A is normal.
    """
    A = _square(A)
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if G.shape[0] != A.shape[0]:
        raise DimensionMismatch(f"G has {G.shape[0]} rows, A has {A.shape[0]}")

    decomp = decomposition if decomposition is not None else decompose_semistable(A, zero_tol)
    A_bar, G_bar = decomp.project(A, G)
    Q = G_bar @ G_bar.T
    W_bar = solve_lyapunov(A_bar, Q)

    q_norm = np.linalg.norm(Q, "fro")
    residual = np.linalg.norm(A_bar @ W_bar + W_bar @ A_bar.T + Q, "fro")
    rel_residual = float(residual / q_norm) if q_norm > 0 else 0.0

    lift = decomp.U_bar if basis == "right" else decomp.V_bar
    W_c = lift @ W_bar @ lift.T
    W_c = 0.5 * (W_c + W_c.T)
    W_L = psd_factor(W_c)
    logger.debug(f"semistable_gramian: rank={W_L.shape[1]}, relative residual={rel_residual:.3g}")
    return Gramian(W_c=W_c, W_L=W_L, rank=W_L.shape[1], W_bar=W_bar, lyapunov_residual=rel_residual)


# ============================================================================
# Oracles and synthetic systems
# ============================================================================

def oracle_gramian_quadrature(
    A,
    G,
    horizon: float,
    dt: float,
    *,
    project: bool = False,
    zero_tol: float | None = None,
    tail_rtol: float = 1e-10,
    endpoint_correction: bool = True,
) -> np.ndarray:
    """Trapezoidal quadrature of ∫₀ᴴ e^{At} G Gᵀ e^{Aᵀt} dt. Test oracle only.

    With ``project=True`` the input is first mapped onto the stable subspace
    (G → P G), which is required for semistable A. The endpoint correction
    subtracts dt²/12·(F'(H) − F'(0)) with F' = A F + F Aᵀ.

    Raises:
        HorizonTooShort: the integrand at the horizon is still above
            tail_rtol times its peak.
    """
    A = _square(A)
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    if project:
        G = decompose_semistable(A, zero_tol).stable_projector @ G

    steps = int(round(horizon / dt))
    E = sla.expm(A * dt)
    M = G.copy()
    F0 = M @ M.T
    total = 0.5 * F0
    peak = np.linalg.norm(F0, "fro")
    F = F0
    for k in range(1, steps + 1):
        M = E @ M
        F = M @ M.T
        peak = max(peak, np.linalg.norm(F, "fro"))
        total = total + (0.5 * F if k == steps else F)
    total = total * dt
    if peak == 0:
        return total

    tail = np.linalg.norm(F, "fro") / peak
    if tail > tail_rtol:
        raise HorizonTooShort(f"integrand at t={steps * dt:g} is {tail:.3g} of its peak")

    if endpoint_correction:
        def deriv(X):
            return A @ X + X @ A.T
        total = total - dt ** 2 / 12.0 * (deriv(F) - deriv(F0))
    return 0.5 * (total + total.T)


def random_stable_system(n: int, m: int, rng: np.random.Generator, margin: float = 0.5):
    """Random Hurwitz A (eigen-shifted Gaussian) and Gaussian G."""
    R = rng.standard_normal((n, n))
    shift = float(np.max(sla.eigvals(R).real)) + margin
    return R - shift * np.eye(n), rng.standard_normal((n, m))


def random_semistable_system(n: int, m: int, rng: np.random.Generator, margin: float = 0.5):
    """Random semistable A = S·diag(0, M)·S⁻¹ with M Hurwitz, plus Gaussian G."""
    M, _ = random_stable_system(n - 1, 1, rng, margin)
    S = np.eye(n) + 0.3 * rng.standard_normal((n, n)) / np.sqrt(n)
    core = np.zeros((n, n))
    core[1:, 1:] = M
    return S @ core @ sla.inv(S), rng.standard_normal((n, m))
