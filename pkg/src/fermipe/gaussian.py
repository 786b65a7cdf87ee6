"""Gaussian fermionic states on a tight-binding chain, in covariance-matrix form.

A pure Gaussian state of ``N`` spinless fermions on ``L`` sites is represented
throughout by its one-particle density matrix ``C``: the L x L Hermitian matrix
``C = sum_a |psi_a><psi_a|`` over the occupied single-particle orbitals
``psi_a``, equivalently ``C[i, j] = <c_j^dag c_i>``.  For a pure state ``C`` is
a rank-N projector (``C @ C == C``, ``trace C == N``).

The module provides the four primitive operations every higher layer builds on:
construction of dimer/Neel product states, exact unitary time evolution under
the nearest-neighbour hopping chain, projective measurement of site densities
(single site, or a whole region by either the iterative update or the closed
determinant form), and von Neumann entanglement entropy from the spectrum of a
restricted covariance block.

Index convention, used everywhere in this package: sites are 0-based,
subsystem ``A`` is the leftmost ``l_a`` sites ``[0, l_a)`` and the measured
bath ``B`` is the remainder ``[l_a, L)``, measured in increasing site order.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import xlogy

__all__ = [
    "ForbiddenOutcomeError",
    "InvalidStateError",
    "LatticeSpec",
    "DimerParams",
    "MeasurementRecord",
    "TAU_P",
    "build_dimer_covariance",
    "occupation_spectrum",
    "momenta",
    "hopping_matrix",
    "evolve",
    "measure_site",
    "measure_region_iterative",
    "measure_region_determinant",
    "entanglement_entropy",
    "validate_covariance",
]

# Conditional probabilities below this threshold are treated as exactly zero:
# the outcome is forbidden and the rank-one update of Eq. thereof would divide
# by ~0.
TAU_P = 1e-12


class ForbiddenOutcomeError(RuntimeError):
    """A measurement outcome with (numerically) zero probability was requested."""


class InvalidStateError(ValueError):
    """A matrix violates the covariance-matrix invariants beyond tolerance."""


@dataclass(frozen=True)
class LatticeSpec:
    """Chain geometry and its fixed A|B bipartition.

    Parameters
    ----------
    L : int
        Number of sites.
    l_a : int
        Size of the kept subsystem A (the leftmost ``l_a`` sites).
    boundary : str
        ``"periodic"`` or ``"open"``.
    """

    L: int
    l_a: int
    boundary: str = "periodic"

    def __post_init__(self):
        if self.L < 2:
            raise ValueError(f"need at least 2 sites, got L={self.L}")
        if not 1 <= self.l_a < self.L:
            raise ValueError(f"l_a must satisfy 1 <= l_a < L, got l_a={self.l_a}, L={self.L}")
        if self.boundary not in ("periodic", "open"):
            raise ValueError(f"boundary must be 'periodic' or 'open', got {self.boundary!r}")

    @property
    def l_b(self) -> int:
        return self.L - self.l_a

    @property
    def sites_a(self) -> np.ndarray:
        return np.arange(0, self.l_a)

    @property
    def sites_b(self) -> np.ndarray:
        return np.arange(self.l_a, self.L)


@dataclass(frozen=True)
class DimerParams:
    """Amplitude of the two-site dimer state and its derived quantities."""

    alpha: complex

    @property
    def alpha0(self) -> float:
        return abs(self.alpha)

    @property
    def theta(self) -> float:
        return float(np.angle(self.alpha))

    @property
    def epsilon(self) -> float:
        """First-harmonic amplitude of n(k); lies in [0, 1/2]."""
        a0 = self.alpha0
        return a0 / (1.0 + a0 * a0)


@dataclass(frozen=True)
class MeasurementRecord:
    """Outcome string on B, its probability, and the post-measurement A state."""

    outcomes: np.ndarray        # uint8 bits, length l_b
    probability: float          # joint probability of `outcomes`, in (0, 1]
    post_state: np.ndarray      # (l_a, l_a) covariance of A after the measurement

    def __post_init__(self):
        self.outcomes.setflags(write=False)
        self.post_state.setflags(write=False)

    @property
    def n_a(self) -> float:
        """Particle number left in A (trace of the post-measurement state)."""
        return float(np.real(np.trace(self.post_state)))


def build_dimer_covariance(L: int, alpha: complex) -> np.ndarray:
    """Covariance matrix of the dimer product state.

    The state is a product of L/2 two-site orbitals ``(c_{2m}^dag + alpha
    c_{2m+1}^dag)|0> / sqrt(1+|alpha|^2)`` (0-based sites), so the matrix is
    block diagonal with identical 2x2 blocks and trace L/2.  ``alpha = 0``
    gives the Neel state ``diag(1, 0, 1, 0, ...)``.

    Parameters
    ----------
    L : int
        Even number of sites, L >= 2.
    alpha : complex
        Dimer amplitude.
    """
    if L < 2 or L % 2 != 0:
        raise ValueError(f"dimer state needs an even L >= 2, got L={L}")
    norm = 1.0 + abs(alpha) ** 2
    block = np.array(
        [[1.0, np.conj(alpha)], [alpha, abs(alpha) ** 2]], dtype=np.complex128
    ) / norm
    C = np.zeros((L, L), dtype=np.complex128)
    for m in range(L // 2):
        C[2 * m : 2 * m + 2, 2 * m : 2 * m + 2] = block
    return C


def momenta(L: int) -> np.ndarray:
    """Momentum grid k = 2 pi m / L for m = 0 .. L-1."""
    return 2.0 * np.pi * np.arange(L) / L


def occupation_spectrum(alpha: complex, L: int) -> np.ndarray:
    """Momentum occupations n(k) of the dimer state.

    ``n(k) = 1/2 + Re(exp(-ik) alpha / (1 + |alpha|^2))`` on the grid
    ``k = 2 pi m / L``.  All values lie in [0, 1] and average to 1/2.
    """
    k = momenta(L)
    return 0.5 + np.real(np.exp(-1j * k) * alpha / (1.0 + abs(alpha) ** 2))


def hopping_matrix(L: int, boundary: str = "periodic") -> np.ndarray:
    """Single-particle hopping matrix h_ij = delta_{i,j+1} + delta_{i,j-1}."""
    h = np.zeros((L, L))
    bonds = range(L) if boundary == "periodic" else range(L - 1)
    for j in bonds:
        h[j, (j + 1) % L] += 1.0
        h[(j + 1) % L, j] += 1.0
    return h


@lru_cache(maxsize=16)
def _hopping_eig(L: int, boundary: str):
    w, V = np.linalg.eigh(hopping_matrix(L, boundary))
    w.setflags(write=False)
    V.setflags(write=False)
    return w, V


def evolution_operator(t: float, lattice: LatticeSpec) -> np.ndarray:
    """Single-particle propagator exp(i h t), from a cached eigendecomposition."""
    w, V = _hopping_eig(lattice.L, lattice.boundary)
    return (V * np.exp(1j * w * t)) @ V.T


def evolve(C0: np.ndarray, t: float, lattice: LatticeSpec) -> np.ndarray:
    """Evolve a covariance matrix: C(t) = exp(i h t) C0 exp(-i h t).

    Exact for any t; the hopping matrix is diagonalized once per (L, boundary)
    and cached.  Conjugation by a unitary preserves the spectrum and trace of
    C0, so purity and particle number are conserved identically.
    """
    if C0.shape != (lattice.L, lattice.L):
        raise ValueError(f"covariance shape {C0.shape} does not match L={lattice.L}")
    U = evolution_operator(t, lattice)
    return U @ C0 @ U.conj().T


def measure_site(C: np.ndarray, site: int, z: int, tau_p: float = TAU_P):
    """Projectively measure the density on one site.

    Returns ``(C', P_z)`` where ``P_z = 1 - z - (-1)^z C[site, site]`` is the
    outcome probability and, for i, j != site,

        C'[i, j] = C[i, j] + (-1)^z C[i, site] C[site, j] / P_z.

    The measured site factorises: row and column ``site`` of ``C'`` are zeroed
    and ``C'[site, site] = z``.

    Raises
    ------
    ForbiddenOutcomeError
        If ``P_z < tau_p`` (the outcome has essentially zero probability).
    """
    L = C.shape[0]
    if not 0 <= site < L:
        raise ValueError(f"site {site} out of range for L={L}")
    if z not in (0, 1):
        raise ValueError(f"outcome must be 0 or 1, got {z}")
    p_z = float(1 - z - (-1) ** z * C[site, site].real)
    if p_z < tau_p:
        raise ForbiddenOutcomeError(
            f"outcome z={z} on site {site} has probability {p_z:.3e} < {tau_p:.0e}"
        )
    Cp = C + ((-1) ** z / p_z) * np.outer(C[:, site], C[site, :])
    Cp[site, :] = 0.0
    Cp[:, site] = 0.0
    Cp[site, site] = z
    return Cp, p_z


def measure_region_iterative(
    C: np.ndarray, lattice: LatticeSpec, outcomes, tau_p: float = TAU_P
) -> MeasurementRecord:
    """Measure every site of B left to right, accumulating the joint probability.

    Applies the single-site update sequentially across ``lattice.sites_b``;
    the joint probability is the product of the conditional single-site
    probabilities.  Returns the post-measurement covariance restricted to A.
    """
    z = np.asarray(outcomes, dtype=np.uint8)
    if z.shape != (lattice.l_b,):
        raise ValueError(f"need {lattice.l_b} outcomes, got shape {z.shape}")
    if C.shape != (lattice.L, lattice.L):
        raise ValueError(f"covariance shape {C.shape} does not match L={lattice.L}")
    W = np.array(C, dtype=np.complex128)
    prob = 1.0
    for bit, site in zip(z, lattice.sites_b):
        W, p = measure_site(W, int(site), int(bit), tau_p=tau_p)
        prob *= p
    post = np.ascontiguousarray(W[: lattice.l_a, : lattice.l_a])
    return MeasurementRecord(outcomes=z, probability=prob, post_state=post)


def measure_region_determinant(
    C: np.ndarray, lattice: LatticeSpec, outcomes, tau_p: float = TAU_P
) -> MeasurementRecord:
    """Measure all of B at once via the closed determinant form.

    The joint probability is ``P(z) = det[(1 - D)/2 + C_B D]`` with
    ``D = -diag((-1)^{z_1}, ..., (-1)^{z_{l_b}})`` and ``C_B`` the bath block
    of ``C``; each post-measurement entry is the bordered (l_b+1)-determinant
    built from the corresponding A-row/column borders, divided by ``P(z)``.
    Agrees with :func:`measure_region_iterative` for every allowed outcome.
    """
    z = np.asarray(outcomes, dtype=np.uint8)
    if z.shape != (lattice.l_b,):
        raise ValueError(f"need {lattice.l_b} outcomes, got shape {z.shape}")
    if C.shape != (lattice.L, lattice.L):
        raise ValueError(f"covariance shape {C.shape} does not match L={lattice.L}")
    a, b = lattice.sites_a, lattice.sites_b
    d = -((-1.0) ** z.astype(np.float64))
    M = np.diag((1.0 - d) / 2.0).astype(np.complex128) + C[np.ix_(b, b)] * d[np.newaxis, :]
    prob_c = np.linalg.det(M)
    prob = float(prob_c.real)
    if abs(prob) < tau_p:
        raise ForbiddenOutcomeError(
            f"outcome string has probability {prob:.3e} < {tau_p:.0e}"
        )
    l_a, l_b = lattice.l_a, lattice.l_b
    post = np.empty((l_a, l_a), dtype=np.complex128)
    bordered = np.empty((l_b + 1, l_b + 1), dtype=np.complex128)
    bordered[1:, 1:] = M
    for i in a:
        for j in a:
            bordered[0, 0] = C[i, j]
            bordered[0, 1:] = C[i, b] * d
            bordered[1:, 0] = C[b, j]
            post[i, j] = np.linalg.det(bordered) / prob
    return MeasurementRecord(outcomes=z, probability=prob, post_state=post)


def entanglement_entropy(C_sub: np.ndarray, clamp_tol: float = 1e-8) -> float:
    """Von Neumann entropy (nats) of the Gaussian state restricted to a block.

    ``S = -sum_a [lam_a ln lam_a + (1 - lam_a) ln(1 - lam_a)]`` over the
    eigenvalues of the restricted covariance block, with ``0 ln 0 = 0``.
    Eigenvalues within ``clamp_tol`` of [0, 1] are clamped; anything further
    outside raises :class:`InvalidStateError`.
    """
    lam = np.linalg.eigvalsh(C_sub)
    if lam.size and (lam.min() < -clamp_tol or lam.max() > 1.0 + clamp_tol):
        raise InvalidStateError(
            f"covariance eigenvalues outside [0, 1] by more than {clamp_tol:.0e}: "
            f"min={lam.min():.3e}, max={lam.max():.3e}"
        )
    lam = np.clip(lam, 0.0, 1.0)
    return float(-(xlogy(lam, lam) + xlogy(1.0 - lam, 1.0 - lam)).sum())


def validate_covariance(
    C: np.ndarray,
    n_particles: float | None = None,
    pure: bool = False,
    herm_tol: float = 1e-12,
    eig_tol: float = 1e-10,
    purity_tol: float = 1e-9,
) -> None:
    """Check the covariance-matrix invariants, raising InvalidStateError on failure.

    Hermiticity to ``herm_tol`` elementwise, spectrum in [0, 1] to ``eig_tol``,
    and optionally ``C^2 = C`` (Frobenius residual below ``purity_tol``) with
    integer trace ``n_particles``.
    """
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise InvalidStateError(f"not a square matrix: shape {C.shape}")
    herm = np.abs(C - C.conj().T).max()
    if herm > herm_tol:
        raise InvalidStateError(f"not Hermitian: max |C - C^dag| = {herm:.3e}")
    lam = np.linalg.eigvalsh(C)
    if lam.min() < -eig_tol or lam.max() > 1.0 + eig_tol:
        raise InvalidStateError(
            f"eigenvalues outside [0, 1]: min={lam.min():.3e}, max={lam.max():.3e}"
        )
    if pure:
        resid = np.linalg.norm(C @ C - C)
        if resid > purity_tol:
            raise InvalidStateError(f"not a projector: |C^2 - C|_F = {resid:.3e}")
    if n_particles is not None:
        tr = np.real(np.trace(C))
        if abs(tr - n_particles) > purity_tol:
            raise InvalidStateError(f"trace {tr!r} != expected particle number {n_particles}")
