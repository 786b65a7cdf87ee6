"""Reference ensembles of pure Gaussian states and their samplers.

Four ensembles are provided, all emitting covariance matrices (rank-N
projectors) in the convention of :mod:`fermipe.gaussian`:

* single-eigenstate: hopping eigenstates with momenta drawn so that every
  momentum ``k`` is occupied with probability exactly ``n(k)``, conditioned on
  a fixed total particle number;
* generalized Haar: ``C = F^dag U D U^dag F`` with ``U`` Metropolis-sampled
  from the weight ``exp(-Tr[Omega U D U^dag])``, the diagonal multipliers
  ``Omega`` biasing the momentum occupations towards a target ``n(k)``;
* infinite-temperature orthogonal/unitary: ``C = R^dag Q D Q^dag R`` with a
  group-Haar ``Q`` and the staggered phase ``R`` that encodes the
  time-reversal structure of half-filled alternating product states;
* the analytic particle-number distribution ``p(N_A)`` used as an oracle for
  all of the above.

Momentum space is reached with ``F[k, j] = exp(-2 pi i k j / L) / sqrt(L)``,
so that ``diag(F C F^dag)`` are the momentum occupations; this is the unique
sign choice consistent with the dimer occupations of
:func:`fermipe.gaussian.occupation_spectrum`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from fermipe.gaussian import momenta

__all__ = [
    "CalibrationError",
    "Multipliers",
    "CalibrationTrace",
    "fourier_basis",
    "r_pi2_phases",
    "ConditionalBernoulliSampler",
    "sample_single_eigenstate",
    "haar_unitary",
    "haar_orthogonal",
    "build_inf_temp_covariance",
    "number_distribution",
    "gaussian_omega",
    "metropolis_haar_step",
    "GeneralizedHaarChain",
    "sample_generalized_haar",
    "calibrate_omega",
]


class CalibrationError(RuntimeError):
    """Multiplier calibration produced non-finite moments or diverged."""


@lru_cache(maxsize=8)
def fourier_basis(L: int) -> np.ndarray:
    """Unitary map from real space to momentum space.

    ``F[k, j] = exp(-2 pi i k j / L) / sqrt(L)`` on the grid of
    :func:`fermipe.gaussian.momenta`; momentum occupations of a covariance
    matrix are ``diag(F C F^dag)``.  The returned array is cached and
    read-only.
    """
    jk = np.outer(np.arange(L), np.arange(L))
    F = np.exp(-2j * np.pi * jk / L) / np.sqrt(L)
    F.setflags(write=False)
    return F


def momentum_occupations(C: np.ndarray) -> np.ndarray:
    """Diagonal of the covariance matrix in the momentum basis."""
    F = fourier_basis(C.shape[0])
    return np.real(np.einsum("kj,jl,kl->k", F, C, F.conj(), optimize=True))


def r_pi2_phases(L: int) -> np.ndarray:
    """Diagonal of the staggered quarter-turn gauge: phase i on every second site."""
    r = np.ones(L, dtype=np.complex128)
    r[1::2] = 1j
    return r


@dataclass(frozen=True)
class Multipliers:
    """Per-momentum Lagrange multipliers of the generalized Haar weight.

    ``omega`` is stored in the zero-sum gauge (``sum_k omega_k = 0``), the
    convention that fixes the flat direction of the weight; ``gamma`` is the
    auxiliary vector of the Gaussian approximation, kept such that the
    occupied-column normalization ``sum_k 1/(gamma_k + omega_k) = 1`` holds
    for the stored ``omega``.
    """

    omega: np.ndarray
    gamma: np.ndarray | None = None

    def __post_init__(self):
        omega = np.asarray(self.omega, dtype=np.float64)
        object.__setattr__(self, "omega", omega)
        if self.gamma is not None:
            object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=np.float64))
        total = abs(float(omega.sum()))
        tol = max(1e-9, 1e-14 * omega.size * (1.0 + np.abs(omega).max(initial=0.0)))
        if total > tol:
            raise ValueError(f"omega must sum to zero, got sum = {total:.3e}")

    @property
    def L(self) -> int:
        return int(self.omega.size)

    def to_json(self) -> str:
        payload = {"L": self.L, "omega": self.omega.tolist()}
        if self.gamma is not None:
            payload["gamma"] = self.gamma.tolist()
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "Multipliers":
        payload = json.loads(text)
        omega = np.asarray(payload["omega"], dtype=np.float64)
        if len(omega) != payload["L"]:
            raise ValueError("multiplier file is inconsistent: len(omega) != L")
        gamma = payload.get("gamma")
        return cls(omega=omega, gamma=None if gamma is None else np.asarray(gamma))


# ----------------------------------------------------------------------------
# single-eigenstate ensemble
# ----------------------------------------------------------------------------

class ConditionalBernoulliSampler:
    """Draw exactly-N subsets with prescribed per-item inclusion probabilities.

    Samples from the law of independent Bernoulli(w_k) trials conditioned on
    exactly N successes, with the working weights ``w`` calibrated (iterative
    proportional fitting on the odds) so that the *conditional* inclusion
    marginals equal the requested ``targets``.  Items with target 0 or 1 are
    forced and excluded from the random problem.
    """

    def __init__(self, targets, N: int, marginal_tol: float = 1e-10, max_rounds: int = 200):
        p = np.asarray(targets, dtype=np.float64)
        if p.ndim != 1:
            raise ValueError("targets must be a vector")
        if np.any(p < -1e-12) or np.any(p > 1.0 + 1e-12):
            raise ValueError("inclusion targets must lie in [0, 1]")
        if abs(p.sum() - N) > 0.5:
            raise ValueError(f"sum of targets {p.sum():.3f} is not within 0.5 of N={N}")
        self.targets = np.clip(p, 0.0, 1.0)
        self.N = int(N)
        eps = 1e-12
        self._forced_on = np.flatnonzero(self.targets >= 1.0 - eps)
        self._forced_off = np.flatnonzero(self.targets <= eps)
        self._free = np.flatnonzero(
            (self.targets > eps) & (self.targets < 1.0 - eps)
        )
        n_free = self.N - len(self._forced_on)
        if n_free < 0:
            raise ValueError(
                f"{len(self._forced_on)} targets equal 1 but only N={N} slots"
            )
        if n_free > len(self._free):
            raise ValueError("not enough fractional targets to reach N inclusions")
        self._n_free = n_free
        self._weights = self.targets[self._free].copy()
        if self._free.size and 0 < n_free < self._free.size:
            self._calibrate_weights(marginal_tol, max_rounds)
        self._table = _success_count_table(self._weights, self._n_free)

    def _calibrate_weights(self, tol, max_rounds):
        t = self.targets[self._free]
        w = self._weights
        for _ in range(max_rounds):
            pi = _conditional_marginals(w, self._n_free)
            if np.abs(pi - t).max() < tol:
                break
            odds = (w / (1.0 - w)) * (t / np.maximum(pi, 1e-300)) * (
                (1.0 - pi) / (1.0 - t)
            )
            w = odds / (1.0 + odds)
            w = np.clip(w, 1e-14, 1.0 - 1e-14)
        self._weights = w

    def marginals(self) -> np.ndarray:
        """Exact inclusion probabilities of the sampler (matches targets)."""
        out = np.zeros_like(self.targets)
        out[self._forced_on] = 1.0
        if self._free.size:
            out[self._free] = _conditional_marginals(self._weights, self._n_free)
        return out

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """One subset as a boolean mask (exactly N True entries)."""
        mask = np.zeros(self.targets.size, dtype=bool)
        mask[self._forced_on] = True
        w, T = self._weights, self._table
        remaining = self._n_free
        for pos in range(w.size):
            if remaining == 0:
                break
            denom = T[pos, remaining]
            take = w[pos] * T[pos + 1, remaining - 1] / denom
            if rng.random() < take:
                mask[self._free[pos]] = True
                remaining -= 1
        return mask


def _success_count_table(w: np.ndarray, N: int) -> np.ndarray:
    """T[k, r] = P(sum_{j >= k} X_j = r) for independent Bernoulli(w_j), r <= N."""
    m = w.size
    T = np.zeros((m + 1, N + 1))
    T[m, 0] = 1.0
    for k in range(m - 1, -1, -1):
        T[k, :] = T[k + 1, :] * (1.0 - w[k])
        T[k, 1:] += T[k + 1, :-1] * w[k]
    return T


def _conditional_marginals(w: np.ndarray, N: int) -> np.ndarray:
    """P(X_k = 1 | sum X = N) for independent Bernoulli(w)."""
    m = w.size
    if N == 0:
        return np.zeros(m)
    if N == m:
        return np.ones(m)
    back = _success_count_table(w, N)
    fwd = np.zeros((m + 1, N + 1))
    fwd[0, 0] = 1.0
    for k in range(m):
        fwd[k + 1, :] = fwd[k, :] * (1.0 - w[k])
        fwd[k + 1, 1:] += fwd[k, :-1] * w[k]
    total = back[0, N]
    pi = np.empty(m)
    for k in range(m):
        # r successes before item k, N - 1 - r after it
        pi[k] = w[k] * np.dot(fwd[k, :N], back[k + 1, :N][::-1]) / total
    return pi


@lru_cache(maxsize=32)
def _cached_eigenstate_sampler(nk_bytes: bytes, L: int, N: int) -> ConditionalBernoulliSampler:
    nk = np.frombuffer(nk_bytes, dtype=np.float64)
    return ConditionalBernoulliSampler(nk, N)


def eigenstate_momentum_sampler(n_k, N: int) -> ConditionalBernoulliSampler:
    """Cached sampler of exactly-N momentum subsets with marginals n(k)."""
    nk = np.ascontiguousarray(n_k, dtype=np.float64)
    return _cached_eigenstate_sampler(nk.tobytes(), nk.size, int(N))


def sample_single_eigenstate(n_k, N: int, rng: np.random.Generator) -> np.ndarray:
    """Covariance of a random hopping eigenstate with occupations drawn from n(k).

    N distinct momenta are selected by conditional Bernoulli sampling whose
    inclusion marginals equal ``n(k)`` exactly; the returned covariance is
    ``F^dag diag(bits) F``, the state with those momenta occupied.
    """
    nk = np.ascontiguousarray(n_k, dtype=np.float64)
    sampler = eigenstate_momentum_sampler(nk, N)
    bits = sampler.draw(rng)
    F = fourier_basis(nk.size)
    rows = F[bits, :]
    return rows.conj().T @ rows


# ----------------------------------------------------------------------------
# Haar sampling and the infinite-temperature ensemble
# ----------------------------------------------------------------------------

def haar_unitary(L: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed U(L) matrix (QR of a complex Ginibre matrix, phases fixed)."""
    M = (rng.normal(size=(L, L)) + 1j * rng.normal(size=(L, L))) / np.sqrt(2.0)
    Q, R = np.linalg.qr(M)
    d = np.diag(R)
    return Q * (d / np.abs(d))


def haar_orthogonal(L: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed O(L) matrix (QR of a real Ginibre matrix, signs fixed)."""
    M = rng.normal(size=(L, L))
    Q, R = np.linalg.qr(M)
    return Q * np.sign(np.diag(R))


def build_inf_temp_covariance(
    l_a: int, n_a: int, symmetry: str, rng: np.random.Generator
) -> np.ndarray:
    """One draw of the infinite-temperature ensemble at fixed particle number.

    ``C = R^dag Q D Q^dag R`` with ``Q`` Haar in O(l_a) (``symmetry ==
    'orthogonal'``, the physical choice) or U(l_a) (the control ensemble),
    ``D`` the diagonal of ``n_a`` ones, and ``R`` the staggered quarter-turn
    phase.  The result is a rank-``n_a`` projector.
    """
    if not 0 <= n_a <= l_a:
        raise ValueError(f"need 0 <= n_a <= l_a, got n_a={n_a}, l_a={l_a}")
    if symmetry == "orthogonal":
        Q = haar_orthogonal(l_a, rng)
    elif symmetry == "unitary":
        Q = haar_unitary(l_a, rng)
    else:
        raise ValueError(f"symmetry must be 'orthogonal' or 'unitary', got {symmetry!r}")
    core = Q[:, :n_a] @ Q[:, :n_a].conj().T
    r = r_pi2_phases(l_a)
    return core * np.outer(r.conj(), r)


def number_distribution(L: int, M: int, l_a: int) -> np.ndarray:
    """Exact distribution of the particle number found in A.

    ``p(N_A) = C(l_a, N_A) C(L - l_a, M - N_A) / C(L, M)`` for
    ``N_A = 0 .. min(l_a, M)``, zero whenever ``M - N_A`` cannot fit in the
    bath.  Sums to one exactly (Vandermonde identity).
    """
    if not 0 <= M <= L:
        raise ValueError(f"need 0 <= M <= L, got M={M}, L={L}")
    if not 1 <= l_a <= L:
        raise ValueError(f"need 1 <= l_a <= L, got l_a={l_a}")
    n_max = min(l_a, M)
    counts = [
        math.comb(l_a, na) * math.comb(L - l_a, M - na) if 0 <= M - na <= L - l_a else 0
        for na in range(n_max + 1)
    ]
    return np.array(counts, dtype=np.float64) / math.comb(L, M)


# ----------------------------------------------------------------------------
# generalized Haar ensemble: multipliers, Metropolis walk, calibration
# ----------------------------------------------------------------------------

def gaussian_omega(n_k) -> Multipliers:
    """Closed-form multipliers from the Gaussian (large-L) approximation.

    ``omega_k = -L (n(k) - nbar) / ((1 - n(k)) n(k))`` shifted into the
    zero-sum gauge, and ``gamma_k`` fixed so that the occupied-column
    normalization ``sum_k 1/(gamma_k + omega_k) = sum_k n(k)/(L nbar) = 1``
    holds identically.  Exact to second order in ``n(k) - nbar``; the
    Metropolis calibration refines it beyond that.
    """
    nk = np.asarray(n_k, dtype=np.float64)
    L = nk.size
    if np.any(nk <= 0.0) or np.any(nk >= 1.0):
        raise ValueError("gaussian multipliers diverge for n(k) in {0, 1}")
    nbar = nk.mean()
    raw = -L * (nk - nbar) / ((1.0 - nk) * nk)
    omega = raw - raw.mean()
    gamma = L * nbar / nk - omega
    return Multipliers(omega=omega, gamma=gamma)


def _pair_rotation(axis: int, phi: float) -> np.ndarray:
    """2x2 block exp(i phi sigma_axis / 2); axis 3 is a real Givens rotation."""
    c, s = np.cos(phi / 2.0), np.sin(phi / 2.0)
    if axis == 0:  # x
        return np.array([[c, 1j * s], [1j * s, c]])
    if axis == 1:  # y
        return np.array([[c, s], [-s, c]])
    if axis == 2:  # z
        return np.array([[np.exp(1j * phi / 2.0), 0.0], [0.0, np.exp(-1j * phi / 2.0)]])
    if axis == 3:  # full-angle Givens, keeps real matrices real
        c, s = np.cos(phi), np.sin(phi)
        return np.array([[c, s], [-s, c]])
    raise ValueError(f"unknown rotation axis {axis}")


def _rotated_columns(U: np.ndarray, i: int, j: int, r: np.ndarray):
    ui, uj = U[:, i], U[:, j]
    return r[0, 0] * ui + r[1, 0] * uj, r[0, 1] * ui + r[1, 1] * uj


def _delta_weight(omega, U, i, j, n_filled, new_i, new_j) -> float:
    """Change of Tr[Omega U D U^dag] under replacing columns i, j."""
    dt = 0.0
    if i < n_filled:
        dt += float(np.dot(omega, np.abs(new_i) ** 2 - np.abs(U[:, i]) ** 2))
    if j < n_filled:
        dt += float(np.dot(omega, np.abs(new_j) ** 2 - np.abs(U[:, j]) ** 2))
    return dt


def metropolis_haar_step(
    U: np.ndarray,
    omega: np.ndarray,
    n_filled: int,
    group: str,
    rng: np.random.Generator,
):
    """One Metropolis-Hastings move of the walk on U(L) or O(L).

    Proposes ``U' = U exp(i phi sigma_axis / 2)`` on a uniformly random column
    pair (a full-angle Givens rotation for the orthogonal group), and accepts
    with probability ``min(1, exp(Tr[Omega U D U^dag] - Tr[Omega U' D U'^dag]))``
    targeting the weight ``exp(-Tr[Omega U D U^dag])``.  Moves that keep
    ``U D U^dag`` invariant (both columns on the same side of the filling, or
    a z-axis phase move) are accepted outright.

    Returns ``(U_new, accepted)``; ``U_new`` is the input array when rejected.
    """
    L = U.shape[0]
    i = int(rng.integers(L))
    j = int(rng.integers(L - 1))
    if j >= i:
        j += 1
    if group == "unitary":
        axis = int(rng.integers(3))
    elif group == "orthogonal":
        axis = 3
    else:
        raise ValueError(f"group must be 'unitary' or 'orthogonal', got {group!r}")
    phi = float(rng.uniform(0.0, 2.0 * np.pi))
    r = _pair_rotation(axis, phi)
    new_i, new_j = _rotated_columns(U, i, j, r)
    same_block = (i < n_filled) == (j < n_filled)
    if same_block or axis == 2:
        accept = True
    else:
        dt = _delta_weight(omega, U, i, j, n_filled, new_i, new_j)
        accept = dt <= 0.0 or rng.random() < np.exp(-dt)
    if not accept:
        return U, False
    U_new = U.copy()
    U_new[:, i] = new_i
    U_new[:, j] = new_j
    return U_new, True


class GeneralizedHaarChain:
    """Metropolis walk on the unitary/orthogonal group with occupation tracking.

    The chain variable is the momentum-space matrix ``U``; the running vector
    ``u_k = sum_{i <= N} |U[k, i]|^2`` (the momentum occupations of the
    corresponding covariance) is maintained incrementally and refreshed
    periodically against float drift.  Confine each chain to one thread.
    """

    REFRESH_EVERY = 20_000

    def __init__(self, L, n_filled, omega=None, group="unitary", rng=None, U0=None):
        if rng is None:
            raise ValueError("an explicitly seeded Generator is required")
        if group not in ("unitary", "orthogonal"):
            raise ValueError(f"group must be 'unitary' or 'orthogonal', got {group!r}")
        self.L = int(L)
        self.n_filled = int(n_filled)
        self.group = group
        self.rng = rng
        self.omega = np.zeros(L) if omega is None else np.asarray(omega, np.float64)
        if U0 is None:
            U0 = haar_unitary(L, rng) if group == "unitary" else haar_orthogonal(L, rng)
        self.U = np.array(U0, dtype=np.complex128 if group == "unitary" else np.float64)
        self.accepted = 0
        self.proposed = 0
        self._steps_since_refresh = 0
        self._u = self._exact_occupations()

    def _exact_occupations(self) -> np.ndarray:
        occ = self.U[:, : self.n_filled]
        return np.einsum("ki,ki->k", occ, occ.conj()).real

    def occupations(self) -> np.ndarray:
        return self._u.copy()

    def covariance(self) -> np.ndarray:
        """Real-space covariance F^dag (U D U^dag) F of the current state."""
        F = fourier_basis(self.L)
        Y = F.conj().T @ self.U[:, : self.n_filled]
        return Y @ Y.conj().T

    def step(self) -> bool:
        rng = self.rng
        L, n_filled = self.L, self.n_filled
        i = int(rng.integers(L))
        j = int(rng.integers(L - 1))
        if j >= i:
            j += 1
        axis = int(rng.integers(3)) if self.group == "unitary" else 3
        phi = float(rng.uniform(0.0, 2.0 * np.pi))
        r = _pair_rotation(axis, phi)
        new_i, new_j = _rotated_columns(self.U, i, j, r)
        same_block = (i < n_filled) == (j < n_filled)
        self.proposed += 1
        if same_block or axis == 2:
            accept = True
            du = None
        else:
            col, new = (i, new_i) if i < n_filled else (j, new_j)
            du = np.abs(new) ** 2 - np.abs(self.U[:, col]) ** 2
            dt = float(np.dot(self.omega, du))
            accept = dt <= 0.0 or rng.random() < np.exp(-dt)
        if not accept:
            return False
        self.U[:, i] = new_i
        self.U[:, j] = new_j
        if du is not None:
            self._u += du
        self.accepted += 1
        self._steps_since_refresh += 1
        if self._steps_since_refresh >= self.REFRESH_EVERY:
            self._u = self._exact_occupations()
            self._steps_since_refresh = 0
        return True

    def run(self, n_steps: int) -> None:
        for _ in range(n_steps):
            self.step()

    def set_omega(self, omega) -> None:
        self.omega = np.asarray(omega, dtype=np.float64)


def sample_generalized_haar(
    n_k,
    multipliers: Multipliers,
    burn_in: int,
    thin: int,
    count: int,
    rng: np.random.Generator,
    group: str = "unitary",
):
    """Stream of covariance matrices from the generalized Haar ensemble.

    Yields ``count`` matrices ``F^dag U D U^dag F`` taken every ``thin`` steps
    of the Metropolis walk after ``burn_in`` steps; with calibrated
    multipliers the empirical momentum occupations converge to ``n(k)``.
    """
    nk = np.asarray(n_k, dtype=np.float64)
    N = int(round(nk.sum()))
    chain = GeneralizedHaarChain(
        nk.size, N, omega=multipliers.omega, group=group, rng=rng
    )
    chain.run(burn_in)
    for _ in range(count):
        chain.run(max(1, thin))
        yield chain.covariance()


@dataclass
class CalibrationTrace:
    """Per-iteration diagnostics of the multiplier calibration."""

    residual: list = field(default_factory=list)     # max_k |<u_k> - n(k)|
    objective: list = field(default_factory=list)    # 0.5 sum_k (<u_k> - n(k))^2
    step_size: list = field(default_factory=list)
    omega_history: list = field(default_factory=list)
    acceptance_rate: float = 0.0

    def tail_mean_omega(self, fraction: float = 0.4) -> np.ndarray:
        """Average of the last `fraction` of iterates (tames Monte Carlo noise)."""
        hist = np.asarray(self.omega_history)
        start = max(1, int(len(hist) * (1.0 - fraction)))
        return hist[start:].mean(axis=0)


def calibrate_omega(
    n_k,
    initial: Multipliers | None = None,
    step: float | None = None,
    iterations: int = 50,
    chain_steps: int = 2000,
    rng: np.random.Generator | None = None,
    group: str = "unitary",
    measure_stride: int | None = None,
    damping: float = 0.2,
    average_fraction: float = 0.5,
    burn_in: int | None = None,
) -> tuple[Multipliers, CalibrationTrace]:
    """Self-improving refinement of the generalized-Haar multipliers.

    Starting from ``initial`` (default: the Gaussian approximation), each
    iteration runs ``chain_steps`` Metropolis steps at fixed ``omega``,
    estimates the occupations ``<u_k>`` and their connected correlations, and
    applies the gradient-descent update

        omega_l <- omega_l - step * sum_k (n(k) - <u_k>) <u_k u_l>_c ,

    re-centred into the zero-sum gauge.  When ``step`` is None it is chosen
    each iteration as ``damping / lambda^2`` with ``lambda`` the mean
    connected-correlation eigenvalue scale, which makes the contraction rate
    of the linearized update about ``damping`` per iteration; the finite
    chain length bounds the reachable residual, which is reported per
    iteration in the trace.

    The returned multipliers are the average of the last ``average_fraction``
    of the iterates, which tames the stationary Monte Carlo jitter of the
    stochastic updates; the raw iterates are kept in the trace.
    """
    if rng is None:
        raise ValueError("an explicitly seeded Generator is required")
    nk = np.asarray(n_k, dtype=np.float64)
    L = nk.size
    N = int(round(nk.sum()))
    if abs(nk.sum() - N) > 0.5:
        raise ValueError("target occupations do not sum to an integer filling")
    mult = gaussian_omega(nk) if initial is None else initial
    omega = mult.omega.copy()
    nbar = nk.mean()
    stride = measure_stride if measure_stride is not None else max(1, L // 8)
    chain = GeneralizedHaarChain(L, N, omega=omega, group=group, rng=rng)
    chain.run(chain_steps if burn_in is None else burn_in)
    trace = CalibrationTrace()
    trace.omega_history.append(omega.copy())
    for _ in range(iterations):
        s_u = np.zeros(L)
        s_uu = np.zeros((L, L))
        n_snap = 0
        for k in range(chain_steps):
            chain.step()
            if k % stride == 0:
                u = chain._u
                s_u += u
                s_uu += np.outer(u, u)
                n_snap += 1
        u_mean = s_u / n_snap
        cov = s_uu / n_snap - np.outer(u_mean, u_mean)
        if not (np.all(np.isfinite(u_mean)) and np.all(np.isfinite(cov))):
            raise CalibrationError("non-finite moment estimates; chain diverged")
        resid = np.abs(u_mean - nk).max()
        objective = 0.5 * float(((u_mean - nk) ** 2).sum())
        if step is None:
            # variance floor: a nearly frozen chain measures cov ~ 0, which
            # would otherwise blow the step up
            lam_floor = nbar * (1.0 - nbar) / L
            lam = max(np.trace(cov) / max(L - 1, 1), lam_floor)
            gamma_step = damping / lam**2
        else:
            gamma_step = step
        delta = gamma_step * (cov @ (nk - u_mean))
        cap = max(1.0, 0.5 * L * np.abs(nk - nbar).max())
        largest = np.abs(delta).max()
        if largest > cap:
            delta *= cap / largest
            gamma_step *= cap / largest
        omega = omega - delta
        omega -= omega.mean()
        if not np.all(np.isfinite(omega)):
            raise CalibrationError("multiplier update diverged to non-finite values")
        chain.set_omega(omega)
        trace.residual.append(resid)
        trace.objective.append(objective)
        trace.step_size.append(gamma_step)
        trace.omega_history.append(omega.copy())
    trace.acceptance_rate = chain.accepted / max(chain.proposed, 1)
    omega_out = trace.tail_mean_omega(average_fraction)
    omega_out -= omega_out.mean()
    gamma_vec = L * nbar / nk - omega_out
    return Multipliers(omega=omega_out, gamma=gamma_vec), trace
