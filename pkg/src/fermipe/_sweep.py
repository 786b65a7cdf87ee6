"""Batched bath-measurement sweeps (numba kernels with numpy reference paths).

The measurement of a whole bath region is a sequence of rank-one updates of
the covariance matrix, one per measured site.  The kernels here run that
sweep over many samples at once, working in "measurement-major" site order
(bath sites first, in measurement order, then the kept A sites) so the live
part of the matrix is always the trailing block.  Only the upper triangle is
updated (the matrix stays Hermitian), which halves the work.

Probabilities stay in ordinary float64: at desk scales (L_B of a few hundred)
joint probabilities remain far above the double-precision floor.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange

from fermipe.gaussian import ForbiddenOutcomeError, LatticeSpec, TAU_P

__all__ = [
    "measurement_major_order",
    "direct_sample_batch",
    "measure_outcomes_batch",
]


def measurement_major_order(C: np.ndarray, lattice: LatticeSpec) -> np.ndarray:
    """Reorder a covariance matrix so bath sites come first, A sites last."""
    perm = np.concatenate([lattice.sites_b, lattice.sites_a])
    return np.ascontiguousarray(C[np.ix_(perm, perm)])


@njit(cache=True, parallel=True, fastmath=True)
def _sweep_draw(C0, l_b, uniforms, tau, posts, probs, outcomes, ok):
    S = uniforms.shape[0]
    L = C0.shape[0]
    l_a = L - l_b
    n_chunk = min(S, 16)
    for c in prange(n_chunk):
        W = np.empty_like(C0)
        for s in range(c, S, n_chunk):
            W[:, :] = C0
            p_acc = 1.0
            good = True
            for l in range(l_b):
                p1 = W[l, l].real
                if p1 < 0.0:
                    p1 = 0.0
                elif p1 > 1.0:
                    p1 = 1.0
                z = 1 if uniforms[s, l] < p1 else 0
                P = p1 if z == 1 else 1.0 - p1
                outcomes[s, l] = z
                p_acc *= P
                if P < tau:
                    good = False
                    break
                coef = (-1.0 / P) if z == 1 else (1.0 / P)
                for i in range(l + 1, L):
                    a = coef * np.conj(W[l, i])
                    if a.real != 0.0 or a.imag != 0.0:
                        for j in range(i, L):
                            W[i, j] += a * W[l, j]
            probs[s] = p_acc
            ok[s] = good
            if good:
                for i in range(l_a):
                    posts[s, i, i] = W[l_b + i, l_b + i]
                    for j in range(i + 1, l_a):
                        posts[s, i, j] = W[l_b + i, l_b + j]
                        posts[s, j, i] = np.conj(W[l_b + i, l_b + j])


@njit(cache=True, parallel=True, fastmath=True)
def _sweep_draw_multi(C_batch, l_b, uniforms, tau, posts, probs, outcomes, ok):
    S = uniforms.shape[0]
    L = C_batch.shape[1]
    l_a = L - l_b
    n_chunk = min(S, 16)
    for c in prange(n_chunk):
        W = np.empty((L, L), dtype=C_batch.dtype)
        for s in range(c, S, n_chunk):
            W[:, :] = C_batch[s]
            p_acc = 1.0
            good = True
            for l in range(l_b):
                p1 = W[l, l].real
                if p1 < 0.0:
                    p1 = 0.0
                elif p1 > 1.0:
                    p1 = 1.0
                z = 1 if uniforms[s, l] < p1 else 0
                P = p1 if z == 1 else 1.0 - p1
                outcomes[s, l] = z
                p_acc *= P
                if P < tau:
                    good = False
                    break
                coef = (-1.0 / P) if z == 1 else (1.0 / P)
                for i in range(l + 1, L):
                    a = coef * np.conj(W[l, i])
                    if a.real != 0.0 or a.imag != 0.0:
                        for j in range(i, L):
                            W[i, j] += a * W[l, j]
            probs[s] = p_acc
            ok[s] = good
            if good:
                for i in range(l_a):
                    posts[s, i, i] = W[l_b + i, l_b + i]
                    for j in range(i + 1, l_a):
                        posts[s, i, j] = W[l_b + i, l_b + j]
                        posts[s, j, i] = np.conj(W[l_b + i, l_b + j])


@njit(cache=True, parallel=True, fastmath=True)
def _sweep_given(C0, l_b, outcomes, tau, posts, probs, ok):
    S = outcomes.shape[0]
    L = C0.shape[0]
    l_a = L - l_b
    n_chunk = min(S, 16)
    for c in prange(n_chunk):
        W = np.empty_like(C0)
        for s in range(c, S, n_chunk):
            W[:, :] = C0
            p_acc = 1.0
            good = True
            for l in range(l_b):
                p1 = W[l, l].real
                if p1 < 0.0:
                    p1 = 0.0
                elif p1 > 1.0:
                    p1 = 1.0
                z = outcomes[s, l]
                P = p1 if z == 1 else 1.0 - p1
                if P < tau:
                    good = False
                    p_acc = 0.0
                    break
                p_acc *= P
                coef = (-1.0 / P) if z == 1 else (1.0 / P)
                for i in range(l + 1, L):
                    a = coef * np.conj(W[l, i])
                    if a.real != 0.0 or a.imag != 0.0:
                        for j in range(i, L):
                            W[i, j] += a * W[l, j]
            probs[s] = p_acc
            ok[s] = good
            if good:
                for i in range(l_a):
                    posts[s, i, i] = W[l_b + i, l_b + i]
                    for j in range(i + 1, l_a):
                        posts[s, i, j] = W[l_b + i, l_b + j]
                        posts[s, j, i] = np.conj(W[l_b + i, l_b + j])


def direct_sample_batch(
    C: np.ndarray,
    lattice: LatticeSpec,
    n_samples: int,
    rng: np.random.Generator,
    tau_p: float = TAU_P,
):
    """Draw i.i.d. measurement outcomes of the whole bath, exactly distributed.

    Sweeps B left to right, at each site occupying with the current
    conditional probability ``C[l, l]``; no burn-in, no autocorrelation.
    Returns ``(posts, probs, outcomes)`` with shapes ``(n, l_a, l_a)``,
    ``(n,)``, ``(n, l_b)``.
    """
    Cp = measurement_major_order(np.asarray(C, dtype=np.complex128), lattice)
    uniforms = rng.random((n_samples, lattice.l_b))
    posts = np.empty((n_samples, lattice.l_a, lattice.l_a), dtype=np.complex128)
    probs = np.empty(n_samples)
    outcomes = np.empty((n_samples, lattice.l_b), dtype=np.uint8)
    ok = np.empty(n_samples, dtype=np.bool_)
    _sweep_draw(Cp, lattice.l_b, uniforms, tau_p, posts, probs, outcomes, ok)
    if not ok.all():
        raise ForbiddenOutcomeError(
            "a drawn branch fell below the probability threshold; "
            "the state is numerically degenerate"
        )
    return posts, probs, outcomes


def direct_sample_each(
    C_premuted: np.ndarray,
    lattice: LatticeSpec,
    rng: np.random.Generator,
    tau_p: float = TAU_P,
):
    """One exact outcome draw from each of a batch of covariance matrices.

    ``C_premuted`` has shape (S, L, L) and must already be in
    measurement-major order (see :func:`measurement_major_order`); batching
    amortizes the kernel launch when every sample comes from a different
    state (representative-state ensembles).
    """
    S = C_premuted.shape[0]
    uniforms = rng.random((S, lattice.l_b))
    posts = np.empty((S, lattice.l_a, lattice.l_a), dtype=np.complex128)
    probs = np.empty(S)
    outcomes = np.empty((S, lattice.l_b), dtype=np.uint8)
    ok = np.empty(S, dtype=np.bool_)
    _sweep_draw_multi(C_premuted, lattice.l_b, uniforms, tau_p, posts, probs, outcomes, ok)
    if not ok.all():
        raise ForbiddenOutcomeError(
            "a drawn branch fell below the probability threshold; "
            "a state is numerically degenerate"
        )
    return posts, probs, outcomes


def measure_outcomes_batch(C: np.ndarray, lattice: LatticeSpec, outcomes, tau_p: float = TAU_P):
    """Measure the bath at prescribed outcome strings (batched).

    Returns ``(posts, probs, ok)``; rows with ``ok`` False hit a forbidden
    outcome (conditional probability below ``tau_p``) and carry
    ``probs == 0`` with unspecified ``posts``.
    """
    z = np.ascontiguousarray(outcomes, dtype=np.uint8)
    if z.ndim == 1:
        z = z[np.newaxis, :]
    if z.shape[1] != lattice.l_b:
        raise ValueError(f"outcome strings must have length {lattice.l_b}")
    Cp = measurement_major_order(np.asarray(C, dtype=np.complex128), lattice)
    S = z.shape[0]
    posts = np.empty((S, lattice.l_a, lattice.l_a), dtype=np.complex128)
    probs = np.empty(S)
    ok = np.empty(S, dtype=np.bool_)
    _sweep_given(Cp, lattice.l_b, z, tau_p, posts, probs, ok)
    return posts, probs, ok
