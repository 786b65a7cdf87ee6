"""Monte Carlo sampling of the projected ensemble and moment observables.

The projected ensemble at time t is the set of post-measurement A-states
obtained by measuring every bath site of the evolved covariance matrix,
weighted by outcome probability.  Two samplers are provided: an exact direct
sampler (sequential conditional draws, i.i.d. samples; the default) and a
Metropolis chain over outcome strings (kept as an independent cross-check).
Ensemble moments are streamed into :class:`MomentAccumulator` objects, one
per tensor order k, which merge associatively so independent chains can be
reduced in any grouping.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import xlogy

from fermipe._sweep import direct_sample_batch, measure_outcomes_batch
from fermipe.gaussian import (
    ForbiddenOutcomeError,
    LatticeSpec,
    MeasurementRecord,
    TAU_P,
    entanglement_entropy,
)

__all__ = [
    "MomentAccumulator",
    "ChainState",
    "pe_chain_start",
    "pe_metropolis_step",
    "pe_direct_sample",
    "pe_direct_sample_batch",
    "accumulate",
    "frobenius_delta",
    "space_averaged_entropy",
    "batch_space_averaged_entropy",
    "mc_relative_error",
    "ObservableSeries",
]


class MomentAccumulator:
    """Streaming mean of k-fold tensor powers of covariance matrices.

    Holds the running average of ``C'^{(x) k}`` (dense, ``dim**(2k)`` complex
    entries) over the samples absorbed so far.  Merging two accumulators is
    count-weighted and associative up to float reassociation, so independent
    chains can be reduced in any order.
    """

    def __init__(self, k: int, dim: int):
        if k < 1:
            raise ValueError(f"moment order must be >= 1, got {k}")
        self.k = int(k)
        self.dim = int(dim)
        self.count = 0
        self.mean = np.zeros((dim,) * (2 * k), dtype=np.complex128)

    def _tensor(self, state: np.ndarray) -> np.ndarray:
        t = state
        for _ in range(self.k - 1):
            t = np.tensordot(t, state, axes=0)
        return t

    def add(self, state: np.ndarray) -> "MomentAccumulator":
        """Absorb one post-measurement covariance (equal-weight streaming mean)."""
        if state.shape != (self.dim, self.dim):
            raise ValueError(f"state shape {state.shape} does not match dim {self.dim}")
        self.count += 1
        self.mean += (self._tensor(state) - self.mean) / self.count
        return self

    def add_batch(self, states: np.ndarray) -> "MomentAccumulator":
        """Absorb a batch (S, dim, dim); equals repeated add() up to reassociation."""
        S = states.shape[0]
        if S == 0:
            return self
        flat = states.reshape(S, self.dim * self.dim)
        if self.k == 1:
            batch_mean = flat.mean(axis=0)
        elif self.k == 2:
            batch_mean = np.einsum("sa,sb->ab", flat, flat, optimize=True) / S
        elif self.k == 3:
            batch_mean = np.einsum("sa,sb,sc->abc", flat, flat, flat, optimize=True) / S
        else:
            batch_mean = sum(self._tensor(s).ravel() for s in states).reshape(
                (self.dim * self.dim,) * self.k
            ) / S
        batch_mean = batch_mean.reshape((self.dim,) * (2 * self.k))
        total = self.count + S
        self.mean += (batch_mean - self.mean) * (S / total)
        self.count = total
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        """Count-weighted combination; commutative and associative to 1e-12."""
        if (other.k, other.dim) != (self.k, self.dim):
            raise ValueError("cannot merge accumulators of different order or dimension")
        out = MomentAccumulator(self.k, self.dim)
        out.count = self.count + other.count
        if out.count:
            out.mean = (self.count * self.mean + other.count * other.mean) / out.count
        return out

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "dim": self.dim,
                "count": self.count,
                "real": self.mean.real.ravel().tolist(),
                "imag": self.mean.imag.ravel().tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MomentAccumulator":
        d = json.loads(text)
        acc = cls(d["k"], d["dim"])
        acc.count = d["count"]
        shape = (d["dim"],) * (2 * d["k"])
        acc.mean = (
            np.asarray(d["real"]) + 1j * np.asarray(d["imag"])
        ).reshape(shape)
        return acc


def accumulate(acc: MomentAccumulator, record: MeasurementRecord) -> MomentAccumulator:
    """Fold one measurement record into the running moment mean."""
    return acc.add(np.asarray(record.post_state))


def frobenius_delta(acc_a: MomentAccumulator, acc_b: MomentAccumulator) -> float:
    """Frobenius distance between two k-th moment tensors (raw entrywise l2)."""
    if (acc_a.k, acc_a.dim) != (acc_b.k, acc_b.dim):
        raise ValueError("accumulators must have the same order and dimension")
    return float(np.linalg.norm((acc_a.mean - acc_b.mean).ravel()))


# ----------------------------------------------------------------------------
# projected-ensemble samplers
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainState:
    """State of the Metropolis walk over bath outcome strings."""

    record: MeasurementRecord
    accepted: int = 0
    proposed: int = 0

    @property
    def outcomes(self) -> np.ndarray:
        return self.record.outcomes

    @property
    def probability(self) -> float:
        return self.record.probability


def pe_chain_start(
    C_t: np.ndarray, lattice: LatticeSpec, rng: np.random.Generator, tau_p: float = TAU_P
) -> ChainState:
    """Initialize the chain at a random *allowed* outcome string.

    Drawing the string from the outcome distribution itself guarantees a
    nonzero starting probability even when the state is a measurement
    eigenstate (a uniform random string can be forbidden).
    """
    record = pe_direct_sample(C_t, lattice, rng, tau_p=tau_p)
    return ChainState(record=record)


def pe_metropolis_step(
    chain: ChainState,
    C_t: np.ndarray,
    lattice: LatticeSpec,
    rng: np.random.Generator,
    tau_p: float = TAU_P,
) -> ChainState:
    """One single-bit-flip Metropolis move over outcome strings.

    Flips a uniformly chosen bit, computes the probability ratio
    ``r = P(z')/P(z)``, and accepts iff a uniform draw is below ``r``.
    Proposals that hit a forbidden outcome are rejected outright (and
    counted).  Every step, accepted or not, contributes the current record to
    any downstream average.
    """
    z_new = chain.outcomes.copy()
    flip = int(rng.integers(lattice.l_b))
    z_new[flip] ^= 1
    posts, probs, ok = measure_outcomes_batch(C_t, lattice, z_new[np.newaxis, :], tau_p=tau_p)
    proposed = chain.proposed + 1
    if not ok[0]:
        return replace(chain, proposed=proposed)
    r = probs[0] / chain.probability
    if rng.random() < r:
        rec = MeasurementRecord(outcomes=z_new, probability=float(probs[0]), post_state=posts[0])
        return ChainState(record=rec, accepted=chain.accepted + 1, proposed=proposed)
    return replace(chain, proposed=proposed)


def pe_direct_sample(
    C_t: np.ndarray, lattice: LatticeSpec, rng: np.random.Generator, tau_p: float = TAU_P
) -> MeasurementRecord:
    """One exact sample of the projected ensemble (sequential direct sampling)."""
    posts, probs, outcomes = direct_sample_batch(C_t, lattice, 1, rng, tau_p=tau_p)
    return MeasurementRecord(
        outcomes=outcomes[0], probability=float(probs[0]), post_state=posts[0]
    )


def pe_direct_sample_batch(
    C_t: np.ndarray,
    lattice: LatticeSpec,
    n_samples: int,
    rng: np.random.Generator,
    tau_p: float = TAU_P,
):
    """Batched exact sampling; returns (posts, probs, outcomes) arrays."""
    return direct_sample_batch(C_t, lattice, n_samples, rng, tau_p=tau_p)


# ----------------------------------------------------------------------------
# observables
# ----------------------------------------------------------------------------

def space_averaged_entropy(post_state: np.ndarray) -> float:
    """Mean bipartite entanglement entropy over all cuts of the A block.

    Sums the entropies of the leftmost-m blocks for m = 1 .. l_a (the m = l_a
    term vanishes for a pure post-measurement state) and divides by l_a.
    """
    l_a = post_state.shape[0]
    total = sum(entanglement_entropy(post_state[:m, :m]) for m in range(1, l_a + 1))
    return total / l_a


def batch_space_averaged_entropy(posts: np.ndarray) -> np.ndarray:
    """Space-averaged entropies of a batch of post-measurement states.

    Vectorized over samples; eigenvalues are clipped into [0, 1] (rounding
    after long update sweeps), per the clamping policy of
    :func:`fermipe.gaussian.entanglement_entropy`.
    """
    S, l_a, _ = posts.shape
    out = np.zeros(S)
    for m in range(1, l_a + 1):
        lam = np.clip(np.linalg.eigvalsh(posts[:, :m, :m]), 0.0, 1.0)
        out += -(xlogy(lam, lam) + xlogy(1.0 - lam, 1.0 - lam)).sum(axis=1)
    return out / l_a


def mc_relative_error(replica_means) -> float:
    """Relative Monte Carlo error: population std over replicas divided by mean."""
    vals = np.asarray(replica_means, dtype=np.float64)
    if vals.size < 2:
        raise ValueError("need at least two replicas")
    mean = vals.mean()
    if mean == 0.0:
        raise ValueError("relative error undefined for zero mean")
    return float(vals.std() / abs(mean))


@dataclass
class ObservableSeries:
    """Per-time-step comparison observables of a PE-vs-ensemble run."""

    times: np.ndarray           # (n_t,)
    delta: np.ndarray           # (n_t, k_max): Frobenius distance PE vs ensemble
    delta_self: np.ndarray      # (n_t, k_max): same-size two-replica noise floor
    entropy_avg: np.ndarray     # (n_t,): PE space-averaged entanglement entropy
    sigma: np.ndarray           # (n_t,): relative MC error of entropy_avg
    n_samples: int
    seed: int

    def __post_init__(self):
        if not (
            np.all(np.isfinite(self.delta))
            and np.all(np.isfinite(self.entropy_avg))
            and np.all(self.delta >= 0.0)
        ):
            raise ValueError("observable series contains non-finite or negative entries")

    def to_json(self) -> str:
        return json.dumps(
            {
                "times": self.times.tolist(),
                "delta": self.delta.tolist(),
                "delta_self": self.delta_self.tolist(),
                "entropy_avg": self.entropy_avg.tolist(),
                "sigma": self.sigma.tolist(),
                "n_samples": self.n_samples,
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "ObservableSeries":
        d = json.loads(text)
        return cls(
            times=np.asarray(d["times"], dtype=np.float64),
            delta=np.asarray(d["delta"], dtype=np.float64),
            delta_self=np.asarray(d["delta_self"], dtype=np.float64),
            entropy_avg=np.asarray(d["entropy_avg"], dtype=np.float64),
            sigma=np.asarray(d["sigma"], dtype=np.float64),
            n_samples=d["n_samples"],
            seed=d["seed"],
        )
