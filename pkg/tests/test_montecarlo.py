"""Unit tests for the PE samplers, moment accumulators, and observables."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fermipe._sweep import direct_sample_batch, measure_outcomes_batch
from fermipe.gaussian import (
    ForbiddenOutcomeError,
    LatticeSpec,
    build_dimer_covariance,
    entanglement_entropy,
    evolve,
    measure_region_iterative,
)
from fermipe.montecarlo import (
    ChainState,
    MomentAccumulator,
    accumulate,
    batch_space_averaged_entropy,
    frobenius_delta,
    mc_relative_error,
    pe_chain_start,
    pe_direct_sample,
    pe_direct_sample_batch,
    pe_metropolis_step,
    space_averaged_entropy,
)


def random_pure_covariance(L, N, rng):
    M = rng.normal(size=(L, N)) + 1j * rng.normal(size=(L, N))
    Q, _ = np.linalg.qr(M)
    return Q @ Q.conj().T


def enumerate_outcomes(C, lattice):
    """Exact outcome distribution via the reference iterative update."""
    table = {}
    for n in range(2**lattice.l_b):
        z = tuple((n >> s) & 1 for s in range(lattice.l_b))
        try:
            rec = measure_region_iterative(C, lattice, z)
        except ForbiddenOutcomeError:
            continue
        table[z] = rec
    return table


def total_variation(emp, exact):
    keys = set(emp) | set(exact)
    return 0.5 * sum(abs(emp.get(k, 0.0) - exact.get(k, 0.0)) for k in keys)


# ----------------------------------------------------------------------------
# fast sweep kernels vs the reference implementation
# ----------------------------------------------------------------------------

class TestSweepKernels:
    def test_measure_outcomes_matches_reference(self):
        rng = np.random.default_rng(0)
        lat = LatticeSpec(L=9, l_a=3)
        C = random_pure_covariance(9, 4, rng)
        for _ in range(20):
            z = rng.integers(0, 2, size=lat.l_b)
            posts, probs, ok = measure_outcomes_batch(C, lat, z)
            try:
                ref = measure_region_iterative(C, lat, z)
            except ForbiddenOutcomeError:
                assert not ok[0]
                continue
            assert ok[0]
            assert probs[0] == pytest.approx(ref.probability, rel=1e-11)
            assert np.abs(posts[0] - ref.post_state).max() < 1e-11

    def test_direct_sampling_matches_enumeration(self):
        rng = np.random.default_rng(1)
        lat = LatticeSpec(L=8, l_a=4)
        C = evolve(build_dimer_covariance(8, 0.5), 2.0, lat)
        exact = {z: r.probability for z, r in enumerate_outcomes(C, lat).items()}
        n = 100_000
        _, probs, outs = direct_sample_batch(C, lat, n, rng)
        emp = {}
        for row in outs:
            key = tuple(int(b) for b in row)
            emp[key] = emp.get(key, 0.0) + 1.0 / n
        assert total_variation(emp, exact) < 1e-2

    def test_sampled_probabilities_are_consistent(self):
        rng = np.random.default_rng(2)
        lat = LatticeSpec(L=7, l_a=2)
        C = random_pure_covariance(7, 3, rng)
        posts, probs, outs = direct_sample_batch(C, lat, 50, rng)
        for post, p, z in zip(posts, probs, outs):
            ref = measure_region_iterative(C, lat, z)
            assert p == pytest.approx(ref.probability, rel=1e-10)
            assert np.abs(post - ref.post_state).max() < 1e-10

    def test_particle_number_bookkeeping(self):
        rng = np.random.default_rng(3)
        lat = LatticeSpec(L=10, l_a=4)
        C = random_pure_covariance(10, 5, rng)
        posts, _, outs = direct_sample_batch(C, lat, 200, rng)
        n_a = np.real(np.trace(posts, axis1=1, axis2=2))
        assert np.abs(n_a + outs.sum(axis=1) - 5.0).max() < 1e-9

    def test_purity_of_posts(self):
        rng = np.random.default_rng(4)
        lat = LatticeSpec(L=12, l_a=4)
        C = evolve(build_dimer_covariance(12, 0.3 + 0.4j), 3.0, lat)
        posts, _, _ = direct_sample_batch(C, lat, 100, rng)
        resid = np.abs(np.matmul(posts, posts) - posts).max()
        assert resid < 1e-9


# ----------------------------------------------------------------------------
# direct sampler (API level)
# ----------------------------------------------------------------------------

class TestDirectSampler:
    def test_neel_deterministic(self):
        lat = LatticeSpec(L=6, l_a=2)
        C = build_dimer_covariance(6, 0.0)
        rng = np.random.default_rng(0)
        for _ in range(5):
            rec = pe_direct_sample(C, lat, rng)
            assert rec.probability == pytest.approx(1.0)
            assert np.array_equal(rec.outcomes, [1, 0, 1, 0])

    def test_trace_identity_exact(self):
        lat = LatticeSpec(L=8, l_a=3)
        rng = np.random.default_rng(5)
        C = random_pure_covariance(8, 4, rng)
        rec = pe_direct_sample(C, lat, rng)
        assert rec.n_a + rec.outcomes.sum() == pytest.approx(4.0, abs=1e-9)


# ----------------------------------------------------------------------------
# Metropolis chain
# ----------------------------------------------------------------------------

class TestMetropolisChain:
    def test_ratio_above_one_always_accepted(self):
        # move from an unlikely string to the most likely one: r >> 1
        lat = LatticeSpec(L=6, l_a=2)
        C = evolve(build_dimer_covariance(6, 0.2), 1.0, lat)
        exact = enumerate_outcomes(C, lat)
        ranked = sorted(exact.items(), key=lambda kv: kv[1].probability)
        z_low = None
        best = max(exact.values(), key=lambda r: r.probability)
        for z, rec in ranked:
            flips = [i for i in range(lat.l_b) if z[i] != best.outcomes[i]]
            if len(flips) == 1:
                z_low, flip = z, flips[0]
                break
        assert z_low is not None
        chain = ChainState(record=exact[z_low])
        accepted = 0
        for seed in range(200):
            if int(np.random.default_rng(seed).integers(lat.l_b)) != flip:
                continue
            new = pe_metropolis_step(chain, C, lat, np.random.default_rng(seed))
            if new.accepted:
                accepted += 1
            assert new.accepted == 1  # r >= 1: must accept
        assert accepted > 0

    def test_neel_chain_frozen(self):
        lat = LatticeSpec(L=6, l_a=2)
        C = build_dimer_covariance(6, 0.0)
        rng = np.random.default_rng(1)
        chain = pe_chain_start(C, lat, rng)
        start = chain.outcomes.copy()
        for _ in range(50):
            chain = pe_metropolis_step(chain, C, lat, rng)
        assert np.array_equal(chain.outcomes, start)
        assert chain.accepted == 0
        assert chain.proposed == 50

    def test_chain_distribution_matches_enumeration(self):
        lat = LatticeSpec(L=8, l_a=4)
        C = evolve(build_dimer_covariance(8, 0.7), 1.7, lat)
        exact = {z: r.probability for z, r in enumerate_outcomes(C, lat).items()}
        rng = np.random.default_rng(2)
        chain = pe_chain_start(C, lat, rng)
        n_steps, burn = 200_000, 500
        emp = {}
        for step in range(n_steps + burn):
            chain = pe_metropolis_step(chain, C, lat, rng)
            if step >= burn:
                key = tuple(int(b) for b in chain.outcomes)
                emp[key] = emp.get(key, 0.0) + 1.0 / n_steps
        assert total_variation(emp, exact) < 1e-2

    def test_acceptance_rate_interior(self):
        lat = LatticeSpec(L=10, l_a=4)
        C = evolve(build_dimer_covariance(10, 0.5), 2.5, lat)
        rng = np.random.default_rng(3)
        chain = pe_chain_start(C, lat, rng)
        for _ in range(2000):
            chain = pe_metropolis_step(chain, C, lat, rng)
        rate = chain.accepted / chain.proposed
        assert 0.0 < rate < 1.0

    def test_chain_probability_consistent(self):
        lat = LatticeSpec(L=8, l_a=3)
        C = evolve(build_dimer_covariance(8, 1j), 1.2, lat)
        rng = np.random.default_rng(4)
        chain = pe_chain_start(C, lat, rng)
        for _ in range(200):
            chain = pe_metropolis_step(chain, C, lat, rng)
        ref = measure_region_iterative(C, lat, chain.outcomes)
        assert chain.probability == pytest.approx(ref.probability, rel=1e-8)


# ----------------------------------------------------------------------------
# moment accumulators
# ----------------------------------------------------------------------------

class TestMomentAccumulator:
    def test_single_sample_k1(self):
        rng = np.random.default_rng(0)
        C = random_pure_covariance(3, 1, rng)
        acc = MomentAccumulator(k=1, dim=3).add(C)
        assert np.allclose(acc.mean, C)

    def test_k2_outer_product(self):
        rng = np.random.default_rng(1)
        C = random_pure_covariance(2, 1, rng)
        acc = MomentAccumulator(k=2, dim=2).add(C)
        for i, j, m, n in np.ndindex(2, 2, 2, 2):
            assert acc.mean[i, j, m, n] == pytest.approx(C[i, j] * C[m, n], abs=1e-14)

    def test_add_batch_matches_sequential(self):
        rng = np.random.default_rng(2)
        states = np.stack([random_pure_covariance(3, 1, rng) for _ in range(17)])
        a = MomentAccumulator(k=3, dim=3)
        for s in states:
            a.add(s)
        b = MomentAccumulator(k=3, dim=3).add_batch(states)
        assert np.abs(a.mean - b.mean).max() < 1e-12
        assert a.count == b.count == 17

    def test_enumeration_vs_sampling(self):
        # exact enumeration weights vs direct samples, within 3 MC sigmas
        lat = LatticeSpec(L=8, l_a=2)
        C = evolve(build_dimer_covariance(8, 0.4), 1.5, lat)
        exact_acc = MomentAccumulator(k=2, dim=2)
        table = enumerate_outcomes(C, lat)
        tensor = np.zeros((2, 2, 2, 2), dtype=complex)
        for rec in table.values():
            tensor += rec.probability * np.tensordot(rec.post_state, rec.post_state, axes=0)
        exact_acc.mean, exact_acc.count = tensor, 1
        rng = np.random.default_rng(3)
        n = 40_000
        posts, _, _ = pe_direct_sample_batch(C, lat, n, rng)
        samp = MomentAccumulator(k=2, dim=2).add_batch(posts)
        # entrywise spread of the k=2 products is <= 1/4 per entry
        sigma_bound = 3.0 * 0.5 / np.sqrt(n)
        assert np.abs(samp.mean - exact_acc.mean).max() < sigma_bound

    @given(
        counts=st.lists(st.integers(1, 30), min_size=2, max_size=4),
        seed=st.integers(0, 1000),
    )
    @settings(max_examples=20, deadline=None)
    def test_merge_associative_commutative(self, counts, seed):
        rng = np.random.default_rng(seed)
        accs = []
        for c in counts:
            acc = MomentAccumulator(k=2, dim=2)
            acc.add_batch(np.stack([random_pure_covariance(2, 1, rng) for _ in range(c)]))
            accs.append(acc)
        left = accs[0]
        for a in accs[1:]:
            left = left.merge(a)
        right = accs[-1]
        for a in accs[-2::-1]:
            right = a.merge(right)
        assert left.count == right.count == sum(counts)
        assert np.abs(left.mean - right.mean).max() < 1e-12

    def test_json_round_trip(self):
        rng = np.random.default_rng(5)
        acc = MomentAccumulator(k=2, dim=2)
        acc.add_batch(np.stack([random_pure_covariance(2, 1, rng) for _ in range(9)]))
        back = MomentAccumulator.from_json(acc.to_json())
        assert back.count == acc.count
        assert np.abs(back.mean - acc.mean).max() < 1e-15

    def test_accumulate_record(self):
        lat = LatticeSpec(L=6, l_a=2)
        C = build_dimer_covariance(6, 0.0)
        rng = np.random.default_rng(6)
        rec = pe_direct_sample(C, lat, rng)
        acc = accumulate(MomentAccumulator(k=1, dim=2), rec)
        assert np.allclose(acc.mean, rec.post_state)

    def test_k1_mean_hermitian(self):
        rng = np.random.default_rng(7)
        acc = MomentAccumulator(k=1, dim=3)
        acc.add_batch(np.stack([random_pure_covariance(3, 2, rng) for _ in range(20)]))
        assert np.abs(acc.mean - acc.mean.conj().T).max() < 1e-9

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            MomentAccumulator(k=1, dim=2).add(np.eye(3, dtype=complex))


class TestFrobeniusDelta:
    def test_identical_zero(self):
        rng = np.random.default_rng(0)
        s = np.stack([random_pure_covariance(2, 1, rng) for _ in range(4)])
        a = MomentAccumulator(k=2, dim=2).add_batch(s)
        b = MomentAccumulator(k=2, dim=2).add_batch(s)
        assert frobenius_delta(a, b) == 0.0

    def test_single_entry(self):
        a = MomentAccumulator(k=1, dim=2)
        b = MomentAccumulator(k=1, dim=2)
        a.count = b.count = 1
        b.mean = a.mean.copy()
        b.mean[0, 1] += 0.1
        assert frobenius_delta(a, b) == pytest.approx(0.1)

    def test_mismatch_rejected(self):
        with pytest.raises(ValueError):
            frobenius_delta(MomentAccumulator(k=1, dim=2), MomentAccumulator(k=2, dim=2))


# ----------------------------------------------------------------------------
# first-moment identity and sampler equivalence
# ----------------------------------------------------------------------------

class TestSamplerProperties:
    def test_first_moment_identity_sampled(self):
        lat = LatticeSpec(L=10, l_a=3)
        C = evolve(build_dimer_covariance(10, 0.6 + 0.3j), 2.2, lat)
        rng = np.random.default_rng(1)
        n = 60_000
        posts, _, _ = pe_direct_sample_batch(C, lat, n, rng)
        mean = posts.mean(axis=0)
        assert np.abs(mean - C[:3, :3]).max() < 3.0 * 0.5 / np.sqrt(n)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_metropolis_direct_equivalence(self, k):
        # cross-sampler moment distance below 3x the combined two-replica floor
        lat = LatticeSpec(L=8, l_a=2)
        C = evolve(build_dimer_covariance(8, 0.5), 2.0, lat)
        rng = np.random.default_rng(2)
        n = 30_000
        posts, _, _ = pe_direct_sample_batch(C, lat, n, rng)
        direct = MomentAccumulator(k=k, dim=2).add_batch(posts)
        self_direct = frobenius_delta(
            MomentAccumulator(k=k, dim=2).add_batch(posts[: n // 2]),
            MomentAccumulator(k=k, dim=2).add_batch(posts[n // 2 :]),
        ) / np.sqrt(2.0)
        chain = pe_chain_start(C, lat, rng)
        burn = 10 * lat.l_b
        metro_posts = np.empty((n, 2, 2), dtype=np.complex128)
        for step in range(n + burn):
            chain = pe_metropolis_step(chain, C, lat, rng)
            if step >= burn:
                metro_posts[step - burn] = chain.record.post_state
        metro = MomentAccumulator(k=k, dim=2).add_batch(metro_posts)
        self_metro = frobenius_delta(
            MomentAccumulator(k=k, dim=2).add_batch(metro_posts[: n // 2]),
            MomentAccumulator(k=k, dim=2).add_batch(metro_posts[n // 2 :]),
        ) / np.sqrt(2.0)
        combined = np.sqrt(self_direct**2 + self_metro**2)
        assert frobenius_delta(direct, metro) < 3.0 * combined


# ----------------------------------------------------------------------------
# entropy observables and MC error
# ----------------------------------------------------------------------------

class TestEntropyObservables:
    def test_product_state_zero(self):
        post = np.diag([1.0, 0.0, 1.0]).astype(complex)
        assert space_averaged_entropy(post) == pytest.approx(0.0, abs=1e-12)

    def test_bell_mode_convention(self):
        post = np.array([[0.5, 0.5], [0.5, 0.5]], dtype=complex)
        assert space_averaged_entropy(post) == pytest.approx(np.log(2.0) / 2.0)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        lat = LatticeSpec(L=9, l_a=4)
        C = random_pure_covariance(9, 4, rng)
        posts, _, _ = pe_direct_sample_batch(C, lat, 40, rng)
        batch = batch_space_averaged_entropy(posts)
        for i in range(40):
            assert batch[i] == pytest.approx(space_averaged_entropy(posts[i]), abs=1e-9)

    def test_statevector_oracle_cuts(self):
        import oracle

        L = 8
        rng = np.random.default_rng(3)
        psi, C = oracle.random_gaussian_state(L, 4, rng)
        for m in range(1, L):
            assert entanglement_entropy(C[:m, :m]) == pytest.approx(
                oracle.entropy_of_left_block(psi, L, m), abs=1e-9
            )


class TestMcRelativeError:
    def test_identical_replicas(self):
        assert mc_relative_error([2.0, 2.0, 2.0]) == 0.0

    def test_hand_value(self):
        assert mc_relative_error([1.0, 1.02, 0.98]) == pytest.approx(0.01633, abs=1e-5)

    def test_zero_mean_rejected(self):
        with pytest.raises(ValueError):
            mc_relative_error([1.0, -1.0])

    def test_single_replica_rejected(self):
        with pytest.raises(ValueError):
            mc_relative_error([1.0])
