"""End-to-end experiment runner: declarative configs in, CSV tables out.

A run compares the projected ensemble of an evolved dimer state against one
or more reference ensembles, time step by time step, emitting the moment
distances, entropy averages, and Monte Carlo errors to versioned CSV files.
Every random draw descends from the single root seed through a fixed
splitting scheme, so re-running a config reproduces its outputs byte for
byte regardless of worker count; a checkpoint file makes interrupted runs
resumable without recomputation drift.

Seed-splitting scheme: the generator of stream ``s``, time index ``t`` and
replica ``r`` is ``default_rng(SeedSequence(seed, spawn_key=(s, t, r)))``
with stream 0 = PE sampling, 1 = ensemble sampling, 2 = calibration,
3 = number statistics.
"""

from __future__ import annotations

import hashlib
import json
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fermipe import __version__
from fermipe._sweep import direct_sample_each
from fermipe.ensembles import (
    Multipliers,
    build_inf_temp_covariance,
    calibrate_omega,
    eigenstate_momentum_sampler,
    fourier_basis,
    gaussian_omega,
    number_distribution,
    sample_generalized_haar,
)
from fermipe.gaussian import (
    LatticeSpec,
    build_dimer_covariance,
    evolve,
    occupation_spectrum,
)
from fermipe.montecarlo import (
    MomentAccumulator,
    ObservableSeries,
    batch_space_averaged_entropy,
    frobenius_delta,
    mc_relative_error,
    pe_chain_start,
    pe_direct_sample_batch,
    pe_metropolis_step,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "run_pe_vs_ensemble",
    "run_calibration",
    "run_number_dist",
    "OBSERVABLES_SCHEMA",
    "ENSEMBLES_SCHEMA",
]

OBSERVABLES_SCHEMA = "# fermipe-observables v1"
ENSEMBLES_SCHEMA = "# fermipe-ensembles v1"
NUMBERDIST_SCHEMA = "# fermipe-numberdist v1"
CALIBRATION_SCHEMA = "# fermipe-calibration v1"

KNOWN_ENSEMBLES = (
    "single_eigenstate",
    "generalized_haar",
    "inf_temp_orthogonal",
    "inf_temp_unitary",
)

_BATCH = 4096  # samples per kernel call / accumulator batch


class ConfigError(ValueError):
    """The experiment configuration is inconsistent or incomplete."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one experiment (one JSON file).

    ``samples`` is the total Monte Carlo budget per time step, split evenly
    across ``replicas`` (the replica spread estimates the MC error).
    """

    seed: int
    lattice: LatticeSpec
    alpha: complex
    t_max: float
    dt: float = 1.0
    t_min: float | None = None
    sampler_kind: str = "direct"
    samples: int = 1000
    replicas: int = 2
    burn_in: int | None = None
    ensembles: tuple[str, ...] = ("single_eigenstate",)
    k_max: int = 3
    multipliers_path: str | None = None
    calibration: dict = field(default_factory=dict)
    number_samples: int = 100_000
    pe_time: float | None = None

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        try:
            seed = raw["seed"]
        except KeyError:
            raise ConfigError("config must set an explicit root 'seed'") from None
        if not isinstance(seed, int):
            raise ConfigError("'seed' must be an integer")
        lat_raw = raw.get("lattice")
        if not lat_raw:
            raise ConfigError("config must provide a 'lattice' section")
        try:
            lattice = LatticeSpec(
                L=int(lat_raw["L"]),
                l_a=int(lat_raw["l_a"]),
                boundary=lat_raw.get("boundary", "periodic"),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad lattice section: {exc}") from None
        state = raw.get("initial_state", {})
        alpha = state.get("alpha_modulus", 0.0) * np.exp(1j * state.get("alpha_phase", 0.0))
        grid = raw.get("time_grid", {})
        t_max = float(grid.get("t_max", 0.0))
        dt = float(grid.get("dt", 1.0))
        t_min = grid.get("t_min")
        if t_max < dt or dt <= 0:
            raise ConfigError("time_grid must satisfy t_max >= dt > 0")
        if t_min is not None and not dt <= t_min <= t_max:
            raise ConfigError("time_grid t_min must lie in [dt, t_max]")
        sampler = raw.get("sampler", {})
        kind = sampler.get("kind", "direct")
        if kind not in ("direct", "metropolis"):
            raise ConfigError(f"unknown sampler kind {kind!r}")
        samples = int(sampler.get("samples", 1000))
        replicas = int(sampler.get("replicas", 2))
        if replicas < 2:
            raise ConfigError("need at least 2 replicas for error estimation")
        if samples % replicas != 0:
            raise ConfigError(f"samples={samples} not divisible by replicas={replicas}")
        ensembles = tuple(raw.get("ensembles", ["single_eigenstate"]))
        for name in ensembles:
            if name not in KNOWN_ENSEMBLES:
                raise ConfigError(f"unknown ensemble {name!r}; known: {KNOWN_ENSEMBLES}")
        k_max = int(raw.get("k_max", 3))
        if not 1 <= k_max <= 3:
            raise ConfigError("k_max must be 1, 2 or 3")
        if lattice.l_a ** (2 * k_max) > 20_000_000:
            raise ConfigError("moment tensors would not fit in memory: lower k_max or l_a")
        return cls(
            seed=seed,
            lattice=lattice,
            alpha=complex(alpha),
            t_max=t_max,
            dt=dt,
            t_min=None if t_min is None else float(t_min),
            sampler_kind=kind,
            samples=samples,
            replicas=replicas,
            burn_in=sampler.get("burn_in"),
            ensembles=ensembles,
            k_max=k_max,
            multipliers_path=raw.get("multipliers_path"),
            calibration=raw.get("calibration", {}),
            number_samples=int(raw.get("number_dist", {}).get("samples", 100_000)),
            pe_time=raw.get("number_dist", {}).get("pe_time"),
        )

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @property
    def times(self) -> np.ndarray:
        start = self.dt if self.t_min is None else self.t_min
        n = int(round((self.t_max - start) / self.dt))
        return start + self.dt * np.arange(0, n + 1)

    @property
    def n_particles(self) -> int:
        return self.lattice.L // 2

    def fingerprint(self) -> str:
        """Stable hash of everything that affects the numbers."""
        payload = json.dumps(
            {
                "seed": self.seed,
                "L": self.lattice.L,
                "l_a": self.lattice.l_a,
                "boundary": self.lattice.boundary,
                "alpha": [self.alpha.real, self.alpha.imag],
                "t_max": self.t_max,
                "dt": self.dt,
                "t_min": self.t_min,
                "sampler": self.sampler_kind,
                "samples": self.samples,
                "replicas": self.replicas,
                "burn_in": self.burn_in,
                "ensembles": list(self.ensembles),
                "k_max": self.k_max,
                "version": __version__,
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()


def _rng_for(config: ExperimentConfig, stream: int, a: int = 0, b: int = 0):
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(stream, a, b)))


# ----------------------------------------------------------------------------
# sampling passes
# ----------------------------------------------------------------------------

def _new_accumulators(k_max: int, dim: int) -> list[MomentAccumulator]:
    return [MomentAccumulator(k=k, dim=dim) for k in range(1, k_max + 1)]


def _absorb(accs: list[MomentAccumulator], posts: np.ndarray) -> None:
    for acc in accs:
        acc.add_batch(posts)


def _pe_replica_direct(C_t, lattice, n, rng, k_max):
    accs = _new_accumulators(k_max, lattice.l_a)
    ent_sum, left = 0.0, n
    while left > 0:
        chunk = min(left, _BATCH)
        posts, _, _ = pe_direct_sample_batch(C_t, lattice, chunk, rng)
        _absorb(accs, posts)
        ent_sum += batch_space_averaged_entropy(posts).sum()
        left -= chunk
    return accs, ent_sum / n


def _pe_replica_metropolis(C_t, lattice, n, rng, k_max, burn_in):
    burn = 10 * lattice.l_b if burn_in is None else burn_in
    chain = pe_chain_start(C_t, lattice, rng)
    for _ in range(burn):
        chain = pe_metropolis_step(chain, C_t, lattice, rng)
    accs = _new_accumulators(k_max, lattice.l_a)
    posts = np.empty((n, lattice.l_a, lattice.l_a), dtype=np.complex128)
    for s in range(n):
        chain = pe_metropolis_step(chain, C_t, lattice, rng)
        posts[s] = chain.record.post_state
    for start in range(0, n, _BATCH):
        _absorb(accs, posts[start : start + _BATCH])
    return accs, float(batch_space_averaged_entropy(posts).mean())


def _pe_task(payload):
    """One (time index, replica) PE sampling task; payload is picklable."""
    (C_t, lattice, kind, n, seed, stream_key, k_max, burn_in) = payload
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=stream_key))
    if kind == "direct":
        accs, ent = _pe_replica_direct(C_t, lattice, n, rng, k_max)
    else:
        accs, ent = _pe_replica_metropolis(C_t, lattice, n, rng, k_max, burn_in)
    return [a.to_json() for a in accs], ent


def _load_multipliers(config: ExperimentConfig) -> Multipliers:
    if config.multipliers_path:
        return Multipliers.from_json(Path(config.multipliers_path).read_text())
    return gaussian_omega(occupation_spectrum(config.alpha, config.lattice.L))


def _ensemble_replica(config: ExperimentConfig, name: str, n: int, rng):
    """Sample one replica of a reference ensemble; returns (accs, entropy mean)."""
    lattice = config.lattice
    l_a, k_max = lattice.l_a, config.k_max
    accs = _new_accumulators(k_max, l_a)
    ent_sum = 0.0
    if name in ("inf_temp_orthogonal", "inf_temp_unitary"):
        symmetry = name.removeprefix("inf_temp_")
        p_na = number_distribution(lattice.L, config.n_particles, l_a)
        n_a_draws = rng.choice(len(p_na), size=n, p=p_na)
        posts = np.empty((n, l_a, l_a), dtype=np.complex128)
        for s in range(n):
            posts[s] = build_inf_temp_covariance(l_a, int(n_a_draws[s]), symmetry, rng)
        for start in range(0, n, _BATCH):
            _absorb(accs, posts[start : start + _BATCH])
        ent_sum = batch_space_averaged_entropy(posts).sum()
    elif name == "single_eigenstate":
        # representative eigenstates built directly in measurement-major order
        nk = occupation_spectrum(config.alpha, lattice.L)
        sampler = eigenstate_momentum_sampler(nk, config.n_particles)
        perm = np.concatenate([lattice.sites_b, lattice.sites_a])
        Fp = np.ascontiguousarray(fourier_basis(lattice.L)[:, perm])
        chunk_size = min(_BATCH, 256)
        for start in range(0, n, chunk_size):
            chunk = min(chunk_size, n - start)
            reps = np.empty((chunk, lattice.L, lattice.L), dtype=np.complex128)
            for s in range(chunk):
                rows = Fp[sampler.draw(rng)]
                reps[s] = rows.conj().T @ rows
            posts, _, _ = direct_sample_each(reps, lattice, rng)
            _absorb(accs, posts)
            ent_sum += batch_space_averaged_entropy(posts).sum()
    elif name == "generalized_haar":
        nk = occupation_spectrum(config.alpha, lattice.L)
        mult = _load_multipliers(config)
        stream = sample_generalized_haar(
            nk, mult, burn_in=20 * lattice.L, thin=2 * lattice.L, count=n, rng=rng
        )
        perm = np.concatenate([lattice.sites_b, lattice.sites_a])
        chunk_size = min(_BATCH, 256)
        for start in range(0, n, chunk_size):
            chunk = min(chunk_size, n - start)
            reps = np.empty((chunk, lattice.L, lattice.L), dtype=np.complex128)
            for s in range(chunk):
                reps[s] = next(stream)
            reps = np.ascontiguousarray(reps[:, perm][:, :, perm])
            posts, _, _ = direct_sample_each(reps, lattice, rng)
            _absorb(accs, posts)
            ent_sum += batch_space_averaged_entropy(posts).sum()
    else:
        raise ConfigError(f"unknown ensemble {name!r}")
    return accs, ent_sum / n


def _sample_ensembles(config: ExperimentConfig):
    """Sample every configured reference ensemble (replica-split like the PE)."""
    per_rep = config.samples // config.replicas
    out = {}
    for e_idx, name in enumerate(config.ensembles):
        rep_accs, rep_ents = [], []
        for rep in range(config.replicas):
            rng = _rng_for(config, 1, e_idx, rep)
            accs, ent = _ensemble_replica(config, name, per_rep, rng)
            rep_accs.append(accs)
            rep_ents.append(ent)
        out[name] = _reduce_replicas(rep_accs, rep_ents, config.k_max)
    return out


@dataclass
class _EnsembleResult:
    merged: list[MomentAccumulator]
    delta_self: list[float]
    entropy_avg: float
    entropy_sigma: float


def _reduce_replicas(rep_accs, rep_ents, k_max) -> _EnsembleResult:
    """Merge replicas in fixed order; half-split self-distances as noise floor.

    The halves have twice the variance of the full mean, so the half-distance
    is divided by sqrt(2): the reported floor is what two independent
    full-size replicas of the same ensemble would show.
    """
    n_rep = len(rep_accs)
    merged, self_d = [], []
    for ki in range(k_max):
        full = rep_accs[0][ki]
        for r in range(1, n_rep):
            full = full.merge(rep_accs[r][ki])
        merged.append(full)
        half_a = rep_accs[0][ki]
        for r in range(1, n_rep // 2):
            half_a = half_a.merge(rep_accs[r][ki])
        half_b = rep_accs[n_rep // 2][ki]
        for r in range(n_rep // 2 + 1, n_rep):
            half_b = half_b.merge(rep_accs[r][ki])
        self_d.append(frobenius_delta(half_a, half_b) / np.sqrt(2.0))
    ent = float(np.mean(rep_ents))
    sigma = mc_relative_error(rep_ents) if ent != 0.0 else 0.0
    return _EnsembleResult(merged=merged, delta_self=self_d, entropy_avg=ent, entropy_sigma=sigma)


# ----------------------------------------------------------------------------
# CSV and checkpoint plumbing
# ----------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_csv(path: Path, schema: str, header: list[str], rows: list[list]) -> None:
    lines = [schema, ",".join(header)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    _write_atomic(path, "\n".join(lines) + "\n")


def _load_checkpoint(path: Path, fingerprint: str) -> dict:
    data = json.loads(path.read_text())
    if data.get("fingerprint") != fingerprint:
        raise ConfigError(
            "checkpoint does not match this config (different parameters or version)"
        )
    return data


def _workers() -> int:
    return max(1, int(os.environ.get("FERMIPE_WORKERS", "1")))


# ----------------------------------------------------------------------------
# runners
# ----------------------------------------------------------------------------

def run_pe_vs_ensemble(
    config: ExperimentConfig,
    out_dir,
    resume=None,
    stop_after: int | None = None,
) -> dict:
    """Sample the PE across the time grid and compare it with each ensemble.

    Writes ``observables.csv`` (one row per time step, moment order, and
    ensemble), ``ensembles.csv`` (the stationary ensemble summaries), and a
    resumable ``checkpoint.json`` into ``out_dir``.  With ``resume`` pointing
    at a previous checkpoint of the same config, completed time steps are
    reused verbatim.  ``stop_after`` limits how many new time steps are
    computed (the checkpoint stays resumable).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fingerprint = config.fingerprint()
    state: dict = {"fingerprint": fingerprint, "ensembles": {}, "completed": {}}
    if resume is not None and Path(resume).exists():
        state = _load_checkpoint(Path(resume), fingerprint)

    lattice = config.lattice
    if state["ensembles"]:
        ens_results = {
            name: _EnsembleResult(
                merged=[MomentAccumulator.from_json(j) for j in blob["accs"]],
                delta_self=blob["delta_self"],
                entropy_avg=blob["entropy_avg"],
                entropy_sigma=blob["entropy_sigma"],
            )
            for name, blob in state["ensembles"].items()
        }
    else:
        ens_results = _sample_ensembles(config)
        state["ensembles"] = {
            name: {
                "accs": [a.to_json() for a in res.merged],
                "delta_self": res.delta_self,
                "entropy_avg": res.entropy_avg,
                "entropy_sigma": res.entropy_sigma,
            }
            for name, res in ens_results.items()
        }
        _write_atomic(out / "checkpoint.json", json.dumps(state))

    C0 = build_dimer_covariance(lattice.L, config.alpha)
    per_rep = config.samples // config.replicas
    times = config.times
    workers = _workers()
    new_points = 0
    for t_idx, t in enumerate(times):
        key = str(t_idx)
        if key in state["completed"]:
            continue
        if stop_after is not None and new_points >= stop_after:
            break
        C_t = evolve(C0, float(t), lattice)
        payloads = [
            (C_t, lattice, config.sampler_kind, per_rep, config.seed,
             (0, t_idx, rep), config.k_max, config.burn_in)
            for rep in range(config.replicas)
        ]
        if workers > 1:
            # spawn, not fork: the numba threading layer does not survive fork
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
                results = list(pool.map(_pe_task, payloads))
        else:
            results = [_pe_task(p) for p in payloads]
        rep_accs = [[MomentAccumulator.from_json(j) for j in accs] for accs, _ in results]
        rep_ents = [ent for _, ent in results]
        pe = _reduce_replicas(rep_accs, rep_ents, config.k_max)
        point = {"t": float(t), "entropy_avg": pe.entropy_avg, "sigma": pe.entropy_sigma, "by_ensemble": {}}
        for name, res in ens_results.items():
            deltas = [
                frobenius_delta(pe.merged[ki], res.merged[ki]) for ki in range(config.k_max)
            ]
            point["by_ensemble"][name] = {"delta": deltas, "delta_self": pe.delta_self}
        state["completed"][key] = point
        _write_atomic(out / "checkpoint.json", json.dumps(state))
        new_points += 1

    _emit_observables_csv(config, state, out)
    _emit_ensembles_csv(config, ens_results, out)
    return state


def observable_series(state: dict, config: ExperimentConfig, ensemble: str) -> ObservableSeries:
    """Assemble the per-time observable series of one ensemble comparison."""
    keys = sorted(state["completed"], key=int)
    points = [state["completed"][k] for k in keys]
    return ObservableSeries(
        times=np.array([p["t"] for p in points]),
        delta=np.array([p["by_ensemble"][ensemble]["delta"] for p in points]),
        delta_self=np.array([p["by_ensemble"][ensemble]["delta_self"] for p in points]),
        entropy_avg=np.array([p["entropy_avg"] for p in points]),
        sigma=np.array([p["sigma"] for p in points]),
        n_samples=config.samples,
        seed=config.seed,
    )


def _emit_observables_csv(config, state, out: Path) -> None:
    header = ["ensemble", "t", "k", "delta", "delta_self", "entropy_avg", "sigma", "n_samples", "seed"]
    rows = []
    for t_idx in sorted(state["completed"], key=int):
        point = state["completed"][t_idx]
        for name in config.ensembles:
            blob = point["by_ensemble"][name]
            for ki in range(config.k_max):
                rows.append(
                    [
                        name,
                        point["t"],
                        ki + 1,
                        blob["delta"][ki],
                        blob["delta_self"][ki],
                        point["entropy_avg"],
                        point["sigma"],
                        config.samples,
                        config.seed,
                    ]
                )
    _write_csv(out / "observables.csv", OBSERVABLES_SCHEMA, header, rows)


def _emit_ensembles_csv(config, ens_results, out: Path) -> None:
    header = ["ensemble", "k", "n_samples", "entropy_avg", "entropy_sigma", "tensor_norm"]
    rows = []
    for name, res in ens_results.items():
        for ki in range(config.k_max):
            rows.append(
                [
                    name,
                    ki + 1,
                    config.samples,
                    res.entropy_avg,
                    res.entropy_sigma,
                    float(np.linalg.norm(res.merged[ki].mean.ravel())),
                ]
            )
    _write_csv(out / "ensembles.csv", ENSEMBLES_SCHEMA, header, rows)


def run_calibration(config: ExperimentConfig, out_dir) -> Multipliers:
    """Calibrate the generalized-Haar multipliers for the configured state.

    Writes ``multipliers.json`` (cacheable via ``multipliers_path``) and the
    per-iteration residual trace to ``calibration_trace.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    nk = occupation_spectrum(config.alpha, config.lattice.L)
    opts = config.calibration
    rng = _rng_for(config, 2)
    mult, trace = calibrate_omega(
        nk,
        iterations=int(opts.get("iterations", 50)),
        chain_steps=int(opts.get("chain_steps", 2000)),
        burn_in=opts.get("burn_in"),
        group=opts.get("group", "unitary"),
        rng=rng,
    )
    _write_atomic(out / "multipliers.json", mult.to_json())
    header = ["iteration", "residual", "objective", "step_size"]
    rows = [
        [i, trace.residual[i], trace.objective[i], trace.step_size[i]]
        for i in range(len(trace.residual))
    ]
    _write_csv(out / "calibration_trace.csv", CALIBRATION_SCHEMA, header, rows)
    return mult


def run_number_dist(config: ExperimentConfig, out_dir) -> None:
    """Analytic p(N_A) next to empirical histograms, in ``number_dist.csv``.

    The empirical columns come from (a) whole-system infinite-temperature
    orthogonal states with the bath measured, and (b) when ``pe_time`` is
    set, the PE of the evolved initial state at that time.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lattice, N = config.lattice, config.n_particles
    analytic = number_distribution(lattice.L, N, lattice.l_a)
    n_samp = config.number_samples
    rng = _rng_for(config, 3, 0)
    counts = np.zeros(len(analytic))
    r = np.ones(lattice.L, dtype=np.complex128)
    r[1::2] = 1j
    for start in range(0, n_samp, _BATCH):
        chunk = min(_BATCH, n_samp - start)
        for _ in range(chunk):
            C = build_inf_temp_covariance(lattice.L, N, "orthogonal", rng)
            _, _, outs = pe_direct_sample_batch(C, lattice, 1, rng)
            counts[N - int(outs.sum())] += 1
    emp_orth = counts / n_samp

    emp_pe = np.full(len(analytic), np.nan)
    if config.pe_time is not None:
        rng = _rng_for(config, 3, 1)
        C_t = evolve(
            build_dimer_covariance(lattice.L, config.alpha), float(config.pe_time), lattice
        )
        counts = np.zeros(len(analytic))
        left = n_samp
        while left > 0:
            chunk = min(_BATCH, left)
            _, _, outs = pe_direct_sample_batch(C_t, lattice, chunk, rng)
            n_a = N - outs.sum(axis=1)
            for v in n_a:
                counts[int(v)] += 1
            left -= chunk
        emp_pe = counts / n_samp

    header = ["n_a", "p_analytic", "p_orthogonal", "p_pe", "n_samples", "seed"]
    rows = [
        [na, analytic[na], emp_orth[na], emp_pe[na], n_samp, config.seed]
        for na in range(len(analytic))
    ]
    _write_csv(out / "number_dist.csv", NUMBERDIST_SCHEMA, header, rows)
