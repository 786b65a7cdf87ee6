"""Command-line front end: pe-vs-ensemble, calibrate, number-dist, validate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from fermipe.experiment import (
    ConfigError,
    ExperimentConfig,
    run_calibration,
    run_number_dist,
    run_pe_vs_ensemble,
)


def _load_config(args) -> ExperimentConfig:
    raw = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        raw["seed"] = args.seed
    return ExperimentConfig.from_dict(raw)


def _cmd_pe_vs_ensemble(args) -> int:
    config = _load_config(args)
    resume = args.resume
    if resume is None:
        candidate = Path(args.out) / "checkpoint.json"
        resume = candidate if candidate.exists() else None
    run_pe_vs_ensemble(config, args.out, resume=resume)
    print(f"wrote {Path(args.out) / 'observables.csv'}")
    return 0


def _cmd_calibrate(args) -> int:
    config = _load_config(args)
    mult = run_calibration(config, args.out)
    print(f"wrote {Path(args.out) / 'multipliers.json'} (L={mult.L})")
    return 0


def _cmd_number_dist(args) -> int:
    config = _load_config(args)
    run_number_dist(config, args.out)
    print(f"wrote {Path(args.out) / 'number_dist.csv'}")
    return 0


def _cmd_validate(args) -> int:
    """Fast end-to-end invariant battery (seeded, a few seconds)."""
    from fermipe.ensembles import (
        Multipliers,
        build_inf_temp_covariance,
        gaussian_omega,
        haar_unitary,
        number_distribution,
        r_pi2_phases,
        sample_single_eigenstate,
    )
    from fermipe.gaussian import (
        ForbiddenOutcomeError,
        LatticeSpec,
        build_dimer_covariance,
        evolve,
        measure_region_determinant,
        measure_region_iterative,
        occupation_spectrum,
    )
    from fermipe.montecarlo import MomentAccumulator, pe_direct_sample_batch

    rng = np.random.default_rng(20260808)
    checks: list[tuple[str, bool, str]] = []

    def check(name: str, ok: bool, detail: str = "") -> None:
        checks.append((name, bool(ok), detail))

    lat = LatticeSpec(L=8, l_a=3)
    C = evolve(build_dimer_covariance(8, 0.4 + 0.3j), 1.3, lat)

    total, max_mismatch, max_purity = 0.0, 0.0, 0.0
    first_moment = np.zeros((3, 3), dtype=complex)
    for n in range(2**lat.l_b):
        z = [(n >> s) & 1 for s in range(lat.l_b)]
        try:
            rec = measure_region_iterative(C, lat, z)
        except ForbiddenOutcomeError:
            continue
        det = measure_region_determinant(C, lat, z)
        total += rec.probability
        max_mismatch = max(max_mismatch, abs(det.probability - rec.probability))
        post = np.asarray(rec.post_state)
        max_purity = max(max_purity, float(np.linalg.norm(post @ post - post)))
        first_moment += rec.probability * post
    check("probability normalization", abs(total - 1.0) < 1e-10, f"sum={total:.12f}")
    check("iterative == determinant", max_mismatch < 1e-8, f"max diff={max_mismatch:.2e}")
    check("post-measurement purity", max_purity < 1e-9, f"max resid={max_purity:.2e}")
    fm = np.abs(first_moment - C[:3, :3]).max()
    check("first-moment identity", fm < 1e-9, f"max dev={fm:.2e}")

    w_before = np.linalg.eigvalsh(C)
    w_after = np.linalg.eigvalsh(evolve(C, 7.7, lat))
    check("evolution unitarity", np.abs(w_before - w_after).max() < 1e-10)

    posts, probs, outs = pe_direct_sample_batch(C, lat, 500, rng)
    n_a = np.real(np.trace(posts, axis1=1, axis2=2)) + outs.sum(axis=1)
    check("particle bookkeeping", np.abs(n_a - 4.0).max() < 1e-9)

    a1 = MomentAccumulator(k=2, dim=3).add_batch(posts[:250])
    a2 = MomentAccumulator(k=2, dim=3).add_batch(posts[250:])
    m12 = a1.merge(a2)
    m21 = a2.merge(a1)
    check("accumulator merge symmetry", np.abs(m12.mean - m21.mean).max() < 1e-12)

    Q = haar_unitary(16, rng)
    check("haar unitarity", np.abs(Q @ Q.conj().T - np.eye(16)).max() < 1e-12)

    nk = occupation_spectrum(0.5 * np.exp(1j * 0.7), 12)
    C_eig = sample_single_eigenstate(nk, 6, rng)
    check(
        "eigenstate projector",
        np.linalg.norm(C_eig @ C_eig - C_eig) < 1e-9
        and abs(np.trace(C_eig).real - 6) < 1e-9,
    )

    mult = gaussian_omega(nk)
    check("multiplier zero sum", abs(mult.omega.sum()) < 1e-9)
    check(
        "multiplier column identity",
        abs((1.0 / (mult.gamma + mult.omega)).sum() - 1.0) < 1e-9,
    )

    C_it = build_inf_temp_covariance(6, 3, "orthogonal", rng)
    r = r_pi2_phases(6)
    check(
        "inf-temp reality structure",
        np.abs((C_it * np.outer(r, r.conj())).imag).max() < 1e-12,
    )
    p = number_distribution(10, 5, 4)
    check("number distribution normalized", abs(p.sum() - 1.0) < 1e-12)

    width = max(len(name) for name, _, _ in checks)
    failures = 0
    for name, ok, detail in checks:
        status = "PASS" if ok else "FAIL"
        line = f"{name:<{width}}  {status}"
        if detail:
            line += f"  ({detail})"
        print(line)
        failures += 0 if ok else 1
    print(f"{len(checks) - failures}/{len(checks)} invariants hold")
    return 1 if failures else 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fermipe",
        description="Projected-ensemble Monte Carlo for free-fermion chains",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")

    p = sub.add_parser("pe-vs-ensemble", help="sample the PE and compare with ensembles")
    add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint file to resume from")
    p.set_defaults(func=_cmd_pe_vs_ensemble)

    p = sub.add_parser("calibrate", help="calibrate generalized-Haar multipliers")
    add_common(p)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("number-dist", help="particle-number statistics vs the analytic law")
    add_common(p)
    p.set_defaults(func=_cmd_number_dist)

    p = sub.add_parser("validate", help="run the invariant suite")
    p.set_defaults(func=_cmd_validate)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
