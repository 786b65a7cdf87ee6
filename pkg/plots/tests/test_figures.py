"""Tests for the plotting package: fixtures in, deterministic images out."""

import numpy as np
import pytest

from peplots.cli import main
from peplots.figures import (
    SchemaError,
    fit_power_law,
    read_observables,
    render_delta_panel,
    render_entropy_panel,
)


def synthetic_observables(
    path, ts=None, ks=(1, 2, 3), ensemble="single_eigenstate", slope=-0.5, sigma=0.01
):
    """Exact power-law fixture in the versioned schema."""
    ts = np.arange(1.0, 51.0) if ts is None else ts
    lines = [
        "# fermipe-observables v1",
        "ensemble,t,k,delta,delta_self,entropy_avg,sigma,n_samples,seed",
    ]
    for t in ts:
        for k in ks:
            delta = float(k) * float(t) ** slope
            lines.append(
                f"{ensemble},{float(t)!r},{k},{delta!r},{0.01 * delta!r},"
                f"{1.5 + 0.01 * float(np.sin(t))!r},{sigma!r},1000,7"
            )
    path.write_text("\n".join(lines) + "\n")
    return path


def synthetic_ensembles(path):
    lines = [
        "# fermipe-ensembles v1",
        "ensemble,k,n_samples,entropy_avg,entropy_sigma,tensor_norm",
        "inf_temp_orthogonal,1,1000,1.48,0.01,1.0",
        "inf_temp_unitary,1,1000,1.61,0.01,1.0",
    ]
    path.write_text("\n".join(lines) + "\n")
    return path


class TestReaders:
    def test_schema_line_enforced(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("t,delta\n1,0.5\n")
        with pytest.raises(SchemaError):
            read_observables(bad)

    def test_missing_column_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("# fermipe-observables v1\nt,delta\n1.0,0.5\n")
        with pytest.raises(SchemaError):
            read_observables(bad)

    def test_round_trip(self, tmp_path):
        cols = read_observables(synthetic_observables(tmp_path / "obs.csv"))
        assert set(cols) >= {"t", "k", "delta", "entropy_avg"}
        assert len(cols["t"]) == 50 * 3


class TestPowerLawFit:
    def test_exact_slope(self):
        t = np.arange(1.0, 51.0)
        slope, _ = fit_power_law(t, 2.0 * t**-0.5, (10, 50))
        assert abs(slope - (-0.5)) < 1e-3

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            fit_power_law([1.0, 2.0], [1.0, 0.5], (10, 50))

    def test_intercept(self):
        t = np.arange(1.0, 31.0)
        slope, intercept = fit_power_law(t, 3.0 * t**-1.0, (1, 30))
        assert abs(np.exp(intercept) - 3.0) < 1e-10


class TestDeltaPanel:
    def test_synthetic_slope_annotation(self, tmp_path):
        csv = synthetic_observables(tmp_path / "obs.csv")
        out, slopes = render_delta_panel(csv, tmp_path / "delta.png", fit_window=(10, 50))
        assert out.exists()
        for k in (1, 2, 3):
            assert abs(slopes[k] - (-0.500)) < 1e-3

    def test_deterministic_bytes(self, tmp_path):
        csv = synthetic_observables(tmp_path / "obs.csv")
        render_delta_panel(csv, tmp_path / "a.png")
        render_delta_panel(csv, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_unknown_ensemble_rejected(self, tmp_path):
        csv = synthetic_observables(tmp_path / "obs.csv")
        with pytest.raises(SchemaError):
            render_delta_panel(csv, tmp_path / "x.png", ensemble="no_such")

    def test_empty_fit_window_errors(self, tmp_path):
        csv = synthetic_observables(tmp_path / "obs.csv", ts=np.arange(1.0, 6.0))
        with pytest.raises(ValueError):
            render_delta_panel(csv, tmp_path / "x.png", fit_window=(100, 200))


class TestEntropyPanel:
    def test_renders_with_horizontals(self, tmp_path):
        csv = synthetic_observables(tmp_path / "obs.csv")
        out = render_entropy_panel(
            csv, tmp_path / "ent.png", horizontals={"orthogonal": 1.5, "unitary": 1.62}
        )
        assert out.exists() and out.stat().st_size > 0

    def test_reads_ensemble_lines(self, tmp_path):
        csv = synthetic_observables(tmp_path / "obs.csv")
        ens = synthetic_ensembles(tmp_path / "ens.csv")
        out = render_entropy_panel(csv, tmp_path / "ent.png", ensembles_csv=ens)
        assert out.exists()

    def test_deterministic_bytes(self, tmp_path):
        csv = synthetic_observables(tmp_path / "obs.csv")
        render_entropy_panel(csv, tmp_path / "a.png", horizontals={"x": 1.5})
        render_entropy_panel(csv, tmp_path / "b.png", horizontals={"x": 1.5})
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_missing_sigma_rejected(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text(
            "# fermipe-observables v1\n"
            "ensemble,t,k,delta,delta_self,entropy_avg\n"
            "e,1.0,1,0.5,0.01,1.5\n"
        )
        with pytest.raises(SchemaError):
            render_entropy_panel(bad, tmp_path / "x.png")


class TestRealRunIntegration:
    def test_render_from_simulation_output(self, tmp_path):
        # drive the simulation CLI for a small real run, then render it
        fermipe = pytest.importorskip("fermipe")
        from fermipe.experiment import ExperimentConfig, run_pe_vs_ensemble

        cfg = ExperimentConfig.from_dict(
            {
                "seed": 4242,
                "lattice": {"L": 24, "l_a": 3},
                "initial_state": {"alpha_modulus": 0.5, "alpha_phase": 1.0},
                "time_grid": {"t_max": 5.0, "dt": 1.0},
                "sampler": {"kind": "direct", "samples": 4000, "replicas": 2},
                "ensembles": ["single_eigenstate"],
                "k_max": 2,
            }
        )
        run_pe_vs_ensemble(cfg, tmp_path / "run")
        out, slopes = render_delta_panel(
            tmp_path / "run" / "observables.csv",
            tmp_path / "delta.png",
            fit_window=(1, 5),
        )
        assert out.exists()
        assert all(np.isfinite(s) and s < 0 for s in slopes.values())
        ent = render_entropy_panel(
            tmp_path / "run" / "observables.csv",
            tmp_path / "entropy.png",
            ensembles_csv=tmp_path / "run" / "ensembles.csv",
        )
        assert ent.exists()


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        synthetic_observables(tmp_path / "observables.csv")
        synthetic_ensembles(tmp_path / "ensembles.csv")
        code = main(
            [
                "--csv", str(tmp_path / "observables.csv"),
                "--out", str(tmp_path / "figs"),
                "--fit-window", "10,50",
            ]
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "-0.500" in out
        assert (tmp_path / "figs" / "delta_panel.png").exists()
        assert (tmp_path / "figs" / "entropy_panel.png").exists()

    def test_bad_window_exit_code(self, tmp_path):
        synthetic_observables(tmp_path / "observables.csv")
        assert (
            main(["--csv", str(tmp_path / "observables.csv"), "--out", str(tmp_path),
                  "--fit-window", "oops"])
            == 2
        )

    def test_schema_error_exit_code(self, tmp_path):
        bad = tmp_path / "observables.csv"
        bad.write_text("t,delta\n1,2\n")
        assert main(["--csv", str(bad), "--out", str(tmp_path)]) == 1
