"""Render publication-style panels from fermipe observable CSV files.

The plotting layer consumes only the versioned CSV schema emitted by the
simulation CLI (``# fermipe-observables v1`` / ``# fermipe-ensembles v1``)
and never recomputes any physics.  Rendering is deterministic: repeated calls
on the same inputs produce byte-identical image files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "SchemaError",
    "FigureSpec",
    "read_observables",
    "read_ensembles",
    "fit_power_law",
    "render_delta_panel",
    "render_entropy_panel",
]

OBSERVABLES_SCHEMA = "# fermipe-observables v1"
ENSEMBLES_SCHEMA = "# fermipe-ensembles v1"

_REQUIRED_OBS = ("ensemble", "t", "k", "delta", "delta_self", "entropy_avg", "sigma")

# stripping the software tag keeps PNG bytes stable across matplotlib builds
_SAVE_OPTS = {"dpi": 150, "metadata": {"Software": None}}


class SchemaError(ValueError):
    """CSV file does not carry the expected versioned schema."""


@dataclass(frozen=True)
class FigureSpec:
    """What to render: input tables, fit window, output format."""

    observables_csv: Path
    ensembles_csv: Path | None = None
    fit_window: tuple[float, float] = (10.0, 50.0)
    fmt: str = "png"


def _read_table(path, expected_schema, required):
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(expected_schema):
        raise SchemaError(
            f"{path}: expected schema line {expected_schema!r}, got "
            f"{lines[0][:40]!r}" if lines else f"{path}: empty file"
        )
    header = lines[1].split(",")
    missing = [c for c in required if c not in header]
    if missing:
        raise SchemaError(f"{path}: missing required columns {missing}")
    rows = [line.split(",") for line in lines[2:] if line]
    cols: dict[str, np.ndarray] = {}
    for i, name in enumerate(header):
        raw = [r[i] for r in rows]
        try:
            cols[name] = np.asarray(raw, dtype=float)
        except ValueError:
            cols[name] = np.asarray(raw)
    return cols


def read_observables(path) -> dict:
    """Load an observables table, enforcing the versioned schema."""
    return _read_table(path, OBSERVABLES_SCHEMA, _REQUIRED_OBS)


def read_ensembles(path) -> dict:
    """Load the stationary ensemble summary table."""
    return _read_table(
        path, ENSEMBLES_SCHEMA, ("ensemble", "k", "entropy_avg", "entropy_sigma")
    )


def fit_power_law(t, y, window) -> tuple[float, float]:
    """Least-squares slope and intercept of log y vs log t inside the window."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    lo, hi = window
    sel = (t >= lo) & (t <= hi) & (y > 0)
    if sel.sum() < 2:
        raise ValueError(f"fit window [{lo}, {hi}] selects {sel.sum()} points; need >= 2")
    slope, intercept = np.polyfit(np.log(t[sel]), np.log(y[sel]), 1)
    return float(slope), float(intercept)


def render_delta_panel(csv_path, out_path, fit_window=(10.0, 50.0), ensemble=None):
    """Moment-distance decay: linear panel plus log-log inset with fitted slope.

    Plots the distance Delta^(k)(t) for every moment order in the table
    (dashed: the two-replica noise floor), annotates the least-squares
    power-law slope over ``fit_window``, and returns ``(out_path, slopes)``
    with one fitted slope per k.
    """
    cols = read_observables(csv_path)
    names = np.unique(cols["ensemble"])
    target = ensemble if ensemble is not None else names[0]
    if target not in names:
        raise SchemaError(f"ensemble {target!r} not present in {csv_path}")
    mask = cols["ensemble"] == target
    ks = sorted(int(k) for k in np.unique(cols["k"][mask]))

    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    inset = fig.add_axes([0.58, 0.52, 0.3, 0.34])
    slopes = {}
    for k in ks:
        sel = mask & (cols["k"] == k)
        order = np.argsort(cols["t"][sel])
        t = cols["t"][sel][order]
        d = cols["delta"][sel][order]
        d_self = cols["delta_self"][sel][order]
        slope, intercept = fit_power_law(t, d, fit_window)
        slopes[k] = slope
        (line,) = ax.plot(t, d, marker="o", ms=3, lw=1, label=f"k = {k}")
        ax.plot(t, d_self, ls="--", lw=0.8, color=line.get_color(), alpha=0.6)
        inset.loglog(t, d, marker="o", ms=2, lw=0.8, color=line.get_color())
        tw = np.linspace(max(fit_window[0], t.min()), min(fit_window[1], t.max()), 40)
        inset.loglog(tw, np.exp(intercept) * tw**slope, ls=":", color="k", lw=0.8)
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\Delta^{(k)}$")
    ax.legend(loc="lower left", fontsize=8, title=str(target))
    label = ", ".join(f"k={k}: {s:+.3f}" for k, s in slopes.items())
    inset.set_title(f"slope {label}", fontsize=7)
    inset.tick_params(labelsize=6)
    fig.savefig(out_path, **_SAVE_OPTS)
    plt.close(fig)
    return Path(out_path), slopes


def render_entropy_panel(csv_path, out_path, horizontals=None, ensembles_csv=None):
    """Entropy vs time with an MC error band and ensemble horizontal lines.

    ``horizontals`` maps labels to entropy values; alternatively pass the
    companion ensembles CSV and its entropy rows (k = 1) are drawn.  The
    ``sigma`` column (relative MC error) sets the band width.
    """
    cols = read_observables(csv_path)
    first = cols["ensemble"] == np.unique(cols["ensemble"])[0]
    sel = first & (cols["k"] == np.min(cols["k"][first]))
    order = np.argsort(cols["t"][sel])
    t = cols["t"][sel][order]
    s = cols["entropy_avg"][sel][order]
    band = cols["sigma"][sel][order] * s

    lines = dict(horizontals or {})
    if ensembles_csv is not None:
        ens = read_ensembles(ensembles_csv)
        for i in range(len(ens["ensemble"])):
            if int(ens["k"][i]) == 1:
                lines[str(ens["ensemble"][i])] = float(ens["entropy_avg"][i])

    fig, ax = plt.subplots(figsize=(6.4, 4.4))
    ax.fill_between(t, s - band, s + band, alpha=0.25, lw=0)
    ax.plot(t, s, marker="o", ms=3, lw=1, label="projected ensemble")
    styles = ["-", "--", "-.", ":"]
    for i, (label, value) in enumerate(sorted(lines.items())):
        ax.axhline(value, color="k", ls=styles[i % len(styles)], lw=1, label=label)
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\overline{S_A}$")
    ax.legend(fontsize=8)
    fig.savefig(out_path, **_SAVE_OPTS)
    plt.close(fig)
    return Path(out_path)
