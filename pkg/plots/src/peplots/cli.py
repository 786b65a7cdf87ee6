"""plot-figs: render the decay and entropy panels from a results directory."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from peplots.figures import SchemaError, render_delta_panel, render_entropy_panel


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="plot-figs",
        description="Render moment-distance and entropy panels from observables CSV",
    )
    parser.add_argument("--csv", required=True, help="observables.csv from a simulation run")
    parser.add_argument("--out", required=True, help="output directory for the images")
    parser.add_argument(
        "--fit-window",
        default="10,50",
        help="power-law fit window as 'a,b' (default 10,50)",
    )
    parser.add_argument(
        "--ensembles-csv",
        default=None,
        help="companion ensembles.csv for horizontal entropy lines "
        "(default: look next to --csv)",
    )
    parser.add_argument("--format", default="png", choices=("png", "svg"))
    args = parser.parse_args(argv)

    try:
        a, b = (float(x) for x in args.fit_window.split(","))
    except ValueError:
        print(f"bad --fit-window {args.fit_window!r}; expected 'a,b'", file=sys.stderr)
        return 2
    csv_path = Path(args.csv)
    ens_csv = args.ensembles_csv
    if ens_csv is None:
        candidate = csv_path.parent / "ensembles.csv"
        ens_csv = candidate if candidate.exists() else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        _, slopes = render_delta_panel(
            csv_path, out / f"delta_panel.{args.format}", fit_window=(a, b)
        )
        render_entropy_panel(
            csv_path, out / f"entropy_panel.{args.format}", ensembles_csv=ens_csv
        )
    except (SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    label = ", ".join(f"k={k}: {s:+.3f}" for k, s in slopes.items())
    print(f"wrote {out}/delta_panel.{args.format} (fitted slopes {label})")
    print(f"wrote {out}/entropy_panel.{args.format}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
