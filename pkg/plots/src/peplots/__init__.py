"""Figure rendering for fermipe simulation outputs."""

from peplots.figures import (
    FigureSpec,
    SchemaError,
    fit_power_law,
    read_ensembles,
    read_observables,
    render_delta_panel,
    render_entropy_panel,
)

__version__ = "0.1.0"
