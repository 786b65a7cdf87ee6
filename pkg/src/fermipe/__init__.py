"""Free-fermion covariance-matrix simulator.

Evolves Gaussian fermionic states on a tight-binding chain, performs
projective density measurements on a bath region, Monte Carlo samples the
resulting projected ensemble, and compares its higher moments against
reference Gaussian ensembles (single-eigenstate, generalized Haar with
calibrated multipliers, infinite-temperature orthogonal/unitary).
"""

from fermipe.ensembles import (
    CalibrationError,
    Multipliers,
    build_inf_temp_covariance,
    calibrate_omega,
    fourier_basis,
    gaussian_omega,
    haar_orthogonal,
    haar_unitary,
    momentum_occupations,
    number_distribution,
    sample_generalized_haar,
    sample_single_eigenstate,
)
from fermipe.gaussian import (
    DimerParams,
    ForbiddenOutcomeError,
    InvalidStateError,
    LatticeSpec,
    MeasurementRecord,
    build_dimer_covariance,
    entanglement_entropy,
    evolve,
    hopping_matrix,
    measure_region_determinant,
    measure_region_iterative,
    measure_site,
    momenta,
    occupation_spectrum,
    validate_covariance,
)
from fermipe.montecarlo import (
    MomentAccumulator,
    ObservableSeries,
    accumulate,
    frobenius_delta,
    mc_relative_error,
    pe_direct_sample,
    pe_direct_sample_batch,
    pe_metropolis_step,
    space_averaged_entropy,
)

__version__ = "0.1.0"
