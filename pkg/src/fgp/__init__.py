"""Spectral lattice Gaussian processes: stationary and mixture models on FFT grids."""

from .harmonic import (
    SpectralVector,
    forward_transform,
    inverse_transform,
    orthogonality_check,
    project_offsite,
    read_lattice_field,
    write_lattice_field,
)
from .nonstationary import ComponentBank, MixtureState, NSFitConfig, ns_covariance, ns_fit, ns_gibbs_sweep, ns_predict
from .simulate import CvReport, SimSpec, cross_validate, scaling_probe, simulate_pintore_ns, simulate_stationary
from .spectral import (
    FrequencyLattice,
    SpectralDiagonal,
    SpectralModel,
    build_frequency_lattice,
    covariance_from_spectrum,
    dense_covariance_oracle,
    spectral_density,
    truncate_spectrum,
)
from .stationary import (
    EmbeddedData,
    EmbeddingError,
    FitConfig,
    ObservationSet,
    PosteriorSummary,
    Priors,
    StationaryChainState,
    augmented_log_likelihood,
    conditional_field_draw,
    embed,
    fit,
    gibbs_sweep,
    marginal_mode_start,
    predict,
)

__all__ = [name for name in dir() if not name.startswith("_")]
