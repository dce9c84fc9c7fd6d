"""Numerical laboratory for the inverse boundary value problem of Lap^2 + q with Navier data."""

__version__ = "0.1.0"

from .cgo import CGODirections, CGOSolution, ContractionError, build_cgo, make_wavevectors, solve_remainder
from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .dtn import DtNDifference, DtNMap, DtNMatrix, assemble_dtn, dtn_operator_norm, reciprocity_defect
from .forward import (
    BiharmonicSolution,
    EigenvalueCollision,
    NavierData,
    NavierSolver,
    NeumannData,
    greens_identity_residual,
    neumann_trace,
    solve_navier,
)
from .grid import (
    BoundaryPartition,
    DomainSpec,
    Grid,
    Potential,
    boundary_sobolev_norm,
    constant,
    gaussian_bump,
    h_minus1_norm,
    semiclassical_norm,
    sine_product,
)
from .recon_full import (
    FourierSample,
    LowPassInversion,
    StabilityRecord,
    extract_fourier_full,
    reconstruct_lowpass,
    schedule_full,
    stability_experiment_full,
)
from .recon_partial import (
    ConeSpec,
    VessellaExtension,
    cone_sampling,
    extract_fourier_partial,
    identifiability_check,
    schedule_partial,
    stability_experiment_partial,
    vessella_extend,
)
