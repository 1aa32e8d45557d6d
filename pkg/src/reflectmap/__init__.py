"""reflectmap: two-phase indoor localization from first-order reflections.

Offline, a transmitter walking the boundary of the localization region
harvests reflector positions from (AoA, ToA) measurements; a band-limited
recovery turns the samples into a reflector map and its covering sheaf.
Online, candidate user positions are scored against the map and refined by
multi-start gradient ascent.  An analytic lower bound on the residual
ambiguity area comes with Monte Carlo verification tooling.
"""

__version__ = "0.1.0"

from .geometry import (
    C0,
    DegenerateGeometryError,
    GeometryError,
    InfeasibleMeasurementError,
    Measurement,
    MeasurementVariance,
    Point2,
    ellipse_locus,
    forward_path,
    invert_measurement,
    measurement_covariance,
)
from .envsim import (
    Environment,
    EnvironmentSpec,
    MeasurementSet,
    NoiseModel,
    boundary_test_points,
    collect_offline,
    generate_environment,
    sample_measurements,
)
from .mapbuilder import (
    GridField,
    SampleCloud,
    SheafMask,
    convergence_curve,
    covering_sheaf,
    covering_sheaf_gaussian,
    fourier_estimate,
    recover_map,
)
from .localizer import (
    LocalizationResult,
    OnlineConfig,
    Region,
    ScoreContext,
    annulus_region,
    gradient_ascent,
    localize,
    prelocalize,
    q_score,
    q_scores,
    sector_subset,
)
from .bounds import (
    AmbiguityEstimate,
    BoundInputs,
    ambiguity_lower_bound,
    bound_radius,
    log_accuracy_ratio,
    monte_carlo_ambiguity,
    ra_upper_bound,
)

__all__ = [name for name in dir() if not name.startswith("_")]
