"""segflow: segment-process simulation and limit-theorem diagnostics.

Simulates path-dependent stochastic differential equations as segment-valued
Markov processes and empirically verifies their long-time statistics:
exponential mixing under a quasi-metric transport distance, the law of large
numbers for time averages, the central limit theorem with its variance
constant, and the law of the iterated logarithm for integer-time sums.
"""

__version__ = "0.1.0"

from .assumptions import (
    check_dissipativity,
    check_ellipticity,
    gaussian_pair_sampler,
    gaussian_segment_sampler,
)
from .errors import (
    CapacityError,
    ConfigError,
    ConfigurationError,
    EllipticityViolationError,
    EstimatorInconsistencyError,
    MetricError,
    NumericBlowupError,
    SegflowError,
    ShapeError,
)
from .ergodic import (
    EnsembleConfig,
    RateFit,
    ergodicity_curve,
    exp_moment_probe,
    moment_curve,
    sample_invariant,
)
from .limits import (
    CenteredObservable,
    CorrectorConfig,
    DiscreteCorrectorConfig,
    additive_functional,
    cameron_martin_norm,
    clt_statistic,
    clt_test,
    corrector,
    discrete_corrector,
    lil_run,
    martingale_increments,
    phi_f,
    phi_hat_f,
    quadratic_variation,
    qv_lln_check,
    rescaled_path_nodes,
    slln_pathwise,
    slln_variance_decay,
    variance_D,
    variance_D_discrete,
    vph_residual,
)
from .metric import (
    EmpiricalMeasure,
    MetricParams,
    Observable,
    lip_norm_lower_bound,
    rho,
    wasserstein,
)
from .registry import build_model, build_observable, registry_list
from .rng import RngStream, derive_seed
from .segments import (
    ModelSpec,
    Segment,
    Trajectory,
    constant_segment,
    segment_at,
    simulate,
    sup_norm,
)
from .semigroup import (
    ExpDecayKernel,
    GeometricKernel,
    IidChain,
    IidKernel,
    MonteCarloSemigroup,
    SdeChain,
    kernel_registry,
)
