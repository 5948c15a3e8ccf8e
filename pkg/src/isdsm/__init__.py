"""Monte Carlo laboratory for purely atomic immigration superprocesses with
dependent spatial motion: exact branching excursions, shared-noise flows,
interactive thinning, occupation-density fields, and scaling-limit checks."""

from .measures import (AtomicMeasure, ConfigurationError, CorrelationKernel,
                       TemperWeight, distance_p, dominating_constant, gaussian_h,
                       heat_semigroup, kernel_from_config, pair, phi_p, rho_from_h)
from .branching import (Excursion, FellerParams, excursion_rate, excursion_sample,
                        excursion_values, feller_path, feller_step)
from .flow import (FlowState, RcbmState, correlated_increments, flow_step,
                   rcbm_spawn, rcbm_step, spawn)
from .superprocess import (CandidateCloud, ClusterSet, ImmigrationRate,
                           NonConvergenceError, SpatialMeasure, SuperprocessPath,
                           build_fixed_rate, build_interactive, build_limit_path,
                           empty_clusters, sample_candidates, sample_initial_clusters,
                           scale_path)
from .localtime import (LocalTimeField, brownian_local_time, default_bandwidth,
                        holder_exponents, limit_local_time, local_time_field,
                        occupation_mass, occupation_residuals, pairing_series)
from .verify import (GronwallBound, TestFunction, VerificationReport, fn_bump,
                     fn_one, fn_phi_p, martingale_residual, summary_table)

__version__ = "0.1.0"
