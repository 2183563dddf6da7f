"""bsdelab: a numerical laboratory for BSDEs with stochastic monotonicity and
Lipschitz coefficients on weighted Lp spaces."""

from .core import (CoefficientSpec, PathBatch, TimeGrid, WeightedNormReport,
                   build_grid, check_structural_condition, norm_report,
                   restrict, weighted_sup_norm, weighted_terminal_norm,
                   weighted_z_norm)
from .linear import linear_bsde_value, supnorm_margin_study
from .sde import (DriftDiffusionSpec, GirsanovWeightPath, coarsen,
                  euler_maruyama, first_exit_time, girsanov_weights,
                  simulate_brownian)
from .solver import (BSDESolution, GeneratorSpec, SolverConfig,
                     backward_euler_pass, contraction_ratio,
                     continuous_dependence_check, horizon_decay_study,
                     picard_solve, probe_envelopes, radial_clip,
                     stability_check, truncation_study)

__version__ = "0.1.0"
