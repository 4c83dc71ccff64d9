"""Prescribed-mean-curvature graph solver on Riemannian chart domains."""

from . import discretization, geometry, oracles, problems, solver
from .discretization import (Field, Grid2D, PeriodicGrid2D, RadialGrid,
                             assemble_jacobian, assemble_residual, make_field,
                             radial_reduce)
from .geometry import (boundary_mean_curvature, covariant_divergence,
                       euclidean, euclidean_polar, graph_geometry,
                       ricci_min_estimate, slice_mean_curvature)
from .oracles import (barrier_constants, barrier_kappa, flux_analysis,
                      q_field, spherical_cap_oracle, theta_identity_residual)
from .problems import (PMCProblem, annulus, box_periodic, constant_psi,
                       counterexample_problem, disk, make_cmc,
                       make_conformal_minimal, make_jang,
                       ncf_sufficient_check, polar_cap,
                       serrin_condition_check, slab)
from .solver import (Schedule, SolveReport, apriori_bounds, barrier_check,
                     comparison_check, continuation, detect_blow_up_sets,
                     gradient_monitor, newton_solve)

__version__ = "0.1.0"
