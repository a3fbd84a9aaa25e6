"""Two-phase incompressible porous-media flow on structured grids.

A locally conservative implicit-pressure / explicit-saturation scheme on
the fine grid, plus a multiscale variant that solves the velocity/pressure
system in a reduced space built from local snapshot problems, spectral
selection and residual-driven enrichment, with conservative postprocessing.
"""

from .config import ConfigError, RunConfig, bases_label, parse_bases
from .linalg import CompatibilityError, SaddleSystem, SolverError, eig_sym_gen, solve_saddle, solve_spd
from .mesh import CoarseNeighborhood, GridError, GridHierarchy, OversampledRegion
from .physics import (CapillaryModel, FluidProps, GravityModel, Medium,
                      MediumError, Sources, effective_saturation,
                      five_point_source, fractional_flow, gen_high_contrast,
                      load_medium, save_medium, total_mobility_field,
                      two_point_source)
from .pimpes import FineProblem, State, TimeGrid, Trajectory, cfl_dt, run_fine

__version__ = "0.1.0"
