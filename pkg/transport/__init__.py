from .closure import (DENSITY_FLOOR, FLUX_LIMIT, ClosureState, closure_fields, eddington_factor,
                      eddington_tensor, hg_kernel, realizability_clamp)
from .materials import MaterialField, check_hypotheses, materials_from_regions, uniform_materials
from .m1_parts import Collision, FluxDivergence, GhostPad, numerical_flux, physical_flux
from .m1_solver import (CFL_MAX, CFLError, ControlField, MomentField, MomentStep, SolverError, Trajectory,
                        check_realizable, moment_energy, solve_adjoint, solve_discrete_adjoint, solve_state,
                        step_forward, time_grid, total_mass)
from .sn_oracle import l1_discrepancy, sn_reference_solve
