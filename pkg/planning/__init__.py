from .objectives import (CellModel, ControlMetric, DoseMap, TrackingSpec, adjoint_source, adjoint_source_sf,
                         adjoint_source_tracking, cell_model, control_penalty, dose, j_sf, j_tracking,
                         objective_value, reduced_gradient, survival_map, surviving_fraction, tracking_spec)
from .optimizer import (IterationRecord, OptimizerConfig, PlanningProblem, RunHistory, Status, evaluate,
                        gradient, optimize, project_control, spectral_step)
