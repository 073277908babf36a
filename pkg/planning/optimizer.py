from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import List, Optional, Tuple, Union

import pandas as pd
import torch
from tqdm import tqdm

from geometry.grid import Grid, SourceCapField
from transport.closure import FLUX_LIMIT
from transport.m1_solver import (CFL_MAX, ControlField, SolverError, Trajectory, solve_adjoint,
                                 solve_discrete_adjoint, solve_state, time_grid)
from transport.materials import MaterialField
from .objectives import (CellModel, ControlMetric, DoseMap, TrackingSpec, adjoint_source, dose, objective_value,
                         reduced_gradient)

logger = logging.getLogger(__name__)

OBJECTIVES = ('tracking', 'sf')
ADJOINTS = ('discrete', 'continuous')
STEP_RULES = ('spectral', 'fixed')
# bounds on the spectral trial step
STEP_MIN, STEP_MAX = 1e-8, 1e8


class Status(str, Enum):
    CONVERGED = 'converged'
    MAX_ITERATIONS = 'max_iterations'
    STALLED_LINE_SEARCH = 'stalled_line_search'


@dataclass
class OptimizerConfig:
    max_iter: int = 100
    tol: float = 1e-4
    step0: float = 1.0
    shrink: float = 0.5
    sigma: float = 1e-4
    max_backtracks: int = 30
    objective: str = 'tracking'
    step_rule: str = 'spectral'

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError(f"max_iter must be >= 0, got {self.max_iter}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not 0 < self.shrink < 1:
            raise ValueError(f"shrink must lie in (0, 1), got {self.shrink}")
        if not self.step0 > 0:
            raise ValueError(f"initial step must be positive, got {self.step0}")
        if not 0 < self.sigma < 1:
            raise ValueError(f"sufficient-decrease constant must lie in (0, 1), got {self.sigma}")
        if self.max_backtracks < 0:
            raise ValueError(f"max_backtracks must be >= 0, got {self.max_backtracks}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    step_diff: float      # ||q_k - q_{k-1}||_inf
    proj_grad: float      # ||q_k - P(q_k - grad)||_inf
    step: float
    backtracks: int
    wall_time: float


@dataclass
class RunHistory:
    records: List[IterationRecord] = field(default_factory=list)
    status: Status = Status.MAX_ITERATIONS

    @property
    def objectives(self) -> List[float]:
        return [r.objective for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records])


@dataclass
class PlanningProblem:
    grid: Grid
    materials: MaterialField
    caps: SourceCapField
    objective: Union[TrackingSpec, CellModel]
    T: float
    cfl: float = CFL_MAX
    boundary: str = 'vacuum'
    stationary: bool = True
    snapshot_stride: Optional[int] = None
    adjoint: str = 'discrete'

    def __post_init__(self):
        if self.adjoint not in ADJOINTS:
            raise ValueError(f"adjoint must be one of {ADJOINTS}, got {self.adjoint!r}")

    @property
    def time_steps(self) -> Tuple[int, float]:
        return time_grid(self.grid, self.T, self.cfl)

    @property
    def metric(self) -> ControlMetric:
        n_steps, dt = self.time_steps
        return ControlMetric(self.grid, dt, n_steps, self.stationary)

    @property
    def c2(self) -> float:
        return self.objective.c2

    def zero_control(self) -> ControlField:
        return ControlField.zeros(self.grid, None if self.stationary else self.time_steps[0])


def project_control(raw: Union[torch.Tensor, ControlField], caps: SourceCapField) -> ControlField:
    """Clamp q0 into [0, U], then shrink q1 into |q1| <= (1 - 1e-8) q0."""
    stationary = raw.stationary if isinstance(raw, ControlField) else raw.dim() == 3
    m = raw.moments if isinstance(raw, ControlField) else raw
    q0 = torch.minimum(m[..., 0, :, :].clamp_min(0.0), caps.cap)
    q1 = m[..., 1:3, :, :]
    norm = torch.sqrt((q1 ** 2).sum(-3))
    bound = FLUX_LIMIT * q0
    scale = torch.where(norm > bound, bound / norm.clamp_min(1e-300), torch.ones_like(norm))
    q1 = q1 * scale.unsqueeze(-3)
    return ControlField(torch.cat([q0.unsqueeze(-3), q1], dim=-3), stationary=stationary)


def check_admissible(control: ControlField, caps: SourceCapField, tol: float = 1e-12) -> None:
    m = control.moments
    q0 = m[..., 0, :, :]
    if (q0 < 0).any() or (q0 > caps.cap * (1 + tol)).any():
        raise SolverError("control density left [0, U]")
    if (torch.sqrt((m[..., 1:3, :, :] ** 2).sum(-3)) > q0 * (1 + tol)).any():
        raise SolverError("control flux exceeds its density")


def evaluate(problem: PlanningProblem, control: ControlField) -> Tuple[float, Trajectory, DoseMap]:
    traj = solve_state(control, problem.materials, problem.grid, problem.T, cfl=problem.cfl,
                       boundary=problem.boundary, snapshot_stride=problem.snapshot_stride)
    dose_map = dose(traj)
    return objective_value(problem.objective, dose_map, control, problem.metric), traj, dose_map


def gradient(problem: PlanningProblem, control: ControlField, traj: Trajectory, dose_map: DoseMap) -> torch.Tensor:
    """Reduced gradient at `control`, whose state trajectory is `traj`."""
    r = adjoint_source(problem.objective, dose_map)
    if problem.adjoint == 'discrete':
        lam = solve_discrete_adjoint(traj, control, r, problem.materials, problem.grid,
                                     boundary=problem.boundary, keep_every_step=not control.stationary)
    else:
        lam = solve_adjoint(r, problem.materials, problem.grid, problem.T, cfl=problem.cfl,
                            boundary=problem.boundary, keep_every_step=not control.stationary)
    return reduced_gradient(control, lam, problem.c2)


def spectral_step(metric: ControlMetric, dq: torch.Tensor, dg: torch.Tensor, fallback: float) -> float:
    """Barzilai-Borwein step <dq, dq> / <dq, dg>; `fallback` without positive curvature."""
    curvature = metric.inner(dq, dg)
    if not curvature > 0:
        return fallback
    return min(max(metric.inner(dq, dq) / curvature, STEP_MIN), STEP_MAX)


def save_checkpoint(path: str, control: ControlField, iteration: int, objective: float) -> None:
    torch.save({'iteration': iteration, 'objective': objective,
                'stationary': control.stationary, 'moments': control.moments.cpu()}, path)


def load_checkpoint(path: str, device='cpu') -> Tuple[ControlField, int]:
    state = torch.load(path, map_location=device)
    return ControlField(state['moments'].to(torch.float64), stationary=state['stationary']), int(state['iteration'])


def _append_row(path: str, record: IterationRecord) -> None:
    pd.DataFrame([asdict(record)]).to_csv(path, mode='a', header=not os.path.exists(path), index=False)


def optimize(problem: PlanningProblem, config: OptimizerConfig, *, initial: Optional[ControlField] = None,
             start_iteration: int = 0, log_path: Optional[str] = None, writer=None,
             checkpoint_dir: Optional[str] = None, checkpoint_freq: int = 0,
             progress: bool = True) -> Tuple[ControlField, RunHistory, Trajectory]:
    """Projected gradient descent with projected Armijo backtracking.

    With the spectral rule each line search starts from the Barzilai-Borwein
    step of the last accepted move; the fixed rule always starts from step0.

    Returns the final control, the iteration history and the state
    trajectory of the final control.
    """
    q = project_control(initial if initial is not None else problem.zero_control(), problem.caps)
    if q.stationary != problem.stationary:
        raise ValueError("initial control does not match the problem's control mode")
    metric = problem.metric
    history = RunHistory()
    t_start = time.time()

    J, traj, dose_map = evaluate(problem, q)
    diff_inf, step, backtracks = math.nan, 0.0, 0
    q_prev = g_prev = None
    k = start_iteration
    iterator = tqdm(total=config.max_iter, ncols=70, disable=not progress)
    while True:
        check_admissible(q, problem.caps)
        g = gradient(problem, q, traj, dose_map)
        pg = float((q.moments - project_control(q.like(q.moments - g), problem.caps).moments).abs().max())
        record = IterationRecord(iteration=k, objective=J, step_diff=diff_inf, proj_grad=pg, step=step,
                                 backtracks=backtracks, wall_time=time.time() - t_start)
        history.records.append(record)
        if log_path is not None:
            _append_row(log_path, record)
        if writer is not None:
            writer.add_scalar('info/objective', J, k)
            writer.add_scalar('info/proj_grad', pg, k)
            writer.add_scalar('info/step', step, k)
        logger.info('iteration %d : objective : %f, proj_grad : %e, step : %e', k, J, pg, step)

        if diff_inf < config.tol and pg < config.tol:
            history.status = Status.CONVERGED
            break
        if k - start_iteration >= config.max_iter:
            history.status = Status.MAX_ITERATIONS
            break

        s = config.step0
        if config.step_rule == 'spectral' and q_prev is not None:
            s = spectral_step(metric, q.moments - q_prev, g - g_prev, config.step0)
        accepted = None
        for backtracks in range(config.max_backtracks + 1):
            q_new = project_control(q.like(q.moments - s * g), problem.caps)
            diff = q_new.moments - q.moments
            d2 = metric.inner(diff, diff)
            if d2 == 0.0:
                accepted = (q_new, J, traj, dose_map)
                break
            J_new, traj_new, dose_new = evaluate(problem, q_new)
            if J_new <= J - config.sigma / s * d2:
                accepted = (q_new, J_new, traj_new, dose_new)
                break
            s *= config.shrink
        if accepted is None:
            logger.warning('line search stalled after %d backtracks at iteration %d', config.max_backtracks, k)
            history.status = Status.STALLED_LINE_SEARCH
            break

        diff_inf = float((accepted[0].moments - q.moments).abs().max())
        q_prev, g_prev = q.moments, g
        q, J, traj, dose_map = accepted
        step = s
        k += 1
        iterator.update(1)
        if checkpoint_dir is not None and checkpoint_freq > 0 and k % checkpoint_freq == 0:
            save_checkpoint(os.path.join(checkpoint_dir, 'control_latest.pth'), q, k, J)
            save_checkpoint(os.path.join(checkpoint_dir, f'control_iter_{k}.pth'), q, k, J)
    iterator.close()
    logger.info('optimizer finished: %s after %d iterations, objective %f', history.status.value,
                k - start_iteration, J)
    return q, history, traj
