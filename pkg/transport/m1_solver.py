"""
Forward and adjoint M1 solves on the uniform mesh.

The state is a (3, ny, nx) stack (psi0, psi1x, psi1y). One explicit Euler
step applies the Rusanov divergence and the collision/source terms to the
frozen previous state, then the realizability clamp.

Two adjoints are offered. solve_adjoint reuses the same step in reversed time
tau = T - t on signed fields (no clamp) with an isotropic, time-constant
source. solve_discrete_adjoint transposes the forward scheme step by step
about the stored forward states and is exact for the discrete objective.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from geometry.grid import Grid
from .closure import DENSITY_FLOOR, realizability_clamp
from .m1_parts import Collision, FluxDivergence
from .materials import MaterialField

logger = logging.getLogger(__name__)

CFL_MAX = 0.45
MAX_SNAPSHOTS = 200


class CFLError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass
class MomentField:
    u: torch.Tensor   # (3, ny, nx)

    @property
    def psi0(self) -> torch.Tensor:
        return self.u[0]

    @property
    def psi1(self) -> torch.Tensor:
        return self.u[1:3]

    @classmethod
    def zeros(cls, grid: Grid) -> 'MomentField':
        return cls(grid.zeros(3))


@dataclass
class ControlField:
    """Source moments (q0, q1x, q1y); stationary (3, ny, nx) or per step (N, 3, ny, nx)."""
    moments: torch.Tensor
    stationary: bool = True

    def at(self, n: int) -> torch.Tensor:
        return self.moments if self.stationary else self.moments[n]

    @classmethod
    def zeros(cls, grid: Grid, n_steps: Optional[int] = None) -> 'ControlField':
        if n_steps is None:
            return cls(grid.zeros(3), stationary=True)
        return cls(grid.zeros(n_steps, 3), stationary=False)

    def like(self, moments: torch.Tensor) -> 'ControlField':
        return ControlField(moments, stationary=self.stationary)

    def time_integral(self, dt: float, n_steps: int) -> torch.Tensor:
        if self.stationary:
            return self.moments * (dt * n_steps)
        return self.moments.sum(0) * dt


@dataclass
class Trajectory:
    times: torch.Tensor            # (N+1,), t_0 = 0, t_N = T
    dt: float
    integral: torch.Tensor         # left-rule time integral of every moment
    final: torch.Tensor
    snapshots: List[torch.Tensor] = field(default_factory=list)
    snapshot_steps: List[int] = field(default_factory=list)
    reversed_time: bool = False

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def snapshot(self, n: int) -> torch.Tensor:
        try:
            return self.snapshots[self.snapshot_steps.index(n)]
        except ValueError:
            raise KeyError(f"step {n} was not stored (stride {self.stride})") from None

    @property
    def stride(self) -> int:
        if len(self.snapshot_steps) < 2:
            return 0
        return self.snapshot_steps[1] - self.snapshot_steps[0]

    @classmethod
    def from_samples(cls, times: torch.Tensor, states: List[torch.Tensor]) -> 'Trajectory':
        """Trajectory from every step's state; the integral uses the left rule."""
        dt = float(times[1] - times[0])
        integral = torch.zeros_like(states[0])
        for s in states[:-1]:
            integral = integral + dt * s
        return cls(times=times, dt=dt, integral=integral, final=states[-1],
                   snapshots=list(states), snapshot_steps=list(range(len(states))))


def time_grid(grid: Grid, T: float, cfl: float = CFL_MAX) -> Tuple[int, float]:
    """Smallest step count whose uniform step meets the CFL bound."""
    if T <= 0:
        raise ValueError(f"final time must be positive, got T={T}")
    if not 0 < cfl <= CFL_MAX:
        raise CFLError(f"CFL number must lie in (0, {CFL_MAX}], got {cfl}")
    n_steps = max(1, math.ceil(T / (cfl * grid.h) * (1.0 - 1e-12)))
    return n_steps, T / n_steps


def check_realizable(u: torch.Tensor, tol: float = 1e-12) -> None:
    if not torch.isfinite(u).all():
        raise SolverError("non-finite moments after step")
    psi0 = u[0]
    if (psi0 < 0).any():
        raise SolverError(f"negative density after step (min {float(psi0.min()):.3e})")
    norm = torch.sqrt((u[1:3] ** 2).sum(0))
    if (norm > psi0 * (1.0 + tol)).any():
        raise SolverError("flux limit |psi1| <= psi0 violated after step")


def moment_energy(u: torch.Tensor, grid: Grid) -> float:
    """Sum of area*(psi0^2 + 3|psi1|^2), the moment image of the kinetic L2 norm."""
    return float(grid.cell_area * (u[0] ** 2 + 3.0 * (u[1:3] ** 2).sum(0)).sum())


def total_mass(u: torch.Tensor, grid: Grid) -> float:
    return float(grid.cell_area * u[0].sum())


class MomentStep(nn.Module):
    def __init__(self, grid: Grid, materials: MaterialField, boundary='vacuum',
                 floor=DENSITY_FLOOR, signed=False):
        super().__init__()
        self.grid = grid
        self.signed = signed
        self.divergence = FluxDivergence(grid.dx, grid.dy, boundary, floor)
        self.collision = Collision(materials.sigma_a, materials.sigma_tr)

    def forward(self, u, q, dt):
        u_new = u + dt * (self.collision(u, q) - self.divergence(u))
        if self.signed:
            return u_new
        # vacuum stays exactly zero
        psi0, psi1 = realizability_clamp(u_new[0], u_new[1:3], 0.0)
        return torch.cat([psi0.unsqueeze(0), psi1])


def _check_dt(dt: float, grid: Grid) -> None:
    bound = CFL_MAX * grid.h
    if dt > bound * (1.0 + 1e-12):
        raise CFLError(f"dt={dt:.6g} exceeds the CFL bound {bound:.6g} (CFL {CFL_MAX}, h={grid.h:.6g})")


@torch.no_grad()
def step_forward(state: MomentField, control: torch.Tensor, materials: MaterialField, dt: float,
                 grid: Grid, boundary: str = 'vacuum', floor: float = DENSITY_FLOOR) -> MomentField:
    _check_dt(dt, grid)
    check_realizable(state.u)
    u = MomentStep(grid, materials, boundary, floor)(state.u, control, dt)
    check_realizable(u)
    return MomentField(u)


def _resolve_stride(n_steps: int, stride: Optional[int]) -> int:
    if stride is None:
        return max(1, math.ceil(n_steps / MAX_SNAPSHOTS))
    return stride


@torch.no_grad()
def _integrate(step: MomentStep, source, n_steps: int, dt: float, u0: torch.Tensor,
               stride: int, check: bool) -> Trajectory:
    u = u0
    integral = torch.zeros_like(u0)
    snapshots, steps = [u0.clone()], [0]
    for n in range(n_steps):
        integral += dt * u
        u = step(u, source(n), dt)
        if check:
            check_realizable(u)
        if stride and (n + 1) % stride == 0 and n + 1 != n_steps:
            snapshots.append(u.clone())
            steps.append(n + 1)
    snapshots.append(u.clone())
    steps.append(n_steps)
    times = torch.arange(n_steps + 1, dtype=torch.float64) * dt
    return Trajectory(times=times, dt=dt, integral=integral, final=u,
                      snapshots=snapshots, snapshot_steps=steps)


def solve_state(control: ControlField, materials: MaterialField, grid: Grid, T: float, *,
                cfl: float = CFL_MAX, floor: float = DENSITY_FLOOR, boundary: str = 'vacuum',
                snapshot_stride: Optional[int] = None, initial: Optional[torch.Tensor] = None) -> Trajectory:
    """Control-to-state map: integrate from psi = 0 (or `initial`) over [0, T]."""
    n_steps, dt = time_grid(grid, T, cfl)
    _check_dt(dt, grid)
    if not control.stationary and control.moments.shape[0] != n_steps:
        raise ValueError(f"time-varying control has {control.moments.shape[0]} steps, solver needs {n_steps}")
    u0 = grid.zeros(3) if initial is None else initial.to(torch.float64).clone()
    check_realizable(u0)
    t0 = time.time()
    step = MomentStep(grid, materials, boundary, floor)
    traj = _integrate(step, control.at, n_steps, dt, u0, _resolve_stride(n_steps, snapshot_stride), True)
    logger.debug("state solve: %d steps, dt=%.4g, %.2fs", n_steps, dt, time.time() - t0)
    return traj


def solve_adjoint(source: torch.Tensor, materials: MaterialField, grid: Grid, T: float, *,
                  cfl: float = CFL_MAX, floor: float = DENSITY_FLOOR, boundary: str = 'vacuum',
                  keep_every_step: bool = False) -> Trajectory:
    """Adjoint moments in reversed time; snapshot m holds lambda at t = T - m dt.

    The first moment comes back sign-flipped to physical orientation and
    weighted by 3, its weight in the angular reconstruction of a moment
    source, so every component pairs directly with the control moments.
    """
    if not torch.isfinite(source).all():
        raise ValueError("adjoint source must be finite")
    n_steps, dt = time_grid(grid, T, cfl)
    _check_dt(dt, grid)
    q = grid.zeros(3)
    q[0] = source
    t0 = time.time()
    step = MomentStep(grid, materials, boundary, floor, signed=True)
    stride = 1 if keep_every_step else 0
    traj = _integrate(step, lambda n: q, n_steps, dt, grid.zeros(3), stride, False)
    pairing = torch.tensor([1.0, -3.0, -3.0], dtype=torch.float64, device=source.device).view(3, 1, 1)
    traj.integral = traj.integral * pairing
    traj.final = traj.final * pairing
    traj.snapshots = [s * pairing for s in traj.snapshots]
    traj.reversed_time = True
    if not torch.isfinite(traj.final).all():
        raise SolverError("non-finite adjoint moments")
    logger.debug("adjoint solve: %d steps, dt=%.4g, %.2fs", n_steps, dt, time.time() - t0)
    return traj


def _replay(step: MomentStep, control: ControlField, start: torch.Tensor, lo: int, hi: int, dt: float):
    """Forward states u_lo .. u_{hi-1} recomputed from the snapshot at step lo."""
    states = [start]
    with torch.no_grad():
        for n in range(lo, hi - 1):
            states.append(step(states[-1], control.at(n), dt))
    return states


def solve_discrete_adjoint(state: Trajectory, control: ControlField, source: torch.Tensor,
                           materials: MaterialField, grid: Grid, *, floor: float = DENSITY_FLOOR,
                           boundary: str = 'vacuum', keep_every_step: bool = False) -> Trajectory:
    """Adjoint of the explicit scheme itself, linearized about the forward states.

    With the left-rule dose D = sum_n dt psi0_n the recursion is

        mu_N = 0,   mu_n = dt r e0 + (du_{n+1}/du_n)^T mu_{n+1}

    and the control of step k is paired with (du_{k+1}/dq_k)^T mu_{k+1} / dt,
    the exact sensitivity including closure Jacobian and realizability clamp.
    States between stored snapshots are recomputed segment by segment and each
    step is differentiated with autograd, so memory stays at one segment.

    Snapshot m holds the sensitivity of step N - 1 - m (the same pairing as
    solve_adjoint); `final` holds mu_0.
    """
    if not torch.isfinite(source).all():
        raise ValueError("adjoint source must be finite")
    n_steps, dt = state.n_steps, state.dt
    if not control.stationary and control.moments.shape[0] != n_steps:
        raise ValueError(f"time-varying control has {control.moments.shape[0]} steps, trajectory has {n_steps}")
    marks = state.snapshot_steps
    if marks[0] != 0 or marks[-1] != n_steps:
        raise ValueError("state trajectory must store its first and last step")
    t0 = time.time()
    step = MomentStep(grid, materials, boundary, floor)
    drive = grid.zeros(3)
    drive[0] = dt * source
    mu = grid.zeros(3)
    integral = grid.zeros(3)
    sensitivities = [None] * n_steps
    for j in range(len(marks) - 1, 0, -1):
        lo, hi = marks[j - 1], marks[j]
        states = _replay(step, control, state.snapshots[j - 1], lo, hi, dt)
        for n in range(hi - 1, lo - 1, -1):
            u = states[n - lo].detach().requires_grad_(True)
            q = control.at(n).detach().requires_grad_(True)
            with torch.enable_grad():
                grad_u, grad_q = torch.autograd.grad(step(u, q, dt), (u, q), mu)
            nu = grad_q / dt
            integral += dt * nu
            if keep_every_step or n == n_steps - 1:
                sensitivities[n] = nu
            mu = drive + grad_u
        if not torch.isfinite(mu).all():
            raise SolverError(f"non-finite discrete adjoint below step {hi}")
    if keep_every_step:
        snapshots = [sensitivities[n_steps - 1 - m] for m in range(n_steps)] + [mu]
        steps = list(range(n_steps + 1))
    else:
        snapshots, steps = [sensitivities[n_steps - 1], mu], [0, n_steps]
    logger.debug("discrete adjoint: %d steps, %d segments, %.2fs", n_steps, len(marks) - 1, time.time() - t0)
    return Trajectory(times=state.times.clone(), dt=dt, integral=integral, final=mu,
                      snapshots=snapshots, snapshot_steps=steps, reversed_time=True)
