"""
Dose operator, tracking and surviving-fraction objectives, adjoint sources and
the reduced gradient.

Controls live in the space with inner product

    <a, b> = sum_steps dt * sum_cells area * (a0 b0 + a1 . b1)

(for a stationary control the step sum collapses to a factor T). Both
objectives carry the penalty (c2/2) <q, q>; gradients returned here are Riesz
representatives in that inner product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import singledispatch
from typing import Sequence, Union

import torch

from geometry.grid import Grid, Region, RegionMap
from transport.m1_solver import ControlField, Trajectory

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class DoseMap:
    values: torch.Tensor   # (ny, nx)

    def mean(self, mask: torch.Tensor) -> float:
        if not mask.any():
            return float('nan')
        return float(self.values[mask].mean())


@dataclass(frozen=True)
class ControlMetric:
    grid: Grid
    dt: float
    n_steps: int
    stationary: bool = True

    @property
    def weight(self) -> float:
        w = self.grid.cell_area * self.dt
        return w * self.n_steps if self.stationary else w

    def inner(self, a: torch.Tensor, b: torch.Tensor) -> float:
        return self.weight * float((a * b).sum())

    def norm(self, a: torch.Tensor) -> float:
        return math.sqrt(self.inner(a, a))


@dataclass(frozen=True)
class TrackingSpec:
    target: torch.Tensor   # prescribed dose, (ny, nx)
    c1: torch.Tensor       # (ny, nx)
    c2: float

    def __post_init__(self):
        if (self.c1 < 0).any():
            raise ValueError("tracking weights c1 must be non-negative")
        if not self.c2 > 0:
            raise ValueError(f"control weight c2 must be positive, got {self.c2}")


@dataclass(frozen=True)
class CellModel:
    densities: torch.Tensor     # (k, ny, nx); index 0 is the tumor population
    alpha: Sequence[float]
    beta: Sequence[float]
    a: Sequence[float]
    c2: float

    def __post_init__(self):
        k = self.densities.shape[0]
        if not (len(self.alpha) == len(self.beta) == len(self.a) == k):
            raise ValueError(f"need one alpha, beta and a per cell type ({k}), got "
                             f"{len(self.alpha)}, {len(self.beta)}, {len(self.a)}")
        if (self.densities < 0).any():
            raise ValueError("cell densities must be non-negative")
        if not torch.allclose(self.densities.sum(0), torch.ones_like(self.densities[0]), atol=1e-12):
            raise ValueError("cell densities must sum to one in every cell")
        for name, values in (('alpha', self.alpha), ('beta', self.beta), ('a', self.a)):
            if any(not v > 0 for v in values):
                raise ValueError(f"LQ parameter {name} must be positive, got {list(values)}")
        if not self.c2 > 0:
            raise ValueError(f"control weight c2 must be positive, got {self.c2}")

    def resident(self) -> torch.Tensor:
        """Index of the dominant cell type per cell."""
        return self.densities.argmax(0)


def tracking_spec(regions: RegionMap, weights: Sequence[float], dose_level: float, c2: float) -> TrackingSpec:
    """c1 from per-region weights (tumor, risk, normal); target dose_level on the tumor."""
    ind = regions.indicators()
    c1 = sum(float(w) * ind[int(r)] for r, w in zip(Region, weights))
    return TrackingSpec(target=dose_level * ind[int(Region.TUMOR)], c1=c1, c2=float(c2))


def cell_model(regions: RegionMap, alpha: Sequence[float], beta: Sequence[float],
               a: Sequence[float], c2: float) -> CellModel:
    return CellModel(densities=regions.indicators(), alpha=tuple(alpha), beta=tuple(beta),
                     a=tuple(a), c2=float(c2))


def dose(traj: Trajectory) -> DoseMap:
    return DoseMap(traj.integral[0].clone())


def control_penalty(control: ControlField, metric: ControlMetric, c2: float) -> float:
    return 0.5 * c2 * metric.inner(control.moments, control.moments)


def j_tracking(dose_map: DoseMap, control: ControlField, spec: TrackingSpec, metric: ControlMetric) -> float:
    misfit = metric.grid.cell_area * float((spec.c1 * (dose_map.values - spec.target) ** 2).sum())
    return misfit + control_penalty(control, metric, spec.c2)


def surviving_fraction(D: Number, alpha: Number, beta: Number) -> Number:
    """LQ survival exp(-alpha D - beta D^2)."""
    D_t = torch.as_tensor(D, dtype=torch.float64)
    if (D_t < 0).any():
        raise ValueError(f"dose must be non-negative, got min {float(D_t.min()):.6g}")
    sf = torch.exp(-alpha * D_t - beta * D_t ** 2)
    if not isinstance(D, torch.Tensor):
        return float(sf)
    return sf


def _sf_integrand(D: torch.Tensor, model: CellModel) -> torch.Tensor:
    out = model.a[0] * model.densities[0] * surviving_fraction(D, model.alpha[0], model.beta[0])
    for i in range(1, model.densities.shape[0]):
        out = out + model.a[i] * model.densities[i] * (1.0 - surviving_fraction(D, model.alpha[i], model.beta[i]))
    return out


def j_sf(dose_map: DoseMap, control: ControlField, model: CellModel, metric: ControlMetric) -> float:
    survival = metric.grid.cell_area * float(_sf_integrand(dose_map.values, model).sum())
    return survival + control_penalty(control, metric, model.c2)


def adjoint_source_tracking(dose_map: DoseMap, spec: TrackingSpec) -> torch.Tensor:
    return 2.0 * spec.c1 * (dose_map.values - spec.target)


def adjoint_source_sf(dose_map: DoseMap, model: CellModel) -> torch.Tensor:
    """d/dD of the J_SF integrand."""
    D = dose_map.values

    def dsf(i):
        return (-model.alpha[i] - 2.0 * model.beta[i] * D) * surviving_fraction(D, model.alpha[i], model.beta[i])

    r = model.a[0] * model.densities[0] * dsf(0)
    for i in range(1, model.densities.shape[0]):
        r = r - model.a[i] * model.densities[i] * dsf(i)
    return r


def survival_map(dose_map: DoseMap, model: CellModel) -> torch.Tensor:
    """Per-cell SF under the resident cell type's LQ parameters."""
    idx = model.resident()
    alpha = torch.tensor(model.alpha, dtype=torch.float64, device=idx.device)[idx]
    beta = torch.tensor(model.beta, dtype=torch.float64, device=idx.device)[idx]
    return surviving_fraction(dose_map.values, alpha, beta)


def reduced_gradient(control: ControlField, adjoint: Trajectory, c2: float) -> torch.Tensor:
    """Gradient (lambda0 + c2 q0, lambda1 + c2 q1) shaped like control.moments.

    `adjoint` carries the control sensitivity already paired with the control
    moments (either adjoint solver). Stationary controls take its time average;
    time-varying controls pair step k with reversed step N - 1 - k, which
    needs a trajectory kept at every step.
    """
    if control.stationary:
        lam = adjoint.integral / adjoint.T
    else:
        N = adjoint.n_steps
        if control.moments.shape[0] != N:
            raise ValueError(f"control has {control.moments.shape[0]} steps, adjoint has {N}")
        lam = torch.stack([adjoint.snapshot(N - 1 - k) for k in range(N)])
    return lam + c2 * control.moments


@singledispatch
def objective_value(spec, dose_map: DoseMap, control: ControlField, metric: ControlMetric) -> float:
    raise TypeError(f"no objective for {type(spec).__name__}")


@objective_value.register
def _(spec: TrackingSpec, dose_map, control, metric):
    return j_tracking(dose_map, control, spec, metric)


@objective_value.register
def _(spec: CellModel, dose_map, control, metric):
    return j_sf(dose_map, control, spec, metric)


@singledispatch
def adjoint_source(spec, dose_map: DoseMap) -> torch.Tensor:
    raise TypeError(f"no adjoint source for {type(spec).__name__}")


@adjoint_source.register
def _(spec: TrackingSpec, dose_map):
    return adjoint_source_tracking(dose_map, spec)


@adjoint_source.register
def _(spec: CellModel, dose_map):
    return adjoint_source_sf(dose_map, spec)
