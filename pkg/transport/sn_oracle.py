"""
Discrete-ordinates reference solver used to check the M1 closure.

Directions are n_angles equally spaced azimuths times a Gauss-Legendre set
of polar cosines, so each ordinate is a 3-D unit vector whose in-plane part
drives the transport. With n_polar = 0 the set is the n_angles directions on
the unit circle alone. Scattering uses the Henyey-Greenstein kernel on the
ordinate cosines, renormalized so every incoming direction redistributes
exactly its own particles.
"""

from __future__ import annotations

import logging
import math
import time
from typing import Tuple

import numpy as np
import torch
import torch.nn.functional as F

from geometry.grid import Grid
from .closure import hg_kernel
from .m1_solver import ControlField, SolverError, time_grid
from .materials import MaterialField

logger = logging.getLogger(__name__)

SN_ANGLES = (8, 16, 32)
MAX_CELLS = 1600


def ordinates(n_angles: int, n_polar: int = 4) -> Tuple[torch.Tensor, torch.Tensor]:
    """Unit directions (M, 3) and quadrature weights (M,) summing to 4 pi."""
    if n_polar < 0:
        raise ValueError(f"n_polar must be >= 0, got {n_polar}")
    if n_polar == 0:
        phi = 2.0 * math.pi * (np.arange(n_angles) + 0.5) / n_angles
        omega = np.stack([np.cos(phi), np.sin(phi), np.zeros(n_angles)], axis=-1)
        return torch.from_numpy(omega), torch.full((n_angles,), 4.0 * math.pi / n_angles, dtype=torch.float64)
    mu, w_mu = np.polynomial.legendre.leggauss(n_polar)
    phi = 2.0 * math.pi * (np.arange(n_angles) + 0.5) / n_angles
    MU, PHI = np.meshgrid(mu, phi, indexing='ij')
    sin_t = np.sqrt(1.0 - MU ** 2)
    omega = np.stack([sin_t * np.cos(PHI), sin_t * np.sin(PHI), MU], axis=-1).reshape(-1, 3)
    weights = (w_mu[:, None] * np.full(n_angles, 2.0 * math.pi / n_angles)[None, :]).reshape(-1)
    return torch.from_numpy(omega), torch.from_numpy(weights)


def scattering_matrix(omega: torch.Tensor, weights: torch.Tensor, g: float) -> torch.Tensor:
    """G with (G psi)_i the in-scatter density into ordinate i.

    P[j, i] is the probability that a particle moving along j leaves along i;
    each row of P sums to one, which makes the sum of weights * (G psi)
    equal to the sum of weights * psi.
    """
    cosines = (omega @ omega.T).clamp(-1.0, 1.0)
    P = hg_kernel(g, cosines) * weights[None, :]
    P = P / P.sum(1, keepdim=True)
    return (weights[:, None] * P).T / weights[:, None]


def _upwind_divergence(psi: torch.Tensor, vx: torch.Tensor, vy: torch.Tensor, dx: float, dy: float) -> torch.Tensor:
    up = F.pad(psi, (1, 1, 1, 1), mode='constant', value=0.0)
    vxp, vxm = vx.clamp_min(0).view(-1, 1, 1), vx.clamp_max(0).view(-1, 1, 1)
    vyp, vym = vy.clamp_min(0).view(-1, 1, 1), vy.clamp_max(0).view(-1, 1, 1)
    ux = up[:, 1:-1, :]
    flux_x = vxp * ux[..., :-1] + vxm * ux[..., 1:]
    uy = up[:, :, 1:-1]
    flux_y = vyp * uy[:, :-1, :] + vym * uy[:, 1:, :]
    return (flux_x[..., 1:] - flux_x[..., :-1]) / dx + (flux_y[:, 1:, :] - flux_y[:, :-1, :]) / dy


def _kinetic_source(q: torch.Tensor, omega: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # first-order angular reconstruction with the same moments as q; k = 3 on the sphere, 2 on the circle
    k = float(weights.sum() / (weights * omega[:, 0] ** 2).sum())
    return (q[0].unsqueeze(0)
            + k * (omega[:, 0].view(-1, 1, 1) * q[1] + omega[:, 1].view(-1, 1, 1) * q[2])) / (4.0 * math.pi)


@torch.no_grad()
def sn_reference_solve(control: ControlField, materials: MaterialField, grid: Grid, T: float,
                       n_angles: int = 16, *, n_polar: int = 4, cfl: float = 0.45,
                       allow_large: bool = False) -> torch.Tensor:
    """Time integral of (psi0, psi1x, psi1y) from an explicit upwind S_N solve."""
    if n_angles not in SN_ANGLES:
        raise ValueError(f"n_angles must be one of {SN_ANGLES}, got {n_angles}")
    if grid.nx * grid.ny > MAX_CELLS and not allow_large:
        raise SolverError(f"S_N oracle limited to {MAX_CELLS} cells (40x40), got {grid.nx}x{grid.ny}; "
                          "pass allow_large to override")
    n_steps, dt = time_grid(grid, T, cfl)
    if not control.stationary and control.moments.shape[0] != n_steps:
        raise ValueError(f"time-varying control has {control.moments.shape[0]} steps, solver needs {n_steps}")

    omega, weights = ordinates(n_angles, n_polar)
    omega, weights = omega.to(grid.device), weights.to(grid.device)
    G = scattering_matrix(omega, weights, materials.g)
    M = omega.shape[0]
    vx, vy = omega[:, 0], omega[:, 1]
    sigma_t, sigma_s = materials.sigma_t.unsqueeze(0), materials.sigma_s.unsqueeze(0)

    psi = torch.zeros(M, grid.ny, grid.nx, dtype=torch.float64, device=grid.device)
    acc = torch.zeros_like(psi)
    t0 = time.time()
    for n in range(n_steps):
        acc += dt * psi
        scatter = (G @ psi.reshape(M, -1)).reshape(psi.shape)
        psi = psi + dt * (-_upwind_divergence(psi, vx, vy, grid.dx, grid.dy)
                          - sigma_t * psi + sigma_s * scatter
                          + _kinetic_source(control.at(n), omega, weights))
        if not torch.isfinite(psi).all():
            raise SolverError(f"non-finite ordinates at step {n + 1}")
    w = weights.view(-1, 1, 1)
    integral = torch.stack([(w * acc).sum(0),
                            (w * vx.view(-1, 1, 1) * acc).sum(0),
                            (w * vy.view(-1, 1, 1) * acc).sum(0)])
    logger.debug("S_N solve: %d ordinates, %d steps, %.2fs", M, n_steps, time.time() - t0)
    return integral


def l1_discrepancy(field: torch.Tensor, reference: torch.Tensor) -> float:
    """Relative L1 distance sum|field - reference| / sum|reference|."""
    denom = float(reference.abs().sum())
    if denom == 0.0:
        return float((field - reference).abs().sum())
    return float((field - reference).abs().sum()) / denom
