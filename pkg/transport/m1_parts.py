""" Parts of the M1 finite-volume step """

import torch
import torch.nn as nn
import torch.nn.functional as F

from .closure import DENSITY_FLOOR, closure_fields

BOUNDARIES = ('vacuum', 'periodic')


def _axis(normal) -> int:
    if normal in (0, 'x', '+x'):
        return 0
    if normal in (1, 'y', '+y'):
        return 1
    raise ValueError(f"normal must be one of 'x', 'y', got {normal!r}")


def physical_flux(u, normal, floor=DENSITY_FLOOR):
    """F(u).n for u = (psi0, psi1x, psi1y) stacked on the leading axis."""
    P = closure_fields(u, floor)
    if _axis(normal) == 0:
        return torch.stack([u[1], P[0], P[1]])
    return torch.stack([u[2], P[1], P[2]])


def rusanov(u_l, u_r, f_l, f_r):
    # wave speed 1 bounds every M1 eigenvalue
    return 0.5 * (f_l + f_r) - 0.5 * (u_r - u_l)


def numerical_flux(left, right, normal, floor=DENSITY_FLOOR):
    left = torch.as_tensor(left, dtype=torch.float64)
    right = torch.as_tensor(right, dtype=torch.float64)
    return rusanov(left, right, physical_flux(left, normal, floor), physical_flux(right, normal, floor))


class GhostPad(nn.Module):
    """One ghost ring: vacuum exterior (zero inflow) or periodic wrap"""

    def __init__(self, boundary='vacuum'):
        super().__init__()
        if boundary not in BOUNDARIES:
            raise ValueError(f"boundary must be one of {BOUNDARIES}, got {boundary!r}")
        self.boundary = boundary

    def forward(self, u):
        if self.boundary == 'periodic':
            return F.pad(u.unsqueeze(0), (1, 1, 1, 1), mode='circular').squeeze(0)
        return F.pad(u, (1, 1, 1, 1), mode='constant', value=0.0)


class FluxDivergence(nn.Module):
    """div F(u) with Rusanov interface fluxes on a uniform mesh"""

    def __init__(self, dx, dy, boundary='vacuum', floor=DENSITY_FLOOR):
        super().__init__()
        self.dx = dx
        self.dy = dy
        self.floor = floor
        self.pad = GhostPad(boundary)

    def forward(self, u):
        up = self.pad(u)
        # rows are y, columns are x
        ux = up[:, 1:-1, :]
        fx = physical_flux(ux, 'x', self.floor)
        flux_x = rusanov(ux[..., :-1], ux[..., 1:], fx[..., :-1], fx[..., 1:])
        uy = up[:, :, 1:-1]
        fy = physical_flux(uy, 'y', self.floor)
        flux_y = rusanov(uy[:, :-1, :], uy[:, 1:, :], fy[:, :-1, :], fy[:, 1:, :])
        return ((flux_x[..., 1:] - flux_x[..., :-1]) / self.dx
                + (flux_y[:, 1:, :] - flux_y[:, :-1, :]) / self.dy)


class Collision(nn.Module):
    """Absorption, scattering removal and source terms of the moment system"""

    def __init__(self, sigma_a, sigma_tr):
        super().__init__()
        self.register_buffer('sigma_a', sigma_a)
        self.register_buffer('sigma_tr', sigma_tr)

    def forward(self, u, q):
        return torch.cat([(-self.sigma_a * u[0] + q[0]).unsqueeze(0),
                          -self.sigma_tr * u[1:3] + q[1:3]])
