"""
M1 minimum-entropy closure and the Henyey-Greenstein kernel.

The closure is used in its closed form. With s = sqrt(4 - 3|f|^2):

    chi(f) = (5 - 2 s) / 3 = 1/3 + 2|f|^2 / (2 + s)
    D(f)   = (1 - chi)/2 I + w f f^T,     w = 3 / (2 + s)

which is the usual ((1-chi)/2) I + ((3chi-1)/2) f f^T/|f|^2 rewritten so that
nothing is divided by |f|^2. The zz entry of the three-dimensional tensor
equals (1 - chi)/2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple, Union

import torch

FLUX_LIMIT = 1.0 - 1e-8
DENSITY_FLOOR = 1e-30

Number = Union[float, torch.Tensor]


@dataclass(frozen=True)
class ClosureState:
    f: Tuple[float, float]
    chi: float
    tensor: Tuple[Tuple[float, float], Tuple[float, float]]
    zz: float

    @property
    def trace(self) -> float:
        return self.tensor[0][0] + self.tensor[1][1] + self.zz


def hg_kernel(g: Number, eta: Number) -> Number:
    """Henyey-Greenstein density in the cosine eta, normalized on the sphere."""
    g_t = torch.as_tensor(g, dtype=torch.float64)
    eta_t = torch.as_tensor(eta, dtype=torch.float64)
    if torch.any(g_t.abs() >= 1):
        raise ValueError(f"|g| must be < 1 (the kernel is singular at |g| = 1), got g={g}")
    if torch.any(eta_t.abs() > 1 + 1e-12):
        raise ValueError("cosines must lie in [-1, 1]")
    denom = 1.0 + g_t ** 2 - 2.0 * g_t * eta_t
    out = (1.0 - g_t ** 2) / (4.0 * math.pi * denom * torch.sqrt(denom))
    if not isinstance(g, torch.Tensor) and not isinstance(eta, torch.Tensor):
        return float(out)
    return out


def _chi_w(f2: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    s = torch.sqrt(4.0 - 3.0 * f2)
    return 1.0 / 3.0 + 2.0 * f2 / (2.0 + s), 3.0 / (2.0 + s)


def eddington_factor(f_mag: Number) -> Number:
    f_t = torch.as_tensor(f_mag, dtype=torch.float64)
    if torch.any(f_t < 0):
        raise ValueError("relative flux magnitude must be non-negative")
    if torch.any(f_t > 1):
        raise ValueError(f"relative flux magnitude above 1 is not realizable (|f|={float(f_t.max()):.6g})")
    chi, _ = _chi_w(f_t ** 2)
    if not isinstance(f_mag, torch.Tensor):
        return float(chi)
    return chi


def eddington_tensor(psi0: float, psi1: Tuple[float, float]) -> ClosureState:
    """Closure of one realizable state; psi2 = tensor * psi0."""
    if psi0 <= 0:
        raise ValueError("psi0 must be positive; clamp the state first")
    fx, fy = psi1[0] / psi0, psi1[1] / psi0
    f2 = fx * fx + fy * fy
    if f2 > 1.0 + 1e-12:
        raise ValueError(f"|psi1| > psi0 is not realizable (|f|={math.sqrt(f2):.6g})")
    f2 = min(f2, 1.0)
    s = math.sqrt(4.0 - 3.0 * f2)
    chi = 1.0 / 3.0 + 2.0 * f2 / (2.0 + s)
    a = 0.5 * (1.0 - chi)
    w = 3.0 / (2.0 + s)
    tensor = ((a + w * fx * fx, w * fx * fy),
              (w * fx * fy, a + w * fy * fy))
    return ClosureState(f=(fx, fy), chi=chi, tensor=tensor, zz=a)


def closure_fields(u: torch.Tensor, floor: float = DENSITY_FLOOR) -> torch.Tensor:
    """Second-moment fields (Pxx, Pxy, Pyy) for a stack u = (psi0, psi1x, psi1y).

    The relative flux is taken on magnitudes, f = psi1 / max(|psi0|, floor),
    and limited to FLUX_LIMIT, so signed (adjoint) fields are accepted too.
    P = D(f) * psi0 keeps the sign of psi0.
    """
    psi0 = u[0]
    f = u[1:3] / psi0.abs().clamp_min(floor)
    f2 = (f ** 2).sum(0)
    over = f2 > FLUX_LIMIT ** 2
    # autograd differentiates both where-branches; the unused one must stay finite
    safe = torch.where(over, f2, torch.ones_like(f2))
    f = f * torch.where(over, FLUX_LIMIT / torch.sqrt(safe), torch.ones_like(f2))
    f2 = torch.where(over, torch.full_like(f2, FLUX_LIMIT ** 2), f2)
    chi, w = _chi_w(f2)
    a = 0.5 * (1.0 - chi)
    fx, fy = f[0], f[1]
    return torch.stack([(a + w * fx * fx) * psi0,
                        w * fx * fy * psi0,
                        (a + w * fy * fy) * psi0])


def realizability_clamp(psi0: Number, psi1, floor: float = DENSITY_FLOOR):
    """Raise psi0 to the floor and shrink psi1 into the flux-limited cone.

    Works on a single state (float, 2-sequence) or on tensors where psi1
    carries the vector components on its leading axis.
    """
    if isinstance(psi0, torch.Tensor):
        psi0_c = psi0.clamp_min(floor)
        norm2 = (psi1 ** 2).sum(0)
        bound = FLUX_LIMIT * psi0_c
        over = norm2 > bound ** 2
        safe = torch.where(over, norm2.clamp_min(1e-200), torch.ones_like(norm2))
        scale = torch.where(over, bound / torch.sqrt(safe), torch.ones_like(norm2))
        return psi0_c, psi1 * scale
    psi0_c = max(float(psi0), floor)
    px, py = float(psi1[0]), float(psi1[1])
    norm = math.hypot(px, py)
    bound = FLUX_LIMIT * psi0_c
    if norm > bound:
        px, py = px * bound / norm, py * bound / norm
    return psi0_c, (px, py)
