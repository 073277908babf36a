from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping

import torch

from geometry.grid import RegionMap

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaterialField:
    sigma_a: torch.Tensor   # (ny, nx), 1/length
    sigma_s: torch.Tensor   # (ny, nx), 1/length
    g: float

    @property
    def sigma_t(self) -> torch.Tensor:
        return self.sigma_a + self.sigma_s

    @property
    def sigma_tr(self) -> torch.Tensor:
        """First-moment removal rate sigma_t - sigma_s g."""
        return self.sigma_t - self.sigma_s * self.g

    @property
    def coercivity(self) -> float:
        return float(self.sigma_a.min())


def check_hypotheses(sigma_a: float, sigma_s: float, name: str) -> None:
    for label, value in (('sigma_a', sigma_a), ('sigma_s', sigma_s)):
        if value is None or not math.isfinite(value):
            raise ValueError(f"{name}.{label} must be finite, got {value}")
        if value < 0:
            raise ValueError(f"{name}.{label} must be non-negative, got {value}")
    if sigma_a <= 0:
        raise ValueError(f"{name}.sigma_a must be positive (absorption coercivity: sigma_t - sigma_s >= alpha > 0), got {sigma_a}")


def materials_from_regions(regions: RegionMap, void_params: Mapping[str, float],
                           tissue_params: Mapping[str, float], g: float) -> MaterialField:
    """Void cells take void_params, every other cell tissue_params; g is uniform."""
    check_hypotheses(void_params['sigma_a'], void_params['sigma_s'], 'void')
    check_hypotheses(tissue_params['sigma_a'], tissue_params['sigma_s'], 'tissue')
    if not abs(g) <= 1:
        raise ValueError(f"mean scattering cosine must satisfy |g| <= 1, got {g}")

    def fill(key):
        v = torch.tensor(float(void_params[key]), dtype=torch.float64, device=regions.void.device)
        t = torch.tensor(float(tissue_params[key]), dtype=torch.float64, device=regions.void.device)
        return torch.where(regions.void, v, t)

    mat = MaterialField(sigma_a=fill('sigma_a'), sigma_s=fill('sigma_s'), g=float(g))
    logger.debug("materials: %d void cells, coercivity alpha=%g", int(regions.void.sum()), mat.coercivity)
    return mat


def uniform_materials(grid, sigma_a: float, sigma_s: float, g: float) -> MaterialField:
    check_hypotheses(sigma_a, sigma_s, 'medium')
    return MaterialField(sigma_a=grid.zeros() + sigma_a, sigma_s=grid.zeros() + sigma_s, g=float(g))
