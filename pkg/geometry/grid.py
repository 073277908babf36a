""" Mesh, region geometry and the source-cap field over Z = [-1,1]x[-1,1] """

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, Iterable, List, Sequence, Tuple

import torch

logger = logging.getLogger(__name__)

DOMAIN = (-1.0, 1.0, -1.0, 1.0)
EDGES = ('left', 'right', 'bottom', 'top')
VOID_RADII = (0.8, 0.9)

# (xmin, xmax, ymin, ymax); a region is the union of its rectangles
Rect = Tuple[float, float, float, float]

TARGET_CASES: Dict[str, Dict[str, List[Rect]]] = {
    'basic': {
        'tumor': [(-0.25, 0.25, -0.25, 0.25)],
        'risk': [(0.254, 0.379, -0.125, 0.125)],
    },
    'intermediate': {
        'tumor': [(-0.25, 0.25, -0.25, 0.0),
                  (-0.25, 0.0, 0.0, 0.25)],
        'risk': [(0.04, 0.25, 0.04, 0.25)],
    },
    'complex': {
        'tumor': [(-0.25, 0.25, -0.25, -0.125),
                  (-0.25, 0.25, 0.125, 0.25),
                  (0.04, 0.25, -0.125, 0.125)],
        'risk': [(-0.25, -0.04, -0.121, 0.121)],
    },
}


class Region(IntEnum):
    """Tissue labels; the value doubles as the cell-type index rho_i."""
    TUMOR = 0
    RISK = 1
    NORMAL = 2


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    dx: float
    dy: float
    device: str = 'cpu'

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy

    @property
    def h(self) -> float:
        return min(self.dx, self.dy)

    @property
    def x(self) -> torch.Tensor:
        i = torch.arange(self.nx, dtype=torch.float64, device=self.device)
        return (2.0 * i + 1.0) / self.nx - 1.0

    @property
    def y(self) -> torch.Tensor:
        j = torch.arange(self.ny, dtype=torch.float64, device=self.device)
        return (2.0 * j + 1.0) / self.ny - 1.0

    def centers(self) -> Tuple[torch.Tensor, torch.Tensor]:
        """Cell-center coordinates as (X, Y), each of shape (ny, nx)."""
        Y, X = torch.meshgrid(self.y, self.x, indexing='ij')
        return X, Y

    def zeros(self, *lead: int) -> torch.Tensor:
        return torch.zeros(*lead, self.ny, self.nx, dtype=torch.float64, device=self.device)


def build_grid(nx: int, ny: int, device: str = 'cpu') -> Grid:
    if int(nx) != nx or int(ny) != ny:
        raise ValueError(f"cell counts must be integers, got nx={nx}, ny={ny}")
    if nx < 2 or ny < 2:
        raise ValueError(f"cell counts must be >= 2, got nx={nx}, ny={ny}")
    return Grid(nx=int(nx), ny=int(ny), dx=2.0 / nx, dy=2.0 / ny, device=device)


@dataclass(frozen=True)
class RegionMap:
    grid: Grid
    labels: torch.Tensor   # int64, (ny, nx), values from Region
    void: torch.Tensor     # bool, (ny, nx)
    case: str = ''

    def mask(self, region: Region) -> torch.Tensor:
        return self.labels == int(region)

    def indicators(self) -> torch.Tensor:
        """Stack of region indicators, (3, ny, nx) float64, ordered as Region."""
        return torch.stack([self.mask(r).to(torch.float64) for r in Region])

    def area(self, region: Region) -> float:
        return float(self.mask(region).sum()) * self.grid.cell_area


def _in_rectangles(X: torch.Tensor, Y: torch.Tensor, rects: Iterable[Sequence[float]]) -> torch.Tensor:
    inside = torch.zeros_like(X, dtype=torch.bool)
    for xmin, xmax, ymin, ymax in rects:
        inside |= (X >= xmin) & (X <= xmax) & (Y >= ymin) & (Y <= ymax)
    return inside


def label_points(X: torch.Tensor, Y: torch.Tensor,
                 rectangles: Dict[str, Sequence[Rect]]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Label arbitrary points by rectangle membership; tumor wins over risk.

    Returns (labels, void) with the shapes of X and Y.
    """
    labels = torch.full(X.shape, int(Region.NORMAL), dtype=torch.int64, device=X.device)
    labels[_in_rectangles(X, Y, rectangles.get('risk', ()))] = int(Region.RISK)
    labels[_in_rectangles(X, Y, rectangles.get('tumor', ()))] = int(Region.TUMOR)
    r = torch.sqrt(X ** 2 + Y ** 2)
    void = (r >= VOID_RADII[0]) & (r <= VOID_RADII[1])
    return labels, void


def classify_regions(grid: Grid, target_case: str,
                     rectangles: Dict[str, Sequence[Rect]] = None) -> RegionMap:
    """Label each cell by the membership of its center.

    `rectangles` overrides the built-in table for the case (e.g. the
    figure variant of the basic risk region).
    """
    case = target_case.lower()
    if rectangles is None:
        if case not in TARGET_CASES:
            raise ValueError(f"unknown target case '{target_case}', expected one of {sorted(TARGET_CASES)}")
        rectangles = TARGET_CASES[case]
    X, Y = grid.centers()
    labels, void = label_points(X, Y, rectangles)
    return RegionMap(grid=grid, labels=labels, void=void, case=case)


@dataclass(frozen=True)
class SourceCapField:
    cap: torch.Tensor                  # (ny, nx)
    q_max: float
    eps: float
    delta: float
    blocked: Tuple[str, ...] = field(default_factory=tuple)

    def blocked_mask(self, grid: Grid) -> torch.Tensor:
        """Cells within eps of a blocked edge."""
        dist = _edge_distances(grid)
        mask = torch.zeros(grid.shape, dtype=torch.bool, device=grid.device)
        for edge in self.blocked:
            mask |= dist[edge] <= self.eps
        return mask


def _edge_distances(grid: Grid) -> Dict[str, torch.Tensor]:
    X, Y = grid.centers()
    xmin, xmax, ymin, ymax = DOMAIN
    return {'left': X - xmin, 'right': xmax - X, 'bottom': Y - ymin, 'top': ymax - Y}


def source_cap(grid: Grid, q_max: float, eps: float, delta: float,
               blocked: Iterable[str] = ()) -> SourceCapField:
    """U(x) = q_max within eps of an active edge, delta elsewhere.

    A cell within eps of a blocked edge carries delta even at a corner
    shared with an active edge.
    """
    blocked = tuple(sorted({b.lower() for b in blocked}))
    unknown = set(blocked) - set(EDGES)
    if unknown:
        raise ValueError(f"unknown edges {sorted(unknown)}, expected a subset of {EDGES}")
    if len(blocked) == len(EDGES):
        raise ValueError("all four edges are blocked; the active boundary is empty")
    if not (q_max > delta > 0):
        raise ValueError(f"need q_max > delta > 0, got q_max={q_max}, delta={delta}")
    if not eps > 0:
        raise ValueError(f"need eps > 0, got eps={eps}")

    dist = _edge_distances(grid)
    near_active = torch.zeros(grid.shape, dtype=torch.bool, device=grid.device)
    near_blocked = torch.zeros_like(near_active)
    for edge, d in dist.items():
        if edge in blocked:
            near_blocked |= d <= eps
        else:
            near_active |= d <= eps
    cap = torch.where(near_active & ~near_blocked,
                      torch.tensor(float(q_max), dtype=torch.float64, device=grid.device),
                      torch.tensor(float(delta), dtype=torch.float64, device=grid.device))
    logger.debug("source cap: %d cells at q_max=%g, blocked=%s", int((cap == q_max).sum()), q_max, blocked)
    return SourceCapField(cap=cap, q_max=float(q_max), eps=float(eps), delta=float(delta), blocked=blocked)
