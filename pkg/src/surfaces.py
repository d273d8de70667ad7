"""
Tissue boundary surfaces.

Columnwise (A-scan) extraction of anterior and posterior boundaries for one
tissue label, minimum-distance local thickness and octant assignment around
the BMO centre.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Optional

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from src.errors import OnhError
from src.volume_io import TISSUES, LabelVolume, TissueLabel


class Octant(str, Enum):
    T = "T"
    ST = "ST"
    S = "S"
    SN = "SN"
    N = "N"
    IN = "IN"
    I = "I"  # noqa: E741
    IT = "IT"


OCTANTS = list(Octant)
OCTANT_NAMES = [o.value for o in OCTANTS]
SECTOR_DEG = 45.0


@dataclass(frozen=True)
class TissueSurface:
    """Anterior (and posterior) boundary points of one tissue, one per column."""
    tissue: TissueLabel
    ix: np.ndarray  # (N,) column index along x
    iy: np.ndarray  # (N,) column index along y
    anterior: np.ndarray  # (N, 3) um, volume frame
    posterior: Optional[np.ndarray] = None  # (N, 3)
    thickness: Optional[np.ndarray] = None  # (N,) um
    index_grid: Optional[np.ndarray] = None  # (ny, nx) row into the arrays, -1 where absent
    multi_run_columns: int = 0

    def __len__(self) -> int:
        return len(self.ix)

    def row_of(self, ix, iy) -> np.ndarray:
        """Rows for column indices; -1 where the column has no boundary or is outside."""
        ix = np.asarray(ix)
        iy = np.asarray(iy)
        ny, nx = self.index_grid.shape
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        rows = np.full(ix.shape, -1, dtype=np.int64)
        rows[inside] = self.index_grid[iy[inside], ix[inside]]
        return rows

    def to_frame(self) -> pd.DataFrame:
        """Surface dump: ix, iy, x_um, y_um, z_um, thickness_um."""
        thickness = self.thickness if self.thickness is not None else np.full(len(self), np.nan)
        return pd.DataFrame({
            "ix": self.ix,
            "iy": self.iy,
            "x_um": self.anterior[:, 0],
            "y_um": self.anterior[:, 1],
            "z_um": self.anterior[:, 2],
            "thickness_um": thickness,
        })


def extract_boundaries(volume: LabelVolume, tissue: TissueLabel) -> TissueSurface:
    """
    Anterior and posterior boundary of a tissue along every A-scan.

    The anterior point is the centre of the first tissue voxel along
    increasing z; the posterior point is the last voxel of the contiguous run
    that starts there. Columns holding a second, deeper run are counted in
    multi_run_columns.

    Args:
        volume: Valid LabelVolume
        tissue: Tissue label to extract

    Returns:
        TissueSurface (possibly empty)
    """
    dx, dy, dz = volume.spacing
    mask = volume.voxels == int(tissue)
    present = mask.any(axis=0)
    first = np.argmax(mask, axis=0)
    depth = np.arange(volume.nz)[:, None, None]
    gap = (~mask) & (depth > first[None])
    end = np.where(gap.any(axis=0), np.argmax(gap, axis=0), volume.nz)
    last = end - 1
    extra = (mask & (depth >= end[None])).any(axis=0) & present

    iy, ix = np.nonzero(present)
    first_z = first[iy, ix]
    last_z = last[iy, ix]
    x = (ix + 0.5) * dx
    y = (iy + 0.5) * dy
    anterior = np.column_stack((x, y, (first_z + 0.5) * dz))
    posterior = np.column_stack((x, y, (last_z + 0.5) * dz))

    grid = np.full((volume.ny, volume.nx), -1, dtype=np.int64)
    grid[iy, ix] = np.arange(len(ix))
    return TissueSurface(
        tissue=TissueLabel(tissue),
        ix=ix,
        iy=iy,
        anterior=anterior,
        posterior=posterior,
        index_grid=grid,
        multi_run_columns=int(extra.sum()),
    )


def local_thickness(surface: TissueSurface) -> TissueSurface:
    """
    Fill thickness as the minimum distance from each anterior point to the
    posterior point set.

    Raises:
        OnhError: MISSING_POSTERIOR
    """
    if surface.posterior is None or (len(surface.anterior) and not len(surface.posterior)):
        raise OnhError("surfaces", "MISSING_POSTERIOR",
                       f"{surface.tissue.name} surface has no posterior boundary",
                       field=surface.tissue.name)
    if len(surface) == 0:
        return replace(surface, thickness=np.zeros(0))
    distances, _ = cKDTree(surface.posterior).query(surface.anterior)
    return replace(surface, thickness=np.asarray(distances, dtype=float))


def extract_all_surfaces(volume: LabelVolume, with_thickness: bool = True) -> Dict[TissueLabel, TissueSurface]:
    """Boundaries (and thickness) for every segmented tissue."""
    surfaces = {}
    for tissue in TISSUES:
        surface = extract_boundaries(volume, tissue)
        if with_thickness:
            surface = local_thickness(surface)
        surfaces[tissue] = surface
    return surfaces


def octant_index(x, y) -> np.ndarray:
    """
    Vectorized octant index (0=T .. 7=IT) for normalized in-plane coordinates.

    Points at the origin get -1.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    theta = np.degrees(np.arctan2(y, -x))
    shifted = np.round(np.mod(theta + SECTOR_DEG / 2, 360.0), 9)
    index = np.floor(shifted / SECTOR_DEG).astype(np.int64) % 8
    return np.where((x == 0) & (y == 0), -1, index)


def octant_of(point, frame=None) -> Octant:
    """
    Octant of a point in normalized coordinates (right-eye convention).

    Temporal is -x', superior is +y'; sectors are half-open with the lower
    edge inclusive.

    Raises:
        OnhError: ORIGIN_POINT when the point lies on the BMO axis
    """
    x, y = float(point[0]), float(point[1])
    if x == 0.0 and y == 0.0:
        raise OnhError("surfaces", "ORIGIN_POINT", "octant undefined at the BMO centre", field="point")
    return OCTANTS[int(octant_index(x, y))]


def octant_angle_deg(octant: Octant) -> float:
    """Centre angle of an octant, measured from temporal towards superior."""
    return OCTANTS.index(octant) * SECTOR_DEG


def ring_angles(samples: int) -> np.ndarray:
    """Equally spaced sample angles in radians, starting on the temporal axis."""
    return np.arange(samples) * (2 * math.pi / samples)
