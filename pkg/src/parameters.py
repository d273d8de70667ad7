"""
ONH structural parameters.

Ten parameters from the tissue surfaces and the BMO frame: RNFLT, MRW, GCCT
and ChT per octant, PLD, MPT, LCD, LC-GSI, PPSA and BMOA. A parameter that
cannot be measured is NaN-coded and explained by a Diagnostic record.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from src.config import (AXIAL_NEIGHBOURS, GSI_FLAT_CURVATURE, GSI_MIN_POINTS, PPSA_MIN_POINTS,
                        PPSA_WINDOW, RING_FACTOR, RING_SAMPLES)
from src.errors import OnhError
from src.frame import OnhFrame, build_frame, ellipse_contains, from_normalized, to_normalized
from src.surfaces import (OCTANT_NAMES, TissueSurface, extract_boundaries, local_thickness,
                          octant_index, ring_angles)
from src.volume_io import TISSUES, LabelVolume, TissueLabel

SECTOR_PARAMETERS = ("rnflt", "mrw", "gcct", "cht")
SCALAR_PARAMETERS = ("pld_um", "mpt_um", "lcd_um", "lc_gsi", "ppsa_deg", "bmoa_mm2")


def _columns() -> List[str]:
    columns = []
    for name in SECTOR_PARAMETERS:
        columns += [f"{name}_{octant}_um" for octant in OCTANT_NAMES]
        columns.append(f"{name}_avg_um")
    return columns + list(SCALAR_PARAMETERS)


# Fixed CSV column order for one eye
PARAMETER_COLUMNS = _columns()


def _nanmean(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    present = values[~np.isnan(values)]
    return float(present.mean()) if len(present) else math.nan


def octant_means(values, sector) -> np.ndarray:
    """Per-octant mean of samples; NaN for octants without samples."""
    values = np.asarray(values, dtype=float)
    sector = np.asarray(sector)
    keep = (sector >= 0) & ~np.isnan(values)
    sums = np.bincount(sector[keep], weights=values[keep], minlength=8)
    counts = np.bincount(sector[keep], minlength=8)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


@dataclass(eq=False)
class OnhParameters:
    """The ten parameters; sector arrays are in octant order T, ST, S, SN, N, IN, I, IT."""
    rnflt_um: np.ndarray
    mrw_um: np.ndarray
    gcct_um: np.ndarray
    cht_um: np.ndarray
    pld_um: float
    mpt_um: float
    lcd_um: float
    lc_gsi: float
    ppsa_deg: float
    bmoa_mm2: float

    @property
    def rnflt_avg_um(self) -> float:
        return _nanmean(self.rnflt_um)

    @property
    def mrw_avg_um(self) -> float:
        return _nanmean(self.mrw_um)

    @property
    def gcct_avg_um(self) -> float:
        return _nanmean(self.gcct_um)

    @property
    def cht_avg_um(self) -> float:
        return _nanmean(self.cht_um)

    def to_row(self) -> Dict[str, float]:
        """Flat record in PARAMETER_COLUMNS order."""
        row = {}
        for name in SECTOR_PARAMETERS:
            values = getattr(self, f"{name}_um")
            for octant, value in zip(OCTANT_NAMES, values):
                row[f"{name}_{octant}_um"] = float(value)
            row[f"{name}_avg_um"] = getattr(self, f"{name}_avg_um")
        for name in SCALAR_PARAMETERS:
            row[name] = float(getattr(self, name))
        return row

    @classmethod
    def from_row(cls, row) -> "OnhParameters":
        sectors = {
            f"{name}_um": np.array([float(row[f"{name}_{o}_um"]) for o in OCTANT_NAMES])
            for name in SECTOR_PARAMETERS
        }
        scalars = {name: float(row[name]) for name in SCALAR_PARAMETERS}
        return cls(**sectors, **scalars)


@dataclass(frozen=True)
class Diagnostic:
    parameter: str
    code: str
    message: str

    def to_dict(self) -> dict:
        return {"parameter": self.parameter, "code": self.code, "message": self.message}


@dataclass
class ExtractionResult:
    parameters: OnhParameters
    diagnostics: List[Diagnostic] = field(default_factory=list)


SurfaceCache = Dict[TissueLabel, TissueSurface]


def _surface(volume: LabelVolume, tissue: TissueLabel, surfaces: Optional[SurfaceCache],
             thickness: bool = False) -> TissueSurface:
    surface = surfaces.get(tissue) if surfaces is not None else None
    if surface is None:
        surface = extract_boundaries(volume, tissue)
    if thickness and surface.thickness is None:
        surface = local_thickness(surface)
    if surfaces is not None:
        surfaces[tissue] = surface
    return surface


def ring_points(frame: OnhFrame, samples: int = RING_SAMPLES) -> np.ndarray:
    """
    Measurement ring at 1.5 BMOR in the BMO plane, normalized coordinates.

    Sample k lies at angle k degrees from temporal towards superior.
    """
    radius = RING_FACTOR * frame.bmo_radius
    angles = ring_angles(samples)
    return np.column_stack((-radius * np.cos(angles), radius * np.sin(angles), np.zeros(samples)))


def _ring_rows(volume: LabelVolume, frame: OnhFrame, surface: TissueSurface):
    """Surface row of the column containing each ring sample (-1 if absent) and its octant."""
    ring = ring_points(frame)
    world = from_normalized(ring, frame)
    dx, dy, _ = volume.spacing
    ix = np.floor(world[:, 0] / dx).astype(np.int64)
    iy = np.floor(world[:, 1] / dy).astype(np.int64)
    return surface.row_of(ix, iy), octant_index(ring[:, 0], ring[:, 1])


def _sector_values(name: str, samples: np.ndarray, sector: np.ndarray,
                   diagnostics: Optional[List[Diagnostic]]) -> np.ndarray:
    means = octant_means(samples, sector)
    empty = [OCTANT_NAMES[i] for i in range(8) if np.isnan(means[i])]
    if len(empty) == 8:
        raise OnhError("parameters", "EMPTY_RING_SECTOR",
                       f"no {name} samples on the measurement ring", field=name)
    if empty and diagnostics is not None:
        diagnostics.append(Diagnostic(name, "EMPTY_RING_SECTOR",
                                      f"no samples in octant(s) {', '.join(empty)}"))
    return means


def _ring_thickness(volume, frame, tissue, name, surfaces, diagnostics) -> np.ndarray:
    surface = _surface(volume, tissue, surfaces, thickness=True)
    rows, sector = _ring_rows(volume, frame, surface)
    if len(surface) == 0:
        raise OnhError("parameters", "EMPTY_RING_SECTOR", f"no {tissue.name} voxels for {name}", field=name)
    samples = np.where(rows >= 0, surface.thickness[np.maximum(rows, 0)], np.nan)
    return _sector_values(name, samples, sector, diagnostics)


def rnflt_octants(volume: LabelVolume, frame: OnhFrame, surfaces: Optional[SurfaceCache] = None,
                  diagnostics: Optional[List[Diagnostic]] = None) -> np.ndarray:
    """
    RNFL thickness on the 1.5 BMOR ring, averaged per octant.

    Args:
        volume: Segmented volume
        frame: BMO frame
        surfaces: Optional cache of extracted surfaces, filled in place
        diagnostics: Optional list receiving EMPTY_RING_SECTOR records

    Returns:
        8 values in um, NaN for octants without samples

    Raises:
        OnhError: EMPTY_RING_SECTOR when no octant has a sample
    """
    return _ring_thickness(volume, frame, TissueLabel.RNFL_PLT, "rnflt", surfaces, diagnostics)


def cht_octants(volume: LabelVolume, frame: OnhFrame, surfaces: Optional[SurfaceCache] = None,
                diagnostics: Optional[List[Diagnostic]] = None) -> np.ndarray:
    """Choroidal thickness on the 1.5 BMOR ring, averaged per octant."""
    return _ring_thickness(volume, frame, TissueLabel.CHOROID, "cht", surfaces, diagnostics)


def _run_lengths(surface: TissueSurface, rows: np.ndarray, dz: float) -> np.ndarray:
    """Axial run length (voxel count times dz) at surface rows; 0 where absent."""
    if len(surface) == 0:
        return np.zeros(len(rows))
    safe = np.maximum(rows, 0)
    runs = surface.posterior[safe, 2] - surface.anterior[safe, 2] + dz
    return np.where(rows >= 0, runs, 0.0)


def gcct_octants(volume: LabelVolume, frame: OnhFrame, surfaces: Optional[SurfaceCache] = None,
                 diagnostics: Optional[List[Diagnostic]] = None) -> np.ndarray:
    """
    Ganglion cell complex thickness on the ring: the columnwise run lengths of
    RNFL+PLT and GCL+IPL at each sampled column. A column without GCL+IPL
    contributes its RNFL run only.
    """
    dz = volume.spacing[2]
    rnfl = _surface(volume, TissueLabel.RNFL_PLT, surfaces)
    gcl = _surface(volume, TissueLabel.GCL_IPL, surfaces)
    if len(rnfl) == 0:
        raise OnhError("parameters", "EMPTY_RING_SECTOR", "no RNFL_PLT voxels for gcct", field="gcct")
    rows, sector = _ring_rows(volume, frame, rnfl)
    gcl_rows, _ = _ring_rows(volume, frame, gcl)
    total = _run_lengths(rnfl, rows, dz) + _run_lengths(gcl, gcl_rows, dz)
    samples = np.where(rows >= 0, total, np.nan)
    return _sector_values("gcct", samples, sector, diagnostics)


def mrw_octants(volume: LabelVolume, frame: OnhFrame, surfaces: Optional[SurfaceCache] = None,
                diagnostics: Optional[List[Diagnostic]] = None) -> np.ndarray:
    """
    Minimum rim width per octant: for each BMO point the minimum distance to
    the ILM (anterior RNFL+PLT boundary), binned by the point's octant.

    Raises:
        OnhError: EMPTY_ILM
    """
    ilm = _surface(volume, TissueLabel.RNFL_PLT, surfaces)
    if len(ilm) == 0:
        raise OnhError("parameters", "EMPTY_ILM", "no RNFL+PLT voxels, ILM undefined", field="mrw")
    distances, _ = cKDTree(ilm.anterior).query(volume.bmo_points)
    local = to_normalized(volume.bmo_points, frame)
    sector = octant_index(local[:, 0], local[:, 1])
    return _sector_values("mrw", distances, sector, diagnostics)


def _axis_depth(points: np.ndarray, frame: OnhFrame, name: str, code: str) -> float:
    """Depth z' where the BMO axis (x'=y'=0) crosses a surface given by its points."""
    if len(points) == 0:
        raise OnhError("parameters", code, f"no surface points for {name}", field=name)
    local = to_normalized(points, frame)
    tree = cKDTree(local[:, :2])
    k = min(AXIAL_NEIGHBOURS, len(local))
    dist, idx = tree.query(np.zeros(2), k=k)
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    x, y, z = local[idx, 0], local[idx, 1], local[idx, 2]
    scale = max(float(dist.max()), 1.0)
    xs, ys = x / scale, y / scale
    design = np.column_stack((np.ones_like(xs), xs, ys, xs * xs, xs * ys, ys * ys))
    if k < 6 or np.linalg.matrix_rank(design) < 6:
        design = design[:, :3]
    # nearby points must straddle the axis, otherwise the fit extrapolates
    if not (x.min() <= 0 <= x.max() and y.min() <= 0 <= y.max()):
        raise OnhError("parameters", code, f"{name} surface does not cover the BMO axis", field=name)
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    return float(coef[0])


def prelaminar_depth(volume: LabelVolume, frame: OnhFrame,
                     surfaces: Optional[SurfaceCache] = None) -> float:
    """
    Signed distance along the BMO normal from the BMO centre to the ILM,
    positive when the ILM lies posterior to the BMO plane.

    Raises:
        OnhError: NO_ILM_INTERSECTION
    """
    ilm = _surface(volume, TissueLabel.RNFL_PLT, surfaces)
    return _axis_depth(ilm.anterior, frame, "pld", "NO_ILM_INTERSECTION")


def lc_depth(volume: LabelVolume, frame: OnhFrame, surfaces: Optional[SurfaceCache] = None) -> float:
    """
    Signed distance along the BMO normal from the BMO centre to the anterior
    LC boundary, positive posteriorly.

    Raises:
        OnhError: NO_LC_INTERSECTION
    """
    lc = _surface(volume, TissueLabel.LC, surfaces)
    return _axis_depth(lc.anterior, frame, "lcd", "NO_LC_INTERSECTION")


def min_prelaminar_thickness(volume: LabelVolume, frame: OnhFrame,
                             surfaces: Optional[SurfaceCache] = None) -> float:
    """
    Minimum distance from any ILM point inside the BMO ellipse to the anterior
    LC point set.

    Raises:
        OnhError: NO_LC_VISIBLE, EMPTY_ILM
    """
    lc = _surface(volume, TissueLabel.LC, surfaces)
    if len(lc) == 0:
        raise OnhError("parameters", "NO_LC_VISIBLE", "no LC voxels in the volume", field="mpt")
    ilm = _surface(volume, TissueLabel.RNFL_PLT, surfaces)
    local = to_normalized(ilm.anterior, frame) if len(ilm) else np.zeros((0, 3))
    inside = ilm.anterior[ellipse_contains(local[:, 0], local[:, 1], frame)] if len(ilm) else local
    if len(inside) == 0:
        raise OnhError("parameters", "EMPTY_ILM", "no ILM points inside the BMO", field="mpt")
    distances, _ = cKDTree(lc.anterior).query(inside)
    return float(np.min(distances))


def principal_curvatures(coef: np.ndarray) -> np.ndarray:
    """
    Principal curvatures at the origin of the graph z = c20 x^2 + c11 xy +
    c02 y^2 + c10 x + c01 y + c00, largest first.
    """
    c20, c11, c02, c10, c01, _ = coef
    gradient = np.array([c10, c01])
    first = np.eye(2) + np.outer(gradient, gradient)
    hessian = np.array([[2 * c20, c11], [c11, 2 * c02]])
    second = hessian / math.sqrt(1.0 + gradient @ gradient)
    kappa = linalg.eigh(second, first, eigvals_only=True)
    return kappa[::-1]


def shape_index(k1: float, k2: float) -> float:
    """Shape index in [-1, 1]: -1 posterior cup, 0 saddle, +1 cap."""
    return (2 / math.pi) * math.atan2(k1 + k2, k1 - k2)


def lc_gsi(volume: LabelVolume, frame: OnhFrame, surfaces: Optional[SurfaceCache] = None) -> float:
    """
    Global shape index of the anterior LC.

    A quadric height function z'(x', y') is fitted to the anterior LC points
    in normalized coordinates and its principal curvatures are taken on the
    BMO axis. Depth is positive posteriorly, so a posteriorly bowed lamina has
    negative curvatures and a negative index.

    Raises:
        OnhError: DEGENERATE_FIT for too few points, a rank-deficient design
            or a flat lamina
    """
    lc = _surface(volume, TissueLabel.LC, surfaces)
    if len(lc) < GSI_MIN_POINTS:
        raise OnhError("parameters", "DEGENERATE_FIT",
                       f"need at least {GSI_MIN_POINTS} anterior LC points, got {len(lc)}",
                       field="lc_gsi")
    local = to_normalized(lc.anterior, frame) / 1000.0  # fit in mm
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    design = np.column_stack((x * x, x * y, y * y, x, y, np.ones_like(x)))
    if np.linalg.matrix_rank(design) < 6:
        raise OnhError("parameters", "DEGENERATE_FIT", "LC quadric design is rank deficient",
                       field="lc_gsi")
    coef, *_ = np.linalg.lstsq(design, z, rcond=None)
    k1, k2 = principal_curvatures(coef) / 1000.0  # 1/um
    if abs(k1) < GSI_FLAT_CURVATURE and abs(k2) < GSI_FLAT_CURVATURE:
        raise OnhError("parameters", "DEGENERATE_FIT", "anterior LC is flat, shape index undefined",
                       field="lc_gsi")
    return shape_index(k1, k2)


def ppsa(volume: LabelVolume, frame: OnhFrame, surfaces: Optional[SurfaceCache] = None) -> float:
    """
    Peripapillary scleral angle in the central nasal-temporal section.

    One line is fitted to the anterior sclera on each side over
    |x'| in [1.0, 2.5] BMOR; the result is the angle between the two lines,
    signed positive for posterior (V-shaped) bowing and negative for anterior
    bowing. Mirroring the section leaves it unchanged.

    Raises:
        OnhError: INSUFFICIENT_SCLERA_POINTS
    """
    sclera = _surface(volume, TissueLabel.SCLERA, surfaces)
    dy = volume.spacing[1]
    row = int(min(max(math.floor(frame.bmo_center[1] / dy), 0), volume.ny - 1))
    points = sclera.anterior[sclera.iy == row]
    local = to_normalized(points, frame) if len(points) else np.zeros((0, 3))
    lo, hi = PPSA_WINDOW[0] * frame.bmo_radius, PPSA_WINDOW[1] * frame.bmo_radius
    angles = []
    for side, label in ((1.0, "nasal"), (-1.0, "temporal")):
        reach = side * local[:, 0]
        keep = (reach >= lo) & (reach <= hi)
        if np.count_nonzero(keep) < PPSA_MIN_POINTS:
            raise OnhError("parameters", "INSUFFICIENT_SCLERA_POINTS",
                           f"{np.count_nonzero(keep)} {label} sclera points in the fit window",
                           field=f"ppsa.{label}")
        slope = np.polyfit(local[keep, 0], local[keep, 2], 1)[0]
        angles.append(math.atan(slope))
    nasal, temporal = angles
    return math.degrees(temporal - nasal)


def bmo_area(frame: OnhFrame) -> float:
    """Area of the best-fit BMO ellipse in mm^2."""
    return math.pi * frame.ellipse.a * frame.ellipse.b / 1e6


def extract_all(volume: LabelVolume, frame: Optional[OnhFrame] = None) -> ExtractionResult:
    """
    Run every parameter operation on one eye.

    Failures of single parameters are NaN-coded and recorded as diagnostics;
    frame errors propagate because no parameter is defined without a frame.

    Args:
        volume: Segmented volume
        frame: Optional prebuilt frame

    Returns:
        ExtractionResult with parameters and diagnostics
    """
    frame = frame or build_frame(volume)
    surfaces: SurfaceCache = {}
    diagnostics: List[Diagnostic] = []
    for tissue in TISSUES:
        surface = _surface(volume, tissue, surfaces)
        if surface.multi_run_columns:
            diagnostics.append(Diagnostic(
                tissue.name, "MULTIPLE_RUNS",
                f"{surface.multi_run_columns} columns hold more than one {tissue.name} run"))

    def attempt(name, fn, sector=False):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", np.exceptions.RankWarning)
                return fn()
        except OnhError as e:
            diagnostics.append(Diagnostic(name, e.code, e.message))
            return np.full(8, np.nan) if sector else math.nan

    values = {
        "rnflt_um": attempt("rnflt", lambda: rnflt_octants(volume, frame, surfaces, diagnostics), True),
        "mrw_um": attempt("mrw", lambda: mrw_octants(volume, frame, surfaces, diagnostics), True),
        "gcct_um": attempt("gcct", lambda: gcct_octants(volume, frame, surfaces, diagnostics), True),
        "cht_um": attempt("cht", lambda: cht_octants(volume, frame, surfaces, diagnostics), True),
        "pld_um": attempt("pld", lambda: prelaminar_depth(volume, frame, surfaces)),
        "mpt_um": attempt("mpt", lambda: min_prelaminar_thickness(volume, frame, surfaces)),
        "lcd_um": attempt("lcd", lambda: lc_depth(volume, frame, surfaces)),
        "lc_gsi": attempt("lc_gsi", lambda: lc_gsi(volume, frame, surfaces)),
        "ppsa_deg": attempt("ppsa", lambda: ppsa(volume, frame, surfaces)),
        "bmoa_mm2": bmo_area(frame),
    }
    return ExtractionResult(parameters=OnhParameters(**values), diagnostics=diagnostics)
