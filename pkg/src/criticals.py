"""
Critical points and their spatial distribution.

Critical points are the input points that win at least one dimension of the
max-pooled global feature. They are projected onto group-average tissue
surfaces and summarized as neighbour-count density maps and tissue
breakdowns.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from src.cloud import PointCloud, build_cloud
from src.config import AVERAGE_GRID_PITCH_UM, CONNECTIVE_TISSUES, DENSITY_RADIUS_UM, NEURAL_TISSUES
from src.errors import OnhError
from src.pointnet import ForwardResult, PointNetModel, forward
from src.volume_io import TISSUES, LabelVolume, TissueLabel

DENSITY_COLUMNS = ["x_um", "y_um", "z_um", "tissue", "density"]
GEOMETRY_COLUMNS = ["tissue", "gx", "gy", "x_um", "y_um", "z_um", "count"]


@dataclass(frozen=True)
class CriticalPoint:
    index: int  # row in the eye's cloud
    dims: Tuple[int, ...]  # global-feature dimensions won
    tissue: int
    xyz: Tuple[float, float, float]


@dataclass
class CriticalPointSet:
    eye_id: str
    entries: List[CriticalPoint]
    input_transform: Optional[np.ndarray] = None
    feature_transform: Optional[np.ndarray] = None
    logits: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def indices(self) -> np.ndarray:
        return np.array([e.index for e in self.entries], dtype=int)

    @property
    def transforms(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        if self.input_transform is None:
            return None
        return self.input_transform, self.feature_transform

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "eye_id": self.eye_id,
            "index": self.indices,
            "tissue": [e.tissue for e in self.entries],
            "x_um": [e.xyz[0] for e in self.entries],
            "y_um": [e.xyz[1] for e in self.entries],
            "z_um": [e.xyz[2] for e in self.entries],
            "n_dims": [len(e.dims) for e in self.entries],
        })


def critical_set_from_argmax(cloud: PointCloud, pool_argmax, result: Optional[ForwardResult] = None) -> CriticalPointSet:
    """Group the winning point of every pooled dimension by point index."""
    won: Dict[int, List[int]] = {}
    for dim, index in enumerate(np.asarray(pool_argmax, dtype=int)):
        won.setdefault(int(index), []).append(dim)
    entries = [
        CriticalPoint(index=i, dims=tuple(won[i]), tissue=int(cloud.tissue[i]),
                      xyz=tuple(float(v) for v in cloud.xyz[i]))
        for i in sorted(won)
    ]
    return CriticalPointSet(
        eye_id=cloud.eye_id,
        entries=entries,
        input_transform=result.input_transform if result is not None else None,
        feature_transform=result.feature_transform if result is not None else None,
        logits=result.logits if result is not None else None,
    )


def extract_critical_points(model: PointNetModel, cloud: PointCloud) -> CriticalPointSet:
    """
    Critical points of one cloud under a trained model.

    Raises:
        OnhError: EMPTY_CLOUD
    """
    if len(cloud) == 0:
        raise OnhError("criticals", "EMPTY_CLOUD", "cannot extract critical points from an empty cloud",
                       field="cloud")
    result = forward(model, cloud)
    return critical_set_from_argmax(cloud, result.pool_argmax, result)


def critical_subset(cloud: PointCloud, points: CriticalPointSet) -> PointCloud:
    return cloud.subset(points.indices)


def is_sufficient(model: PointNetModel, cloud: PointCloud, points: CriticalPointSet) -> bool:
    """True when the critical subset alone reproduces the full-cloud logits bit for bit."""
    full = forward(model, cloud) if points.logits is None else None
    reference = points.logits if points.logits is not None else full.logits
    reduced = forward(model, critical_subset(cloud, points), transforms=points.transforms)
    return bool(np.array_equal(reduced.logits, reference))


def extract_all_critical_points(model: PointNetModel, clouds: Sequence[PointCloud],
                                threads: int = 1) -> List[CriticalPointSet]:
    """Per-eye extraction; results keep the input order."""
    if threads > 1 and len(clouds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda c: extract_critical_points(model, c), clouds))
    return [extract_critical_points(model, c) for c in clouds]


# =============================================================================
# Average geometry
# =============================================================================

@dataclass
class TissueGrid:
    gx: np.ndarray  # cell index along x'
    gy: np.ndarray
    z: np.ndarray  # mean anterior depth, um
    count: np.ndarray  # eyes covering the cell
    pitch: float = AVERAGE_GRID_PITCH_UM

    @property
    def vertices(self) -> np.ndarray:
        return np.column_stack(((self.gx + 0.5) * self.pitch, (self.gy + 0.5) * self.pitch, self.z))


@dataclass
class AverageGeometry:
    tissues: Dict[int, TissueGrid]
    pitch: float = AVERAGE_GRID_PITCH_UM
    label: str = ""
    n_eyes: int = 0
    _trees: Dict[int, cKDTree] = field(default_factory=dict, repr=False)

    def tree(self, tissue: int) -> cKDTree:
        if tissue not in self._trees:
            self._trees[tissue] = cKDTree(self.tissues[tissue].vertices)
        return self._trees[tissue]

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for tissue in sorted(self.tissues):
            grid = self.tissues[tissue]
            v = grid.vertices
            frames.append(pd.DataFrame({
                "tissue": tissue, "gx": grid.gx, "gy": grid.gy,
                "x_um": v[:, 0], "y_um": v[:, 1], "z_um": v[:, 2], "count": grid.count,
            }))
        if not frames:
            return pd.DataFrame(columns=GEOMETRY_COLUMNS)
        return pd.concat(frames, ignore_index=True)[GEOMETRY_COLUMNS]


def _cell_means(cloud: PointCloud, tissue: int, pitch: float) -> pd.DataFrame:
    keep = cloud.tissue == tissue
    xyz = cloud.xyz[keep]
    return (pd.DataFrame({
        "gx": np.floor(xyz[:, 0] / pitch).astype(np.int64),
        "gy": np.floor(xyz[:, 1] / pitch).astype(np.int64),
        "z": xyz[:, 2],
    }).groupby(["gx", "gy"], sort=True)["z"].mean())


def average_geometry(eyes: Sequence[Union[LabelVolume, PointCloud]], label: str = "",
                     pitch: float = AVERAGE_GRID_PITCH_UM) -> AverageGeometry:
    """
    Group-average anterior tissue boundaries on a regular in-plane grid.

    Each eye contributes its mean normalized depth per cell; the cell value
    is the mean over the eyes that cover it.

    Args:
        eyes: Volumes (surfaces taken at full column resolution) or clouds
        label: Name of the group pair, e.g. "mild-moderate"
        pitch: Grid pitch in um

    Raises:
        OnhError: NO_COVERAGE
    """
    clouds = [e if isinstance(e, PointCloud) else build_cloud(e, lateral_pitch_um=None) for e in eyes]
    if not clouds:
        raise OnhError("criticals", "NO_COVERAGE", "average geometry needs at least one eye", field="eyes")
    tissues: Dict[int, TissueGrid] = {}
    for tissue in TISSUES:
        per_eye = [_cell_means(c, int(tissue), pitch) for c in clouds]
        per_eye = [s for s in per_eye if len(s)]
        if not per_eye:
            continue
        stacked = pd.concat(per_eye, axis=1)
        mean = stacked.mean(axis=1)
        count = stacked.notna().sum(axis=1)
        gx = mean.index.get_level_values("gx").to_numpy()
        gy = mean.index.get_level_values("gy").to_numpy()
        tissues[int(tissue)] = TissueGrid(gx=gx, gy=gy, z=mean.to_numpy(dtype=float),
                                          count=count.to_numpy(dtype=int), pitch=pitch)
    if not tissues:
        raise OnhError("criticals", "NO_COVERAGE", "no tissue boundary covers any grid cell", field="eyes")
    return AverageGeometry(tissues=tissues, pitch=pitch, label=label, n_eyes=len(clouds))


# =============================================================================
# Projection and density
# =============================================================================

@dataclass
class DensityMap:
    xyz: np.ndarray  # (n, 3) projected positions, um
    tissue: np.ndarray  # (n,)
    eye_id: List[str]
    density: Optional[np.ndarray] = None  # (n,) neighbour counts

    def __len__(self) -> int:
        return len(self.xyz)

    def for_tissue(self, tissue: int) -> "DensityMap":
        keep = self.tissue == tissue
        return DensityMap(self.xyz[keep], self.tissue[keep],
                          [e for e, k in zip(self.eye_id, keep) if k],
                          None if self.density is None else self.density[keep])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "x_um": self.xyz[:, 0], "y_um": self.xyz[:, 1], "z_um": self.xyz[:, 2],
            "tissue": self.tissue.astype(int),
            "density": self.density if self.density is not None else np.zeros(len(self), dtype=int),
        }, columns=DENSITY_COLUMNS)


def project_criticals(points: Union[CriticalPointSet, Sequence[CriticalPointSet]],
                      geo: AverageGeometry) -> DensityMap:
    """
    Move each critical point to the nearest vertex (3D) of its own tissue's
    average surface.

    Raises:
        OnhError: TISSUE_NOT_IN_GEOMETRY
    """
    sets = [points] if isinstance(points, CriticalPointSet) else list(points)
    xyz, tissue, eye_ids = [], [], []
    for s in sets:
        for e in s.entries:
            if e.tissue not in geo.tissues:
                raise OnhError("criticals", "TISSUE_NOT_IN_GEOMETRY",
                               f"{TissueLabel(e.tissue).name} has no average surface", field="tissue")
            _, nearest = geo.tree(e.tissue).query(e.xyz)
            xyz.append(geo.tissues[e.tissue].vertices[nearest])
            tissue.append(e.tissue)
            eye_ids.append(s.eye_id)
    return DensityMap(
        xyz=np.array(xyz, dtype=float).reshape(-1, 3),
        tissue=np.array(tissue, dtype=int),
        eye_id=eye_ids,
    )


def density(points: DensityMap, radius: float = DENSITY_RADIUS_UM) -> DensityMap:
    """Count of other points within radius (3D, all tissues pooled)."""
    if len(points) == 0:
        counts = np.zeros(0, dtype=int)
    else:
        counts = cKDTree(points.xyz).query_ball_point(points.xyz, r=radius, return_length=True) - 1
    return DensityMap(points.xyz, points.tissue, list(points.eye_id), np.asarray(counts, dtype=int))


# =============================================================================
# Tissue breakdown
# =============================================================================

@dataclass
class TissueBreakdown:
    counts: Dict[str, int]
    fractions: Dict[str, float]
    neural_fraction: float
    connective_fraction: float
    total: int
    neural: Tuple[str, ...] = NEURAL_TISSUES
    connective: Tuple[str, ...] = CONNECTIVE_TISSUES

    def to_dict(self) -> dict:
        return {
            "counts": self.counts,
            "fractions": self.fractions,
            "neural_fraction": self.neural_fraction,
            "connective_fraction": self.connective_fraction,
            "total": self.total,
            "grouping": {"neural": list(self.neural), "connective": list(self.connective)},
        }


def tissue_breakdown(sets: Sequence[CriticalPointSet], neural: Sequence[str] = NEURAL_TISSUES,
                     connective: Sequence[str] = CONNECTIVE_TISSUES) -> TissueBreakdown:
    """
    Fraction of critical points per tissue, pooled over eyes.

    Raises:
        OnhError: EMPTY_SETS
    """
    counts = {t.name: 0 for t in TISSUES}
    for s in sets:
        for e in s.entries:
            counts[TissueLabel(e.tissue).name] += 1
    total = sum(counts.values())
    if total == 0:
        raise OnhError("criticals", "EMPTY_SETS", "no critical points to break down", field="sets")
    fractions = {name: n / total for name, n in counts.items()}
    return TissueBreakdown(
        counts=counts,
        fractions=fractions,
        neural_fraction=sum(counts[n] for n in neural) / total,
        connective_fraction=sum(counts[n] for n in connective) / total,
        total=total,
        neural=tuple(neural),
        connective=tuple(connective),
    )
