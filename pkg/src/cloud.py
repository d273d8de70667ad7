"""
ONH point clouds.

Anterior boundary points of the seven tissues in normalized ONH
coordinates, each carrying its local layer thickness (not applicable for
sclera and LC) and tissue label. Also sampling, augmentation and the .onhpc
CSV format.
"""

import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from src.config import CLOUD_LATERAL_PITCH_UM, DEFAULT_SAMPLE_N, MIN_SAMPLE_N, UNIT_SCALE
from src.errors import OnhError
from src.frame import OnhFrame, build_frame, to_normalized
from src.surfaces import extract_boundaries, local_thickness
from src.volume_io import TISSUES, LabelVolume, SeverityGroup, TissueLabel, severity_of

# Tissues whose posterior boundary is not OCT-visible
NO_THICKNESS_TISSUES = (TissueLabel.SCLERA, TissueLabel.LC)
CLOUD_COLUMNS = ["x_um", "y_um", "z_um", "thickness_um", "tissue", "eye_id", "label"]


@dataclass(eq=False)
class PointCloud:
    xyz: np.ndarray  # (N, 3) um, normalized frame
    thickness: np.ndarray  # (N,) um, 0 where not applicable
    thickness_mask: np.ndarray  # (N,) True where thickness applies
    tissue: np.ndarray  # (N,) uint8 TissueLabel values
    eye_id: str = ""
    label: Optional[SeverityGroup] = None
    diagnostics: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.xyz)

    def subset(self, index) -> "PointCloud":
        index = np.asarray(index)
        return PointCloud(
            xyz=self.xyz[index],
            thickness=self.thickness[index],
            thickness_mask=self.thickness_mask[index],
            tissue=self.tissue[index],
            eye_id=self.eye_id,
            label=self.label,
            diagnostics=list(self.diagnostics),
        )

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return PointCloud(xyz, self.thickness, self.thickness_mask, self.tissue,
                          self.eye_id, self.label, list(self.diagnostics))

    def features(self, unit_scale: float = UNIT_SCALE) -> np.ndarray:
        """(N, 4) network input: x, y, z, thickness scaled to mm, 0 where not applicable."""
        return np.column_stack((self.xyz, self.thickness)) * unit_scale

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "x_um": self.xyz[:, 0],
            "y_um": self.xyz[:, 1],
            "z_um": self.xyz[:, 2],
            "thickness_um": np.where(self.thickness_mask, self.thickness, np.nan),
            "tissue": self.tissue.astype(int),
            "eye_id": self.eye_id,
            "label": self.label.value if self.label is not None else "",
        }, columns=CLOUD_COLUMNS)


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation; all ranges are (low, high)."""
    crop_fraction: Tuple[float, float] = (0.85, 1.0)
    rotation_deg: Tuple[float, float] = (-10.0, 10.0)
    translation_um: Tuple[float, float] = (-50.0, 50.0)
    sample_n: int = DEFAULT_SAMPLE_N
    noise_sigma_um: float = 5.0
    oversample: bool = True

    def __post_init__(self):
        for name in ("crop_fraction", "rotation_deg", "translation_um"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise OnhError("cloud", "INVALID_AUGMENT", f"{name} range ({lo}, {hi}) is not ordered",
                               field=name)
        if not 0 < self.crop_fraction[0] <= self.crop_fraction[1] <= 1:
            raise OnhError("cloud", "INVALID_AUGMENT", "crop_fraction must lie in (0, 1]",
                           field="crop_fraction")
        if self.sample_n < MIN_SAMPLE_N:
            raise OnhError("cloud", "INVALID_AUGMENT", f"sample_n must be >= {MIN_SAMPLE_N}",
                           field="sample_n")
        if self.noise_sigma_um < 0:
            raise OnhError("cloud", "INVALID_AUGMENT", "noise_sigma_um must be >= 0",
                           field="noise_sigma_um")

    def to_dict(self) -> dict:
        data = asdict(self)
        for name in ("crop_fraction", "rotation_deg", "translation_um"):
            data[name] = list(data[name])
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "AugmentConfig":
        data = dict(data)
        for name in ("crop_fraction", "rotation_deg", "translation_um"):
            if name in data:
                data[name] = tuple(float(v) for v in data[name])
        return cls(**data)


def eye_seed_sequence(seed: int, eye_id: str, *extra: int) -> np.random.SeedSequence:
    """Per-eye random stream derived from the global seed and the eye id."""
    return np.random.SeedSequence([int(seed), zlib.crc32(eye_id.encode("utf-8")), *[int(e) for e in extra]])


def _column_strides(volume: LabelVolume, pitch: Optional[Tuple[float, float]]) -> Tuple[int, int]:
    if pitch is None:
        return 1, 1
    dx, dy, _ = volume.spacing
    return max(1, int(round(pitch[0] / dx))), max(1, int(round(pitch[1] / dy)))


def build_cloud(volume: LabelVolume, frame: Optional[OnhFrame] = None,
                lateral_pitch_um: Optional[Tuple[float, float]] = CLOUD_LATERAL_PITCH_UM,
                eye_id: Optional[str] = None, label: Optional[SeverityGroup] = None) -> PointCloud:
    """
    Point cloud of the anterior tissue boundaries in normalized coordinates.

    Thickness is computed on the full-resolution surfaces; the lateral pitch
    then keeps a regular subset of A-scan columns.

    Args:
        volume: Segmented volume
        frame: Optional prebuilt frame
        lateral_pitch_um: Column spacing kept along (x, y); None keeps every column
        eye_id: Defaults to the subject id
        label: Defaults to the severity implied by the subject meta

    Returns:
        PointCloud

    Raises:
        OnhError: EMPTY_CLOUD when no tissue has a boundary
    """
    frame = frame or build_frame(volume)
    sx, sy = _column_strides(volume, lateral_pitch_um)
    xyz, thickness, mask, tissue = [], [], [], []
    for label_value in TISSUES:
        surface = extract_boundaries(volume, label_value)
        if len(surface) == 0:
            continue
        keep = (surface.ix % sx == 0) & (surface.iy % sy == 0)
        if label_value in NO_THICKNESS_TISSUES:
            values = np.zeros(int(keep.sum()))
            applies = np.zeros(len(values), dtype=bool)
        else:
            values = local_thickness(surface).thickness[keep]
            applies = np.ones(len(values), dtype=bool)
        xyz.append(to_normalized(surface.anterior[keep], frame))
        thickness.append(values)
        mask.append(applies)
        tissue.append(np.full(len(values), int(label_value), dtype=np.uint8))

    if not xyz or sum(len(t) for t in tissue) == 0:
        raise OnhError("cloud", "EMPTY_CLOUD", "no tissue boundaries in the volume", field="voxels")
    if eye_id is None:
        eye_id = volume.meta.id if volume.meta is not None else ""
    if label is None and volume.meta is not None:
        try:
            label = severity_of(volume)
        except OnhError:
            label = None
    return PointCloud(
        xyz=np.concatenate(xyz),
        thickness=np.concatenate(thickness),
        thickness_mask=np.concatenate(mask),
        tissue=np.concatenate(tissue),
        eye_id=eye_id,
        label=label,
    )


def sample(cloud: PointCloud, n: int, seed) -> PointCloud:
    """
    Uniform sample without replacement of min(n, |cloud|) points.

    The seed may be an int or a numpy SeedSequence/Generator.
    """
    if n >= len(cloud):
        return cloud.subset(np.arange(len(cloud)))
    rng = np.random.default_rng(seed)
    index = np.sort(rng.choice(len(cloud), size=n, replace=False))
    return cloud.subset(index)


def augment(cloud: PointCloud, cfg: AugmentConfig, seed) -> PointCloud:
    """
    Apply crop, axial rotation, rigid translation, coordinate noise and
    sampling, in that order. The label and eye id are never changed.

    A crop that would leave fewer than 64 points is skipped and recorded as a
    CROP_EMPTIED diagnostic on the returned cloud.
    """
    rng = np.random.default_rng(seed)
    out = cloud.subset(np.arange(len(cloud)))

    fraction = rng.uniform(*cfg.crop_fraction)
    direction = rng.uniform(0.0, 2 * math.pi)
    if fraction < 1.0 and len(out):
        proj = out.xyz[:, 0] * math.cos(direction) + out.xyz[:, 1] * math.sin(direction)
        keep = proj <= np.quantile(proj, fraction)
        if np.count_nonzero(keep) < MIN_SAMPLE_N:
            out.diagnostics.append("CROP_EMPTIED")
        else:
            out = out.subset(np.flatnonzero(keep))

    angle = math.radians(rng.uniform(*cfg.rotation_deg))
    c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    shift = rng.uniform(cfg.translation_um[0], cfg.translation_um[1], size=3)
    xyz = out.xyz @ rotation.T + shift
    if cfg.noise_sigma_um > 0:
        xyz = xyz + rng.normal(0.0, cfg.noise_sigma_um, size=xyz.shape)
    out = out.with_xyz(xyz)
    return sample(out, cfg.sample_n, rng)


def write_cloud(cloud: PointCloud, path) -> None:
    """Write a cloud as .onhpc CSV; not-applicable thickness is an empty field."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        cloud.to_frame().to_csv(path, index=False, na_rep="", lineterminator="\n")
    except OSError as e:
        raise OnhError("cloud", "IO_FAILURE", f"cannot write {path}: {e}", field=str(path))


def read_cloud(path) -> PointCloud:
    """Read an .onhpc CSV written by write_cloud."""
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype={"eye_id": str, "label": str}, keep_default_na=False,
                         na_values={"thickness_um": [""]})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise OnhError("cloud", "IO_FAILURE", f"cannot read {path}: {e}", field=str(path))
    missing = [c for c in CLOUD_COLUMNS if c not in df.columns]
    if missing:
        raise OnhError("cloud", "IO_FAILURE", f"{path} lacks columns {missing}", field=str(path))
    thickness = df["thickness_um"].to_numpy(dtype=float)
    mask = ~np.isnan(thickness)
    label = df["label"].iloc[0] if len(df) else ""
    return PointCloud(
        xyz=df[["x_um", "y_um", "z_um"]].to_numpy(dtype=float),
        thickness=np.where(mask, thickness, 0.0),
        thickness_mask=mask,
        tissue=df["tissue"].to_numpy(dtype=np.uint8),
        eye_id=str(df["eye_id"].iloc[0]) if len(df) else path.stem,
        label=SeverityGroup(label) if label else None,
    )
