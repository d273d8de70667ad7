"""
Segmented ONH volumes: the .onhv container, validation and severity staging.

Voxels are held as a numpy uint8 array of shape (nz, ny, nx), which is the
x-fastest row-major order of the file payload. Coordinates are voxel
centres in micrometres: x = (ix + 0.5) * dx, and likewise for y and z, with z
increasing from the vitreous side towards the sclera.
"""

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from src.config import MILD_MIN_MD_DB, MODERATE_MIN_MD_DB
from src.errors import OnhError

MAGIC = b"ONHV"
FORMAT_VERSION = 1

LEFT = "LEFT"
RIGHT = "RIGHT"
_LATERALITY_CODES = {LEFT: 0, RIGHT: 1}

MIN_BMO_POINTS = 5
NORMAL_COHORT = "normal"


class TissueLabel(IntEnum):
    BACKGROUND = 0
    RNFL_PLT = 1
    GCL_IPL = 2
    ORL = 3
    RPE_BM = 4
    CHOROID = 5
    SCLERA = 6
    LC = 7


# Segmented tissues in label order (background excluded)
TISSUES = tuple(t for t in TissueLabel if t != TissueLabel.BACKGROUND)


class SeverityGroup(str, Enum):
    NORMAL = "NORMAL"
    MILD = "MILD"
    MODERATE = "MODERATE"
    ADVANCED = "ADVANCED"


@dataclass(frozen=True)
class SubjectMeta:
    """Optional subject record stored with a volume."""
    id: str
    age: Optional[float] = None
    sex: Optional[str] = None  # "F" or "M"
    md_db: Optional[float] = None
    cohort: Optional[str] = None  # "normal" or "glaucoma"
    race: Optional[str] = None

    def to_dict(self) -> dict:
        data = {
            "id": self.id,
            "age": self.age,
            "sex": self.sex,
            "md_db": self.md_db,
            "cohort": self.cohort,
        }
        if self.race is not None:
            data["race"] = self.race
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "SubjectMeta":
        return cls(
            id=str(data["id"]),
            age=data.get("age"),
            sex=data.get("sex"),
            md_db=data.get("md_db"),
            cohort=data.get("cohort"),
            race=data.get("race"),
        )


@dataclass(eq=False)
class LabelVolume:
    """Voxelized tissue segmentation with spacing, laterality and BMO landmarks."""
    voxels: np.ndarray  # (nz, ny, nx) uint8
    spacing: Tuple[float, float, float]  # dx, dy, dz in um
    bmo_points: np.ndarray  # (N, 3) um, volume coordinates
    laterality: str = RIGHT
    meta: Optional[SubjectMeta] = None
    diagnostics: list = field(default_factory=list)

    @property
    def nx(self) -> int:
        return int(self.voxels.shape[2])

    @property
    def ny(self) -> int:
        return int(self.voxels.shape[1])

    @property
    def nz(self) -> int:
        return int(self.voxels.shape[0])

    @property
    def dims(self) -> Tuple[int, int, int]:
        return (self.nx, self.ny, self.nz)

    @property
    def extent(self) -> np.ndarray:
        """Physical size of the volume along x, y, z in um."""
        return np.array(self.dims, dtype=float) * np.array(self.spacing, dtype=float)

    def column_xy(self, ix, iy):
        """Lateral centre coordinates of A-scan column(s)."""
        dx, dy, _ = self.spacing
        return (np.asarray(ix) + 0.5) * dx, (np.asarray(iy) + 0.5) * dy

    def equals(self, other: "LabelVolume") -> bool:
        """Byte equality on voxels, bit equality on numeric metadata."""
        return (
            self.voxels.shape == other.voxels.shape
            and np.array_equal(self.voxels, other.voxels)
            and tuple(self.spacing) == tuple(other.spacing)
            and self.bmo_points.shape == other.bmo_points.shape
            and self.bmo_points.tobytes() == other.bmo_points.tobytes()
            and self.laterality == other.laterality
            and self.meta == other.meta
        )


def validate_volume(volume: LabelVolume) -> LabelVolume:
    """
    Check every LabelVolume invariant.

    Args:
        volume: Volume to validate

    Returns:
        The same volume, for chaining

    Raises:
        OnhError: MALFORMED_HEADER, LABEL_OUT_OF_RANGE, TOO_FEW_BMO_POINTS or
            BMO_OUT_OF_BOUNDS, naming the offending field
    """
    if volume.voxels.ndim != 3 or volume.voxels.dtype != np.uint8:
        raise OnhError("volume_io", "MALFORMED_HEADER",
                       f"voxels must be a 3D uint8 array, got {volume.voxels.dtype} "
                       f"with {volume.voxels.ndim} dims", field="voxels")
    if len(volume.spacing) != 3 or not all(
            math.isfinite(s) and s > 0 for s in volume.spacing):
        raise OnhError("volume_io", "MALFORMED_HEADER",
                       f"spacing must be strictly positive, got {tuple(volume.spacing)}",
                       field="spacing")
    if volume.laterality not in _LATERALITY_CODES:
        raise OnhError("volume_io", "MALFORMED_HEADER",
                       f"unknown laterality {volume.laterality!r}", field="laterality")
    if volume.voxels.size and int(volume.voxels.max()) > int(TissueLabel.LC):
        bad = int(volume.voxels.max())
        raise OnhError("volume_io", "LABEL_OUT_OF_RANGE",
                       f"voxel label {bad} outside 0..{int(TissueLabel.LC)}", field="voxels")

    points = np.asarray(volume.bmo_points, dtype=float)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) < MIN_BMO_POINTS:
        count = len(points) if points.ndim == 2 else 0
        raise OnhError("volume_io", "TOO_FEW_BMO_POINTS",
                       f"need at least {MIN_BMO_POINTS} BMO points, got {count}",
                       field="bmo_points")
    extent = volume.extent
    inside = np.all(np.isfinite(points), axis=1) & np.all(
        (points >= 0.0) & (points <= extent), axis=1)
    if not inside.all():
        first = int(np.flatnonzero(~inside)[0])
        raise OnhError("volume_io", "BMO_OUT_OF_BOUNDS",
                       f"BMO point {first} {points[first].tolist()} lies outside "
                       f"the volume extent {extent.tolist()}", field=f"bmo_points[{first}]")
    return volume


def _meta_bytes(meta: Optional[SubjectMeta]) -> bytes:
    if meta is None:
        return struct.pack("<B", 0)
    payload = json.dumps(meta.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<BI", 1, len(payload)) + payload


def encode_header(volume: LabelVolume) -> bytes:
    """Header bytes preceding the voxel payload."""
    points = np.asarray(volume.bmo_points, dtype="<f8")
    head = MAGIC + struct.pack("<H", FORMAT_VERSION)
    head += struct.pack("<III", volume.nx, volume.ny, volume.nz)
    head += struct.pack("<ddd", *[float(s) for s in volume.spacing])
    head += struct.pack("<BI", _LATERALITY_CODES[volume.laterality], len(points))
    head += points.tobytes()
    head += _meta_bytes(volume.meta)
    return head


def save_volume(volume: LabelVolume, path) -> None:
    """
    Write a volume to an .onhv container.

    Args:
        volume: Valid LabelVolume
        path: Destination file path

    Raises:
        OnhError: IO_FAILURE when the file cannot be written
    """
    validate_volume(volume)
    data = encode_header(volume) + np.ascontiguousarray(volume.voxels).tobytes()
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as e:
        raise OnhError("volume_io", "IO_FAILURE", f"cannot write {path}: {e}", field=str(path))


class _Reader:
    """Sequential little-endian reader that reports truncation as a header error."""

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str, name: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise OnhError("volume_io", "MALFORMED_HEADER",
                           f"file truncated while reading {name}", field=name)
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def raw(self, size: int, name: str) -> bytes:
        if self.pos + size > len(self.data):
            raise OnhError("volume_io", "MALFORMED_HEADER",
                           f"file truncated while reading {name}", field=name)
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk


def load_volume(path) -> LabelVolume:
    """
    Read and validate an .onhv container.

    Args:
        path: Path to the container file

    Returns:
        Fully validated LabelVolume

    Raises:
        OnhError: IO_FAILURE, MALFORMED_HEADER, SIZE_MISMATCH,
            LABEL_OUT_OF_RANGE, TOO_FEW_BMO_POINTS or BMO_OUT_OF_BOUNDS
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OnhError("volume_io", "IO_FAILURE", f"cannot read {path}: {e}", field=str(path))

    reader = _Reader(data)
    if reader.raw(4, "magic") != MAGIC:
        raise OnhError("volume_io", "MALFORMED_HEADER", "bad magic bytes", field="magic")
    (version,) = reader.take("<H", "version")
    if version != FORMAT_VERSION:
        raise OnhError("volume_io", "MALFORMED_HEADER",
                       f"unsupported format version {version}", field="version")
    nx, ny, nz = reader.take("<III", "dims")
    spacing = reader.take("<ddd", "spacing")
    if not all(math.isfinite(s) and s > 0 for s in spacing):
        raise OnhError("volume_io", "MALFORMED_HEADER",
                       f"spacing must be strictly positive, got {spacing}", field="spacing")
    (lat_code,) = reader.take("<B", "laterality")
    if lat_code not in (0, 1):
        raise OnhError("volume_io", "MALFORMED_HEADER",
                       f"laterality code {lat_code} not in {{0, 1}}", field="laterality")
    laterality = LEFT if lat_code == 0 else RIGHT
    (bmo_count,) = reader.take("<I", "bmo_count")
    if bmo_count < MIN_BMO_POINTS:
        raise OnhError("volume_io", "TOO_FEW_BMO_POINTS",
                       f"need at least {MIN_BMO_POINTS} BMO points, got {bmo_count}",
                       field="bmo_count")
    points = np.frombuffer(reader.raw(24 * bmo_count, "bmo_points"), dtype="<f8")
    points = points.reshape(bmo_count, 3).astype(float)

    (has_meta,) = reader.take("<B", "has_meta")
    meta = None
    if has_meta == 1:
        (length,) = reader.take("<I", "meta_length")
        try:
            meta = SubjectMeta.from_dict(json.loads(reader.raw(length, "meta").decode("utf-8")))
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise OnhError("volume_io", "MALFORMED_HEADER", f"invalid meta block: {e}", field="meta")
    elif has_meta != 0:
        raise OnhError("volume_io", "MALFORMED_HEADER",
                       f"has_meta must be 0 or 1, got {has_meta}", field="has_meta")

    expected = nx * ny * nz
    payload = data[reader.pos:]
    if len(payload) != expected:
        raise OnhError("volume_io", "SIZE_MISMATCH",
                       f"voxel payload has {len(payload)} bytes, expected {nx}*{ny}*{nz}={expected}",
                       field="voxels")
    voxels = np.frombuffer(payload, dtype=np.uint8).reshape(nz, ny, nx).copy()

    volume = LabelVolume(
        voxels=voxels,
        spacing=tuple(float(s) for s in spacing),
        bmo_points=points,
        laterality=laterality,
        meta=meta,
    )
    return validate_volume(volume)


def classify_severity(md_db: Optional[float], cohort: Optional[str] = None) -> SeverityGroup:
    """
    Stage glaucoma severity from visual field mean deviation.

    Controls are NORMAL by cohort flag, never by MD.

    Args:
        md_db: Mean deviation in dB
        cohort: "normal" for non-glaucomatous subjects

    Returns:
        SeverityGroup

    Raises:
        OnhError: NON_FINITE_MD for a glaucoma record without a finite MD
    """
    if cohort == NORMAL_COHORT:
        return SeverityGroup.NORMAL
    if md_db is None or not math.isfinite(md_db):
        raise OnhError("volume_io", "NON_FINITE_MD", f"MD must be finite, got {md_db}", field="md_db")
    if md_db >= MILD_MIN_MD_DB:
        return SeverityGroup.MILD
    if md_db >= MODERATE_MIN_MD_DB:
        return SeverityGroup.MODERATE
    return SeverityGroup.ADVANCED


def severity_of(volume: LabelVolume) -> SeverityGroup:
    """Severity group of a volume from its subject meta."""
    if volume.meta is None:
        raise OnhError("volume_io", "NON_FINITE_MD", "volume has no subject meta", field="meta")
    return classify_severity(volume.meta.md_db, volume.meta.cohort)
