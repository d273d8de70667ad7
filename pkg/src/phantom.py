"""
Synthetic ONH phantoms.

Generates labelled OCT volumes from smooth analytic surfaces together with the
ground-truth parameters those surfaces imply, and samples labelled cohorts
from per-group parameter distributions.

Geometry is built in a local frame attached to the BMO: u nasal, v superior,
w posterior (distance below the BMO plane). Outside the scleral canal the
layers stack as ILM, RNFL, GCL+IPL, outer retina, RPE/BM, choroid, sclera,
with the peripapillary wings bowed by the configured scleral angle. Inside
the canal the prelaminar tissue fills a cosine-squared cup down to a
quadric lamina cribrosa.
"""

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, stats

from src.config import (PPSA_WINDOW, RING_FACTOR, RING_SAMPLES, SCAN_DX_UM, SCAN_DY_UM,
                        SCAN_DZ_UM, SCAN_NX, SCAN_NY, SCAN_NZ)
from src.errors import OnhError
from src.parameters import OnhParameters, octant_means
from src.surfaces import octant_index, ring_angles
from src.volume_io import (LEFT, NORMAL_COHORT, RIGHT, LabelVolume, SeverityGroup,
                           SubjectMeta, TissueLabel)

BMO_POINT_COUNT = 48
MRW_PROFILE_SAMPLES = 4000

# Boundary stack outside the canal, anterior to posterior, and the labels between them
_OUTSIDE_LABELS = np.array([
    TissueLabel.BACKGROUND, TissueLabel.RNFL_PLT, TissueLabel.GCL_IPL, TissueLabel.ORL,
    TissueLabel.RPE_BM, TissueLabel.CHOROID, TissueLabel.SCLERA, TissueLabel.BACKGROUND,
], dtype=np.uint8)
_CANAL_LABELS = np.array([
    TissueLabel.BACKGROUND, TissueLabel.RNFL_PLT, TissueLabel.LC, TissueLabel.BACKGROUND,
], dtype=np.uint8)
_CANAL_LABELS_NO_LC = np.array([
    TissueLabel.BACKGROUND, TissueLabel.RNFL_PLT, TissueLabel.BACKGROUND, TissueLabel.BACKGROUND,
], dtype=np.uint8)


@dataclass(frozen=True)
class PhantomConfig:
    """Scan geometry, anatomy and noise of one synthetic eye (lengths in um)."""
    # scan geometry
    nx: int = SCAN_NX
    ny: int = SCAN_NY
    nz: int = SCAN_NZ
    dx: float = SCAN_DX_UM
    dy: float = SCAN_DY_UM
    dz: float = SCAN_DZ_UM
    laterality: str = RIGHT
    bmo_depth_um: float = 700.0  # scan depth of the BMO centre
    # BMO
    bmo_a_um: float = 880.0  # nasal-temporal semi-axis
    bmo_b_um: float = 780.0  # superior-inferior semi-axis
    tilt_deg: float = 0.0  # BMO plane rotation about the scan x axis
    # retinal layers
    rnfl_octants_um: Tuple[float, ...] = (100.0,) * 8  # T, ST, S, SN, N, IN, I, IT
    rnfl_radial_slope_um_per_mm: float = 0.0  # change per mm of radius beyond the ring
    gcl_ipl_um: float = 70.0
    orl_um: float = 100.0
    rpe_um: float = 20.0
    choroid_um: float = 150.0
    sclera_um: float = 300.0
    # cup and lamina
    pld_um: float = 250.0
    cup_radius_fraction: float = 0.75  # cup radius as a fraction of the minor semi-axis
    lcd_um: float = 410.0
    lc_gsi: float = -0.5
    lc_curvedness_per_um: float = 1.0 / 2500.0
    lc_thickness_um: float = 200.0
    lc_visible: bool = True
    # peripapillary sclera
    ppsa_deg: float = 0.0
    # noise
    jitter_sigma_vox: float = 0.0
    seed: int = 0

    def to_dict(self) -> dict:
        data = asdict(self)
        data["rnfl_octants_um"] = list(self.rnfl_octants_um)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomConfig":
        data = dict(data)
        if "rnfl_octants_um" in data:
            data["rnfl_octants_um"] = tuple(float(t) for t in data["rnfl_octants_um"])
        return cls(**data)

    @property
    def bmo_radius_um(self) -> float:
        return math.sqrt(self.bmo_a_um * self.bmo_b_um)

    @property
    def cup_radius_um(self) -> float:
        return self.cup_radius_fraction * self.bmo_b_um

    @property
    def lc_curvatures(self) -> Tuple[float, float]:
        """Principal curvatures (along u, along v) of the anterior LC height function."""
        alpha = math.pi * self.lc_gsi / 2
        total = self.lc_curvedness_per_um * math.sin(alpha)
        spread = self.lc_curvedness_per_um * math.cos(alpha)
        return (total + spread) / 2, (total - spread) / 2


@dataclass(frozen=True)
class GroundTruth:
    parameters: OnhParameters
    mrw_per_point_um: np.ndarray
    bmo_points_normalized: np.ndarray


@dataclass
class CohortEye:
    eye_id: str
    group: SeverityGroup
    config: PhantomConfig
    volume: LabelVolume
    truth: GroundTruth


@dataclass(frozen=True)
class ParamDistribution:
    """Normal distribution truncated to [low, high]; sd = 0 gives a constant."""
    mean: float
    sd: float
    low: float = -math.inf
    high: float = math.inf

    def draw(self, rng: np.random.Generator) -> float:
        if self.sd == 0:
            return float(np.clip(self.mean, self.low, self.high))
        lo = (self.low - self.mean) / self.sd
        hi = (self.high - self.mean) / self.sd
        return float(stats.truncnorm.rvs(lo, hi, loc=self.mean, scale=self.sd, random_state=rng))


@dataclass(frozen=True)
class GroupSpec:
    """
    Per-group phantom distributions.

    `params` maps a sampled quantity to its distribution. Recognised keys:
    rnflt_avg_um (scaled by `rnfl_pattern`), rnfl_<octant>_um overrides,
    lcd_um, mpt_um, lc_gsi, ppsa_deg, bmoa_mm2, choroid_um, gcl_ipl_um, and any
    other float PhantomConfig field name.
    """
    params: Dict[str, ParamDistribution]
    base: PhantomConfig = field(default_factory=PhantomConfig)
    rnfl_pattern: Tuple[float, ...] = (0.78, 1.15, 1.25, 0.98, 0.72, 0.98, 1.28, 0.86)
    bmo_aspect: float = 1.1  # a / b
    cohort_flag: str = "glaucoma"
    age: ParamDistribution = ParamDistribution(65.0, 7.0, 40.0, 90.0)
    female_fraction: float = 0.5
    race_weights: Dict[str, float] = field(default_factory=lambda: {"Chinese": 1.0})
    md_db: ParamDistribution = ParamDistribution(-3.0, 2.0, -6.0, 2.0)


# --------------------------------------------------------------------------
# analytic surfaces
# --------------------------------------------------------------------------

def _rnfl_thickness(cfg: PhantomConfig, theta_deg, radius):
    centers = np.arange(9) * 45.0
    values = np.append(np.asarray(cfg.rnfl_octants_um, dtype=float), cfg.rnfl_octants_um[0])
    base = np.interp(np.mod(theta_deg, 360.0), centers, values)
    ring = RING_FACTOR * cfg.bmo_radius_um
    return np.maximum(base + cfg.rnfl_radial_slope_um_per_mm * (radius - ring) / 1000.0, 0.0)


def _scleral_offset(cfg: PhantomConfig, u):
    """Depth offset of the peripapillary layers; negative (anterior) away from the canal."""
    slope = math.tan(math.radians(cfg.ppsa_deg / 2))
    return -np.maximum(np.abs(u) - cfg.bmo_a_um, 0.0) * slope


def _retina_height(cfg: PhantomConfig, u, v):
    """ILM height above the RPE/choroid interface."""
    theta = np.degrees(np.arctan2(v, -u))
    radius = np.hypot(u, v)
    return cfg.rpe_um + cfg.orl_um + cfg.gcl_ipl_um + _rnfl_thickness(cfg, theta, radius)


def in_canal(cfg: PhantomConfig, u, v):
    return (u / cfg.bmo_a_um) ** 2 + (v / cfg.bmo_b_um) ** 2 < 1.0


def ilm_depth(cfg: PhantomConfig, u, v):
    """Analytic ILM depth w(u, v) below the BMO plane."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    height = _retina_height(cfg, u, v)
    rim = _scleral_offset(cfg, u) - height
    radius = np.hypot(u, v)
    rc = cfg.cup_radius_um
    profile = np.cos(np.pi * np.minimum(radius, rc) / (2 * rc)) ** 2
    cup = -height + (cfg.pld_um + height) * profile
    return np.where(radius < rc, cup, rim)


def lc_depth_surface(cfg: PhantomConfig, u, v):
    """Analytic anterior LC depth w(u, v) below the BMO plane."""
    k1, k2 = cfg.lc_curvatures
    return cfg.lcd_um + 0.5 * k1 * np.asarray(u) ** 2 + 0.5 * k2 * np.asarray(v) ** 2


def _local_axes(cfg: PhantomConfig):
    t = math.radians(cfg.tilt_deg)
    nasal = np.array([-1.0 if cfg.laterality == LEFT else 1.0, 0.0, 0.0])
    superior = np.array([0.0, -math.cos(t), -math.sin(t)])
    posterior = np.array([0.0, -math.sin(t), math.cos(t)])
    return nasal, superior, posterior


def bmo_center(cfg: PhantomConfig) -> np.ndarray:
    return np.array([cfg.nx * cfg.dx / 2, cfg.ny * cfg.dy / 2, cfg.bmo_depth_um])


def validate_config(cfg: PhantomConfig) -> None:
    """
    Raise INCONSISTENT_LAYERS when the configured anatomy cannot be rasterized.
    """
    def fail(message, name):
        raise OnhError("phantom", "INCONSISTENT_LAYERS", message, field=name)

    for name in ("gcl_ipl_um", "orl_um", "rpe_um", "choroid_um", "sclera_um", "lc_thickness_um"):
        if getattr(cfg, name) < 0:
            fail(f"{name} must be >= 0, got {getattr(cfg, name)}", name)
    if len(cfg.rnfl_octants_um) != 8 or min(cfg.rnfl_octants_um) < 0:
        fail("rnfl_octants_um needs 8 non-negative values", "rnfl_octants_um")
    if not cfg.bmo_a_um >= cfg.bmo_b_um > 0:
        fail(f"BMO semi-axes need a >= b > 0, got {cfg.bmo_a_um}, {cfg.bmo_b_um}", "bmo_b_um")
    if RING_FACTOR * cfg.bmo_radius_um <= cfg.bmo_a_um:
        fail("measurement ring falls inside the canal; reduce the BMO aspect ratio", "bmo_a_um")
    if not 0 < cfg.cup_radius_fraction < 1:
        fail("cup radius must lie strictly inside the BMO", "cup_radius_fraction")
    if not -1 <= cfg.lc_gsi <= 1 or cfg.lc_curvedness_per_um < 0:
        fail("LC shape needs GSI in [-1, 1] and non-negative curvedness", "lc_gsi")
    if not 0 <= cfg.ppsa_deg < 90:
        fail(f"ppsa_deg must lie in [0, 90), got {cfg.ppsa_deg}", "ppsa_deg")
    if min(cfg.dx, cfg.dy, cfg.dz) <= 0 or min(cfg.nx, cfg.ny, cfg.nz) <= 0:
        fail("scan geometry must be positive", "spacing")

    # the lamina must sit below the ILM everywhere inside the canal
    grid = np.linspace(-1.0, 1.0, 81)
    gu, gv = np.meshgrid(grid * cfg.bmo_a_um, grid * cfg.bmo_b_um)
    inside = in_canal(cfg, gu, gv)
    gap = lc_depth_surface(cfg, gu, gv) - ilm_depth(cfg, gu, gv)
    if np.any(gap[inside] <= 0):
        fail("anterior LC rises above the ILM inside the canal", "lcd_um")
    k1, k2 = cfg.lc_curvatures
    if max(abs(k1), abs(k2)) * (cfg.lcd_um - cfg.pld_um) >= 1:
        fail("LC curvature too strong for the prelaminar thickness", "lc_curvedness_per_um")

    # stay within the scan extent
    center = bmo_center(cfg)
    half_w = cfg.nx * cfg.dx / 2
    half_h = cfg.ny * cfg.dy / 2
    u_edge = np.array([-half_w, half_w, 0.0, 0.0])
    v_edge = np.array([0.0, 0.0, -half_h, half_h])
    top = np.min(ilm_depth(cfg, u_edge, v_edge))
    tilt_margin = abs(math.sin(math.radians(cfg.tilt_deg))) * half_h
    if center[2] + top - tilt_margin < 0:
        fail("ILM leaves the top of the scan", "bmo_depth_um")
    deepest = max(cfg.lcd_um + cfg.lc_thickness_um, cfg.choroid_um + cfg.sclera_um, cfg.pld_um)
    if center[2] + deepest + tilt_margin > cfg.nz * cfg.dz:
        fail("deep layers leave the bottom of the scan", "bmo_depth_um")


def generate_bmo_points(cfg: PhantomConfig) -> np.ndarray:
    """BMO points on the configured ellipse, volume frame (um)."""
    nasal, superior, _ = _local_axes(cfg)
    psi = np.arange(BMO_POINT_COUNT) * (2 * math.pi / BMO_POINT_COUNT)
    u = cfg.bmo_a_um * np.cos(psi)
    v = cfg.bmo_b_um * np.sin(psi)
    return bmo_center(cfg) + np.outer(u, nasal) + np.outer(v, superior)


def rasterize(cfg: PhantomConfig) -> np.ndarray:
    """
    Label voxels (nz, ny, nx) from the analytic surfaces.

    Every voxel centre is mapped to the local frame and labelled by the
    depth interval it falls in. Boundary jitter is drawn per A-scan column.
    """
    rng = np.random.default_rng(cfg.seed)
    nasal, superior, posterior = _local_axes(cfg)
    center = bmo_center(cfg)
    xs = (np.arange(cfg.nx) + 0.5) * cfg.dx - center[0]
    zs = (np.arange(cfg.nz) + 0.5) * cfg.dz - center[2]
    px = np.broadcast_to(xs[None, :], (cfg.nz, cfg.nx))
    pz = np.broadcast_to(zs[:, None], (cfg.nz, cfg.nx))

    jitter = None
    if cfg.jitter_sigma_vox > 0:
        jitter = rng.normal(0.0, cfg.jitter_sigma_vox * cfg.dz, size=(7, cfg.ny, cfg.nx))

    k1, k2 = cfg.lc_curvatures
    canal_labels = _CANAL_LABELS if cfg.lc_visible else _CANAL_LABELS_NO_LC
    voxels = np.zeros((cfg.nz, cfg.ny, cfg.nx), dtype=np.uint8)
    for iy in range(cfg.ny):
        py = (iy + 0.5) * cfg.dy - center[1]
        u = px * nasal[0]
        v = py * superior[1] + pz * superior[2]
        w = py * posterior[1] + pz * posterior[2]

        offset = _scleral_offset(cfg, u)
        ilm = ilm_depth(cfg, u, v)
        outside = np.stack([
            ilm,
            offset - (cfg.rpe_um + cfg.orl_um + cfg.gcl_ipl_um),
            offset - (cfg.rpe_um + cfg.orl_um),
            offset - cfg.rpe_um,
            offset,
            offset + cfg.choroid_um,
            offset + cfg.choroid_um + cfg.sclera_um,
        ])
        lc_top = cfg.lcd_um + 0.5 * k1 * u ** 2 + 0.5 * k2 * v ** 2
        canal = np.stack([ilm, lc_top, lc_top + cfg.lc_thickness_um])
        if jitter is not None:
            outside = outside + jitter[:, iy, None, :]
            canal = canal + jitter[:3, iy, None, :]
            outside = np.maximum.accumulate(outside, axis=0)
            canal = np.maximum.accumulate(canal, axis=0)
        out_idx = (w[None] >= outside).sum(axis=0)
        canal_idx = (w[None] >= canal).sum(axis=0)
        labels = np.where(in_canal(cfg, u, v), canal_labels[canal_idx], _OUTSIDE_LABELS[out_idx])
        voxels[:, iy, :] = labels
    return voxels


# --------------------------------------------------------------------------
# ground truth
# --------------------------------------------------------------------------

def _mrw_truth(cfg: PhantomConfig, u_b: float, v_b: float) -> float:
    """Minimum distance from a BMO point to the analytic ILM along its meridian."""
    r_b = math.hypot(u_b, v_b)
    cu, cv = u_b / r_b, v_b / r_b
    reach = r_b + 3 * float(np.max(cfg.rnfl_octants_um)) + 3 * (cfg.gcl_ipl_um + cfg.orl_um + cfg.rpe_um)

    def distance(r):
        w = ilm_depth(cfg, r * cu, r * cv)
        return np.hypot(r - r_b, w)

    radii = np.linspace(0.0, reach, MRW_PROFILE_SAMPLES)
    d = distance(radii)
    i = int(np.argmin(d))
    lo = radii[max(i - 1, 0)]
    hi = radii[min(i + 1, len(radii) - 1)]
    best = optimize.minimize_scalar(lambda r: float(distance(r)), bounds=(lo, hi), method="bounded",
                                    options={"xatol": 1e-6})
    return float(min(best.fun, d[i]))


def _ppsa_truth(cfg: PhantomConfig) -> float:
    """Signed angle between nasal and temporal least squares lines on the analytic sclera."""
    lo, hi = PPSA_WINDOW
    r = cfg.bmo_radius_um
    xs = np.linspace(lo * r, hi * r, 400)
    slopes = []
    for side in (1.0, -1.0):
        x = side * xs
        z = _scleral_offset(cfg, x) + cfg.choroid_um
        slopes.append(np.polyfit(x, z, 1)[0])
    return float(math.degrees(math.atan(slopes[1]) - math.atan(slopes[0])))


def ground_truth(cfg: PhantomConfig) -> GroundTruth:
    """
    Parameters implied by a configuration, from the analytic surfaces.

    Lengths on the measurement ring use the perpendicular layer thickness
    (cos of the local scleral wing angle); GCCT uses the axial run length.
    """
    validate_config(cfg)
    ring_r = RING_FACTOR * cfg.bmo_radius_um
    angles = ring_angles(RING_SAMPLES)
    x = -ring_r * np.cos(angles)
    y = ring_r * np.sin(angles)
    beta = math.radians(cfg.ppsa_deg / 2)
    cos_wing = np.where(np.abs(x) > cfg.bmo_a_um, math.cos(beta), 1.0)
    rnfl = _rnfl_thickness(cfg, np.degrees(angles), ring_r)
    sector = octant_index(x, y)
    tilt = math.cos(math.radians(cfg.tilt_deg))

    rnflt = octant_means(rnfl * cos_wing, sector)
    cht = octant_means(np.full(RING_SAMPLES, cfg.choroid_um) * cos_wing, sector)
    gcct = octant_means((rnfl + cfg.gcl_ipl_um) / tilt, sector)

    psi = np.arange(BMO_POINT_COUNT) * (2 * math.pi / BMO_POINT_COUNT)
    bu = cfg.bmo_a_um * np.cos(psi)
    bv = cfg.bmo_b_um * np.sin(psi)
    mrw_points = np.array([_mrw_truth(cfg, u, v) for u, v in zip(bu, bv)])
    mrw = octant_means(mrw_points, octant_index(bu, bv))

    lc = cfg.lc_visible
    gsi = cfg.lc_gsi if (lc and cfg.lc_curvedness_per_um > 0) else math.nan
    params = OnhParameters(
        rnflt_um=rnflt,
        mrw_um=mrw,
        gcct_um=gcct,
        cht_um=cht,
        pld_um=cfg.pld_um,
        mpt_um=cfg.lcd_um - cfg.pld_um if lc else math.nan,
        lcd_um=cfg.lcd_um if lc else math.nan,
        lc_gsi=gsi,
        ppsa_deg=_ppsa_truth(cfg),
        bmoa_mm2=math.pi * cfg.bmo_a_um * cfg.bmo_b_um / 1e6,
    )
    return GroundTruth(
        parameters=params,
        mrw_per_point_um=mrw_points,
        bmo_points_normalized=np.column_stack((bu, bv, np.zeros_like(bu))),
    )


def generate(cfg: PhantomConfig, meta: Optional[SubjectMeta] = None) -> Tuple[LabelVolume, GroundTruth]:
    """
    Rasterize a phantom eye and compute its ground truth.

    Args:
        cfg: Phantom configuration
        meta: Optional subject record stored with the volume

    Returns:
        (LabelVolume, GroundTruth)

    Raises:
        OnhError: INCONSISTENT_LAYERS
    """
    truth = ground_truth(cfg)
    volume = LabelVolume(
        voxels=rasterize(cfg),
        spacing=(float(cfg.dx), float(cfg.dy), float(cfg.dz)),
        bmo_points=generate_bmo_points(cfg),
        laterality=cfg.laterality,
        meta=meta,
    )
    return volume, truth


# --------------------------------------------------------------------------
# cohorts
# --------------------------------------------------------------------------

def default_group_specs(base: Optional[PhantomConfig] = None) -> Dict[SeverityGroup, GroupSpec]:
    """
    Per-group distributions seeded from published group summaries.

    These are simulation inputs; they are not claims of clinical fidelity.
    """
    base = base or PhantomConfig()

    def spec(rnflt, lcd, mpt, gsi, ppsa, bmoa, age, female, chinese, md, flag="glaucoma"):
        return GroupSpec(
            params={
                "rnflt_avg_um": ParamDistribution(*rnflt, 30.0, 180.0),
                "lcd_um": ParamDistribution(*lcd, 220.0, 800.0),
                "mpt_um": ParamDistribution(*mpt, 30.0, 400.0),
                "lc_gsi": ParamDistribution(*gsi, -1.0, 0.95),
                "ppsa_deg": ParamDistribution(*ppsa, 0.0, 20.0),
                "bmoa_mm2": ParamDistribution(*bmoa, 1.2, 3.2),
                "choroid_um": ParamDistribution(150.0, 40.0, 60.0, 260.0),
                "gcl_ipl_um": ParamDistribution(40.0, 8.0, 20.0, 70.0),
            },
            base=base,
            cohort_flag=flag,
            age=ParamDistribution(*age, 40.0, 90.0),
            female_fraction=female,
            race_weights={"Chinese": chinese, "Caucasian": 1.0 - chinese},
            md_db=md,
        )

    return {
        SeverityGroup.NORMAL: spec((112, 26), (410, 109), (146, 116), (-0.37, 0.42), (5.4, 4.6),
                                   (2.15, 0.5), (63.36, 6.99), 126 / 213, 1.0,
                                   ParamDistribution(-1.41, 2.11, -6.0, 3.0), flag=NORMAL_COHORT),
        SeverityGroup.MILD: spec((83, 29), (468, 132), (63, 70), (-0.61, 0.33), (9.5, 6.2),
                                 (2.28, 0.5), (66.9, 6.42), 91 / 204, 178 / 204,
                                 ParamDistribution(-3.35, 1.95, -6.0, 2.0)),
        SeverityGroup.MODERATE: spec((71, 30), (459, 121), (63, 70), (-0.61, 0.33), (9.5, 6.2),
                                     (2.30, 0.58), (68.05, 7.11), 49 / 118, 97 / 118,
                                     ParamDistribution(-8.16, 2.35, -12.0, -6.01)),
        SeverityGroup.ADVANCED: spec((50, 25), (502, 147), (63, 70), (-0.61, 0.33), (9.5, 6.2),
                                     (2.12, 0.42), (68.52, 7.69), 43 / 118, 53 / 118,
                                     ParamDistribution(-18.64, 5.31, -35.0, -12.01)),
    }


def sample_config(spec: GroupSpec, rng: np.random.Generator) -> PhantomConfig:
    """Draw one PhantomConfig from a group spec."""
    values = {name: dist.draw(rng) for name, dist in sorted(spec.params.items())}
    updates = {"seed": int(rng.integers(0, 2 ** 31 - 1))}

    pattern = np.asarray(spec.rnfl_pattern, dtype=float)
    pattern = pattern / pattern.mean()
    rnfl = np.asarray(spec.base.rnfl_octants_um, dtype=float)
    if "rnflt_avg_um" in values:
        rnfl = values.pop("rnflt_avg_um") * pattern
    names = ["T", "ST", "S", "SN", "N", "IN", "I", "IT"]
    for i, name in enumerate(names):
        key = f"rnfl_{name}_um"
        if key in values:
            rnfl[i] = values.pop(key)
    updates["rnfl_octants_um"] = tuple(float(t) for t in rnfl)

    if "bmoa_mm2" in values:
        area = values.pop("bmoa_mm2") * 1e6
        b = math.sqrt(area / (math.pi * spec.bmo_aspect))
        updates["bmo_a_um"] = spec.bmo_aspect * b
        updates["bmo_b_um"] = b
    if "mpt_um" in values:
        mpt = values.pop("mpt_um")
        lcd = values.get("lcd_um", spec.base.lcd_um)
        updates["pld_um"] = lcd - mpt
    updates.update(values)
    return replace(spec.base, **updates)


def _sample_meta(spec: GroupSpec, eye_id: str, rng: np.random.Generator) -> SubjectMeta:
    races = sorted(spec.race_weights)
    weights = np.array([spec.race_weights[r] for r in races], dtype=float)
    race = races[int(rng.choice(len(races), p=weights / weights.sum()))]
    return SubjectMeta(
        id=eye_id,
        age=round(spec.age.draw(rng), 2),
        sex="F" if rng.random() < spec.female_fraction else "M",
        md_db=round(spec.md_db.draw(rng), 2),
        cohort=spec.cohort_flag,
        race=race,
    )


def iter_cohort(specs: Sequence[Tuple[GroupSpec, SeverityGroup]], n_per_group: int,
                seed: int, max_attempts: int = 50) -> Iterator[CohortEye]:
    """
    Yield labelled phantom eyes group by group.

    Draws that produce inconsistent anatomy are redrawn.
    """
    for g, (spec, group) in enumerate(specs):
        for i in range(n_per_group):
            eye_id = f"{group.value.lower()}_{i:04d}"
            rng = np.random.default_rng([seed, g, i])
            meta = _sample_meta(spec, eye_id, rng)
            for attempt in range(max_attempts):
                cfg = sample_config(spec, rng)
                try:
                    volume, truth = generate(cfg, meta=meta)
                    break
                except OnhError as e:
                    if e.code != "INCONSISTENT_LAYERS" or attempt == max_attempts - 1:
                        raise
            yield CohortEye(eye_id=eye_id, group=group, config=cfg, volume=volume, truth=truth)


def cohort(specs: Sequence[Tuple[GroupSpec, SeverityGroup]], n_per_group: int, seed: int,
           verbose: bool = False) -> List[CohortEye]:
    """
    Sample a labelled phantom dataset.

    Args:
        specs: (GroupSpec, SeverityGroup) pairs
        n_per_group: Eyes per group
        seed: Global seed
        verbose: Print progress

    Returns:
        List of CohortEye in group order
    """
    eyes = []
    for eye in iter_cohort(specs, n_per_group, seed):
        eyes.append(eye)
        if verbose and len(eyes) % 10 == 0:
            print(f"Generated {len(eyes)} phantom eyes")
    return eyes


def cohort_manifest(eyes: Sequence[CohortEye]) -> dict:
    """Manifest mapping eye_id to group, meta and config."""
    return {
        eye.eye_id: {
            "group": eye.group.value,
            "meta": eye.volume.meta.to_dict() if eye.volume.meta else None,
            "config": eye.config.to_dict(),
        }
        for eye in eyes
    }
