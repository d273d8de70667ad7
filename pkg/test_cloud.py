"""
Tests for point cloud construction, sampling, augmentation and .onhpc files.
"""

import math
import tempfile
from functools import lru_cache
from pathlib import Path

import numpy as np

from src.errors import OnhError
from src.cloud import (
    AugmentConfig,
    PointCloud,
    augment,
    build_cloud,
    eye_seed_sequence,
    read_cloud,
    sample,
    write_cloud,
)
from src.phantom import PhantomConfig, generate
from src.surfaces import extract_all_surfaces
from src.volume_io import LabelVolume, SeverityGroup, SubjectMeta, TissueLabel

KEEP_ALL = 10 ** 7


def small_config(**overrides) -> PhantomConfig:
    base = dict(nx=140, ny=90, nz=400, dx=20.0, dy=20.0, dz=3.87, bmo_a_um=520.0, bmo_b_um=480.0)
    base.update(overrides)
    return PhantomConfig(**base)


@lru_cache(maxsize=None)
def _phantom_volume() -> LabelVolume:
    meta = SubjectMeta(id="eye_042", age=70.0, sex="F", md_db=-8.2, cohort="glaucoma")
    volume, _ = generate(small_config(), meta=meta)
    return volume


def _cloud(n=500, seed=0, label=SeverityGroup.MILD) -> PointCloud:
    rng = np.random.default_rng(seed)
    tissue = rng.integers(1, 8, size=n).astype(np.uint8)
    mask = tissue < int(TissueLabel.SCLERA)
    thickness = np.where(mask, rng.uniform(10.0, 200.0, size=n), 0.0)
    return PointCloud(
        xyz=rng.uniform(-1500.0, 1500.0, size=(n, 3)),
        thickness=thickness,
        thickness_mask=mask,
        tissue=tissue,
        eye_id="synthetic",
        label=label,
    )


def _still(**overrides) -> AugmentConfig:
    """Augmentation that changes nothing unless overridden."""
    base = dict(crop_fraction=(1.0, 1.0), rotation_deg=(0.0, 0.0), translation_um=(0.0, 0.0),
                sample_n=KEEP_ALL, noise_sigma_um=0.0)
    base.update(overrides)
    return AugmentConfig(**base)


def _expect_code(fn, code):
    try:
        fn()
        assert False, f"Should have raised {code}"
    except OnhError as e:
        assert e.code == code, f"expected {code}, got {e.code}"
        return e


def test_build_cloud_full_resolution():
    volume = _phantom_volume()
    cloud = build_cloud(volume, lateral_pitch_um=None)
    surfaces = extract_all_surfaces(volume, with_thickness=False)
    assert len(cloud) == sum(len(s) for s in surfaces.values())
    assert set(np.unique(cloud.tissue).tolist()) == set(range(1, 8))
    no_thickness = np.isin(cloud.tissue, [int(TissueLabel.SCLERA), int(TissueLabel.LC)])
    assert np.array_equal(cloud.thickness_mask, ~no_thickness)
    assert np.all(cloud.thickness[no_thickness] == 0.0)
    assert np.all(cloud.thickness[~no_thickness] >= 0.0)
    assert cloud.eye_id == "eye_042"
    assert cloud.label == SeverityGroup.MODERATE
    # normalized frame: the BMO centre is the origin
    lc = cloud.xyz[cloud.tissue == int(TissueLabel.LC)]
    assert abs(np.median(lc[:, 0])) < 30.0 and abs(np.median(lc[:, 1])) < 30.0
    print(f"   [OK] {len(cloud)} points over seven tissues; LC/sclera carry no thickness")


def test_build_cloud_lateral_pitch():
    volume = _phantom_volume()
    full = build_cloud(volume, lateral_pitch_um=None)
    coarse = build_cloud(volume, lateral_pitch_um=(40.0, 40.0), eye_id="other", label=SeverityGroup.MILD)
    ratio = len(coarse) / len(full)
    assert 0.2 < ratio < 0.3, ratio
    assert coarse.eye_id == "other" and coarse.label == SeverityGroup.MILD
    # columns kept by the coarse grid hold the same thickness as at full resolution
    rnfl_full = full.thickness[full.tissue == int(TissueLabel.RNFL_PLT)]
    rnfl_coarse = coarse.thickness[coarse.tissue == int(TissueLabel.RNFL_PLT)]
    assert rnfl_coarse.max() <= rnfl_full.max() and rnfl_coarse.min() >= rnfl_full.min()
    print(f"   [OK] 40 um pitch keeps {ratio:.1%} of the columns")


def test_empty_cloud():
    angles = np.arange(8) * math.pi / 4
    ring = np.column_stack((20.0 + 10.0 * np.cos(angles), 20.0 + 10.0 * np.sin(angles), np.full(8, 5.0)))
    blank = LabelVolume(np.zeros((4, 4, 4), dtype=np.uint8), (10.0, 10.0, 10.0), ring)
    _expect_code(lambda: build_cloud(blank), "EMPTY_CLOUD")
    print("   [OK] background-only volume -> EMPTY_CLOUD")


def test_features_are_scaled():
    cloud = _cloud(50)
    features = cloud.features()
    assert features.shape == (50, 4)
    assert np.allclose(features[:, :3], cloud.xyz * 1e-3)
    assert np.allclose(features[:, 3], cloud.thickness * 1e-3)
    assert np.all(features[~cloud.thickness_mask, 3] == 0.0)
    print("   [OK] (N, 4) features in mm, zero thickness where not applicable")


def test_sample():
    cloud = _cloud(300)
    picked = sample(cloud, 100, seed=7)
    assert len(picked) == 100
    rows = {tuple(p) for p in picked.xyz}
    assert len(rows) == 100 and rows <= {tuple(p) for p in cloud.xyz}
    again = sample(cloud, 100, seed=7)
    assert np.array_equal(picked.xyz, again.xyz)
    assert not np.array_equal(picked.xyz, sample(cloud, 100, seed=8).xyz)
    everything = sample(cloud, 1000, seed=7)
    assert len(everything) == 300 and np.array_equal(everything.xyz, cloud.xyz)
    print("   [OK] sampling without replacement, seeded, capped at the cloud size")


def test_augment_preserves_identity():
    cloud = _cloud(400)
    out = augment(cloud, AugmentConfig(sample_n=128), seed=3)
    assert len(out) == 128
    assert out.label == cloud.label and out.eye_id == cloud.eye_id
    assert set(np.unique(out.tissue).tolist()) <= set(np.unique(cloud.tissue).tolist())
    again = augment(cloud, AugmentConfig(sample_n=128), seed=3)
    assert np.array_equal(out.xyz, again.xyz)
    assert len(cloud) == 400, "input cloud is not modified"
    print("   [OK] label and eye id survive augmentation; same seed -> same output")


def test_augment_rotation_is_axial():
    cloud = _cloud(200)
    out = augment(cloud, _still(rotation_deg=(10.0, 10.0)), seed=0)
    t = math.radians(10.0)
    rotation = np.array([[math.cos(t), -math.sin(t), 0.0], [math.sin(t), math.cos(t), 0.0], [0.0, 0.0, 1.0]])
    assert np.allclose(out.xyz, cloud.xyz @ rotation.T)
    assert np.array_equal(out.xyz[:, 2], cloud.xyz[:, 2])
    assert np.array_equal(out.thickness, cloud.thickness)
    print("   [OK] rotation turns the cloud about the BMO normal only")


def test_augment_translation_and_noise():
    cloud = _cloud(200)
    shifted = augment(cloud, _still(translation_um=(25.0, 25.0)), seed=0)
    assert np.allclose(shifted.xyz - cloud.xyz, 25.0)
    noisy = augment(cloud, _still(noise_sigma_um=5.0), seed=0)
    residual = noisy.xyz - cloud.xyz
    assert 3.5 < residual.std() < 6.5
    print(f"   [OK] rigid 25 um shift; noise sd {residual.std():.2f} um")


def test_augment_crop():
    cloud = _cloud(2000)
    out = augment(cloud, _still(crop_fraction=(0.5, 0.5)), seed=1)
    assert abs(len(out) - 1000) <= 2
    assert "CROP_EMPTIED" not in out.diagnostics

    small = _cloud(100)
    kept = augment(small, _still(crop_fraction=(0.5, 0.5)), seed=1)
    assert len(kept) == 100
    assert kept.diagnostics == ["CROP_EMPTIED"]
    assert small.diagnostics == []
    print("   [OK] half crop keeps half the points; a crop below 64 points is skipped")


def test_augment_config_validation():
    _expect_code(lambda: AugmentConfig(crop_fraction=(0.9, 0.8)), "INVALID_AUGMENT")
    _expect_code(lambda: AugmentConfig(crop_fraction=(0.0, 1.0)), "INVALID_AUGMENT")
    _expect_code(lambda: AugmentConfig(rotation_deg=(5.0, -5.0)), "INVALID_AUGMENT")
    _expect_code(lambda: AugmentConfig(sample_n=32), "INVALID_AUGMENT")
    e = _expect_code(lambda: AugmentConfig(noise_sigma_um=-1.0), "INVALID_AUGMENT")
    assert e.field == "noise_sigma_um"
    cfg = AugmentConfig(rotation_deg=(-5.0, 5.0), sample_n=256, oversample=False)
    assert AugmentConfig.from_dict(cfg.to_dict()) == cfg
    print("   [OK] unordered ranges, empty crops, tiny samples and negative noise are rejected")


def test_eye_seed_sequence():
    a = np.random.default_rng(eye_seed_sequence(1, "eye_a")).random(3)
    b = np.random.default_rng(eye_seed_sequence(1, "eye_a")).random(3)
    c = np.random.default_rng(eye_seed_sequence(1, "eye_b")).random(3)
    d = np.random.default_rng(eye_seed_sequence(1, "eye_a", 5)).random(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    print("   [OK] per-eye streams depend on seed, eye id and epoch")


def test_cloud_file_round_trip():
    cloud = build_cloud(_phantom_volume(), lateral_pitch_um=(60.0, 60.0))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "clouds" / "eye_042.onhpc"
        write_cloud(cloud, path)
        text = path.read_text()
        loaded = read_cloud(path)
    assert text.splitlines()[0] == "x_um,y_um,z_um,thickness_um,tissue,eye_id,label"
    assert len(loaded) == len(cloud)
    assert np.allclose(loaded.xyz, cloud.xyz)
    assert np.allclose(loaded.thickness, cloud.thickness)
    assert np.array_equal(loaded.thickness_mask, cloud.thickness_mask)
    assert np.array_equal(loaded.tissue, cloud.tissue)
    assert loaded.eye_id == "eye_042" and loaded.label == SeverityGroup.MODERATE
    sclera_row = next(line for line in text.splitlines()[1:] if line.split(",")[4] == "6")
    assert sclera_row.split(",")[3] == "", "not-applicable thickness is an empty field"
    print(f"   [OK] {len(cloud)} points survive write/read")


def test_cloud_io_failures():
    with tempfile.TemporaryDirectory() as tmp:
        missing = Path(tmp) / "nope.onhpc"
        assert _expect_code(lambda: read_cloud(missing), "IO_FAILURE").field == str(missing)
        partial = Path(tmp) / "partial.onhpc"
        partial.write_text("x_um,y_um\n1,2\n")
        _expect_code(lambda: read_cloud(partial), "IO_FAILURE")
    print("   [OK] missing files and columns -> IO_FAILURE")


if __name__ == "__main__":
    print("=" * 60)
    print("POINT CLOUD TEST")
    print("=" * 60)
    tests = [
        test_build_cloud_full_resolution,
        test_build_cloud_lateral_pitch,
        test_empty_cloud,
        test_features_are_scaled,
        test_sample,
        test_augment_preserves_identity,
        test_augment_rotation_is_axial,
        test_augment_translation_and_noise,
        test_augment_crop,
        test_augment_config_validation,
        test_eye_seed_sequence,
        test_cloud_file_round_trip,
        test_cloud_io_failures,
    ]
    for i, test in enumerate(tests, 1):
        print(f"\n{i}. {test.__name__}...")
        test()
    print("\n" + "=" * 60)
    print("ALL TESTS PASSED [OK]")
    print("=" * 60)
