"""
Tests for the PointNet classifier: invariances, gradients, metrics, splits,
training and .onhpn persistence.
"""

import itertools
import json
import math
import struct
import tempfile
from pathlib import Path

import numpy as np

from src.cloud import AugmentConfig, PointCloud
from src.errors import OnhError
from src.pointnet import (
    MODEL_MAGIC,
    PointNetDims,
    TrainConfig,
    _pad_to,
    auc,
    check_labels,
    confusion_counts,
    decode_model,
    encode_model,
    forward,
    forward_batch,
    init_model,
    load_model,
    oversample,
    save_model,
    score_clouds,
    stratified_folds,
    stratified_split,
    task_dataset,
    train,
    training_loss,
)
from src.tensor_core import Tape, backward
from src.volume_io import SeverityGroup


def _tiny_dims(use_tnets=True) -> PointNetDims:
    return PointNetDims(mlp1=(4,), mlp2=(4, 6), head=(4,), tnet_mlp=(4,), tnet_fc=(4,),
                        dropout=0.0, use_tnets=use_tnets)


def _cloud(n=80, seed=0, eye_id="eye", label=None, shift=0.0) -> PointCloud:
    rng = np.random.default_rng(seed)
    xyz = rng.normal(0.0, 600.0, size=(n, 3))
    xyz[:, 2] += shift
    return PointCloud(
        xyz=xyz,
        thickness=rng.uniform(0.0, 150.0, size=n),
        thickness_mask=np.ones(n, dtype=bool),
        tissue=rng.integers(1, 8, size=n).astype(np.uint8),
        eye_id=eye_id,
        label=label,
    )


def _randomize_transforms(model, seed=0):
    rng = np.random.default_rng(seed)
    for name in ("tnet_in.out.w", "tnet_feat.out.w"):
        if name in model.params:
            model.params[name].data = rng.normal(0.0, 0.2, size=model.params[name].shape)


def _expect_code(fn, code):
    try:
        fn()
        assert False, f"Should have raised {code}"
    except OnhError as e:
        assert e.code == code, f"expected {code}, got {e.code}"


def test_transforms_start_at_identity():
    model = init_model(_tiny_dims(), seed=1)
    result = forward(model, _cloud())
    assert np.array_equal(result.input_transform, np.eye(3))
    assert np.array_equal(result.feature_transform, np.eye(4))
    assert result.logits.shape == (2,)
    assert result.pool_argmax.shape == (6,)
    assert 0.0 <= result.probability <= 1.0
    plain = forward(init_model(_tiny_dims(use_tnets=False), seed=1), _cloud())
    assert plain.input_transform is None and plain.feature_transform is None
    print(f"   [OK] identity transforms at initialization; {model.parameter_count()} parameters")


def test_permutation_and_duplication_invariance():
    model = init_model(PointNetDims(mlp1=(16, 16), mlp2=(16, 32), head=(16,), tnet_mlp=(16, 32),
                                    tnet_fc=(16,)), seed=2)
    _randomize_transforms(model)
    cloud = _cloud(120, seed=3)
    base = forward(model, cloud)
    order = np.random.default_rng(4).permutation(len(cloud))
    shuffled = forward(model, cloud.subset(order))
    assert np.array_equal(base.logits, shuffled.logits)
    doubled = forward(model, cloud.subset(np.concatenate([np.arange(len(cloud)), np.arange(40)])))
    assert np.array_equal(base.logits, doubled.logits)
    print("   [OK] logits are identical under permutation and duplication")


def test_forward_batch_matches_single_cloud():
    model = init_model(_tiny_dims(), seed=5)
    _randomize_transforms(model, seed=5)
    clouds = [_cloud(50, seed=s) for s in range(3)]
    X = np.stack([c.features() for c in clouds])
    logits, argmax, t_in, t_feat = forward_batch(model, X)
    for i, cloud in enumerate(clouds):
        single = forward(model, cloud)
        assert np.array_equal(logits.data[i], single.logits)
        assert np.array_equal(argmax[i], single.pool_argmax)
    assert t_in.shape == (3, 3, 3) and t_feat.shape == (3, 4, 4)
    _expect_code(lambda: forward_batch(model, np.zeros((2, 5, 3))), "SHAPE_MISMATCH")
    _expect_code(lambda: forward(model, _cloud().subset(np.arange(0))), "EMPTY_CLOUD")
    print("   [OK] inference on a batch equals inference one cloud at a time")


def test_training_gradients_match_finite_differences():
    model = init_model(_tiny_dims(), seed=7)
    _randomize_transforms(model, seed=7)
    rng = np.random.default_rng(8)
    X = rng.normal(0.0, 0.5, size=(3, 8, 4))
    y = np.array([0, 1, 1])

    for p in model.params.values():
        p.zero_grad()
    tape = Tape()
    loss = training_loss(model, X, y, tape, None)
    backward(tape, loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in model.params.items()}

    h = 1e-5
    worst = 0.0
    for name, p in model.params.items():
        numeric = np.zeros_like(p.data)
        for idx in np.ndindex(p.data.shape):
            original = p.data[idx]
            p.data[idx] = original + h
            up = float(training_loss(model, X, y, None, None).data)
            p.data[idx] = original - h
            down = float(training_loss(model, X, y, None, None).data)
            p.data[idx] = original
            numeric[idx] = (up - down) / (2 * h)
        denom = max(float(np.abs(analytic[name]).max()), float(np.abs(numeric).max()), 1e-3)
        err = float(np.abs(analytic[name] - numeric).max()) / denom
        worst = max(worst, err)
        assert err < 1e-3, f"{name}: relative gradient error {err:.2e}"
    print(f"   [OK] {len(model.params)} parameter tensors, worst relative error {worst:.1e}")


def test_auc():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert auc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5
    rng = np.random.default_rng(0)
    scores = np.round(rng.random(40), 1)
    labels = rng.integers(0, 2, size=40)
    pos, neg = scores[labels == 1], scores[labels == 0]
    pairs = [1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg)]
    assert abs(auc(scores, labels) - np.mean(pairs)) < 1e-12
    _expect_code(lambda: auc([0.1, 0.2], [1, 1]), "SINGLE_CLASS")
    print("   [OK] AUC equals the pairwise concordance with half-counted ties")


def test_confusion_counts():
    counts = confusion_counts([0.9, 0.4, 0.6, 0.2, 0.5], [1, 1, 0, 0, 1])
    assert counts == {"tp": 2, "fp": 1, "tn": 1, "fn": 1}
    print("   [OK] confusion counts at 0.5")


def test_check_labels():
    _expect_code(lambda: check_labels([1] * 20), "SINGLE_CLASS")
    _expect_code(lambda: check_labels([0] * 20 + [1] * 9), "TOO_FEW_EYES")
    check_labels([0] * 10 + [1] * 10)
    print("   [OK] one class or fewer than 10 eyes per class is rejected")


def test_stratified_split_and_folds():
    labels = np.array([0] * 40 + [1] * 20)
    train_idx, val_idx, test_idx = stratified_split(labels, (0.7, 0.15, 0.15), np.random.default_rng(1))
    joined = np.concatenate([train_idx, val_idx, test_idx])
    assert len(joined) == 60 and len(set(joined.tolist())) == 60
    for part in (train_idx, val_idx, test_idx):
        assert set(labels[part].tolist()) == {0, 1}
    assert np.count_nonzero(labels[test_idx] == 0) == 6 and np.count_nonzero(labels[test_idx] == 1) == 3

    folds = stratified_folds(labels, 5, np.random.default_rng(2))
    assert sorted(np.concatenate(folds).tolist()) == list(range(60))
    for fold in folds:
        assert np.count_nonzero(labels[fold] == 0) == 8 and np.count_nonzero(labels[fold] == 1) == 4
    print("   [OK] eye-level splits are disjoint and stratified")


def test_oversample():
    labels = np.array([0, 0, 0, 0, 0, 1, 1])
    items = oversample(range(7), labels)
    counts = np.bincount([labels[i] for i, _ in items])
    assert counts.tolist() == [5, 5]
    extra = [item for item in items if item[1] > 0]
    assert extra == [(5, 1), (6, 1), (5, 2)]
    print("   [OK] minority eyes are repeated with increasing copy numbers")


def test_pad_to_keeps_pool():
    model = init_model(_tiny_dims(use_tnets=False), seed=3)
    features = _cloud(10).features()
    padded = _pad_to(features, 25)
    assert padded.shape == (25, 4) and np.array_equal(padded[10:20], features)
    a, _, _, _ = forward_batch(model, features[None])
    b, _, _, _ = forward_batch(model, padded[None])
    assert np.array_equal(a.data, b.data)
    assert _pad_to(features, 5) is features
    print("   [OK] cyclic padding leaves the inference output unchanged")


def test_score_clouds_threads():
    model = init_model(_tiny_dims(), seed=4)
    clouds = [_cloud(100, seed=s, eye_id=f"eye_{s}") for s in range(6)]
    cfg = TrainConfig(augment=AugmentConfig(sample_n=64))
    serial = score_clouds(model, clouds, cfg)
    parallel = score_clouds(model, clouds, cfg, threads=3)
    assert np.array_equal(serial, parallel)
    assert np.all((serial >= 0) & (serial <= 1))
    print("   [OK] threaded scoring is identical to serial scoring")


def test_train_config_validation_and_round_trip():
    _expect_code(lambda: TrainConfig(split=(0.5, 0.2, 0.2)), "INVALID_CONFIG")
    _expect_code(lambda: TrainConfig(folds=1), "INVALID_CONFIG")
    _expect_code(lambda: TrainConfig(batch_size=1), "INVALID_CONFIG")
    cfg = TrainConfig(epochs=3, seed=9, dims=_tiny_dims(), augment=AugmentConfig(sample_n=128))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    print("   [OK] bad splits, folds and batch sizes rejected; config survives JSON")


def test_task_dataset():
    clouds = [_cloud(10, seed=i, eye_id=f"e{i}", label=g) for i, g in enumerate(
        [SeverityGroup.NORMAL, SeverityGroup.MILD, SeverityGroup.MODERATE, SeverityGroup.MILD, None])]
    chosen, labels = task_dataset(clouds, "normal-mild")
    assert [c.eye_id for c in chosen] == ["e0", "e1", "e3"]
    assert labels.tolist() == [0, 1, 1]
    _expect_code(lambda: task_dataset(clouds, "normal-advanced"), "UNKNOWN_TASK")
    print("   [OK] task selection keeps the two groups, positive = more severe")


def _separable_cohort(per_class=12):
    clouds, labels = [], []
    for c in (0, 1):
        for i in range(per_class):
            clouds.append(_cloud(96, seed=100 * c + i, eye_id=f"c{c}_{i:02d}", shift=400.0 * c))
            labels.append(c)
    return clouds, labels


def test_train_end_to_end():
    clouds, labels = _separable_cohort()
    cfg = TrainConfig(epochs=2, batch_size=4, folds=2, seed=3, dims=_tiny_dims(),
                      augment=AugmentConfig(sample_n=64))
    model, report = train(clouds, labels, cfg, task="normal-mild")
    assert (report.n_train, report.n_val, report.n_test) == (16, 4, 4)
    assert len(report.fold_aucs) == 2 and all(0.0 <= a <= 1.0 for a in report.fold_aucs)
    assert report.auc_mean == float(np.mean(report.fold_aucs))
    assert len(report.loss_history) == 2 and len(report.val_auc_history) == 2
    assert 0 <= report.best_epoch < 2
    assert sum(report.confusion.values()) == 4
    assert model.meta["task"] == "normal-mild"
    assert all(np.all(np.isfinite(p.data)) for p in model.params.values())

    again, second = train(clouds, labels, cfg, task="normal-mild")
    assert second.to_dict() == report.to_dict()
    for name, p in model.params.items():
        assert np.array_equal(p.data, again.params[name].data)
    _expect_code(lambda: train(clouds[:3], labels, cfg), "SHAPE_MISMATCH")
    print(f"   [OK] 2 folds + final model, AUC {report.auc_mean:.2f}, reproducible from the seed")


def _layered_cloud(seed, eye_id, cls, per_tissue=24) -> PointCloud:
    """Flat tissue sheets 100 um apart; class 1 has a thin RNFL and a deeper LC."""
    rng = np.random.default_rng(seed)
    xyz, thickness, tissue = [], [], []
    for t in range(1, 8):
        sheet = np.column_stack((rng.uniform(-1500.0, 1500.0, size=(per_tissue, 2)),
                                 rng.normal(100.0 * t, 10.0, size=per_tissue)))
        if t == 7:
            sheet[:, 2] += 300.0 * cls
        if t == 1:
            thick = rng.uniform(10.0, 40.0, per_tissue) if cls else rng.uniform(150.0, 250.0, per_tissue)
        else:
            thick = rng.uniform(40.0, 100.0, per_tissue)
        xyz.append(sheet)
        thickness.append(thick)
        tissue.append(np.full(per_tissue, t))
    n = 7 * per_tissue
    return PointCloud(
        xyz=np.concatenate(xyz),
        thickness=np.concatenate(thickness),
        thickness_mask=np.ones(n, dtype=bool),
        tissue=np.concatenate(tissue).astype(np.uint8),
        eye_id=eye_id,
    )


def _layered_cohort(per_class=30, offset=0):
    clouds, labels = [], []
    for c in (0, 1):
        for i in range(per_class):
            clouds.append(_layered_cloud(offset + 1000 * c + i, f"c{c}_{offset + i:03d}", c))
            labels.append(c)
    return clouds, np.array(labels)


def _learning_config(epochs=20) -> TrainConfig:
    dims = PointNetDims(mlp1=(16,), mlp2=(16, 32), head=(16,), tnet_mlp=(16,), tnet_fc=(16,),
                        dropout=0.0, use_tnets=True)
    return TrainConfig(step_size=0.01, epochs=epochs, batch_size=8, seed=4, cross_validate=False,
                       dims=dims, augment=AugmentConfig(sample_n=64))


def test_train_learns_separable_cohort():
    clouds, labels = _layered_cohort()
    model, report = train(clouds, labels, _learning_config(), task="normal-mild")
    assert (report.n_train, report.n_val, report.n_test) == (44, 8, 8)
    assert report.test_auc >= 0.9, report.test_auc
    assert report.loss_history[4] < report.loss_history[0], report.loss_history[:5]
    assert len(report.loss_history) == 20

    assert report.fold_aucs == [] and math.isnan(report.auc_mean) and math.isnan(report.auc_sd)
    assert report.cv_summary() == "CV: skipped"
    assert model.meta["eval"]["auc_mean"] is None
    assert len(report.test_eye_ids) == report.n_test
    assert model.meta["test_eye_ids"] == report.test_eye_ids
    assert set(report.test_eye_ids) <= {c.eye_id for c in clouds}
    print(f"   [OK] test AUC {report.test_auc:.2f}, loss {report.loss_history[0]:.3f} -> "
          f"{report.loss_history[4]:.3f} by epoch 5, CV skipped")


def test_shuffled_labels_score_at_chance():
    clouds, labels = _layered_cohort()
    shuffled = np.random.default_rng(8).permutation(labels)
    model, _ = train(clouds, shuffled, _learning_config(epochs=5), task="normal-mild")

    fresh, _ = _layered_cohort(per_class=100, offset=500)
    random_labels = np.random.default_rng(9).integers(0, 2, size=len(fresh))
    scores = score_clouds(model, fresh, _learning_config())
    null_auc = auc(scores, random_labels)
    assert 0.35 <= null_auc <= 0.65, null_auc
    print(f"   [OK] null-model AUC {null_auc:.2f} on 200 fresh eyes")


def test_model_round_trip():
    model = init_model(_tiny_dims(), seed=6)
    _randomize_transforms(model, seed=6)
    model.bn["mlp1.0"].running_mean = np.arange(4.0)
    model.meta = {"task": "mild-moderate"}
    raw = encode_model(model)
    assert raw[:8] == MODEL_MAGIC
    (length,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + length])
    assert manifest["format_version"] == 1
    names = [t["name"] for t in manifest["tensors"]]
    assert names[:len(model.params)] == sorted(model.params)

    back = decode_model(raw)
    cloud = _cloud(60, seed=11)
    assert np.array_equal(forward(back, cloud).logits, forward(model, cloud).logits)
    assert back.meta == {"task": "mild-moderate"} and back.dims == model.dims
    assert np.array_equal(back.bn["mlp1.0"].running_mean, np.arange(4.0))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "models" / "task.onhpn"
        save_model(model, path)
        assert path.read_bytes() == raw
        assert load_model(path).parameter_count() == model.parameter_count()
    print(f"   [OK] {len(raw)} byte model decodes to identical logits")


def test_malformed_models():
    raw = encode_model(init_model(_tiny_dims(), seed=0))
    _expect_code(lambda: decode_model(raw[:-8]), "MALFORMED_MODEL")
    _expect_code(lambda: decode_model(b"NOTAMODEL" + raw[9:]), "MALFORMED_MODEL")
    _expect_code(lambda: decode_model(raw[:12]), "MALFORMED_MODEL")
    (length,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + length])
    del manifest["batchnorm"]
    text = json.dumps(manifest).encode("utf-8")
    broken = MODEL_MAGIC + struct.pack("<Q", len(text)) + text + raw[16 + length:]
    _expect_code(lambda: decode_model(broken), "MALFORMED_MODEL")
    with tempfile.TemporaryDirectory() as tmp:
        _expect_code(lambda: load_model(Path(tmp) / "missing.onhpn"), "IO_FAILURE")
    print("   [OK] truncated blobs, bad magic and inconsistent manifests -> MALFORMED_MODEL")


if __name__ == "__main__":
    print("=" * 60)
    print("POINTNET TEST")
    print("=" * 60)
    tests = [
        test_transforms_start_at_identity,
        test_permutation_and_duplication_invariance,
        test_forward_batch_matches_single_cloud,
        test_training_gradients_match_finite_differences,
        test_auc,
        test_confusion_counts,
        test_check_labels,
        test_stratified_split_and_folds,
        test_oversample,
        test_pad_to_keeps_pool,
        test_score_clouds_threads,
        test_train_config_validation_and_round_trip,
        test_task_dataset,
        test_train_end_to_end,
        test_train_learns_separable_cohort,
        test_shuffled_labels_score_at_chance,
        test_model_round_trip,
        test_malformed_models,
    ]
    for i, test in enumerate(tests, 1):
        print(f"\n{i}. {test.__name__}...")
        test()
    print("\n" + "=" * 60)
    print("ALL TESTS PASSED [OK]")
    print("=" * 60)
