"""
PointNet Classifier

Shared per-point MLPs, optional input and feature transform networks, a
symmetric max pool to a global feature and a small classification head, all
built on src.tensor_core. Training uses Adam on stratified eye-level splits
with cross-validation; models persist to the .onhpn format.
"""

import copy
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from src.cloud import AugmentConfig, PointCloud, augment, eye_seed_sequence, sample
from src.config import (
    ADAM_BETAS,
    ADAM_EPS,
    ADAM_STEP,
    BATCH_SIZE,
    CV_FOLDS,
    DROPOUT_P,
    EPOCHS,
    GLOBAL_FEATURE_DIM,
    MIN_EYES_PER_CLASS,
    SPLIT_FRACTIONS,
    TASKS,
    TNET_REG_WEIGHT,
    UNIT_SCALE,
)
from src.errors import OnhError
from src.tensor_core import (
    BatchNormState,
    Tape,
    Tensor,
    add,
    backward,
    batchnorm,
    bias_add,
    concat,
    dropout,
    matmul,
    max_over_set,
    orthogonality_penalty,
    relu,
    reshape,
    scale,
    softmax,
    softmax_cross_entropy,
)
from src.volume_io import SeverityGroup

MODEL_MAGIC = b"ONHPN1\x00\x00"
MODEL_FORMAT_VERSION = 1
EVAL_STREAM = 7_000_001  # seed offset for the fixed evaluation samples


@dataclass(frozen=True)
class PointNetDims:
    in_channels: int = 4
    mlp1: Tuple[int, ...] = (64, 64)
    mlp2: Tuple[int, ...] = (64, 128, GLOBAL_FEATURE_DIM)
    head: Tuple[int, ...] = (128, 64)
    n_classes: int = 2
    use_tnets: bool = True
    tnet_mlp: Tuple[int, ...] = (64, 128, GLOBAL_FEATURE_DIM)
    tnet_fc: Tuple[int, ...] = (128, 64)
    dropout: float = DROPOUT_P

    @property
    def global_dim(self) -> int:
        return self.mlp2[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "PointNetDims":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, split and augmentation settings for one training run."""
    step_size: float = ADAM_STEP
    betas: Tuple[float, float] = ADAM_BETAS
    adam_eps: float = ADAM_EPS
    batch_size: int = BATCH_SIZE
    epochs: int = EPOCHS
    seed: int = 0
    split: Tuple[float, float, float] = SPLIT_FRACTIONS
    folds: int = CV_FOLDS
    cross_validate: bool = True
    tnet_reg_weight: float = TNET_REG_WEIGHT
    unit_scale: float = UNIT_SCALE
    eval_points: Optional[int] = None  # None -> augment.sample_n
    dims: PointNetDims = field(default_factory=PointNetDims)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise OnhError("pointnet", "INVALID_CONFIG",
                           f"split fractions {self.split} must be positive and sum to 1", field="split")
        if self.folds < 2:
            raise OnhError("pointnet", "INVALID_CONFIG", "folds must be >= 2", field="folds")
        if self.epochs < 1 or self.batch_size < 2:
            raise OnhError("pointnet", "INVALID_CONFIG", "epochs must be >= 1 and batch_size >= 2",
                           field="epochs")

    @property
    def n_eval_points(self) -> int:
        return self.eval_points or self.augment.sample_n

    def to_dict(self) -> dict:
        data = {k: getattr(self, k) for k in (
            "step_size", "adam_eps", "batch_size", "epochs", "seed", "folds",
            "cross_validate", "tnet_reg_weight", "unit_scale", "eval_points")}
        data["betas"] = list(self.betas)
        data["split"] = list(self.split)
        data["dims"] = self.dims.to_dict()
        data["augment"] = self.augment.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "betas" in data:
            data["betas"] = tuple(data["betas"])
        if "split" in data:
            data["split"] = tuple(data["split"])
        if "dims" in data:
            data["dims"] = PointNetDims.from_dict(data["dims"])
        if "augment" in data:
            data["augment"] = AugmentConfig.from_dict(data["augment"])
        return cls(**data)


@dataclass(eq=False)
class PointNetModel:
    dims: PointNetDims
    params: Dict[str, Tensor]
    bn: Dict[str, BatchNormState]
    unit_scale: float = UNIT_SCALE
    meta: dict = field(default_factory=dict)  # task, training config, eval summary

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def snapshot(self) -> Tuple[Dict[str, np.ndarray], Dict[str, BatchNormState]]:
        return ({k: p.data.copy() for k, p in self.params.items()}, copy.deepcopy(self.bn))

    def restore(self, snap) -> None:
        values, bn = snap
        for k, v in values.items():
            self.params[k].data = v.copy()
        self.bn = copy.deepcopy(bn)


@dataclass
class ForwardResult:
    logits: np.ndarray  # (C,)
    pool_argmax: np.ndarray  # (global_dim,) point index winning each global dimension
    input_transform: Optional[np.ndarray] = None  # (3, 3)
    feature_transform: Optional[np.ndarray] = None  # (k, k)

    @property
    def probability(self) -> float:
        return float(softmax(self.logits)[-1])


@dataclass
class EvalReport:
    """Training outcome; auc_mean and auc_sd are NaN when cross-validation is off."""

    auc_mean: float
    auc_sd: float
    fold_aucs: List[float]
    test_auc: float
    confusion: Dict[str, int]
    best_epoch: int
    n_train: int
    n_val: int
    n_test: int
    loss_history: List[float] = field(default_factory=list)
    val_auc_history: List[float] = field(default_factory=list)
    task: str = ""
    test_eye_ids: List[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def cv_summary(self) -> str:
        if not self.fold_aucs:
            return "CV: skipped"
        return f"CV AUC: {self.auc_mean:.3f} +/- {self.auc_sd:.3f}"


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


# =============================================================================
# Construction
# =============================================================================

def _add_dense(params, bn, rng, prefix: str, fan_in: int, fan_out: int, norm: bool = True) -> None:
    params[f"{prefix}.w"] = Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
                                   requires_grad=True, name=f"{prefix}.w")
    params[f"{prefix}.b"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b")
    if norm:
        params[f"{prefix}.gamma"] = Tensor(np.ones(fan_out), requires_grad=True, name=f"{prefix}.gamma")
        params[f"{prefix}.beta"] = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.beta")
        bn[prefix] = BatchNormState.create(fan_out)


def _add_tnet(params, bn, rng, prefix: str, k: int, dims: PointNetDims) -> None:
    width = k
    for i, out in enumerate(dims.tnet_mlp):
        _add_dense(params, bn, rng, f"{prefix}.mlp{i}", width, out)
        width = out
    for i, out in enumerate(dims.tnet_fc):
        _add_dense(params, bn, rng, f"{prefix}.fc{i}", width, out)
        width = out
    # zero output layer: the transform starts at the identity
    params[f"{prefix}.out.w"] = Tensor(np.zeros((width, k * k)), requires_grad=True, name=f"{prefix}.out.w")
    params[f"{prefix}.out.b"] = Tensor(np.zeros(k * k), requires_grad=True, name=f"{prefix}.out.b")


def init_model(dims: Optional[PointNetDims] = None, seed: int = 0,
               unit_scale: float = UNIT_SCALE) -> PointNetModel:
    """Freshly initialized model (He-normal weights, unit batch-norm scale)."""
    dims = dims or PointNetDims()
    rng = np.random.default_rng(seed)
    params: Dict[str, Tensor] = {}
    bn: Dict[str, BatchNormState] = {}
    if dims.use_tnets:
        _add_tnet(params, bn, rng, "tnet_in", 3, dims)
    width = dims.in_channels
    for i, out in enumerate(dims.mlp1):
        _add_dense(params, bn, rng, f"mlp1.{i}", width, out)
        width = out
    if dims.use_tnets:
        _add_tnet(params, bn, rng, "tnet_feat", width, dims)
    for i, out in enumerate(dims.mlp2):
        _add_dense(params, bn, rng, f"mlp2.{i}", width, out)
        width = out
    for i, out in enumerate(dims.head):
        _add_dense(params, bn, rng, f"head.{i}", width, out)
        width = out
    _add_dense(params, bn, rng, "out", width, dims.n_classes, norm=False)
    return PointNetModel(dims=dims, params=params, bn=bn, unit_scale=unit_scale)


# =============================================================================
# Forward pass
# =============================================================================

def _dense(model: PointNetModel, prefix: str, x: Tensor, training: bool, tape: Optional[Tape]) -> Tensor:
    p = model.params
    h = bias_add(matmul(x, p[f"{prefix}.w"], tape), p[f"{prefix}.b"], tape)
    h = batchnorm(h, p[f"{prefix}.gamma"], p[f"{prefix}.beta"], model.bn[prefix], training, tape)
    return relu(h, tape)


def _tnet(model: PointNetModel, prefix: str, x: Tensor, k: int, training: bool,
          tape: Optional[Tape]) -> Tensor:
    h = x
    for i in range(len(model.dims.tnet_mlp)):
        h = _dense(model, f"{prefix}.mlp{i}", h, training, tape)
    h, _ = max_over_set(h, tape)
    for i in range(len(model.dims.tnet_fc)):
        h = _dense(model, f"{prefix}.fc{i}", h, training, tape)
    h = bias_add(matmul(h, model.params[f"{prefix}.out.w"], tape), model.params[f"{prefix}.out.b"], tape)
    h = reshape(h, (h.shape[0], k, k), tape)
    return add(h, Tensor(np.eye(k)), tape)


def forward_batch(model: PointNetModel, X: np.ndarray, training: bool = False,
                  tape: Optional[Tape] = None, rng: Optional[np.random.Generator] = None,
                  transforms: Optional[Tuple[np.ndarray, np.ndarray]] = None):
    """
    Run the network on a (B, N, 4) batch of scaled features.

    Args:
        model: PointNetModel
        X: Input batch (x, y, z, thickness) already scaled by unit_scale
        training: Batch statistics, running-stat updates and dropout
        tape: Record for backpropagation
        rng: Dropout stream (training only)
        transforms: Fixed (input, feature) transforms of shape (B, 3, 3) and
            (B, k, k) replacing the transform networks

    Returns:
        (logits Tensor (B, C), pool argmax (B, D), input transform Tensor or
        None, feature transform Tensor or None)
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != model.dims.in_channels:
        raise OnhError("pointnet", "SHAPE_MISMATCH",
                       f"expected (B, N, {model.dims.in_channels}) input, got {X.shape}", field="X")
    if X.shape[1] == 0:
        raise OnhError("pointnet", "EMPTY_CLOUD", "cannot classify an empty point cloud", field="cloud")

    t_in = t_feat = None
    xyz = Tensor(X[..., :3])
    if model.dims.use_tnets:
        t_in = Tensor(transforms[0]) if transforms is not None else _tnet(model, "tnet_in", xyz, 3, training, tape)
        xyz = matmul(xyz, t_in, tape)
    h = concat([xyz, Tensor(X[..., 3:])], tape)
    for i in range(len(model.dims.mlp1)):
        h = _dense(model, f"mlp1.{i}", h, training, tape)
    if model.dims.use_tnets:
        k = model.dims.mlp1[-1]
        t_feat = Tensor(transforms[1]) if transforms is not None else _tnet(model, "tnet_feat", h, k, training, tape)
        h = matmul(h, t_feat, tape)
    for i in range(len(model.dims.mlp2)):
        h = _dense(model, f"mlp2.{i}", h, training, tape)
    g, argmax = max_over_set(h, tape)
    for i in range(len(model.dims.head)):
        g = _dense(model, f"head.{i}", g, training, tape)
    g = dropout(g, model.dims.dropout, rng, training, tape)
    logits = bias_add(matmul(g, model.params["out.w"], tape), model.params["out.b"], tape)
    return logits, argmax, t_in, t_feat


def forward(model: PointNetModel, cloud: PointCloud,
            transforms: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ForwardResult:
    """
    Inference on one cloud.

    Uses the fixed-order kernel, so the pooled feature of a subset that keeps
    every winning point equals the full-cloud one exactly.

    Raises:
        OnhError: EMPTY_CLOUD
    """
    if len(cloud) == 0:
        raise OnhError("pointnet", "EMPTY_CLOUD", "cannot classify an empty point cloud", field="cloud")
    batch_transforms = None
    if transforms is not None:
        batch_transforms = (np.asarray(transforms[0])[None], np.asarray(transforms[1])[None])
    logits, argmax, t_in, t_feat = forward_batch(model, cloud.features(model.unit_scale)[None],
                                                 transforms=batch_transforms)
    return ForwardResult(
        logits=logits.data[0],
        pool_argmax=argmax[0],
        input_transform=t_in.data[0] if t_in is not None else None,
        feature_transform=t_feat.data[0] if t_feat is not None else None,
    )


def training_loss(model: PointNetModel, X: np.ndarray, y: np.ndarray, tape: Tape,
                  rng: Optional[np.random.Generator], reg_weight: float = TNET_REG_WEIGHT) -> Tensor:
    """Cross-entropy plus the orthogonality penalty on the feature transform."""
    logits, _, _, t_feat = forward_batch(model, X, training=True, tape=tape, rng=rng)
    loss = softmax_cross_entropy(logits, y, tape)
    if t_feat is not None and reg_weight > 0:
        penalty = orthogonality_penalty(t_feat, tape)
        loss = add(loss, scale(penalty, reg_weight, tape), tape)
    return loss


# =============================================================================
# Optimizer
# =============================================================================

class Adam:
    def __init__(self, params: Dict[str, Tensor], step_size: float = ADAM_STEP,
                 betas: Tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS):
        self.params = params
        self.step_size = step_size
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            p.data = p.data - self.step_size * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


# =============================================================================
# Metrics and splits
# =============================================================================

def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Area under the ROC curve as the Mann-Whitney statistic; ties count half.

    Raises:
        OnhError: SINGLE_CLASS
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise OnhError("pointnet", "SINGLE_CLASS", "AUC needs both classes", field="labels")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def confusion_counts(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> Dict[str, int]:
    predicted = np.asarray(scores) >= threshold
    labels = np.asarray(labels) == 1
    return {
        "tp": int(np.count_nonzero(predicted & labels)),
        "fp": int(np.count_nonzero(predicted & ~labels)),
        "tn": int(np.count_nonzero(~predicted & ~labels)),
        "fn": int(np.count_nonzero(~predicted & labels)),
    }


def check_labels(labels: Sequence[int], min_per_class: int = MIN_EYES_PER_CLASS) -> None:
    """
    Raises:
        OnhError: SINGLE_CLASS or TOO_FEW_EYES
    """
    labels = np.asarray(labels, dtype=int)
    counts = [int(np.count_nonzero(labels == c)) for c in (0, 1)]
    if min(counts) == 0:
        raise OnhError("pointnet", "SINGLE_CLASS", f"class counts {counts}: both classes are required",
                       field="labels")
    if min(counts) < min_per_class:
        raise OnhError("pointnet", "TOO_FEW_EYES",
                       f"class counts {counts}: at least {min_per_class} eyes per class are required",
                       field="labels")


def stratified_split(labels: Sequence[int], fractions: Tuple[float, float, float],
                     rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eye-level train/validation/test indices, each class split separately."""
    labels = np.asarray(labels, dtype=int)
    parts = ([], [], [])
    for c in (0, 1):
        members = rng.permutation(np.flatnonzero(labels == c))
        n_val = max(1, int(round(fractions[1] * len(members))))
        n_test = max(1, int(round(fractions[2] * len(members))))
        parts[2].append(members[:n_test])
        parts[1].append(members[n_test:n_test + n_val])
        parts[0].append(members[n_test + n_val:])
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def stratified_folds(labels: Sequence[int], k: int, rng: np.random.Generator) -> List[np.ndarray]:
    """k disjoint held-out index sets with classes dealt round-robin."""
    labels = np.asarray(labels, dtype=int)
    folds: List[List[int]] = [[] for _ in range(k)]
    for c in (0, 1):
        for i, idx in enumerate(rng.permutation(np.flatnonzero(labels == c))):
            folds[i % k].append(int(idx))
    return [np.sort(np.array(f, dtype=int)) for f in folds]


def oversample(indices: Sequence[int], labels: Sequence[int]) -> List[Tuple[int, int]]:
    """
    (index, copy number) pairs with minority eyes repeated until both classes
    are equally represented. Copies of an eye stay in the same split.
    """
    labels = np.asarray(labels, dtype=int)
    indices = list(indices)
    by_class = {c: [i for i in indices if labels[i] == c] for c in (0, 1)}
    target = max(len(v) for v in by_class.values())
    items = [(i, 0) for i in indices]
    for members in by_class.values():
        for j in range(target - len(members)):
            items.append((members[j % len(members)], 1 + j // len(members)))
    return items


# =============================================================================
# Training
# =============================================================================

def _pad_to(features: np.ndarray, n: int) -> np.ndarray:
    """Repeat points cyclically up to n rows; duplicates leave the max pool unchanged."""
    if len(features) >= n:
        return features
    return features[np.arange(n) % len(features)]


def _eval_features(cloud: PointCloud, cfg: TrainConfig) -> np.ndarray:
    fixed = sample(cloud, cfg.n_eval_points, eye_seed_sequence(cfg.seed, cloud.eye_id, EVAL_STREAM))
    return fixed.features(cfg.unit_scale)


def score_clouds(model: PointNetModel, clouds: Sequence[PointCloud], cfg: Optional[TrainConfig] = None,
                 threads: int = 1) -> np.ndarray:
    """Positive-class probability per cloud on its fixed evaluation sample."""
    cfg = cfg or TrainConfig()

    def one(cloud):
        X = _eval_features(cloud, cfg)[None]
        logits, _, _, _ = forward_batch(model, X)
        return float(softmax(logits.data[0])[-1])

    if threads > 1 and len(clouds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(one, clouds)))
    return np.array([one(c) for c in clouds])


def _train_run(clouds: Sequence[PointCloud], labels: np.ndarray, train_idx: np.ndarray,
               monitor_idx: Optional[np.ndarray], cfg: TrainConfig, run_tag: int,
               select_best: bool, verbose: bool = False) -> Tuple[PointNetModel, dict]:
    model = init_model(cfg.dims, seed=int(eye_seed_sequence(cfg.seed, "model", run_tag).generate_state(1)[0]),
                       unit_scale=cfg.unit_scale)
    optimizer = Adam(model.params, cfg.step_size, cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng(eye_seed_sequence(cfg.seed, "order", run_tag))
    items = oversample(train_idx, labels) if cfg.augment.oversample else [(int(i), 0) for i in train_idx]

    history = {"loss": [], "monitor_auc": [], "best_epoch": cfg.epochs - 1}
    best_score, best_snap = -np.inf, None
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(items))
        batches = [order[s:s + cfg.batch_size] for s in range(0, len(order), cfg.batch_size)]
        if len(batches) > 1 and len(batches[-1]) == 1:
            batches[-2] = np.concatenate(batches[-2:])
            batches.pop()
        losses = []
        for batch in batches:
            feats = []
            for j in batch:
                index, copy_no = items[j]
                cloud = clouds[index]
                seed = eye_seed_sequence(cfg.seed, cloud.eye_id, run_tag, epoch, copy_no)
                feats.append(augment(cloud, cfg.augment, seed).features(cfg.unit_scale))
            n = max(len(f) for f in feats)
            X = np.stack([_pad_to(f, n) for f in feats])
            y = np.array([labels[items[j][0]] for j in batch])
            tape = Tape()
            optimizer.zero_grad()
            loss = training_loss(model, X, y, tape, rng, cfg.tnet_reg_weight)
            backward(tape, loss)
            optimizer.step()
            losses.append(float(loss.data))
        history["loss"].append(float(np.mean(losses)))

        if monitor_idx is not None and select_best:
            score = auc(score_clouds(model, [clouds[i] for i in monitor_idx], cfg), labels[monitor_idx])
            history["monitor_auc"].append(score)
            if score > best_score:  # ties keep the earliest epoch
                best_score, best_snap = score, model.snapshot()
                history["best_epoch"] = epoch
        if verbose:
            extra = f", monitor AUC {history['monitor_auc'][-1]:.3f}" if history["monitor_auc"] else ""
            print(f"      epoch {epoch + 1}/{cfg.epochs}: loss {history['loss'][-1]:.4f}{extra}")

    if best_snap is not None:
        model.restore(best_snap)
    return model, history


def train(clouds: Sequence[PointCloud], labels: Sequence[int], cfg: Optional[TrainConfig] = None,
          task: str = "", verbose: bool = False) -> Tuple[PointNetModel, EvalReport]:
    """
    Train and evaluate a binary classifier.

    Eyes are split 70/15/15 (stratified). When cross-validation is enabled,
    each of the k folds over train+validation trains a fresh model and
    reports its held-out AUC after the last epoch. The returned model is
    trained on the training split and taken at its best validation epoch.

    Args:
        clouds: One cloud per eye (eye ids must be unique)
        labels: 0/1 per cloud
        cfg: TrainConfig
        task: Recorded in the model and report
        verbose: Print progress

    Returns:
        (model, EvalReport)

    Raises:
        OnhError: SINGLE_CLASS, TOO_FEW_EYES
    """
    cfg = cfg or TrainConfig()
    labels = np.asarray(labels, dtype=int)
    if len(labels) != len(clouds):
        raise OnhError("pointnet", "SHAPE_MISMATCH", f"{len(clouds)} clouds but {len(labels)} labels",
                       field="labels")
    check_labels(labels)
    rng = np.random.default_rng(eye_seed_sequence(cfg.seed, "split"))
    train_idx, val_idx, test_idx = stratified_split(labels, cfg.split, rng)

    fold_aucs: List[float] = []
    if cfg.cross_validate:
        pool = np.concatenate([train_idx, val_idx])
        folds = stratified_folds(labels[pool], cfg.folds, rng)
        for f, held in enumerate(folds):
            held_idx = pool[held]
            fit_idx = np.setdiff1d(pool, held_idx)
            if verbose:
                print(f"   Fold {f + 1}/{cfg.folds}: {len(fit_idx)} training eyes, {len(held_idx)} held out")
            model, _ = _train_run(clouds, labels, fit_idx, None, cfg, run_tag=f + 1, select_best=False)
            scores = score_clouds(model, [clouds[i] for i in held_idx], cfg)
            fold_aucs.append(auc(scores, labels[held_idx]))
            if verbose:
                print(f"   Fold {f + 1} AUC: {fold_aucs[-1]:.3f}")

    if verbose:
        print(f"   Final model: {len(train_idx)} train / {len(val_idx)} validation / {len(test_idx)} test eyes")
    model, history = _train_run(clouds, labels, train_idx, val_idx, cfg, run_tag=0,
                                select_best=True, verbose=verbose)
    test_scores = score_clouds(model, [clouds[i] for i in test_idx], cfg)
    test_auc = auc(test_scores, labels[test_idx])

    report = EvalReport(
        auc_mean=float(np.mean(fold_aucs)) if fold_aucs else math.nan,
        auc_sd=float(np.std(fold_aucs, ddof=1)) if len(fold_aucs) > 1 else math.nan,
        fold_aucs=[float(a) for a in fold_aucs],
        test_auc=test_auc,
        confusion=confusion_counts(test_scores, labels[test_idx]),
        best_epoch=int(history["best_epoch"]),
        n_train=len(train_idx),
        n_val=len(val_idx),
        n_test=len(test_idx),
        loss_history=history["loss"],
        val_auc_history=history["monitor_auc"],
        task=task,
        test_eye_ids=[clouds[i].eye_id for i in test_idx],
    )
    model.meta = {"task": task, "train_config": cfg.to_dict(), "test_eye_ids": report.test_eye_ids,
                  "eval": {"auc_mean": _finite_or_none(report.auc_mean),
                           "auc_sd": _finite_or_none(report.auc_sd), "test_auc": test_auc}}
    if verbose:
        print(f"   {report.cv_summary()} (test AUC {test_auc:.3f})")
    return model, report


def task_dataset(clouds: Sequence[PointCloud], task: str) -> Tuple[List[PointCloud], np.ndarray]:
    """
    Clouds belonging to the two groups of a task with 0/1 labels.

    Raises:
        OnhError: UNKNOWN_TASK
    """
    if task not in TASKS:
        raise OnhError("pointnet", "UNKNOWN_TASK", f"unknown task '{task}', expected one of {sorted(TASKS)}",
                       field="task")
    negative, positive = (SeverityGroup[name] for name in TASKS[task])
    chosen = [c for c in clouds if c.label in (negative, positive)]
    return chosen, np.array([int(c.label == positive) for c in chosen], dtype=int)


# =============================================================================
# .onhpn persistence
# =============================================================================

def _model_tensors(model: PointNetModel) -> List[Tuple[str, np.ndarray]]:
    tensors = [(name, model.params[name].data) for name in sorted(model.params)]
    for name in sorted(model.bn):
        tensors.append((f"bn.{name}.running_mean", model.bn[name].running_mean))
        tensors.append((f"bn.{name}.running_var", model.bn[name].running_var))
    return tensors


def encode_model(model: PointNetModel) -> bytes:
    """Magic, u64 manifest length, sorted-key JSON manifest, little-endian f64 blob."""
    tensors = _model_tensors(model)
    offset = 0
    entries = []
    for name, data in tensors:
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        offset += int(data.size)
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "dims": model.dims.to_dict(),
        "unit_scale": model.unit_scale,
        "batchnorm": {k: {"momentum": s.momentum, "eps": s.eps} for k, s in sorted(model.bn.items())},
        "tensors": entries,
        "meta": model.meta,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(data, dtype="<f8").tobytes() for _, data in tensors)
    return MODEL_MAGIC + struct.pack("<Q", len(text)) + text + blob


def save_model(model: PointNetModel, path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_model(model))
    except OSError as e:
        raise OnhError("pointnet", "IO_FAILURE", f"cannot write {path}: {e}", field=str(path))


def decode_model(raw: bytes) -> PointNetModel:
    """
    Raises:
        OnhError: MALFORMED_MODEL
    """
    head = len(MODEL_MAGIC) + 8
    if len(raw) < head or raw[:len(MODEL_MAGIC)] != MODEL_MAGIC:
        raise OnhError("pointnet", "MALFORMED_MODEL", "missing .onhpn magic", field="magic")
    (length,) = struct.unpack("<Q", raw[len(MODEL_MAGIC):head])
    try:
        manifest = json.loads(raw[head:head + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise OnhError("pointnet", "MALFORMED_MODEL", f"unreadable manifest: {e}", field="manifest")
    blob = raw[head + length:]
    try:
        total = sum(int(np.prod(e["shape"])) for e in manifest["tensors"])
        if len(blob) != 8 * total:
            raise OnhError("pointnet", "MALFORMED_MODEL",
                           f"blob holds {len(blob)} bytes, manifest needs {8 * total}", field="blob")
        values = np.frombuffer(blob, dtype="<f8")
        arrays = {}
        for e in manifest["tensors"]:
            size = int(np.prod(e["shape"]))
            arrays[e["name"]] = values[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
        params = {name: Tensor(data, requires_grad=True, name=name)
                  for name, data in arrays.items() if not name.startswith("bn.")}
        bn = {name: BatchNormState(arrays[f"bn.{name}.running_mean"], arrays[f"bn.{name}.running_var"],
                                   momentum=settings["momentum"], eps=settings["eps"])
              for name, settings in manifest["batchnorm"].items()}
        dims = PointNetDims.from_dict(manifest["dims"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, OnhError):
            raise
        raise OnhError("pointnet", "MALFORMED_MODEL", f"inconsistent manifest: {e}", field="manifest")
    return PointNetModel(dims=dims, params=params, bn=bn,
                         unit_scale=manifest.get("unit_scale", UNIT_SCALE), meta=manifest.get("meta", {}))


def load_model(path) -> PointNetModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OnhError("pointnet", "IO_FAILURE", f"cannot read {path}: {e}", field=str(path))
    return decode_model(raw)
