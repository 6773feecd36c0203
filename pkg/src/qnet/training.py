"""Optimizer, schedule, weight averaging, checkpoints, the two training
stages and the k-fold cross-validation driver.

Stage 1 trains the embedding network plus a temporary slice-level head on
individual slices. Stochastic weight averaging folds one snapshot per
epoch over the configured tail of the schedule into an equal average, and
the batch-norm running statistics are recomputed with one full pass over
the training set after the average is installed. Stage 2 freezes the
embedding and trains the BiLSTM and both heads on whole scans with the
combined scan-level plus mean slice-level cross-entropy.

All randomness is derived from the experiment seed through fixed integer
namespaces, so a fold's result depends only on (seed, fold), never on
execution order; parallel folds are byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import ops
from .augment import AugmentConfig, apply_pipeline
from .backbone import Backbone, BackboneConfig, Stage1Model
from .phantom import Scan, make_folds
from .sequence import QNet, QNetConfig, masked_cross_entropy, pad_scan
from .stats import ScoreRow, label_to_int

CHECKPOINT_MAGIC = b"QNCK"
CHECKPOINT_VERSION = 1

# seed namespaces
NS_STAGE1_INIT = 11
NS_STAGE2_INIT = 12
NS_EPOCH_SHUFFLE = 13
NS_SLICE_AUG = 14
NS_BN_PASS = 15
NS_FOLD = 16


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Stage1Config:
    epochs: int = 20
    batch: int = 16
    lr_max: float = 3e-4
    lr_min: float = 1e-4
    swa_start_fraction: float = 0.75   # >= 1 disables SWA


@dataclass
class Stage2Config:
    epochs: int = 15
    batch: int = 16
    lr: float = 3e-4


@dataclass
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    seed: int = 0
    input_mode: str = "full"           # full | cropped

    def validate(self):
        if self.input_mode not in ("full", "cropped"):
            raise ValueError(f"input_mode must be full or cropped, got {self.input_mode!r}")
        if self.stage1.lr_min > self.stage1.lr_max:
            raise ValueError("stage1 lr_min must not exceed lr_max")
        if self.stage1.batch < 1 or self.stage2.batch < 1:
            raise ValueError("batch size must be >= 1")
        return self


def resolve_aug(aug: AugmentConfig, input_mode: str, mode: str) -> AugmentConfig:
    crop_mode = "bbox" if input_mode == "cropped" else "full"
    return replace(aug, mode=mode, crop_mode=crop_mode)


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

def adam_step(p: ops.Parameter, lr, t, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; frozen parameters untouched."""
    if p.frozen:
        return
    if t < 1:
        raise ValueError("adam_step needs t >= 1")
    g = p.grad
    p.adam_m *= beta1
    p.adam_m += (1 - beta1) * g
    p.adam_v *= beta2
    p.adam_v += (1 - beta2) * g * g
    mhat = p.adam_m / (1 - beta1 ** t)
    vhat = p.adam_v / (1 - beta2 ** t)
    p.value -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype, copy=False)


def cosine_lr(t, total, lr_max, lr_min):
    """Cosine decay from lr_max to lr_min; endpoints exact."""
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if t == 0:
        return lr_max
    if t == total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# stochastic weight averaging
# ---------------------------------------------------------------------------

class SwaState:
    """Running equal average of parameter snapshots (float64 accumulate)."""

    def __init__(self):
        self.sums = {}
        self.count = 0

    def update(self, named_params):
        for name, p in named_params:
            if name in self.sums:
                self.sums[name] += p.value.astype(np.float64)
            else:
                self.sums[name] = p.value.astype(np.float64)
        self.count += 1

    def mean(self):
        if self.count == 0:
            raise ValueError("no snapshots accumulated")
        return {name: s / self.count for name, s in self.sums.items()}

    def install(self, named_params):
        mean = self.mean()
        for name, p in named_params:
            p.value[...] = mean[name].astype(p.value.dtype)


def recompute_bn_stats(model, batches):
    """One pass over ``batches`` in train mode, then install the population
    statistics seen during the pass as the running stats."""
    layers = model.backbone.bn_layers() if hasattr(model, "backbone") else model.bn_layers()
    for bn in layers:
        bn.start_collecting()
    for x in batches:
        model.forward(x, train=True)
    for bn in layers:
        bn.finish_collecting()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def params_hash(named_tensors) -> str:
    h = hashlib.sha256()
    for name, arr in named_tensors:
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(path, named_tensors, stage, config_hash, extra=None):
    """Binary checkpoint: magic, version, length-prefixed JSON header, then
    float32-LE blobs in header order."""
    header = dict(stage=stage, config_hash=config_hash,
                  tensors=[dict(name=n, shape=list(a.shape)) for n, a in named_tensors],
                  extra=extra or {})
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in named_tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        tensors = {}
        for rec in header["tensors"]:
            shape = tuple(rec["shape"])
            n = int(np.prod(shape)) if shape else 1
            data = fh.read(4 * n)
            if len(data) != 4 * n:
                raise ValueError(f"{path}: truncated blob for {rec['name']}")
            tensors[rec["name"]] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return header, tensors


def model_tensors(model):
    """Ordered (name, array) pairs: parameters then BN running stats."""
    out = [(n, p.value) for n, p in model.named_parameters()]
    out += list(model.named_state())
    return out


def save_stage1(path, model: Stage1Model, config_hash, input_mode):
    extra = dict(backbone_cfg=asdict(model.backbone.cfg), input_mode=input_mode)
    save_checkpoint(path, model_tensors(model), "stage1", config_hash, extra)


def load_stage1(path):
    header, tensors = load_checkpoint(path)
    if header["stage"] != "stage1":
        raise ValueError(f"{path}: expected a stage1 checkpoint, got {header['stage']}")
    cfg = BackboneConfig(**{**header["extra"]["backbone_cfg"],
                            "width_schedule": tuple(header["extra"]["backbone_cfg"]["width_schedule"])})
    model = Stage1Model(cfg, seed=0)
    _assign(model, tensors)
    return model, header


def save_qnet(path, qnet: QNet, config_hash, input_mode):
    extra = dict(backbone_cfg=asdict(qnet.backbone.cfg), qnet_cfg=asdict(qnet.cfg),
                 input_mode=input_mode)
    save_checkpoint(path, model_tensors(qnet), "stage2", config_hash, extra)


def load_qnet(path):
    header, tensors = load_checkpoint(path)
    if header["stage"] != "stage2":
        raise ValueError(f"{path}: expected a stage2 checkpoint, got {header['stage']}")
    bb_cfg = BackboneConfig(**{**header["extra"]["backbone_cfg"],
                               "width_schedule": tuple(header["extra"]["backbone_cfg"]["width_schedule"])})
    q_cfg = QNetConfig(**header["extra"]["qnet_cfg"])
    qnet = QNet(Backbone(bb_cfg, seed=0), q_cfg, seed=0)
    _assign(qnet, tensors)
    return qnet, header


def _assign(model, tensors):
    for name, p in model.named_parameters():
        p.value[...] = tensors[name]
    for name, arr in model.named_state():
        arr[...] = tensors[name]


# ---------------------------------------------------------------------------
# batching helpers
# ---------------------------------------------------------------------------

def _augment_slice(scan: Scan, t, aug, rng):
    return apply_pipeline(scan.slices[t], aug, rng, bbox=scan.bbox)


def _slice_batch(scans, pool, idxs, aug, seed, epoch):
    xs = []
    labels = []
    for i in idxs:
        scan_i, t = pool[i]
        rng = np.random.default_rng([seed, NS_SLICE_AUG, epoch, int(i)])
        xs.append(_augment_slice(scans[scan_i], t, aug, rng))
        labels.append(label_to_int(scans[scan_i].label))
    return np.stack(xs), np.asarray(labels)


def _scan_batch(scans, idxs, aug, seq_len, seed, epoch):
    xs = []
    labels = []
    masks = []
    for i in idxs:
        scan = scans[i]
        slices, mask = pad_scan(scan.slices, seq_len)
        out = []
        for t in range(seq_len):
            rng = np.random.default_rng([seed, NS_SLICE_AUG, epoch, int(i), t])
            out.append(apply_pipeline(slices[t], aug, rng, bbox=scan.bbox))
        xs.append(np.stack(out))
        labels.append(label_to_int(scan.label))
        masks.append(mask)
    return np.stack(xs), np.asarray(labels), np.asarray(masks)


def eval_slices(scan: Scan, aug_test, seq_len):
    slices, mask = pad_scan(scan.slices, seq_len)
    rng = np.random.default_rng(0)  # unused: the test pipeline is deterministic
    out = [apply_pipeline(slices[t], aug_test, rng, bbox=scan.bbox) for t in range(seq_len)]
    return np.stack(out), mask


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def train_stage1(train_scans, backbone_cfg: BackboneConfig, cfg: Stage1Config,
                 aug: AugmentConfig, input_mode: str, seed: int):
    """Train the slice-level model; returns (model, info dict).

    The returned model carries SWA-averaged weights (when enabled) with
    recomputed BN statistics; ``info['loss_trace']`` logs one mean loss per
    epoch.
    """
    if not train_scans:
        raise ValueError("empty training fold")
    aug_train = resolve_aug(aug, input_mode, "train")
    model = Stage1Model(backbone_cfg, seed=_derive(seed, NS_STAGE1_INIT))
    pool = [(si, t) for si, scan in enumerate(train_scans)
            for t in range(scan.slices.shape[0])]
    n = len(pool)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch))
    total_steps = cfg.epochs * steps_per_epoch
    swa = SwaState()
    swa_start = int(math.ceil(cfg.epochs * cfg.swa_start_fraction))
    params = model.named_parameters()
    loss_trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, NS_EPOCH_SHUFFLE, epoch]).permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idxs = order[b * cfg.batch:(b + 1) * cfg.batch]
            if len(idxs) == 0:
                continue
            x, labels = _slice_batch(train_scans, pool, idxs, aug_train, seed, epoch)
            for _, p in params:
                p.zero_grad()
            logits, cache = model.forward(x, train=True)
            loss, dlogits = ops.softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"stage1 loss non-finite at epoch {epoch} step {step} (lr schedule step {step}/{total_steps})")
            model.backward(dlogits, cache)
            lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)
            step += 1
            for _, p in params:
                adam_step(p, lr, step)
            epoch_loss += loss
        loss_trace.append(epoch_loss / steps_per_epoch)
        if cfg.swa_start_fraction < 1.0 and epoch >= swa_start:
            swa.update(params)
    if swa.count > 0:
        swa.install(params)
        _bn_pass(model, train_scans, pool, aug_train, cfg.batch, seed)
    return model, dict(loss_trace=loss_trace, swa_snapshots=swa.count)


def _bn_pass(model, scans, pool, aug, batch, seed):
    def batches():
        for b in range(math.ceil(len(pool) / batch)):
            idxs = np.arange(b * batch, min((b + 1) * batch, len(pool)))
            x, _ = _slice_batch(scans, pool, idxs, aug, seed, epoch=NS_BN_PASS)
            yield x
    recompute_bn_stats(model, batches())


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def train_stage2(train_scans, stage1: Stage1Model, qnet_cfg: QNetConfig,
                 cfg: Stage2Config, aug: AugmentConfig, input_mode: str, seed: int):
    """Train the scan-level model on the frozen embedding; returns (qnet, info)."""
    if not train_scans:
        raise ValueError("empty training fold")
    for scan in train_scans:
        if scan.slices.shape[0] > qnet_cfg.seq_len:
            raise ValueError(
                f"scan {scan.subject_id} has {scan.slices.shape[0]} slices "
                f"> seq_len {qnet_cfg.seq_len}")
    aug_train = resolve_aug(aug, input_mode, "train")
    qnet = QNet(stage1.backbone, qnet_cfg, seed=_derive(seed, NS_STAGE2_INIT))
    params = qnet.trainable_parameters()
    n = len(train_scans)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch))
    loss_trace = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([seed, NS_EPOCH_SHUFFLE, 1000 + epoch]).permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idxs = order[b * cfg.batch:(b + 1) * cfg.batch]
            if len(idxs) == 0:
                continue
            x, labels, masks = _scan_batch(train_scans, idxs, aug_train,
                                           qnet_cfg.seq_len, seed, epoch)
            for _, p in params:
                p.zero_grad()
            img_logits, scan_logits, cache = qnet.forward(x)
            loss_img, d_img = masked_cross_entropy(img_logits, labels, masks)
            loss_scan, d_scan = ops.softmax_cross_entropy(scan_logits, labels)
            loss = loss_img + loss_scan
            if not np.isfinite(loss):
                raise TrainingDiverged(f"stage2 loss non-finite at epoch {epoch} step {step}")
            qnet.backward(d_img, d_scan, cache)
            step += 1
            for _, p in params:
                adam_step(p, cfg.lr, step)
            epoch_loss += loss
        loss_trace.append(epoch_loss / steps_per_epoch)
    return qnet, dict(loss_trace=loss_trace)


# ---------------------------------------------------------------------------
# prediction and cross-validation
# ---------------------------------------------------------------------------

def predict_fold(stage1: Stage1Model, qnet: QNet, test_scans, aug: AugmentConfig,
                 input_mode: str):
    """Deterministic test-time predictions for one held-out fold."""
    aug_test = resolve_aug(aug, input_mode, "test")
    rows = []
    for scan in sorted(test_scans, key=lambda s: s.subject_id):
        x, mask = eval_slices(scan, aug_test, qnet.cfg.seq_len)
        logits1, _ = stage1.forward(x, train=False)
        p1 = ops.softmax(logits1)[:, 1]
        img_logits, scan_logits, _ = qnet.forward(x[None])
        p_img = ops.softmax(img_logits[0])[:, 1]
        p_scan = ops.softmax(scan_logits)[0, 1]
        for t in range(qnet.cfg.seq_len):
            if not mask[t]:
                continue
            rows.append(ScoreRow(scan.subject_id, t, scan.label, float(p1[t]),
                                 "resnet_swa", input_mode))
            rows.append(ScoreRow(scan.subject_id, t, scan.label, float(p_img[t]),
                                 "qnet", input_mode))
        rows.append(ScoreRow(scan.subject_id, -1, scan.label, float(p_scan),
                             "qnet", input_mode))
    return rows


def run_fold(scans, split, fold, backbone_cfg, qnet_cfg, train_cfg: TrainConfig,
             aug: AugmentConfig):
    train_ids = set(split.train_ids(fold))
    test_ids = set(split.test_ids(fold))
    train_scans = [s for s in scans if s.subject_id in train_ids]
    test_scans = [s for s in scans if s.subject_id in test_ids]
    fold_seed = _derive(train_cfg.seed, NS_FOLD, fold)
    stage1, _ = train_stage1(train_scans, backbone_cfg, train_cfg.stage1, aug,
                             train_cfg.input_mode, fold_seed)
    qnet, _ = train_stage2(train_scans, stage1, qnet_cfg, train_cfg.stage2, aug,
                           train_cfg.input_mode, fold_seed)
    return predict_fold(stage1, qnet, test_scans, aug, train_cfg.input_mode)


def cross_validate(scans, k, backbone_cfg: BackboneConfig, qnet_cfg: QNetConfig,
                   train_cfg: TrainConfig, aug: AugmentConfig, workers: int = 1):
    """Train both stages on every k-1 fold union, score the held-out fold,
    and pool the rows; every subject appears exactly once."""
    train_cfg.validate()
    split = make_folds([(s.subject_id, s.label) for s in scans], k, train_cfg.seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_fold, scans, split, fold, backbone_cfg,
                                   qnet_cfg, train_cfg, aug)
                       for fold in range(k)]
            per_fold = [f.result() for f in futures]
    else:
        per_fold = [run_fold(scans, split, fold, backbone_cfg, qnet_cfg,
                             train_cfg, aug) for fold in range(k)]
    rows = [row for fold_rows in per_fold for row in fold_rows]
    rows.sort(key=lambda r: (r.model, r.subject_id, r.slice_index))
    return rows


def _derive(seed, *path):
    mixed = np.random.SeedSequence([int(seed)] + [int(p) for p in path])
    return int(mixed.generate_state(1, dtype=np.uint64)[0])
