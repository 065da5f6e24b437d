"""Optimization, training loops, metrics, and run artifacts.

Both loops share the SGD-with-momentum step (BN scale/shift and biases are
exempt from weight decay) and the poly learning-rate schedule. Pre-training
logs one CSV row per step; fine-tuning logs one per epoch and keeps the
best-validation-mean-F1 model for the test report.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import augment, checkpoint, data, nn
from . import nn_ops as ops
from . import tensor as tz
from .errors import (
    AllRegionsInvalid,
    BatchTooSmall,
    CheckpointIncompatible,
    ConfigInvalid,
    DataMissing,
    EmptyDataset,
    NonFiniteLoss,
    ShapeMismatch,
)
from .objective import ObjectiveConfig, sample_loss
from .tensor import Tensor

log = logging.getLogger("sdrl")


@dataclass
class OptimizerConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    poly_power: float = 0.9

    def validate(self) -> None:
        if self.base_lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigInvalid(f"bad optimizer settings: {self}")


def poly_lr(step: int, max_steps: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= step <= max_steps:
        raise ConfigInvalid(f"step {step} outside [0, {max_steps}]")
    return base_lr * (1.0 - step / max_steps) ** power


def _decayable(name: str) -> bool:
    # BN scale/shift and all biases train without weight decay
    leaf = name.rsplit(".", 1)[-1]
    return leaf not in ("scale", "shift", "bias")


def sgd_step(named_params: Sequence[Tuple[str, nn.Parameter]], lr: float,
             momentum: float, weight_decay: float) -> None:
    for name, p in named_params:
        if p.grad is None:
            continue
        if p.grad.shape != p.data.shape:
            raise ShapeMismatch(f"{name}: grad shape {p.grad.shape} vs param {p.data.shape}")
        g = p.grad
        if weight_decay and _decayable(name):
            g = g + np.float32(weight_decay) * p.data
        if p.momentum_buffer is None:
            p.momentum_buffer = np.zeros_like(p.data)
        p.momentum_buffer *= np.float32(momentum)
        p.momentum_buffer += g
        p.data -= np.float32(lr) * p.momentum_buffer


def collapse_statistic(z: np.ndarray) -> float:
    """Mean per-dimension std of row-normalized embeddings; ~1/sqrt(C') when healthy."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise BatchTooSmall(f"need at least 2 embedding rows, got shape {z.shape}")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    zn = z / np.maximum(norms, 1e-12)
    return float(zn.std(axis=0).mean())


def confusion_counts(pred: np.ndarray, labels: np.ndarray) -> Tuple[int, int, int, int]:
    """(tp, fp, fn, tn) for the change class (label 1)."""
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs labels {labels.shape}")
    pred = pred.astype(bool)
    lab = labels.astype(bool)
    tp = int(np.sum(pred & lab))
    fp = int(np.sum(pred & ~lab))
    fn = int(np.sum(~pred & lab))
    tn = int(np.sum(~pred & ~lab))
    return tp, fp, fn, tn


def _prf(tp: int, fp: int, fn: int) -> Tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate_f1(logits, labels) -> Tuple[float, float, float]:
    """(precision, recall, F1) of the change class from per-pixel logits."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.asarray(labels)
    pred = arr.argmax(axis=1)
    tp, fp, fn, _ = confusion_counts(pred, labels)
    return _prf(tp, fp, fn)


def f1_scores_from_counts(tp: int, fp: int, fn: int, tn: int) -> Dict[str, float]:
    p1, r1, f1_change = _prf(tp, fp, fn)
    p0, r0, f1_nochange = _prf(tn, fn, fp)
    return {
        "precision": p1,
        "recall": r1,
        "f1": f1_change,
        "f1_nochange": f1_nochange,
        "mean_f1": 0.5 * (f1_change + f1_nochange),
    }


@dataclass
class RunRecord:
    seed: int
    config: dict
    rows: List[dict] = field(default_factory=list)
    collapse_series: List[float] = field(default_factory=list)
    skipped_samples: int = 0
    wall_clock: float = 0.0
    result: dict = field(default_factory=dict)

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)


def _write_csv(path, fieldnames: Sequence[str], rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch, index)))


def _check_finite(value: float, what: str, step: int, epoch: int) -> None:
    if not np.isfinite(value):
        raise NonFiniteLoss(f"{what} became non-finite at step {step} (epoch {epoch})")


PRETRAIN_CSV_COLUMNS = ("step", "epoch", "lr", "l_sd", "l_s", "total", "collapse_stat")
FINETUNE_CSV_COLUMNS = ("epoch", "lr", "train_loss", "val_precision", "val_recall",
                        "val_f1", "mean_f1")


@dataclass
class PretrainSettings:
    epochs: int = 20
    batch_size: int = 16

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid(f"bad pretrain settings: {self}")


def pretrain(
    root,
    manifest: data.Manifest,
    enc_cfg: nn.EncoderConfig,
    head_cfg: nn.HeadConfig,
    objective_cfg: ObjectiveConfig,
    opt_cfg: OptimizerConfig,
    settings: PretrainSettings,
    seed: int,
    out_dir,
) -> RunRecord:
    """Self-supervised pre-training over the manifest's train split."""
    settings.validate()
    opt_cfg.validate()
    objective_cfg.validate()
    t_start = time.monotonic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = [r for r in manifest.records if r.split == "train"]
    if not records:
        raise EmptyDataset("manifest has no train records")
    records.sort(key=lambda r: r.patch_id)

    model = nn.SSLModel(enc_cfg, head_cfg, np.random.default_rng(seed))
    named = model.named_parameters()
    steps_per_epoch = max(1, len(records) // settings.batch_size)
    max_steps = settings.epochs * steps_per_epoch

    run = RunRecord(seed=seed, config={
        "encoder": asdict(enc_cfg), "heads": asdict(head_cfg),
        "objective": asdict(objective_cfg), "optimizer": asdict(opt_cfg),
        "settings": asdict(settings),
    })
    best_loss = float("inf")
    global_step = 0
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xD5,)))

    for epoch in range(settings.epochs):
        order = list(records)
        shuffle_rng.shuffle(order)
        epoch_total = 0.0
        epoch_steps = 0
        epoch_z: Optional[np.ndarray] = None
        for b in range(steps_per_epoch):
            batch = order[b * settings.batch_size : (b + 1) * settings.batch_size]
            lr = poly_lr(global_step, max_steps, opt_cfg.base_lr, opt_cfg.poly_power)
            totals: List[Tensor] = []
            sd_sum = 0.0
            s_sum = 0.0
            z_rows: List[np.ndarray] = []
            for si, rec in enumerate(batch):
                patch = data.load_patch(root, rec, manifest.patch_size)
                bundle = augment.make_view_bundle(
                    patch["image_t1"], patch["image_t2"], patch["mask"],
                    _sample_rng(seed, epoch, b * settings.batch_size + si))
                try:
                    capture: dict = {}
                    bd = sample_loss(bundle, model, objective_cfg, capture=capture)
                except AllRegionsInvalid:
                    run.skipped_samples += 1
                    log.warning("skipped sample %s: all regions invalid", rec.patch_id)
                    continue
                totals.append(bd.total)
                sd_sum += bd.l_sd.item()
                s_sum += bd.l_s.item()
                z_rows.append(capture["z"])
            if not totals:
                continue
            batch_loss = tz.scalar_mul(_sum_tensors(totals), 1.0 / len(totals))
            loss_val = batch_loss.item()
            _check_finite(loss_val, "pretraining loss", global_step, epoch)
            model.zero_grad()
            tz.backward(batch_loss)
            sgd_step(named, lr, opt_cfg.momentum, opt_cfg.weight_decay)

            z_all = np.concatenate(z_rows, axis=0)
            stat = collapse_statistic(z_all) if z_all.shape[0] >= 2 else 0.0
            run.rows.append({
                "step": global_step, "epoch": epoch, "lr": lr,
                "l_sd": sd_sum / len(totals), "l_s": s_sum / len(totals),
                "total": loss_val, "collapse_stat": stat,
            })
            epoch_total += loss_val
            epoch_steps += 1
            epoch_z = z_all
            global_step += 1
        if epoch_steps == 0:
            raise EmptyDataset(f"epoch {epoch}: every sample was skipped")
        run.collapse_series.append(collapse_statistic(epoch_z) if epoch_z is not None else 0.0)
        epoch_mean = epoch_total / epoch_steps
        log.info("pretrain epoch %d: loss %.4f collapse %.4f", epoch, epoch_mean,
                 run.collapse_series[-1])
        if epoch_mean < best_loss:
            best_loss = epoch_mean
            checkpoint.save(out_dir / "best.ckpt", model.state_dict(), enc_cfg)
    checkpoint.save(out_dir / "last.ckpt", model.state_dict(), enc_cfg)
    _write_csv(out_dir / "pretrain_metrics.csv", PRETRAIN_CSV_COLUMNS, run.rows)
    run.wall_clock = time.monotonic() - t_start
    run.result = {"best_epoch_loss": best_loss, "final_collapse": run.collapse_series[-1],
                  "skipped_samples": run.skipped_samples}
    run.save(out_dir / "run_record.json")
    return run


def _sum_tensors(ts: List[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = tz.add(acc, t)
    return acc


@dataclass
class FinetuneSettings:
    epochs: int = 20
    batch_size: int = 8
    fraction: float = 1.0
    class_weighted: bool = False

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid(f"bad finetune settings: {self}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigInvalid(f"label fraction must be in (0,1], got {self.fraction}")


def _batch_arrays(root, records: Sequence[data.PatchRecord], patch_size: int):
    t1, t2, labels = [], [], []
    for rec in records:
        patch = data.load_patch(root, rec, patch_size)
        t1.append(patch["image_t1"].transpose(2, 0, 1))
        t2.append(patch["image_t2"].transpose(2, 0, 1))
        labels.append(patch["change"])
    return (np.ascontiguousarray(np.stack(t1)), np.ascontiguousarray(np.stack(t2)),
            np.stack(labels).astype(np.int64))


def _eval_split(model: nn.ChangeDetector, root, records, patch_size: int,
                batch_size: int) -> Dict[str, float]:
    model.eval()
    tp = fp = fn = tn = 0
    with tz.no_grad():
        for b in range(0, len(records), batch_size):
            x1, x2, y = _batch_arrays(root, records[b : b + batch_size], patch_size)
            logits = model.forward(Tensor(x1), Tensor(x2))
            pred = logits.data.argmax(axis=1)
            dtp, dfp, dfn, dtn = confusion_counts(pred, y)
            tp += dtp; fp += dfp; fn += dfn; tn += dtn
    model.train()
    return f1_scores_from_counts(tp, fp, fn, tn)


def finetune(
    root,
    manifest: data.Manifest,
    cd_cfg: nn.CDNetConfig,
    opt_cfg: OptimizerConfig,
    settings: FinetuneSettings,
    seed: int,
    out_dir,
    init: str = "random",
    checkpoint_path: Optional[str] = None,
) -> RunRecord:
    """Supervised change-detection training on a label fraction of the train split."""
    settings.validate()
    opt_cfg.validate()
    if init not in ("random", "checkpoint"):
        raise ConfigInvalid(f"init must be random or checkpoint, got {init!r}")
    t_start = time.monotonic()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    by_split: Dict[str, List[data.PatchRecord]] = {"train": [], "val": [], "test": []}
    for rec in manifest.records:
        if rec.split in by_split:
            by_split[rec.split].append(rec)
    for name in ("train", "val", "test"):
        if not by_split[name]:
            raise EmptyDataset(f"manifest has no {name} records")
        by_split[name].sort(key=lambda r: r.patch_id)

    train_records = data.label_fraction_subset(by_split["train"], settings.fraction, seed)

    model = nn.ChangeDetector(cd_cfg, np.random.default_rng(seed))
    if init == "checkpoint":
        if not checkpoint_path:
            raise CheckpointIncompatible("init=checkpoint requires a checkpoint path")
        state, _ = checkpoint.load(checkpoint_path, cd_cfg.encoder)
        model.load_state_dict(checkpoint.encoder_state(state))
        log.info("loaded encoder weights from %s", checkpoint_path)

    class_weights = None
    if settings.class_weighted:
        pos = sum(int(data.load_patch(root, r, manifest.patch_size)["change"].sum())
                  for r in train_records)
        total = len(train_records) * manifest.patch_size ** 2
        pos_frac = max(pos / total, 1e-6)
        class_weights = np.array([0.5 / (1 - pos_frac), 0.5 / pos_frac], dtype=np.float64)

    named = model.named_parameters()
    steps_per_epoch = max(1, (len(train_records) + settings.batch_size - 1) // settings.batch_size)
    max_steps = settings.epochs * steps_per_epoch
    run = RunRecord(seed=seed, config={
        "cdnet": {"encoder": asdict(cd_cfg.encoder), "fpn_channels": cd_cfg.fpn_channels,
                  "num_classes": cd_cfg.num_classes},
        "optimizer": asdict(opt_cfg), "settings": asdict(settings), "init": init,
    })

    best = (-1.0, -1)  # (val mean F1, epoch); ties go to the later epoch
    best_state: Optional[dict] = None
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xF7,)))
    global_step = 0
    for epoch in range(settings.epochs):
        order = list(train_records)
        shuffle_rng.shuffle(order)
        epoch_loss = 0.0
        epoch_lr = poly_lr(global_step, max_steps, opt_cfg.base_lr, opt_cfg.poly_power)
        for b in range(steps_per_epoch):
            batch = order[b * settings.batch_size : (b + 1) * settings.batch_size]
            if not batch:
                continue
            lr = poly_lr(global_step, max_steps, opt_cfg.base_lr, opt_cfg.poly_power)
            x1, x2, y = _batch_arrays(root, batch, manifest.patch_size)
            logits = model.forward(Tensor(x1), Tensor(x2))
            loss = ops.cross_entropy(logits, y, class_weights=class_weights)
            loss_val = loss.item()
            _check_finite(loss_val, "fine-tuning loss", global_step, epoch)
            model.zero_grad()
            tz.backward(loss)
            sgd_step(named, lr, opt_cfg.momentum, opt_cfg.weight_decay)
            epoch_loss += loss_val
            global_step += 1
        val = _eval_split(model, root, by_split["val"], manifest.patch_size, settings.batch_size)
        run.rows.append({
            "epoch": epoch, "lr": epoch_lr, "train_loss": epoch_loss / steps_per_epoch,
            "val_precision": val["precision"], "val_recall": val["recall"],
            "val_f1": val["f1"], "mean_f1": val["mean_f1"],
        })
        log.info("finetune epoch %d: loss %.4f val F1 %.4f mean F1 %.4f",
                 epoch, epoch_loss / steps_per_epoch, val["f1"], val["mean_f1"])
        if val["mean_f1"] >= best[0]:
            best = (val["mean_f1"], epoch)
            best_state = model.state_dict()

    assert best_state is not None
    model.load_state_dict(best_state)
    test = _eval_split(model, root, by_split["test"], manifest.patch_size, settings.batch_size)
    checkpoint.save(out_dir / "cdnet_best.ckpt", best_state, cd_cfg.encoder)
    _write_csv(out_dir / "finetune_metrics.csv", FINETUNE_CSV_COLUMNS, run.rows)
    run.wall_clock = time.monotonic() - t_start
    run.result = {
        "best_epoch": best[1], "best_val_mean_f1": best[0],
        "test_precision": test["precision"], "test_recall": test["recall"],
        "test_f1": test["f1"], "test_mean_f1": test["mean_f1"],
        "fraction": settings.fraction, "init": init, "seed": seed,
    }
    run.save(out_dir / "run_record.json")
    return run


def evaluate_checkpoint(
    root,
    manifest: data.Manifest,
    cd_cfg: nn.CDNetConfig,
    checkpoint_path: str,
    split: str = "test",
    batch_size: int = 8,
) -> Dict[str, float]:
    """Confusion-derived metrics for a saved change detector on one split."""
    records = [r for r in manifest.records if r.split == split]
    if not records:
        raise EmptyDataset(f"manifest has no {split!r} records")
    model = nn.ChangeDetector(cd_cfg, np.random.default_rng(0))
    state, _ = checkpoint.load(checkpoint_path, cd_cfg.encoder)
    model.load_state_dict(state)
    return _eval_split(model, root, records, manifest.patch_size, batch_size)


def probe_checkpoint(
    root,
    manifest: data.Manifest,
    enc_cfg: nn.EncoderConfig,
    head_cfg: nn.HeadConfig,
    checkpoint_path: str,
    max_patches: int = 32,
) -> Dict[str, float]:
    """Collapse and foreground/background separation report for a checkpoint."""
    model = nn.SSLModel(enc_cfg, head_cfg, np.random.default_rng(0))
    state, _ = checkpoint.load(checkpoint_path, enc_cfg)
    model.load_state_dict(state)
    model.eval()
    records = sorted((r for r in manifest.records if r.split == "val"),
                     key=lambda r: r.patch_id)[:max_patches]
    if not records:
        raise DataMissing("manifest has no val records to probe")
    from .objective import masked_pool  # local import avoids a cycle at module load

    z_rows = []
    cos_fg_bg = []
    with tz.no_grad():
        for rec in records:
            patch = data.load_patch(root, rec, manifest.patch_size)
            img = np.ascontiguousarray(patch["image_t1"].transpose(2, 0, 1))[None]
            feats = model.encode(Tensor(img))
            emb = masked_pool(Tensor(feats.data[0]), patch["mask"])
            pooled_rows = [v for v, ok in zip(emb.vectors, emb.valid) if ok]
            for v in pooled_rows:
                z_rows.append(model.project(tz.stack([v])).data[0])
            if all(emb.valid):
                cos_fg_bg.append(float(tz.cosine_similarity(emb.vectors[1], emb.vectors[0]).item()))
    if len(z_rows) < 2:
        raise BatchTooSmall("not enough valid regions to probe")
    report = {
        "collapse_stat": collapse_statistic(np.stack(z_rows)),
        "isotropy_reference": 1.0 / float(np.sqrt(head_cfg.out_dim)),
        "n_regions": float(len(z_rows)),
    }
    if cos_fg_bg:
        report["mean_fg_bg_cos"] = float(np.mean(cos_fg_bg))
        report["mean_fg_bg_angle_deg"] = float(np.degrees(np.arccos(np.clip(np.mean(cos_fg_bg), -1, 1))))
    return report
