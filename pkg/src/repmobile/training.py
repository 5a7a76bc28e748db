"""Training loop, learning-rate schedule and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .container import save_model
from .audio import AugmentConfig, MelConfig, draw_descriptors, log_mel, render_batch
from .distill import DistillConfig, LogitsCache, distill_loss, epoch_batches
from .errors import CacheMissError, ConfigError, NonFiniteError
from .model import ModelGraph, forward, predict
from .optim import Adam, AdamConfig
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    warmup_epochs: float = 5
    peak_lr: float = 0.01
    final_lr: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0
    eval_every: int = 1
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.warmup_epochs < 0 or (self.epochs > 0 and self.warmup_epochs >= self.epochs):
            raise ConfigError(f"warmup ({self.warmup_epochs}) must be shorter than training ({self.epochs} epochs)")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(epoch: float, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay to ``final_lr``.

    ``epoch`` may be fractional; the training loop evaluates it once per step.
    """
    e = min(max(float(epoch), 0.0), float(cfg.epochs))
    w = float(cfg.warmup_epochs)
    if e < w:
        return cfg.peak_lr * e / w
    span = cfg.epochs - w
    t = (e - w) / span if span > 0 else 1.0
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * t))


# -- evaluation --------------------------------------------------------------------


def clean_features(dataset, ids: Sequence[int], mel_cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Unaugmented ``[N, 1, F, T]`` log-mel inputs, memoised on the dataset."""
    memo = dataset.__dict__.setdefault("_features", {})
    out = []
    for sid in ids:
        f = memo.get(sid)
        if f is None:
            f = memo[sid] = log_mel(dataset.waveform(sid), mel_cfg)
        out.append(f[None])
    return np.stack(out)


@dataclass
class EvalResult:
    accuracy: float
    per_class: dict
    per_device: dict
    n: int
    logits: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "logits"}


def accuracy_breakdown(pred: np.ndarray, labels: np.ndarray, devices: np.ndarray | None = None) -> EvalResult:
    pred, labels = np.asarray(pred), np.asarray(labels)
    hit = pred == labels
    per_class = {int(c): float(hit[labels == c].mean()) for c in np.unique(labels)}
    per_device = {}
    if devices is not None:
        devices = np.asarray(devices)
        per_device = {int(d): float(hit[devices == d].mean()) for d in np.unique(devices)}
    return EvalResult(float(hit.mean()) if len(hit) else float("nan"), per_class, per_device, int(len(hit)))


def evaluate(model: ModelGraph, dataset, ids: Sequence[int], batch_size: int = 64, mel_cfg: MelConfig = MelConfig()) -> EvalResult:
    ids = list(ids)
    x = clean_features(dataset, ids, mel_cfg)
    logits = predict(model, x, batch_size)
    devices = np.array([dataset.by_id[i].device for i in ids])
    res = accuracy_breakdown(logits.argmax(1), dataset.labels(ids), devices)
    res.logits = logits
    return res


# -- training ------------------------------------------------------------------------


METRIC_FIELDS = ["epoch", "lr", "loss", "train_acc", "eval_acc"]


def write_metrics(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in METRIC_FIELDS})


@dataclass
class TrainResult:
    model: ModelGraph
    metrics: list
    best_acc: float = float("nan")
    best_epoch: int = -1
    final_eval: EvalResult | None = None


def train(
    model: ModelGraph,
    dataset,
    ids: Sequence[int],
    cfg: TrainConfig,
    *,
    eval_ids: Sequence[int] | None = None,
    cache: LogitsCache | None = None,
    distill: DistillConfig | None = None,
    out_dir=None,
    mel_cfg: MelConfig = MelConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Optimise ``model`` in place and return it with per-epoch metrics.

    Without a cache the loss is cross-entropy on freshly drawn augmentations.
    With a cache, every (sample, epoch) the loop visits must be present; its
    stored descriptor is replayed and the stored logits act as teachers.
    The returned model is the final one; the best-by-eval checkpoint is written
    to ``out_dir/best`` when ``out_dir`` is given.
    """
    ids = sorted(int(i) for i in ids)
    if not ids:
        raise ConfigError("no training samples")
    if cache is not None:
        distill = distill or DistillConfig()
        missing = [(s, e) for e in range(cfg.epochs) for s in ids if (s, e) not in cache]
        if missing:
            s, e = missing[0]
            raise CacheMissError(f"cache lacks {len(missing)} (sample, epoch) pairs, first: sample {s} epoch {e}")
    out_dir = Path(out_dir) if out_dir is not None else None
    params = model.parameters()
    opt = Adam(params, AdamConfig(lr=cfg.peak_lr, weight_decay=cfg.weight_decay))
    steps = math.ceil(len(ids) / cfg.batch_size)
    rows, best_acc, best_epoch, res = [], float("nan"), -1, None
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        loss_sum, hit, seen = 0.0, 0, 0
        for bi, batch in enumerate(epoch_batches(ids, cfg.seed, epoch, cfg.batch_size)):
            opt.lr = lr_schedule(epoch + bi / steps, cfg)
            labels = dataset.labels(batch)
            if cache is not None:
                descs, teacher = cache.batch(batch, epoch)
            else:
                descs = draw_descriptors(batch, epoch, bi, cfg.seed, cfg.augment, mel_cfg.n_mels)
            x = Tensor(render_batch(descs, dataset.waveform, mel_cfg, cfg.augment.fms_eps))
            logits = forward(model, x, "train")
            if cache is not None:
                loss = distill_loss(logits, list(teacher), labels, distill)
            else:
                loss = ops.cross_entropy(logits, labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite loss at epoch {epoch} batch {bi}")
            hit += int((logits.data.argmax(1) == labels).sum())
            seen += len(batch)
            opt.zero_grad()
            backward(loss)
            opt.step()
            loss_sum += value * len(batch)
        row = {
            "epoch": epoch,
            "lr": opt.lr,
            "loss": loss_sum / seen,
            "train_acc": hit / seen,
            "eval_acc": "",
        }
        last = epoch == cfg.epochs - 1
        if eval_ids and ((epoch + 1) % cfg.eval_every == 0 or last):
            res = evaluate(model, dataset, eval_ids, mel_cfg=mel_cfg)
            acc = res.accuracy
            row["eval_acc"] = acc
            if best_epoch < 0 or acc > best_acc:
                best_acc, best_epoch = acc, epoch
                if out_dir is not None:
                    snap = model.copy()
                    snap.eval()
                    save_model(snap, out_dir / "best")
        rows.append(row)
        log.info(
            "epoch %d lr %.5f loss %.4f train %.3f eval %s (%.1fs)",
            epoch, row["lr"], row["loss"], row["train_acc"], row["eval_acc"], time.perf_counter() - t0,
        )
        if on_epoch is not None:
            on_epoch(row)
    model.eval()
    if out_dir is not None:
        write_metrics(rows, out_dir / "metrics.csv")
    return TrainResult(model, rows, best_acc, best_epoch, res)
