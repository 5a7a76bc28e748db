"""Ensemble knowledge distillation with teacher logits cached on disk.

Cache file layout (all little-endian)::

    header   b"RLGC" | version u32 | num_classes u32 | K u32
             K x (len u32 | utf-8 teacher id)
             num_records u64 | capacity u64
             capacity x (sample_id u64 | epoch u32 | offset u64)   # index table
    records  sample_id u64 | epoch u32 | desc_len u32 | desc bytes | K*C float32

The descriptor blob is an :class:`~repmobile.audio.AugmentDescriptor` as UTF-8
JSON, so a record replays to the exact augmented view the teachers scored.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .audio import AugmentConfig, AugmentDescriptor, MelConfig, draw_descriptors, render, render_batch
from .errors import CacheMissError, ConfigError, DataError, NonFiniteError
from .model import ModelGraph, predict
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"RLGC"
VERSION = 1
_INDEX_ENTRY = struct.Struct("<QIQ")
_RECORD_HEAD = struct.Struct("<QII")


@dataclass
class DistillConfig:
    lam: float = 0.5  # weight of the cross-entropy term
    tau: float = 0.1  # temperature applied to student and teacher logits

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")


def distill_loss(student_logits: Tensor, teacher_logits, labels, cfg: DistillConfig = DistillConfig()) -> Tensor:
    """``lam * CE(student, labels) + (1 - lam) * mean_k KL(sharpen(student), sharpen(teacher_k))``.

    ``teacher_logits`` is a sequence of ``[N, C]`` arrays (or a ``[K, N, C]`` array)
    and never receives gradient.
    """
    teachers = [np.asarray(t.data if isinstance(t, Tensor) else t) for t in teacher_logits]
    if student_logits.data.ndim != 2 or student_logits.shape[0] < 1:
        raise ConfigError("student logits must be [N, C] with N >= 1")
    lam = float(cfg.lam)
    if not teachers and lam < 1.0:
        raise ConfigError("distillation with lambda < 1 needs at least one teacher")
    ce = ops.cross_entropy(student_logits, labels)
    if not teachers:
        return ops.scale(ce, lam)
    kl = None
    for t in teachers:
        k = ops.kl_divergence_logits(student_logits, t, cfg.tau)
        kl = k if kl is None else ops.add(kl, k)
    kl = ops.scale(kl, 1.0 / len(teachers))
    return ops.add(ops.scale(ce, lam), ops.scale(kl, 1.0 - lam))


# -- teachers --------------------------------------------------------------------


class TeacherHandle:
    """A frozen source of logits for augmented views."""

    id: str = "teacher"
    name: str = "teacher"
    param_count: int = 0

    def logits(self, views: np.ndarray) -> np.ndarray:  # pragma: no cover - interface
        raise NotImplementedError

    def produce_logits(self, desc: AugmentDescriptor, waveform: Callable[[int], np.ndarray], mel_cfg: MelConfig = MelConfig()) -> np.ndarray:
        return self.logits(render(desc, waveform, mel_cfg)[None])[0]


class ModelTeacher(TeacherHandle):
    """Wraps a :class:`ModelGraph`; scoring always runs in eval mode without a graph."""

    def __init__(self, model: ModelGraph, teacher_id: str = "cnn", batch_size: int = 64):
        from .complexity import count_params

        self.model = model
        self.id = teacher_id
        self.name = f"repmobile-{model.base_channels}-{model.mode}"
        self.param_count = count_params(model)
        self.batch_size = batch_size

    def logits(self, views: np.ndarray) -> np.ndarray:
        return predict(self.model, views, self.batch_size)


# -- cache file --------------------------------------------------------------------


def header_size(teacher_ids: Sequence[str], capacity: int) -> int:
    ids = sum(4 + len(t.encode()) for t in teacher_ids)
    return 16 + ids + 16 + capacity * _INDEX_ENTRY.size


def record_size(desc_len: int, num_teachers: int, num_classes: int) -> int:
    return _RECORD_HEAD.size + desc_len + 4 * num_teachers * num_classes


class CacheWriter:
    """Sequential single-writer for a logits cache with a pre-sized index table."""

    def __init__(self, path, teacher_ids: Sequence[str], capacity: int, num_classes: int = 10):
        self.path = Path(path)
        self.teacher_ids = list(teacher_ids)
        self.num_classes = num_classes
        self.capacity = capacity
        self.index: list[tuple[int, int, int]] = []
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(self.path, "wb")
        self._f.write(b"\0" * header_size(self.teacher_ids, capacity))
        self._seen: set[tuple[int, int]] = set()

    def write(self, desc: AugmentDescriptor, logits: np.ndarray) -> None:
        logits = np.asarray(logits, dtype=np.float64)
        if logits.shape != (len(self.teacher_ids), self.num_classes):
            raise DataError(f"expected logits of shape {(len(self.teacher_ids), self.num_classes)}, got {logits.shape}")
        if not np.all(np.isfinite(logits)):
            raise NonFiniteError(f"non-finite teacher logits for sample {desc.sample_id} (epoch {desc.epoch})")
        key = (desc.sample_id, desc.epoch)
        if key in self._seen:
            raise DataError(f"duplicate record for sample {key[0]} epoch {key[1]}")
        if len(self.index) >= self.capacity:
            raise DataError("cache capacity exceeded")
        blob = desc.to_bytes()
        offset = self._f.tell()
        self._f.write(_RECORD_HEAD.pack(desc.sample_id, desc.epoch, len(blob)))
        self._f.write(blob)
        self._f.write(logits.astype("<f4").tobytes())
        self.index.append((desc.sample_id, desc.epoch, offset))
        self._seen.add(key)

    def close(self) -> "LogitsCache":
        f = self._f
        f.seek(0)
        f.write(MAGIC + struct.pack("<III", VERSION, self.num_classes, len(self.teacher_ids)))
        for t in self.teacher_ids:
            b = t.encode()
            f.write(struct.pack("<I", len(b)) + b)
        f.write(struct.pack("<QQ", len(self.index), self.capacity))
        for entry in self.index:
            f.write(_INDEX_ENTRY.pack(*entry))
        f.close()
        return LogitsCache(self.path)

    def abort(self) -> None:
        self._f.close()
        self.path.unlink(missing_ok=True)


class LogitsCache:
    """Random-access reader; safe to share between threads (positioned reads)."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            head = f.read(16)
            if len(head) < 16 or head[:4] != MAGIC:
                raise DataError(f"{path}: not a logits cache")
            self.version, self.num_classes, k = struct.unpack("<III", head[4:])
            if self.version != VERSION:
                raise DataError(f"{path}: unsupported cache version {self.version}")
            self.teacher_ids = []
            for _ in range(k):
                (n,) = struct.unpack("<I", f.read(4))
                self.teacher_ids.append(f.read(n).decode())
            self.num_records, self.capacity = struct.unpack("<QQ", f.read(16))
            raw = f.read(self.capacity * _INDEX_ENTRY.size)
        self.index: dict[tuple[int, int], int] = {}
        for i in range(self.num_records):
            sid, ep, off = _INDEX_ENTRY.unpack_from(raw, i * _INDEX_ENTRY.size)
            self.index[(sid, ep)] = off
        self.epochs = sorted({ep for _, ep in self.index})
        self._fd = os.open(self.path, os.O_RDONLY)

    @property
    def num_teachers(self) -> int:
        return len(self.teacher_ids)

    def __len__(self) -> int:
        return self.num_records

    def __contains__(self, key) -> bool:
        return tuple(key) in self.index

    def read(self, sample_id: int, epoch: int) -> tuple[AugmentDescriptor, np.ndarray]:
        off = self.index.get((int(sample_id), int(epoch)))
        if off is None:
            raise CacheMissError(f"no cached logits for sample {sample_id} epoch {epoch}")
        sid, ep, n = _RECORD_HEAD.unpack(os.pread(self._fd, _RECORD_HEAD.size, off))
        body = os.pread(self._fd, n + 4 * self.num_teachers * self.num_classes, off + _RECORD_HEAD.size)
        desc = AugmentDescriptor.from_bytes(body[:n])
        logits = np.frombuffer(body[n:], dtype="<f4").reshape(self.num_teachers, self.num_classes)
        return desc, logits

    def batch(self, sample_ids: Sequence[int], epoch: int) -> tuple[list[AugmentDescriptor], np.ndarray]:
        """Descriptors and ``[K, N, C]`` logits for a batch."""
        recs = [self.read(s, epoch) for s in sample_ids]
        return [d for d, _ in recs], np.stack([l for _, l in recs], axis=1)

    def records(self):
        for (sid, ep) in sorted(self.index, key=lambda k: self.index[k]):
            yield self.read(sid, ep)

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def epoch_batches(ids: Sequence[int], seed: int, epoch: int, batch_size: int) -> list[list[int]]:
    """The shuffled batch partition used by both training and caching."""
    order = np.random.default_rng([seed, epoch, 7005]).permutation(np.asarray(sorted(ids), dtype=np.int64))
    return [order[i : i + batch_size].tolist() for i in range(0, len(order), batch_size)]


def cache_teachers(
    teachers: Sequence[TeacherHandle],
    dataset,
    ids: Sequence[int],
    epochs: int,
    path,
    seed: int = 0,
    batch_size: int = 32,
    augment: AugmentConfig = AugmentConfig(),
    mel_cfg: MelConfig = MelConfig(),
) -> LogitsCache:
    """Score one augmentation per (sample, epoch) with every teacher and store it.

    Batches and descriptors are drawn exactly as :func:`repmobile.training.train`
    would draw them for the same seed and batch size.
    """
    if not teachers:
        raise ConfigError("at least one teacher is required")
    writer = CacheWriter(path, [t.id for t in teachers], capacity=epochs * len(ids))
    try:
        for epoch in range(epochs):
            for bi, batch in enumerate(epoch_batches(ids, seed, epoch, batch_size)):
                descs = draw_descriptors(batch, epoch, bi, seed, augment, mel_cfg.n_mels)
                views = render_batch(descs, dataset.waveform, mel_cfg, augment.fms_eps)
                scores = np.stack([t.logits(views) for t in teachers], axis=1)
                for d, s in zip(descs, scores):
                    writer.write(d, s)
            log.info("cached epoch %d (%d records)", epoch, len(writer.index))
    except BaseException:
        writer.abort()
        raise
    return writer.close()


def distill_train(student: ModelGraph, cache: LogitsCache, dataset, ids, train_cfg, distill_cfg: DistillConfig = DistillConfig(), **kwargs):
    """Train ``student`` against cached teacher logits; see :func:`repmobile.training.train`."""
    from .training import train

    return train(student, dataset, ids, train_cfg, cache=cache, distill=distill_cfg, **kwargs)
