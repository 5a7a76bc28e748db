"""Synthetic acoustic-scene corpus with simulated recording devices, and
nested data-efficiency subsets.

Each scene class is a recipe of band-limited noise bands, tones and an
amplitude-modulation rate; each device is a fixed 32-tap FIR coloration. One
device can be held out of the training split to emulate unseen devices.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .audio import SAMPLE_RATE, read_wav, write_wav
from .errors import ConfigError, DataError

FRACTIONS = (1.0, 0.5, 0.25, 0.1, 0.05)


@dataclass
class SceneRecipe:
    bands: list[tuple[float, float]]  # (low Hz, high Hz) noise bands
    tones: list[float]  # Hz
    mod_rate: float  # Hz
    tone_level: float


@dataclass
class SyntheticSceneSpec:
    n_classes: int = 10
    n_devices: int = 4
    held_out_device: int | None = 3
    seed: int = 0
    n_samples: int = SAMPLE_RATE
    fir_taps: int = 32

    def recipes(self) -> list[SceneRecipe]:
        """Class recipes; class k's energy sits in the k-th log-spaced frequency region."""
        rng = np.random.default_rng([self.seed, 7001])
        edges = np.geomspace(150.0, 12000.0, self.n_classes + 1)
        out = []
        for k in range(self.n_classes):
            lo, hi = edges[k], edges[k + 1]
            centre = np.sqrt(lo * hi)
            width = rng.uniform(0.3, 0.6) * (hi - lo)
            second = centre * rng.uniform(1.8, 2.6)
            bands = [(centre - width / 2, centre + width / 2), (second * 0.92, second * 1.08)]
            tones = [float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi) * 1.5)]
            out.append(SceneRecipe(bands, tones, mod_rate=0.5 + 1.5 * k, tone_level=float(rng.uniform(0.2, 0.6))))
        return out

    def device_filters(self) -> np.ndarray:
        """``[n_devices, fir_taps]`` coloration filters; device 0 is nearly flat."""
        rng = np.random.default_rng([self.seed, 7002])
        filt = np.zeros((self.n_devices, self.fir_taps))
        for d in range(self.n_devices):
            h = rng.normal(0.0, 1.0, self.fir_taps) * np.exp(-np.arange(self.fir_taps) / 6.0) * (0.15 + 0.1 * d)
            h[0] += 1.0
            filt[d] = h / np.sqrt(np.sum(h**2))
        return filt


def synthesize(spec: SyntheticSceneSpec, label: int, device: int, seed: int, recipes=None, filters=None) -> np.ndarray:
    """One clip in [-1, 1] for (class, device) from a per-sample seed."""
    recipes = recipes or spec.recipes()
    filters = spec.device_filters() if filters is None else filters
    rec = recipes[label]
    rng = np.random.default_rng([spec.seed, 7003, seed])
    n = spec.n_samples
    t = np.arange(n) / SAMPLE_RATE
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec_noise = np.fft.rfft(rng.normal(size=n))
    jitter = rng.uniform(0.85, 1.15)
    gain = np.zeros_like(freqs)
    for lo, hi in rec.bands:
        gain += ((freqs >= lo * jitter) & (freqs <= hi * jitter)) * rng.uniform(0.6, 1.0)
    # per-clip distractor band anywhere in the spectrum
    dlo = np.exp(rng.uniform(np.log(100.0), np.log(10000.0)))
    gain += ((freqs >= dlo) & (freqs <= dlo * rng.uniform(1.2, 2.0))) * rng.uniform(0.5, 1.2)
    x = np.fft.irfft(spec_noise * gain, n)
    x /= np.std(x) + 1e-12
    for f in rec.tones:
        x += rec.tone_level * 2.0 * np.sin(2 * np.pi * f * jitter * t + rng.uniform(0, 2 * np.pi))
    mod = 1.0 + 0.5 * np.sin(2 * np.pi * rec.mod_rate * t + rng.uniform(0, 2 * np.pi))
    x *= mod
    # shared background: pink-ish noise at a random level
    pink = np.fft.irfft(np.fft.rfft(rng.normal(size=n)) / np.sqrt(np.maximum(freqs, 20.0)), n)
    x += rng.uniform(0.5, 2.0) * pink / (np.std(pink) + 1e-12)
    x = np.convolve(x, filters[device])[:n]
    return x / (np.max(np.abs(x)) + 1e-12) * rng.uniform(0.3, 0.9)


@dataclass
class IndexEntry:
    id: int
    label: int
    device: int
    seed: int
    split: str
    path: str

    def to_json(self) -> str:
        return json.dumps({"id": self.id, "class": self.label, "device": self.device, "seed": self.seed, "split": self.split, "path": self.path})

    @classmethod
    def from_json(cls, line: str) -> "IndexEntry":
        d = json.loads(line)
        return cls(d["id"], d["class"], d["device"], d["seed"], d.get("split", "train"), d.get("path", f"{d['id']:06d}.wav"))


def plan_index(spec: SyntheticSceneSpec, n_per_class: int, n_test_per_class: int = 0) -> list[IndexEntry]:
    """Entries for a corpus without rendering audio: training clips avoid the held-out device."""
    train_devices = [d for d in range(spec.n_devices) if d != spec.held_out_device] or [0]
    entries, sid = [], 0
    for split, count, devices in (("train", n_per_class, train_devices), ("test", n_test_per_class, list(range(spec.n_devices)))):
        for k in range(spec.n_classes):
            for j in range(count):
                dev = devices[(j + k) % len(devices)]
                entries.append(IndexEntry(sid, k, dev, sid, split, f"{split}/{sid:06d}.wav"))
                sid += 1
    return entries


def gen_data(spec: SyntheticSceneSpec, n_per_class: int, out_dir, n_test_per_class: int = 0) -> Path:
    """Render WAV files plus ``index.jsonl`` and ``spec.json`` into ``out_dir``."""
    out = Path(out_dir)
    recipes, filters = spec.recipes(), spec.device_filters()
    entries = plan_index(spec, n_per_class, n_test_per_class)
    for split in {e.split for e in entries}:
        (out / split).mkdir(parents=True, exist_ok=True)
    for e in entries:
        write_wav(out / e.path, synthesize(spec, e.label, e.device, e.seed, recipes, filters))
    (out / "index.jsonl").write_text("".join(e.to_json() + "\n" for e in entries))
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))
    return out


def read_index(path) -> list[IndexEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / "index.jsonl"
    return [IndexEntry.from_json(l) for l in path.read_text().splitlines() if l.strip()]


class Dataset:
    """An indexed corpus with waveforms loaded into memory on first use."""

    def __init__(self, root, entries: Sequence[IndexEntry] | None = None):
        self.root = Path(root)
        self.entries = list(entries) if entries is not None else read_index(self.root)
        self.by_id = {e.id: e for e in self.entries}
        self._wave: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self, split: str | None = None) -> list[int]:
        return [e.id for e in self.entries if split is None or e.split == split]

    def label(self, sid: int) -> int:
        return self.by_id[sid].label

    def labels(self, ids: Iterable[int]) -> np.ndarray:
        return np.array([self.by_id[i].label for i in ids], dtype=np.int64)

    def waveform(self, sid: int) -> np.ndarray:
        w = self._wave.get(sid)
        if w is None:
            w = read_wav(self.root / self.by_id[sid].path).samples
            self._wave[sid] = w
        return w

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update((self.root / e.path).read_bytes())
        return h.hexdigest()


# -- subsets -------------------------------------------------------------------


@dataclass
class SubsetManifest:
    fraction: float
    ids: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "ids": self.ids}


def balanced_order(entries: Sequence[IndexEntry], seed: int) -> list[int]:
    """Order sample ids so every prefix keeps class and device shares close to the whole.

    Greedy: at each step take the next sample from the (class, device) stratum
    whose class and device are furthest behind their proportional quota.
    """
    rng = np.random.default_rng([seed, 7004])
    strata: dict[tuple[int, int], list[int]] = {}
    for e in sorted(entries, key=lambda e: e.id):
        strata.setdefault((e.label, e.device), []).append(e.id)
    for key in sorted(strata):
        rng.shuffle(strata[key])
    total = len(entries)
    n_cls: dict[int, int] = {}
    n_dev: dict[int, int] = {}
    for (c, d), ids in strata.items():
        n_cls[c] = n_cls.get(c, 0) + len(ids)
        n_dev[d] = n_dev.get(d, 0) + len(ids)
    got_c = {c: 0 for c in n_cls}
    got_d = {d: 0 for d in n_dev}
    pos = {k: 0 for k in strata}
    keys = sorted(strata)
    order = []
    for step in range(1, total + 1):
        best, best_score = None, None
        for k in keys:
            if pos[k] >= len(strata[k]):
                continue
            c, d = k
            score = (step * n_cls[c] / total - got_c[c]) + (step * n_dev[d] / total - got_d[d])
            # tie-break on the stratum's own progress so strata are interleaved evenly
            tie = pos[k] / len(strata[k])
            if best is None or score > best_score + 1e-12 or (abs(score - best_score) <= 1e-12 and tie < best[1]):
                best, best_score = (k, tie), score
        k = best[0]
        order.append(strata[k][pos[k]])
        pos[k] += 1
        got_c[k[0]] += 1
        got_d[k[1]] += 1
    return order


def make_subsets(index: Sequence[IndexEntry], fractions: Sequence[float] = FRACTIONS, seed: int = 0, split: str | None = "train") -> list[SubsetManifest]:
    """Nested, stratified subsets: each is a prefix of one balanced ordering."""
    entries = [e for e in index if split is None or e.split == split]
    if not entries:
        raise DataError("no entries to subset")
    for f in fractions:
        if not 0 < f <= 1:
            raise ConfigError(f"fraction must be in (0, 1], got {f}")
    order = balanced_order(entries, seed)
    out = []
    for f in fractions:
        k = max(1, int(round(f * len(order))))
        out.append(SubsetManifest(float(f), sorted(order[:k])))
    return out


def write_subsets(subsets: Sequence[SubsetManifest], path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in subsets], indent=1))


def read_subsets(path) -> list[SubsetManifest]:
    return [SubsetManifest(d["fraction"], d["ids"]) for d in json.loads(Path(path).read_text())]
