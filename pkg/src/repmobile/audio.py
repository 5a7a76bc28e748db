"""Log-mel front end, WAV ingestion and the three training-time augmentations.

Augmentations are driven by :class:`AugmentDescriptor` records so that any
augmented view can be rebuilt exactly from the clean waveform(s) later, which
is what the teacher-logits cache relies on.
"""

from __future__ import annotations

import functools
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.io import wavfile

from .errors import InputError

log = logging.getLogger(__name__)

SAMPLE_RATE = 32000


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    win: int = 3072
    hop: int = 512
    n_fft: int = 4096
    n_mels: int = 256
    fmin: float = 0.0
    fmax: float = 16000.0
    eps: float = 1e-5

    def n_frames(self, n_samples: int) -> int:
        return 1 + (n_samples - self.win) // self.hop

    @property
    def log_floor(self) -> float:
        return float(np.log(self.eps))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE


@dataclass(frozen=True)
class AugmentConfig:
    roll: bool = True
    max_shift: int = 4000  # 125 ms at 32 kHz
    specaug: bool = True
    max_mask: int = 48
    fms: bool = True
    fms_alpha: float = 0.3
    fms_p: float = 0.7
    fms_eps: float = 1e-5


# -- mel filterbank ------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(cfg: MelConfig) -> np.ndarray:
    """The ``n_mels + 2`` HTK-spaced band edges in Hz; filter ``m`` peaks at ``edges[m+1]``."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


def mel_centers(cfg: MelConfig) -> np.ndarray:
    return mel_edges(cfg)[1:-1]


@functools.lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """Triangular filters ``[n_mels, n_fft//2 + 1]``, peak 1, no area normalization."""
    edges = mel_edges(cfg)
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    lo, c, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (c - lo)
    down = (hi - freqs[None, :]) / (hi - c)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


@functools.lru_cache(maxsize=8)
def _window(win: int) -> np.ndarray:
    n = np.arange(win)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win)  # periodic Hann
    w.setflags(write=False)
    return w


def log_mel(w, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Log-mel spectrogram ``[n_mels, frames]`` (float32) of a mono waveform.

    Frames start at sample 0 with no centering; a trailing partial window is
    dropped.
    """
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    if x.ndim != 1:
        raise InputError(f"expected a mono waveform, got shape {x.shape}")
    if x.shape[0] < cfg.win:
        raise InputError(f"waveform of {x.shape[0]} samples is shorter than one {cfg.win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.win)[:: cfg.hop] * _window(cfg.win)
    spec = np.fft.rfft(frames, n=cfg.n_fft, axis=1)
    power = spec.real**2 + spec.imag**2
    mel = mel_filterbank(cfg) @ power.T
    return np.log(mel + cfg.eps).astype(np.float32)


# -- WAV ingestion -------------------------------------------------------------


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a mono 16-bit PCM or 32-bit float WAV at ``expected_rate``."""
    try:
        rate, data = wavfile.read(path)
    except (ValueError, OSError) as exc:
        raise InputError(f"{path}: not a readable WAV file ({exc})") from exc
    if rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resampling is not supported)")
    if data.ndim != 1:
        raise InputError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise InputError(f"{path}: unsupported sample format {data.dtype}; use 16-bit PCM or 32-bit float")
    return Waveform(samples, rate)


def write_wav(path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write ``samples`` in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, rate, pcm)


# -- augmentations -------------------------------------------------------------


def apply_roll(w: np.ndarray, shift: int) -> np.ndarray:
    return np.roll(w, int(shift)) if shift else w


def roll_waveform(w, rng: np.random.Generator, max_shift: int = 4000):
    """Circularly shift by a uniform integer in ``[-max_shift, max_shift]``."""
    x = np.asarray(w.samples if isinstance(w, Waveform) else w)
    shift = int(rng.integers(-max_shift, max_shift + 1))
    out = apply_roll(x, shift)
    return (Waveform(out, w.sample_rate) if isinstance(w, Waveform) else out), shift


def apply_freq_mask(spec: np.ndarray, start: int, width: int, fill: float) -> np.ndarray:
    if width <= 0:
        return spec
    out = spec.copy()
    out[..., start : start + width, :] = fill
    return out


def spec_augment_freq(spec: np.ndarray, rng: np.random.Generator, max_size: int = 48, fill: float | None = None):
    """Mask one band of ``Uniform{0..max_size}`` mel bins; returns ``(spec, (start, width))``."""
    n_bins = spec.shape[-2]
    width = int(rng.integers(0, min(max_size, n_bins) + 1))
    start = int(rng.integers(0, n_bins - width + 1))
    fill = MelConfig().log_floor if fill is None else fill
    return apply_freq_mask(spec, start, width, fill), (start, width)


def freq_stats(x: np.ndarray, eps: float = 1e-5):
    """Per-frequency mean and ``sqrt(var + eps)`` over the time axis, keepdims."""
    mu = x.mean(axis=-1, keepdims=True)
    sig = np.sqrt(x.var(axis=-1, keepdims=True) + x.dtype.type(eps))
    return mu, sig


def mix_freq_stats(x: np.ndarray, partner: np.ndarray, lam: float, eps: float = 1e-5) -> np.ndarray:
    """Re-style ``x`` with a ``lam``-blend of its own and ``partner``'s frequency statistics."""
    mu, sig = freq_stats(x, eps)
    mu_p, sig_p = freq_stats(partner, eps)
    lam = x.dtype.type(lam)
    one = x.dtype.type(1.0)
    xn = (x - mu) / sig
    return xn * (lam * sig + (one - lam) * sig_p) + (lam * mu + (one - lam) * mu_p)


def draw_fms(n: int, rng: np.random.Generator, alpha: float = 0.3, p: float = 0.7):
    """Batch-level Freq-MixStyle draw: ``(applied, lam, permutation)``."""
    applied = bool(rng.random() < p)
    lam = float(rng.beta(alpha, alpha))
    perm = rng.permutation(n)
    return applied, lam, perm


def freq_mixstyle(batch, alpha: float = 0.3, p: float = 0.7, rng: np.random.Generator | None = None, eps: float = 1e-5):
    """Freq-MixStyle over a ``[N, 1, F, T]`` batch, mixing statistics between samples."""
    from .tensor import Tensor

    wrap = isinstance(batch, Tensor)
    x = batch.data if wrap else np.asarray(batch)
    if x.shape[0] < 2:
        log.warning("freq_mixstyle needs at least 2 samples; returning input unchanged")
        return batch
    rng = rng if rng is not None else np.random.default_rng()
    applied, lam, perm = draw_fms(x.shape[0], rng, alpha, p)
    if not applied:
        return batch
    out = np.stack([mix_freq_stats(x[i], x[perm[i]], lam, eps) for i in range(x.shape[0])])
    return Tensor(out) if wrap else out


# -- descriptors -----------------------------------------------------------------


@dataclass
class AugmentDescriptor:
    """Everything needed to rebuild one augmented training view.

    The partner's roll and mask are stored alongside its id so the Freq-MixStyle
    statistics can be recomputed without access to the rest of the batch.
    """

    sample_id: int
    epoch: int = 0
    seed: int = 0
    roll_shift: int = 0
    mask_start: int = 0
    mask_width: int = 0
    fms_applied: bool = False
    fms_lambda: float = 1.0
    partner_id: int = -1
    partner_roll_shift: int = 0
    partner_mask_start: int = 0
    partner_mask_width: int = 0

    def to_bytes(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AugmentDescriptor":
        return cls(**json.loads(blob.decode()))


def sample_rng(seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, sample_id])


def draw_descriptors(
    sample_ids: Sequence[int], epoch: int, batch_index: int, seed: int, cfg: AugmentConfig, n_bins: int = 256
) -> list[AugmentDescriptor]:
    """Draw augmentation descriptors for one batch.

    Roll and mask come from a per-sample stream keyed by (seed, epoch, sample id);
    the Freq-MixStyle decision, mixing weight and partner permutation are drawn
    once per batch.
    """
    descs = []
    for sid in sample_ids:
        rng = sample_rng(seed, epoch, int(sid))
        shift = int(rng.integers(-cfg.max_shift, cfg.max_shift + 1)) if cfg.roll else 0
        if cfg.specaug:
            width = int(rng.integers(0, min(cfg.max_mask, n_bins) + 1))
            start = int(rng.integers(0, n_bins - width + 1))
        else:
            start = width = 0
        descs.append(AugmentDescriptor(int(sid), epoch, seed, shift, start, width))
    if cfg.fms and len(descs) >= 2:
        brng = np.random.default_rng([seed, epoch, 1_000_003, batch_index])
        applied, lam, perm = draw_fms(len(descs), brng, cfg.fms_alpha, cfg.fms_p)
        if applied:
            for d, j in zip(descs, perm):
                q = descs[int(j)]
                d.fms_applied = True
                d.fms_lambda = lam
                d.partner_id = q.sample_id
                d.partner_roll_shift, d.partner_mask_start, d.partner_mask_width = q.roll_shift, q.mask_start, q.mask_width
    return descs


def _pre_mix_view(wave: np.ndarray, shift: int, start: int, width: int, mel_cfg: MelConfig) -> np.ndarray:
    spec = log_mel(apply_roll(wave, shift), mel_cfg)
    return apply_freq_mask(spec, start, width, np.float32(mel_cfg.log_floor))


def render(
    desc: AugmentDescriptor,
    waveform: Callable[[int], np.ndarray],
    mel_cfg: MelConfig = MelConfig(),
    fms_eps: float = 1e-5,
) -> np.ndarray:
    """Rebuild the augmented ``[1, F, T]`` view described by ``desc``.

    ``waveform`` maps a sample id to its clean samples.
    """
    view = _pre_mix_view(waveform(desc.sample_id), desc.roll_shift, desc.mask_start, desc.mask_width, mel_cfg)
    if desc.fms_applied:
        partner = _pre_mix_view(
            waveform(desc.partner_id), desc.partner_roll_shift, desc.partner_mask_start, desc.partner_mask_width, mel_cfg
        )
        view = mix_freq_stats(view, partner, desc.fms_lambda, fms_eps)
    return view[None]


def render_batch(
    descs: Sequence[AugmentDescriptor],
    waveform: Callable[[int], np.ndarray],
    mel_cfg: MelConfig = MelConfig(),
    fms_eps: float = 1e-5,
) -> np.ndarray:
    """Render a batch; partners inside the batch reuse their already computed views.

    Produces exactly what :func:`render` produces per descriptor.
    """
    views = {d.sample_id: _pre_mix_view(waveform(d.sample_id), d.roll_shift, d.mask_start, d.mask_width, mel_cfg) for d in descs}
    out = []
    for d in descs:
        view = views[d.sample_id]
        if d.fms_applied:
            pv = views.get(d.partner_id)
            pd = next((q for q in descs if q.sample_id == d.partner_id), None)
            if pv is None or pd is None or (pd.roll_shift, pd.mask_start, pd.mask_width) != (
                d.partner_roll_shift, d.partner_mask_start, d.partner_mask_width
            ):
                pv = _pre_mix_view(waveform(d.partner_id), d.partner_roll_shift, d.partner_mask_start, d.partner_mask_width, mel_cfg)
            view = mix_freq_stats(view, pv, d.fms_lambda, fms_eps)
        out.append(view[None])
    return np.stack(out)
