"""Merging multi-branch train-form blocks into single-kernel inference blocks.

Each branch kernel is zero-padded to the main 3x3 shape, its eval-mode batch
norm is folded into weight and bias, and the folded branches are summed. All
folding arithmetic runs in float64 before casting back to the model dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, ReparamError
from .model import ConvBN, ModelGraph, RepBlock, RepBranch
from .params import BnParams, ConvParams
from .tensor import Tensor


class AlreadyMergedError(ReparamError):
    """Raised when asked to merge a model that is already in merged form."""


@dataclass
class FoldedConv:
    """A convolution with BN absorbed: ``weight`` and ``bias`` as float64 arrays."""

    weight: np.ndarray
    bias: np.ndarray

    def to_params(self, stride=(1, 1), padding=(0, 0), groups: int = 1, dtype=np.float32) -> ConvParams:
        return ConvParams(
            Tensor(self.weight.astype(dtype), requires_grad=True),
            Tensor(self.bias.astype(dtype), requires_grad=True),
            tuple(stride),
            tuple(padding),
            groups,
        )


def pad_kernel(weight, target=(3, 3)) -> np.ndarray:
    """Zero-pad a ``[C, Cin, K0, K1]`` kernel to ``target``, keeping it centred."""
    w = np.asarray(weight.data if isinstance(weight, Tensor) else weight)
    k0, k1 = w.shape[2:]
    t0, t1 = target
    if k0 % 2 == 0 or k1 % 2 == 0 or t0 % 2 == 0 or t1 % 2 == 0:
        raise ConfigError(f"only odd kernel sizes can be centred, got {k0}x{k1} -> {t0}x{t1}")
    if k0 > t0 or k1 > t1:
        raise DimensionError(f"kernel {k0}x{k1} is larger than target {t0}x{t1}")
    d0, d1 = (t0 - k0) // 2, (t1 - k1) // 2
    out = np.zeros(w.shape[:2] + (t0, t1), dtype=w.dtype)
    out[:, :, d0 : d0 + k0, d1 : d1 + k1] = w
    return out


def fold_bn(conv: ConvParams, bn: BnParams | None) -> FoldedConv:
    """Absorb an eval-mode BN: ``W * gamma/sigma`` and ``(b - mu) * gamma/sigma + beta``."""
    w = conv.weight.data.astype(np.float64)
    b = np.zeros(w.shape[0]) if conv.bias is None else conv.bias.data.astype(np.float64)
    if bn is None:
        return FoldedConv(w, b)
    if bn.channels != w.shape[0]:
        raise DimensionError(f"BN has {bn.channels} channels, conv has {w.shape[0]} outputs")
    var = bn.running_var.astype(np.float64)
    if np.any(var < 0):
        raise DataError("running variance must be non-negative")
    sigma = np.sqrt(var + bn.eps)
    t = bn.gamma.data.astype(np.float64) / sigma
    return FoldedConv(w * t[:, None, None, None], (b - bn.running_mean.astype(np.float64)) * t + bn.beta.data.astype(np.float64))


def merge_branches(branches, target=(3, 3)) -> FoldedConv:
    """Sum of ``pad_kernel(fold_bn(branch))`` over depthwise ``(ConvParams, BnParams)`` pairs."""
    branches = list(branches)
    if not branches:
        raise ConfigError("nothing to merge")
    strides = {tuple(c.stride) for c, _ in branches}
    if len(strides) != 1:
        raise ConfigError(f"branches disagree on stride: {sorted(strides)}")
    chans = {c.out_channels for c, _ in branches}
    if len(chans) != 1 or any(c.groups != c.out_channels or c.weight.shape[1] != 1 for c, _ in branches):
        raise ConfigError("merge_branches expects depthwise branches with equal channel count")
    w = b = None
    for conv, bn in branches:
        f = fold_bn(conv, bn)
        fw = pad_kernel(f.weight, target)
        w = fw if w is None else w + fw
        b = f.bias if b is None else b + f.bias
    return FoldedConv(w, b)


def _merge_unit(u: ConvBN, dtype) -> ConvBN:
    c = u.conv
    return ConvBN(fold_bn(c, u.bn).to_params(c.stride, c.padding, c.groups, dtype), None, u.relu)


def _merge_block(b: RepBlock, dtype) -> RepBlock:
    br0 = b.branches[0].conv
    merged = merge_branches([(br.conv, br.bn) for br in b.branches])
    conv = merged.to_params(br0.stride, (1, 1), br0.groups, dtype)
    return RepBlock(_merge_unit(b.expand, dtype), [RepBranch((3, 3), conv, None)], _merge_unit(b.project, dtype), b.residual, b.stride)


def reparameterize_model(model: ModelGraph) -> ModelGraph:
    """Return a new merged-form model equivalent to ``model`` in eval mode."""
    if model.mode == "merged":
        raise AlreadyMergedError("model is already merged")
    if model.training:
        raise ReparamError("model is flagged as training (batch-statistics mode); call .eval() after training first")
    dt = model.dtype
    out = ModelGraph(
        base_channels=model.base_channels,
        branch_set=model.branch_set,
        stem=[_merge_unit(u, dt) for u in model.stem],
        blocks=[_merge_block(b, dt) for b in model.blocks],
        head=_merge_unit(model.head, dt),
        num_classes=model.num_classes,
        mode="merged",
        meta=dict(model.meta),
    )
    return out
