"""Parameter and multiply-accumulate accounting.

One MAC is one multiply plus one accumulate. Conv MACs are
``Cout * F' * T' * (Cin / groups) * K0 * K1``; an unfolded BN costs ``C * F * T``;
bias adds, residual adds, activations and pooling are free.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .model import INPUT_SHAPE, ModelGraph
from .params import BnParams, ConvParams


@dataclass
class LayerCost:
    name: str
    params: int
    macs: int
    output_shape: tuple[int, ...]


@dataclass
class ComplexityReport:
    rows: list[LayerCost] = field(default_factory=list)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "params", "macs", "output_shape"])
        for r in self.rows:
            w.writerow([r.name, r.params, r.macs, "x".join(map(str, r.output_shape))])
        w.writerow(["TOTAL", self.total_params, self.total_macs, ""])
        return buf.getvalue()

    def table(self) -> str:
        width = max([len(r.name) for r in self.rows] + [5])
        lines = [f"{'layer':<{width}}  {'params':>10}  {'MACs':>14}  output"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}  {r.params:>10,}  {r.macs:>14,}  {'x'.join(map(str, r.output_shape))}")
        lines.append(f"{'TOTAL':<{width}}  {self.total_params:>10,}  {self.total_macs:>14,}")
        return "\n".join(lines)


def conv_output_shape(conv: ConvParams, shape: tuple[int, int, int, int]) -> tuple[int, int, int, int]:
    n, _, h, w = shape
    k0, k1 = conv.kernel_size
    (s0, s1), (p0, p1) = conv.stride, conv.padding
    return (n, conv.out_channels, (h + 2 * p0 - k0) // s0 + 1, (w + 2 * p1 - k1) // s1 + 1)


def conv_cost(name: str, conv: ConvParams, in_shape) -> LayerCost:
    out = conv_output_shape(conv, in_shape)
    k0, k1 = conv.kernel_size
    macs = out[1] * out[2] * out[3] * (conv.in_channels // conv.groups) * k0 * k1
    params = conv.weight.size + (0 if conv.bias is None else conv.bias.size)
    return LayerCost(name, params, macs, out[1:])


def bn_cost(name: str, bn: BnParams, shape) -> LayerCost:
    return LayerCost(name, 2 * bn.channels, bn.channels * shape[2] * shape[3], tuple(shape[1:]))


def complexity(model: ModelGraph, input_shape=INPUT_SHAPE) -> ComplexityReport:
    """Per-layer breakdown for one forward pass of an ``input_shape`` batch of size 1."""
    shape = (1,) + tuple(input_shape[1:])
    rep = ComplexityReport()

    def unit(prefix, u, shape):
        rep.rows.append(conv_cost(f"{prefix}.conv", u.conv, shape))
        shape = conv_output_shape(u.conv, shape)
        if u.bn is not None:
            rep.rows.append(bn_cost(f"{prefix}.bn", u.bn, shape))
        return shape

    for i, u in enumerate(model.stem):
        shape = unit(f"stem.{i}", u, shape)
    for i, b in enumerate(model.blocks):
        h = unit(f"blocks.{i}.expand", b.expand, shape)
        out = None
        for br in b.branches:
            rep.rows.append(conv_cost(f"blocks.{i}.dw.{br.name}.conv", br.conv, h))
            out = conv_output_shape(br.conv, h)
            if br.bn is not None:
                rep.rows.append(bn_cost(f"blocks.{i}.dw.{br.name}.bn", br.bn, out))
        shape = unit(f"blocks.{i}.project", b.project, out)
    unit("head", model.head, shape)
    return rep


def count_params(model: ModelGraph) -> int:
    """Learnable parameters: conv weights and biases plus BN gamma and beta."""
    return complexity(model).total_params


def count_macs(model: ModelGraph, input_shape=INPUT_SHAPE) -> int:
    return complexity(model, input_shape).total_macs
