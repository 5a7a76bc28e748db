"""Rep-Mobile network description, construction and forward pass.

A :class:`ModelGraph` is a plain tree of parameter containers. In ``train``
form each depthwise stage of a block carries several parallel branches, each
with its own batch norm; in ``merged`` form every conv carries a bias, there are
no batch norms and each block has a single 3x3 depthwise kernel.
"""

from __future__ import annotations

import copy
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .params import BnParams, ConvParams
from .tensor import Tensor, no_grad

BRANCH_SHAPES: dict[str, tuple[int, int]] = {"3x3": (3, 3), "1x1": (1, 1), "3x1": (3, 1), "1x3": (1, 3)}
BRANCH_PADDING: dict[tuple[int, int], tuple[int, int]] = {(3, 3): (1, 1), (1, 1): (0, 0), (3, 1): (1, 0), (1, 3): (0, 1)}
ALL_BRANCHES = ("3x3", "1x1", "3x1", "1x3")
EXPANSION = 3
NUM_CLASSES = 10
INPUT_SHAPE = (1, 1, 256, 57)


def branch_name(shape: tuple[int, int]) -> str:
    return f"{shape[0]}x{shape[1]}"


@dataclass
class ConvBN:
    """Conv followed by an optional batch norm and optional ReLU."""

    conv: ConvParams
    bn: BnParams | None = None
    relu: bool = False

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        c = self.conv
        y = ops.conv2d(x, c.weight, c.bias, c.stride, c.padding, c.groups)
        if self.bn is not None:
            y = ops.batchnorm(y, self.bn, training)
        return ops.relu(y) if self.relu else y


@dataclass
class RepBranch:
    kernel_shape: tuple[int, int]
    conv: ConvParams
    bn: BnParams | None = None

    @property
    def name(self) -> str:
        return branch_name(self.kernel_shape)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        c = self.conv
        y = ops.conv2d(x, c.weight, c.bias, c.stride, c.padding, c.groups)
        return ops.batchnorm(y, self.bn, training) if self.bn is not None else y


@dataclass
class RepBlock:
    """Inverted-residual block: 1x1 expand, parallel depthwise branches, 1x1 project."""

    expand: ConvBN
    branches: list[RepBranch]
    project: ConvBN
    residual: bool
    stride: tuple[int, int] = (1, 1)

    @property
    def in_channels(self) -> int:
        return self.expand.conv.in_channels

    @property
    def hidden_channels(self) -> int:
        return self.expand.conv.out_channels

    @property
    def out_channels(self) -> int:
        return self.project.conv.out_channels

    @property
    def merged(self) -> bool:
        return len(self.branches) == 1 and self.branches[0].bn is None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = self.expand(x, training)
        s = ops.rep_depthwise(h, [(br.conv, br.bn) for br in self.branches], training)
        y = self.project(ops.relu(s), training)
        return ops.add(y, x) if self.residual else y


@dataclass
class ModelGraph:
    base_channels: int
    branch_set: tuple[str, ...]
    stem: list[ConvBN]
    blocks: list[RepBlock]
    head: ConvBN
    num_classes: int = NUM_CLASSES
    mode: str = "train"  # "train" (multi-branch form) or "merged"
    training: bool = False  # batch-statistics mode; True while a training loop owns the model
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return self.head.conv.weight.dtype

    def train(self) -> "ModelGraph":
        self.training = True
        return self

    def eval(self) -> "ModelGraph":
        self.training = False
        return self

    def named_modules(self) -> Iterator[tuple[str, object]]:
        """Yield ``(name, ConvParams | BnParams)`` in a fixed traversal order."""
        for i, u in enumerate(self.stem):
            yield from _unit_items(f"stem.{i}", u)
        for i, b in enumerate(self.blocks):
            yield from _unit_items(f"blocks.{i}.expand", b.expand)
            for br in b.branches:
                yield f"blocks.{i}.dw.{br.name}.conv", br.conv
                if br.bn is not None:
                    yield f"blocks.{i}.dw.{br.name}.bn", br.bn
            yield from _unit_items(f"blocks.{i}.project", b.project)
        yield from _unit_items("head", self.head)

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """All stored arrays (parameters and running statistics) by dotted name."""
        out = []
        for name, m in self.named_modules():
            if isinstance(m, ConvParams):
                out.append((f"{name}.weight", m.weight.data))
                if m.bias is not None:
                    out.append((f"{name}.bias", m.bias.data))
            else:
                out += [
                    (f"{name}.gamma", m.gamma.data),
                    (f"{name}.beta", m.beta.data),
                    (f"{name}.running_mean", m.running_mean),
                    (f"{name}.running_var", m.running_var),
                ]
        return out

    def parameters(self) -> list[Tensor]:
        ps: list[Tensor] = []
        for _, m in self.named_modules():
            ps += m.parameters()
        return ps

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def __call__(self, x, mode: str = "eval") -> Tensor:
        return forward(self, x, mode)


def _unit_items(prefix: str, u: ConvBN):
    yield f"{prefix}.conv", u.conv
    if u.bn is not None:
        yield f"{prefix}.bn", u.bn


# -- construction ----------------------------------------------------------------


def stage_layout(base_channels: int) -> list[tuple[int, int, tuple[int, int]]]:
    """(in, out, stride) for the six blocks: 2 @ C, 2 @ 2C (first strides frequency), 2 @ 2C."""
    c = base_channels
    return [(c, c, (1, 1)), (c, c, (1, 1)), (c, 2 * c, (2, 1)), (2 * c, 2 * c, (1, 1)), (2 * c, 2 * c, (1, 1)), (2 * c, 2 * c, (1, 1))]


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so shared tensors match across different branch sets
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def _kaiming(seed, name, shape, groups, dtype) -> Tensor:
    fan_in = shape[1] * shape[2] * shape[3]
    bound = np.sqrt(6.0 / fan_in)
    w = _param_rng(seed, name).uniform(-bound, bound, size=shape)
    return Tensor(w.astype(dtype), requires_grad=True)


def _conv(seed, name, cin, cout, k, stride=(1, 1), padding=(0, 0), groups=1, dtype=np.float32) -> ConvParams:
    shape = (cout, cin // groups, k[0], k[1])
    return ConvParams(_kaiming(seed, f"{name}.weight", shape, groups, dtype), None, stride, padding, groups)


def normalize_branch_set(branch_set: Iterable[str] | None) -> tuple[str, ...]:
    names = ALL_BRANCHES if branch_set is None else tuple(branch_set)
    unknown = set(names) - set(BRANCH_SHAPES)
    if unknown:
        raise ConfigError(f"unknown branch shapes {sorted(unknown)}")
    if "3x3" not in names:
        raise ConfigError("the 3x3 main branch is mandatory")
    return tuple(b for b in ALL_BRANCHES if b in names)


def build_model(base_channels: int = 32, branch_set: Iterable[str] | None = None, seed: int = 0, dtype=np.float32, num_classes: int = NUM_CLASSES) -> ModelGraph:
    """Build a train-form Rep-Mobile with the given base width and depthwise branches."""
    names = normalize_branch_set(branch_set)
    c = int(base_channels)
    if c < 8 or c % 4:
        raise ConfigError(f"base_channels must be >= 8 and divisible by 4, got {base_channels}")
    bn = lambda ch: BnParams.identity(ch, dtype)  # noqa: E731
    stem = [
        ConvBN(_conv(seed, "stem.0.conv", 1, c // 4, (3, 3), (2, 2), (1, 1), dtype=dtype), bn(c // 4), True),
        ConvBN(_conv(seed, "stem.1.conv", c // 4, c, (3, 3), (2, 2), (1, 1), dtype=dtype), bn(c), True),
    ]
    blocks = []
    for i, (cin, cout, stride) in enumerate(stage_layout(c)):
        hid = EXPANSION * cin
        expand = ConvBN(_conv(seed, f"blocks.{i}.expand.conv", cin, hid, (1, 1), dtype=dtype), bn(hid), True)
        branches = []
        for nm in names:
            k = BRANCH_SHAPES[nm]
            conv = _conv(seed, f"blocks.{i}.dw.{nm}.conv", hid, hid, k, stride, BRANCH_PADDING[k], hid, dtype)
            branches.append(RepBranch(k, conv, bn(hid)))
        project = ConvBN(_conv(seed, f"blocks.{i}.project.conv", hid, cout, (1, 1), dtype=dtype), bn(cout), False)
        blocks.append(RepBlock(expand, branches, project, residual=(stride == (1, 1) and cin == cout), stride=stride))
    head = ConvBN(_conv(seed, "head.conv", 2 * c, num_classes, (1, 1), dtype=dtype), bn(num_classes), False)
    return ModelGraph(c, names, stem, blocks, head, num_classes, meta={"seed": seed})


def ablate_branch(model: ModelGraph, shape) -> ModelGraph:
    """Copy of ``model`` with the named depthwise branch removed from every block."""
    name = shape if isinstance(shape, str) else branch_name(tuple(shape))
    if model.mode != "train":
        raise ConfigError("branches can only be ablated from a train-form model")
    if name == "3x3":
        raise ConfigError("the 3x3 main branch is mandatory")
    if name not in model.branch_set:
        raise ConfigError(f"model has no {name} branch")
    out = model.copy()
    out.branch_set = tuple(b for b in out.branch_set if b != name)
    for b in out.blocks:
        b.branches = [br for br in b.branches if br.name != name]
    return out


# -- forward ------------------------------------------------------------------


def forward(model: ModelGraph, x, mode: str = "eval") -> Tensor:
    """Logits ``[N, num_classes]`` for a ``[N, 1, F, T]`` log-mel batch.

    ``mode="train"`` normalizes with batch statistics (and updates running stats);
    ``mode="eval"`` uses running statistics. Merged models ignore the mode.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=model.dtype))
    if x.data.ndim != 4 or x.shape[1] != 1:
        raise DimensionError(f"expected input [N, 1, F, T], got {x.shape}")
    f, t = x.shape[2], x.shape[3]
    for _ in range(2):
        f, t = (f - 1) // 2 + 1, (t - 1) // 2 + 1
    if f < 16 or t < 1:
        raise DimensionError(f"input {x.shape[2]}x{x.shape[3]} leaves a {f}x{t} map after the stem; need >= 16 frequency rows")
    training = mode == "train"
    h = x
    for u in model.stem:
        h = u(h, training)
    for b in model.blocks:
        h = b(h, training)
    return ops.global_avg_pool(model.head(h, training))


def predict(model: ModelGraph, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a stack of inputs, without recording a graph."""
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(forward(model, Tensor(np.asarray(x[i : i + batch_size], dtype=model.dtype)), "eval").data)
    return np.concatenate(outs) if outs else np.zeros((0, model.num_classes), model.dtype)
