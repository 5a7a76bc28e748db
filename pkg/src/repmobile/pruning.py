"""Structured channel pruning by L1 importance, with optional fine-tuning rounds.

Channels that are tied together by residual additions form one group and are
kept or dropped together. Each block's hidden width (expand output, every
depthwise branch, project input) is its own group.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .complexity import count_macs, count_params
from .errors import ConfigError, NonFiniteError, PreconditionError
from .model import EXPANSION, ConvBN, ModelGraph, RepBlock, RepBranch
from .params import BnParams, ConvParams
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class PruneSchedule:
    """Base widths visited in order; the first entry is the starting width."""

    widths: tuple[int, ...]
    finetune_epochs: int = 1
    importance: str = "l1"

    def __post_init__(self):
        if self.importance != "l1":
            raise ConfigError(f"unknown importance metric {self.importance!r}")
        if self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be >= 0")
        w = tuple(int(x) for x in self.widths)
        self.widths = w
        if len(w) < 1:
            raise ConfigError("a prune schedule needs at least one width")
        for x in w:
            if x < 8 or x % 4:
                raise ConfigError(f"width {x} must be >= 8 and divisible by 4")
        if any(b >= a for a, b in zip(w, w[1:])):
            raise ConfigError(f"widths must be strictly decreasing, got {list(w)}")


def linear_widths(start: int, end: int, rounds: int, finetune_epochs: int = 1) -> PruneSchedule:
    """``rounds`` evenly spaced reductions from ``start`` to ``end``, snapped to multiples of 4."""
    if rounds < 1:
        raise ConfigError("rounds must be >= 1")
    raw = np.linspace(start, end, rounds + 1)
    widths = [int(start)] + [int(4 * round(x / 4)) for x in raw[1:-1]] + [int(end)]
    return PruneSchedule(tuple(dict.fromkeys(widths)), finetune_epochs)


def _row_l1(conv: ConvParams) -> np.ndarray:
    w = conv.weight.data.astype(np.float64)
    return np.abs(w).reshape(w.shape[0], -1).sum(1)


def residual_groups(model: ModelGraph) -> list[list[int]]:
    """Block indices whose outputs are summed together; the first block of a group has no skip."""
    groups: list[list[int]] = []
    for i, b in enumerate(model.blocks):
        if b.residual and groups:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def channel_importance(model: ModelGraph) -> dict[str, np.ndarray]:
    """Per-channel L1 importance for every prunable group.

    Keys: ``stem.0`` (first stem output), ``stage.k`` (a residual chain; the
    first chain also includes the stem output it is added to) and
    ``blocks.i.hidden``.
    """
    imp = {"stem.0": _row_l1(model.stem[0].conv)}
    for k, grp in enumerate(residual_groups(model)):
        s = sum(_row_l1(model.blocks[i].project.conv) for i in grp)
        if k == 0:
            s = s + _row_l1(model.stem[-1].conv)
        imp[f"stage.{k}"] = s
    for i, b in enumerate(model.blocks):
        s = _row_l1(b.expand.conv)
        for br in b.branches:
            s = s + _row_l1(br.conv)
        imp[f"blocks.{i}.hidden"] = s
    return imp


def select_channels(scores: np.ndarray, keep: int) -> np.ndarray:
    """Indices of the ``keep`` highest scores (ties go to the lower index), ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 < keep <= len(scores):
        raise ConfigError(f"cannot keep {keep} of {len(scores)} channels")
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[:keep])


def _t(a: np.ndarray) -> Tensor:
    return Tensor(np.ascontiguousarray(a), requires_grad=True)


def _slice_conv(conv: ConvParams, out: np.ndarray | None = None, inp: np.ndarray | None = None) -> ConvParams:
    w = conv.weight.data
    depthwise = conv.groups > 1 and conv.groups == conv.out_channels
    if out is not None:
        w = w[out]
    if inp is not None and not depthwise:
        if conv.groups != 1:
            raise ConfigError("only dense and depthwise convolutions can be sliced")
        w = w[:, inp]
    bias = None
    if conv.bias is not None:
        bias = _t(conv.bias.data[out] if out is not None else conv.bias.data.copy())
    groups = w.shape[0] if depthwise else conv.groups
    return ConvParams(_t(w.copy()), bias, conv.stride, conv.padding, groups)


def _slice_bn(bn: BnParams | None, idx: np.ndarray) -> BnParams | None:
    if bn is None:
        return None
    return BnParams(
        _t(bn.gamma.data[idx]), _t(bn.beta.data[idx]),
        bn.running_mean[idx].copy(), bn.running_var[idx].copy(), bn.eps, bn.momentum,
    )


def _slice_unit(u: ConvBN, out=None, inp=None) -> ConvBN:
    return ConvBN(_slice_conv(u.conv, out, inp), _slice_bn(u.bn, slice(None) if out is None else out), u.relu)


def prune_to_width(model: ModelGraph, width: int) -> ModelGraph:
    """Return a narrower copy of ``model`` with base width ``width``.

    Keeps the highest-importance channels in every group, in their original
    order. The model must be in train form; prune before merging.
    """
    width = int(width)
    c = model.base_channels
    if width >= c:
        raise ConfigError(f"target width {width} must be below the current width {c}")
    if width < 8 or width % 4:
        raise ConfigError(f"width {width} must be >= 8 and divisible by 4")
    if model.mode != "train":
        raise PreconditionError("pruning expects a train-form model; prune before merging")
    if model.training:
        raise PreconditionError("prune a model in eval mode")
    imp = channel_importance(model)
    ratio = width / c
    keep = {k: select_channels(v, int(round(len(v) * ratio))) for k, v in imp.items()}

    stage_of = {}
    for k, grp in enumerate(residual_groups(model)):
        for i in grp:
            stage_of[i] = f"stage.{k}"
    s0, s1 = model.stem
    stem = [_slice_unit(s0, out=keep["stem.0"]), _slice_unit(s1, out=keep["stage.0"], inp=keep["stem.0"])]
    prev = keep["stage.0"]
    blocks = []
    for i, b in enumerate(model.blocks):
        hid, out = keep[f"blocks.{i}.hidden"], keep[stage_of[i]]
        if len(hid) != EXPANSION * len(prev):
            # the ratio can round differently for the hidden group; re-select at the exact size
            hid = select_channels(imp[f"blocks.{i}.hidden"], EXPANSION * len(prev))
        branches = [RepBranch(br.kernel_shape, _slice_conv(br.conv, out=hid), _slice_bn(br.bn, hid)) for br in b.branches]
        blocks.append(
            RepBlock(
                _slice_unit(b.expand, out=hid, inp=prev), branches,
                _slice_unit(b.project, out=out, inp=hid), b.residual, b.stride,
            )
        )
        prev = out
    head = _slice_unit(model.head, inp=prev)
    meta = dict(model.meta)
    meta["pruned_from"] = meta.get("pruned_from", []) + [c]
    return ModelGraph(width, model.branch_set, stem, blocks, head, model.num_classes, model.mode, False, meta)


# -- progressive schedule ---------------------------------------------------------------

ROUND_FIELDS = ["round", "width", "params", "macs", "acc_pruned", "acc"]


@dataclass
class PruneResult:
    model: ModelGraph
    rounds: list
    models: list

    def to_csv(self, path) -> None:
        write_rounds(self.rounds, path)


def write_rounds(rows: Sequence[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ROUND_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in ROUND_FIELDS})


class PruneRoundError(RuntimeError):
    def __init__(self, round_index: int, cause: Exception):
        super().__init__(f"prune round {round_index} failed: {cause}")
        self.round_index = round_index


def check_forward(model: ModelGraph, seed: int = 0) -> None:
    """A random eval-mode forward must give finite ``[2, classes]`` logits."""
    from .model import INPUT_SHAPE, predict

    x = np.random.default_rng(seed).normal(size=(2,) + INPUT_SHAPE[1:]).astype(model.dtype)
    y = predict(model, x)
    if y.shape != (2, model.num_classes) or not np.all(np.isfinite(y)):
        raise NonFiniteError(f"forward check failed: shape {y.shape}, finite={bool(np.all(np.isfinite(y)))}")


def progressive_prune(
    model: ModelGraph,
    schedule: PruneSchedule | Sequence[int],
    finetune: Callable[[ModelGraph, int], ModelGraph | None] | None = None,
    evaluate: Callable[[ModelGraph], float] | None = None,
    eval_before_finetune: bool = True,
) -> PruneResult:
    """Prune through ``schedule``, fine-tuning after every cut.

    ``finetune(model, epochs)`` trains in place (or returns a replacement);
    ``evaluate(model)`` returns an accuracy, measured after each cut as well as
    after fine-tuning unless ``eval_before_finetune`` is off. Round 0 records the
    starting model.
    Any failure inside a round is re-raised as :class:`PruneRoundError`.
    """
    if not isinstance(schedule, PruneSchedule):
        schedule = PruneSchedule(tuple(schedule))
    if schedule.widths[0] != model.base_channels:
        raise ConfigError(f"schedule starts at {schedule.widths[0]} but the model width is {model.base_channels}")
    acc0 = evaluate(model) if evaluate else ""
    rows = [{"round": 0, "width": model.base_channels, "params": count_params(model), "macs": count_macs(model), "acc_pruned": acc0, "acc": acc0}]
    models = [model]
    cur = model
    for r, w in enumerate(schedule.widths[1:], start=1):
        try:
            cur = prune_to_width(cur, w)
            check_forward(cur)
            before = evaluate(cur) if evaluate and eval_before_finetune else ""
            if finetune is not None and schedule.finetune_epochs > 0:
                res = finetune(cur, schedule.finetune_epochs)
                if isinstance(res, ModelGraph):
                    cur = res
                cur.eval()
                check_forward(cur)
            after = evaluate(cur) if evaluate else ""
        except Exception as e:
            raise PruneRoundError(r, e) from e
        rows.append({"round": r, "width": w, "params": count_params(cur), "macs": count_macs(cur), "acc_pruned": before, "acc": after})
        log.info("prune round %d: width %d params %d acc %s -> %s", r, w, rows[-1]["params"], before, after)
        models.append(cur)
    return PruneResult(cur, rows, models)
