"""End-to-end recipe: teachers, logits cache, distilled student, progressive
pruning, merge and evaluation, repeated for every training subset.

Configuration is a JSON object; missing keys take the values in
:data:`DEFAULT_CONFIG`. Schema (all keys optional)::

    out_dir            str     artifacts directory
    seed               int     master seed for data order, init and augmentation
    data.root          str     dataset directory (index.jsonl + wav/)
    data.generate      bool    synthesise the dataset if the index is missing
    data.n_per_class   int     training clips per class when generating
    data.n_test_per_class int  test clips per class when generating
    data.held_out_device int|null  device kept out of the training split
    subsets            [float] training fractions, one results column each
    teachers           [{id, width, branches}]
    teacher_train      TrainConfig fields (epochs, batch_size, warmup_epochs, peak_lr, ...)
    student            {width, branches}
    distill            {lam, tau}
    distill_train      TrainConfig fields
    prune              {widths, finetune_epochs, eval_before_finetune}
    finetune_train     TrainConfig fields (epochs comes from prune.finetune_epochs)
    baseline           {enabled, width, branches} plain cross-entropy reference row
    baseline_train     TrainConfig fields
    figures            bool    render PNG figures next to the CSV output
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .audio import AugmentConfig
from .complexity import count_macs, count_params
from .container import save_model
from .data import Dataset, SyntheticSceneSpec, gen_data, make_subsets, write_subsets
from .distill import DistillConfig, ModelTeacher, cache_teachers
from .errors import ConfigError
from .model import ALL_BRANCHES, build_model
from .pruning import PruneSchedule, progressive_prune, write_rounds
from .reparam import reparameterize_model
from .training import TrainConfig, evaluate, train, write_metrics

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict[str, Any] = {
    "out_dir": "runs/pipeline",
    "seed": 0,
    "data": {"root": "data/synthetic", "generate": True, "n_per_class": 100, "n_test_per_class": 50, "held_out_device": 3},
    "subsets": [1.0, 0.5, 0.25, 0.1, 0.05],
    "teachers": [{"id": "cnn64", "width": 64, "branches": ["3x3"]}],
    "teacher_train": {"epochs": 3, "batch_size": 32, "warmup_epochs": 0.5, "eval_every": 1000},
    "student": {"width": 96, "branches": list(ALL_BRANCHES)},
    "distill": {"lam": 0.5, "tau": 0.1},
    "distill_train": {"epochs": 2, "batch_size": 32, "warmup_epochs": 0.5, "eval_every": 1000},
    "prune": {"widths": [96, 64, 32], "finetune_epochs": 1, "eval_before_finetune": False},
    "finetune_train": {"batch_size": 32, "warmup_epochs": 0, "peak_lr": 0.005, "eval_every": 1000},
    "baseline": {"enabled": False, "width": 32, "branches": ["3x3"]},
    "baseline_train": {"epochs": 3, "batch_size": 32, "warmup_epochs": 0.5, "eval_every": 1000},
    "figures": True,
}

GRID_FIELDS = ["method", "width", "branches", "params", "macs"]


class PipelineError(RuntimeError):
    def __init__(self, stage: str, subset: str | None, cause: BaseException):
        where = f" (subset {subset})" if subset else ""
        super().__init__(f"stage '{stage}'{where} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.subset = subset


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(cfg: dict, dotted: str, value) -> None:
    """Set ``a.b.c`` in a nested dict; ``value`` strings are parsed as JSON when possible."""
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
    keys = dotted.split(".")
    d = cfg
    for k in keys[:-1]:
        d = d.setdefault(k, {})
        if not isinstance(d, dict):
            raise ConfigError(f"cannot set {dotted}: {k} is not an object")
    d[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        cfg = deep_merge(cfg, user)
    for k, v in (overrides or {}).items():
        set_path(cfg, k, v)
    return cfg


def train_config(section: dict, seed: int, **extra) -> TrainConfig:
    kw = dict(section)
    kw.update(extra)
    kw.setdefault("seed", seed)
    if "augment" in kw and isinstance(kw["augment"], dict):
        kw["augment"] = AugmentConfig(**kw["augment"])
    try:
        return TrainConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def subset_label(fraction: float) -> str:
    pct = fraction * 100
    return f"{pct:g}%"


@dataclass
class MethodResult:
    method: str
    width: int
    branches: str
    params: int
    macs: int
    accuracy: float
    per_device: dict


def _result(method: str, model, res) -> MethodResult:
    return MethodResult(method, model.base_channels, "+".join(model.branch_set) if model.mode == "train" else "merged",
                        count_params(model), count_macs(model), res.accuracy, res.per_device)


class Pipeline:
    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.out = Path(cfg["out_dir"])
        self.seed = int(cfg["seed"])
        self.timings: dict[str, float] = {}

    def stage(self, name: str, subset: str | None, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except Exception as exc:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "failure.json").write_text(json.dumps({"stage": name, "subset": subset, "error": f"{type(exc).__name__}: {exc}"}, indent=1))
            raise PipelineError(name, subset, exc) from exc
        finally:
            key = f"{subset}/{name}" if subset else name
            self.timings[key] = self.timings.get(key, 0.0) + time.perf_counter() - t0

    # -- stages ------------------------------------------------------------------

    def prepare_data(self) -> Dataset:
        d = self.cfg["data"]
        root = Path(d["root"])
        if not (root / "index.jsonl").exists():
            if not d.get("generate", True):
                raise ConfigError(f"no dataset at {root}")
            spec = SyntheticSceneSpec(seed=self.seed, held_out_device=d.get("held_out_device", 3))
            gen_data(spec, int(d["n_per_class"]), root, n_test_per_class=int(d["n_test_per_class"]))
        return Dataset(root)

    def run_subset(self, ds: Dataset, fraction: float, ids: list[int], test: list[int]) -> tuple[list[MethodResult], dict]:
        cfg, seed, label = self.cfg, self.seed, subset_label(fraction)
        sdir = self.out / f"subset_{label.rstrip('%')}"
        results: list[MethodResult] = []

        # teachers: trained on the same subset, then merged for cheap, frozen scoring
        teachers = []
        for i, t in enumerate(cfg["teachers"]):
            def fit_teacher(t=t, i=i):
                m = build_model(t["width"], t.get("branches"), seed=seed * 1000 + 100 + i)
                r = train(m, ds, ids, train_config(cfg["teacher_train"], seed), eval_ids=test, out_dir=sdir / "teachers" / t["id"])
                res = r.final_eval
                frozen = reparameterize_model(r.model)
                save_model(frozen, sdir / "teachers" / t["id"] / "final")
                return r.model, frozen, res
            m, frozen, res = self.stage("teacher", label, fit_teacher)
            results.append(_result(f"teacher {t['id']}", m, res))
            teachers.append(ModelTeacher(frozen, t["id"]))

        dcfg = train_config(cfg["distill_train"], seed)
        ft_epochs = int(cfg["prune"].get("finetune_epochs", 1))
        cache_epochs = max(dcfg.epochs, ft_epochs)
        cache = self.stage(
            "cache", label, cache_teachers, teachers, ds, ids, cache_epochs, sdir / "logits.cache",
            seed=seed, batch_size=dcfg.batch_size, augment=dcfg.augment,
        )

        kd = DistillConfig(**cfg["distill"])
        st = cfg["student"]

        def fit_student():
            m = build_model(st["width"], st.get("branches"), seed=seed * 1000 + 1)
            r = train(m, ds, ids, dcfg, eval_ids=test, cache=cache, distill=kd, out_dir=sdir / "student")
            return r.model, r.final_eval
        student, res = self.stage("distill", label, fit_student)
        results.append(_result("distilled student", student, res))

        schedule = PruneSchedule(tuple(cfg["prune"]["widths"]), ft_epochs)
        ft_metrics = []

        def finetune(model, epochs):
            fcfg = train_config(cfg["finetune_train"], seed, epochs=epochs)
            r = train(model, ds, ids, fcfg, cache=cache, distill=kd)
            ft_metrics.append([dict(row, width=model.base_channels) for row in r.metrics])
            return r.model

        # every model is scored once; logits are kept for the merge check
        evals = {id(student): res}

        def ev(m):
            if id(m) not in evals:
                evals[id(m)] = evaluate(m, ds, test)
            return evals[id(m)].accuracy

        def do_prune():
            pr = progressive_prune(student, schedule, finetune, evaluate=ev, eval_before_finetune=bool(cfg["prune"].get("eval_before_finetune", False)))
            write_rounds(pr.rounds, sdir / "prune_rounds.csv")
            save_model(pr.model, sdir / "pruned")
            return pr
        pr = self.stage("prune", label, do_prune)
        for m in pr.models[1:]:
            results.append(_result(f"pruned {m.base_channels}", m, evals[id(m)]))

        def do_merge():
            merged = reparameterize_model(pr.model)
            save_model(merged, sdir / "merged")
            return merged
        merged = self.stage("merge", label, do_merge)

        def do_eval():
            r_t = evals[id(pr.model)]
            r_m = evaluate(merged, ds, test)
            a, b = r_t.logits, r_m.logits
            check = {"max_abs_diff": float(np.abs(a - b).max()), "argmax_agreement": float((a.argmax(1) == b.argmax(1)).mean())}
            (sdir / "merge_check.json").write_text(json.dumps(check, indent=1))
            return r_m, r_t, check
        r_m, r_t, check = self.stage("eval", label, do_eval)
        results.append(_result("merged (deployed)", merged, r_m))

        if cfg["baseline"].get("enabled"):
            b = cfg["baseline"]

            def fit_baseline():
                m = build_model(b["width"], b.get("branches"), seed=seed * 1000 + 2)
                r = train(m, ds, ids, train_config(cfg["baseline_train"], seed), eval_ids=test, out_dir=sdir / "baseline")
                return r.model, r.final_eval
            bm, br = self.stage("baseline", label, fit_baseline)
            results.append(_result("baseline (cross-entropy)", bm, br))

        summary = {
            "fraction": fraction,
            "n_train": len(ids),
            "results": [asdict(r) for r in results],
            "merge_check": check,
            "merged_equals_train_form": r_m.accuracy == r_t.accuracy,
            "prune_rounds": pr.rounds,
            "finetune_metrics": ft_metrics,
        }
        (sdir / "summary.json").write_text(json.dumps(summary, indent=1))
        cache.close()
        return results, summary

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(json.dumps(self.cfg, indent=1, sort_keys=True))
        ds = self.stage("data", None, self.prepare_data)
        fractions = sorted((float(f) for f in self.cfg["subsets"]), reverse=True)
        subsets = self.stage("subsets", None, make_subsets, ds.entries, fractions, self.seed)
        write_subsets(subsets, self.out / "subsets.json")
        test = ds.ids("test")
        if not test:
            raise PipelineError("data", None, ConfigError("dataset has no test split"))
        grid: dict[str, dict] = {}
        summaries = {}
        for sub in subsets:
            label = subset_label(sub.fraction)
            log.info("subset %s: %d training clips", label, len(sub.ids))
            results, summary = self.run_subset(ds, sub.fraction, sub.ids, test)
            summaries[label] = summary
            for r in results:
                row = grid.setdefault(r.method, {"method": r.method, "width": r.width, "branches": r.branches, "params": r.params, "macs": r.macs})
                row[label] = r.accuracy
        columns = [subset_label(f) for f in sorted(fractions)]
        write_grid(list(grid.values()), columns, self.out / "results_grid.csv")
        (self.out / "timings.json").write_text(json.dumps(self.timings, indent=1))
        if self.cfg.get("figures", True):
            from . import plotting

            self.stage("figures", None, plotting.pipeline_figures, self.out, list(grid.values()), columns, summaries)
        return {"grid": list(grid.values()), "columns": columns, "summaries": summaries, "timings": self.timings}


def write_grid(rows: list[dict], columns: list[str], path) -> None:
    """Accuracy grid, one row per method; accuracies written with full float precision."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(GRID_FIELDS + columns)
        for r in rows:
            w.writerow([r[k] for k in GRID_FIELDS] + [repr(r[c]) if c in r else "" for c in columns])


def run_pipeline(config=None, overrides: dict | None = None) -> dict:
    """Run the full recipe from a config path (or dict) and return the grid and summaries."""
    cfg = deep_merge(DEFAULT_CONFIG, config) if isinstance(config, dict) else load_config(config, None)
    for k, v in (overrides or {}).items():
        set_path(cfg, k, v)
    return Pipeline(cfg).run()
