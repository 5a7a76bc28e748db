"""Command-line interface: ``repmobile <command> [options]``.

Every command prints a short human-readable summary (or a JSON object with
``--json``) and writes its machine-readable artifacts (CSV/JSON) to disk.
``--config FILE`` supplies option defaults from a JSON object whose keys are
the option names (``batch_size`` or ``batch-size``); flags on the command line win.
Exit status is 0 on success, 1 on a failed verification and 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ReparamError

log = logging.getLogger("repmobile")


class VerificationFailed(Exception):
    pass


def _csv_ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _csv_floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _csv_strs(s: str) -> list[str]:
    return [x.strip() for x in s.split(",") if x.strip()]


def _emit(args, summary: dict, human: str) -> None:
    if args.json:
        print(json.dumps(summary, indent=1, default=str))
    else:
        print(human)


def _load_ids(args, ds) -> list[int]:
    """Training ids: a subset manifest fraction if given, else the whole train split."""
    if getattr(args, "subsets", None):
        from .data import read_subsets

        for s in read_subsets(args.subsets):
            if abs(s.fraction - args.fraction) < 1e-9:
                return s.ids
        raise ValueError(f"fraction {args.fraction} not in {args.subsets}")
    return ds.ids("train")


def _train_cfg(args):
    from .audio import AugmentConfig
    from .training import TrainConfig

    aug = AugmentConfig(roll=not args.no_roll, specaug=not args.no_specaug, fms=not args.no_fms)
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, warmup_epochs=args.warmup, peak_lr=args.lr,
        weight_decay=args.weight_decay, seed=args.seed, eval_every=args.eval_every, augment=aug,
    )


def _add_train_opts(p, epochs=30, warmup=5.0, lr=0.01):
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--subsets", help="subsets.json written by 'subsets'")
    p.add_argument("--fraction", type=float, default=1.0, help="training fraction to use from --subsets")
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--warmup", type=float, default=warmup, help="warmup epochs")
    p.add_argument("--lr", type=float, default=lr, help="peak learning rate")
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=1)
    p.add_argument("--no-roll", action="store_true")
    p.add_argument("--no-specaug", action="store_true")
    p.add_argument("--no-fms", action="store_true")


def _add_arch_opts(p, width=32, branches="3x3,1x1,3x1,1x3"):
    p.add_argument("--width", type=int, default=width, help="base channel width C")
    p.add_argument("--branches", type=_csv_strs, default=_csv_strs(branches), help="depthwise branch shapes")


def _eval_summary(res) -> str:
    dev = ", ".join(f"dev{d} {a * 100:.1f}%" for d, a in res.per_device.items())
    return f"accuracy {res.accuracy * 100:.2f}% on {res.n} clips ({dev})"


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args):
    from .data import SyntheticSceneSpec, gen_data, read_index

    held = None if args.held_out_device < 0 else args.held_out_device
    spec = SyntheticSceneSpec(n_devices=args.devices, held_out_device=held, seed=args.seed)
    root = gen_data(spec, args.n_per_class, args.out, n_test_per_class=args.n_test_per_class)
    idx = read_index(root)
    counts = {s: sum(e.split == s for e in idx) for s in ("train", "test")}
    _emit(args, {"root": str(root), "counts": counts, "held_out_device": held},
          f"wrote {len(idx)} clips to {root} (train {counts['train']}, test {counts['test']}; held-out device {held})")


def cmd_subsets(args):
    from .data import make_subsets, read_index, write_subsets

    idx = read_index(args.data)
    subs = make_subsets(idx, args.fractions, seed=args.seed)
    out = Path(args.out)
    write_subsets(subs, out)
    by_id = {e.id: e for e in idx}
    rows = []
    for s in subs:
        cls = np.bincount([by_id[i].label for i in s.ids], minlength=10)
        dev = np.bincount([by_id[i].device for i in s.ids])
        rows.append({"fraction": s.fraction, "n": len(s.ids), "per_class": cls.tolist(), "per_device": dev.tolist()})
    with open(out.with_suffix(".csv"), "w") as f:
        f.write("fraction,n,class_min,class_max\n")
        for r in rows:
            f.write(f"{r['fraction']},{r['n']},{min(r['per_class'])},{max(r['per_class'])}\n")
    human = "\n".join(f"{r['fraction'] * 100:>5g}%  {r['n']:>5} clips  per-class {min(r['per_class'])}-{max(r['per_class'])}" for r in rows)
    _emit(args, {"subsets": rows, "path": str(out)}, human + f"\nwrote {out}")


def cmd_train(args):
    from .container import save_model
    from .data import Dataset
    from .model import build_model
    from .training import train

    ds = Dataset(args.data)
    ids = _load_ids(args, ds)
    model = build_model(args.width, args.branches, seed=args.seed)
    r = train(model, ds, ids, _train_cfg(args), eval_ids=ds.ids("test") or None, out_dir=args.out)
    save_model(r.model, Path(args.out) / "final")
    summary = {"metrics": r.metrics, "best_acc": r.best_acc, "best_epoch": r.best_epoch, "out": args.out}
    last = r.metrics[-1] if r.metrics else {}
    _emit(args, summary, f"trained C={args.width} on {len(ids)} clips for {args.epochs} epochs; final loss {last.get('loss', float('nan')):.4f}, "
          f"best eval {r.best_acc * 100:.2f}% (epoch {r.best_epoch}); artifacts in {args.out}")


def cmd_cache(args):
    from .audio import AugmentConfig
    from .container import load_model
    from .data import Dataset
    from .distill import ModelTeacher, cache_teachers

    ds = Dataset(args.data)
    ids = _load_ids(args, ds)
    teachers = []
    for i, path in enumerate(args.teacher):
        m = load_model(path)
        if m.mode == "train":
            from .reparam import reparameterize_model

            m = reparameterize_model(m)
        teachers.append(ModelTeacher(m, Path(path).name or f"t{i}"))
    aug = AugmentConfig(roll=not args.no_roll, specaug=not args.no_specaug, fms=not args.no_fms)
    c = cache_teachers(teachers, ds, ids, args.epochs, args.out, seed=args.seed, batch_size=args.batch_size, augment=aug)
    _emit(args, {"path": args.out, "records": len(c), "teachers": c.teacher_ids, "epochs": c.epochs},
          f"cached {len(c)} records from {len(teachers)} teacher(s) over {args.epochs} epochs -> {args.out}")


def cmd_distill(args):
    from .container import save_model
    from .data import Dataset
    from .distill import DistillConfig, LogitsCache, distill_train
    from .model import build_model

    ds = Dataset(args.data)
    ids = _load_ids(args, ds)
    cache = LogitsCache(args.cache)
    model = build_model(args.width, args.branches, seed=args.seed)
    r = distill_train(model, cache, ds, ids, _train_cfg(args), DistillConfig(args.lam, args.tau), eval_ids=ds.ids("test") or None, out_dir=args.out)
    save_model(r.model, Path(args.out) / "final")
    _emit(args, {"metrics": r.metrics, "best_acc": r.best_acc, "out": args.out},
          f"distilled C={args.width} from {cache.num_teachers} teacher(s); best eval {r.best_acc * 100:.2f}%; artifacts in {args.out}")


def cmd_prune(args):
    from .container import load_model, save_model
    from .data import Dataset
    from .distill import DistillConfig, LogitsCache
    from .pruning import PruneSchedule, progressive_prune
    from .training import evaluate, train

    model = load_model(args.model)
    schedule = PruneSchedule(tuple(args.schedule), args.finetune_epochs)
    ds = Dataset(args.data) if args.data else None
    cache = LogitsCache(args.cache) if args.cache else None
    finetune = evaluate_fn = None
    if ds is not None:
        ids = _load_ids(args, ds)
        test = ds.ids("test")
        evaluate_fn = (lambda m: evaluate(m, ds, test).accuracy) if test else None

        def finetune(m, epochs):
            args.epochs = epochs
            cfg = _train_cfg(args)
            return train(m, ds, ids, cfg, cache=cache, distill=DistillConfig(args.lam, args.tau) if cache else None).model

    pr = progressive_prune(model, schedule, finetune, evaluate_fn)
    out = Path(args.out)
    save_model(pr.model, out / "final")
    pr.to_csv(out / "prune_rounds.csv")
    human = "\n".join(f"round {r['round']}: width {r['width']:>3}  params {r['params']:>9,}  MACs {r['macs']:>13,}  acc {r['acc']}" for r in pr.rounds)
    _emit(args, {"rounds": pr.rounds, "out": str(out)}, human + f"\nwrote {out / 'prune_rounds.csv'}")


def verify_merge(model, merged, n: int, seed: int = 0, tol: float | None = None) -> dict:
    from .model import INPUT_SHAPE, predict

    tol = tol if tol is not None else (1e-4 if model.dtype == np.float32 else 1e-8)
    x = np.random.default_rng(seed).normal(size=(n,) + INPUT_SHAPE[1:]).astype(model.dtype)
    a, b = predict(model, x), predict(merged, x)
    diff = float(np.abs(a - b).max())
    agree = float((a.argmax(1) == b.argmax(1)).mean())
    return {"n": n, "max_abs_diff": diff, "tolerance": tol, "argmax_agreement": agree, "ok": diff <= tol and agree == 1.0}


def cmd_merge(args):
    from .container import load_model, save_model
    from .reparam import reparameterize_model

    model = load_model(args.model)
    merged = reparameterize_model(model.eval())
    save_model(merged, args.out)
    summary = {"out": args.out}
    human = f"merged {args.model} -> {args.out}"
    if args.verify:
        v = verify_merge(model, merged, args.verify, args.seed, args.tol)
        summary["verify"] = v
        human += f"\nverify on {v['n']} random inputs: max |diff| {v['max_abs_diff']:.3g} (tol {v['tolerance']:g}), argmax agreement {v['argmax_agreement'] * 100:.1f}% -> {'OK' if v['ok'] else 'FAIL'}"
    _emit(args, summary, human)
    if args.verify and not summary["verify"]["ok"]:
        raise VerificationFailed("merged model disagrees with the train-form model")


def cmd_count(args):
    from .complexity import complexity
    from .container import load_model
    from .model import build_model
    from .reparam import reparameterize_model

    if args.model:
        model = load_model(args.model)
    else:
        model = build_model(args.width, args.branches)
        if args.merged:
            model = reparameterize_model(model)
    rep = complexity(model)
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    _emit(args, {"params": rep.total_params, "macs": rep.total_macs, "mode": model.mode, "rows": [r.__dict__ for r in rep.rows]}, rep.table())


def cmd_eval(args):
    from .container import load_model
    from .data import Dataset
    from .training import evaluate

    ds = Dataset(args.data)
    model = load_model(args.model)
    res = evaluate(model, ds, ds.ids(args.split), batch_size=args.batch_size)
    if args.out:
        Path(args.out).write_text(json.dumps(res.to_dict(), indent=1))
    _emit(args, res.to_dict(), _eval_summary(res))


def cmd_pipeline(args):
    from .pipeline import load_config, run_pipeline

    overrides = {}
    for kv in args.set or []:
        if "=" not in kv:
            raise ValueError(f"--set expects key=value, got {kv!r}")
        k, v = kv.split("=", 1)
        overrides[k] = v
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = load_config(args.config, overrides)
    res = run_pipeline(cfg)
    cols = res["columns"]
    lines = [f"{'method':<26}" + "".join(f"{c:>9}" for c in cols)]
    for r in res["grid"]:
        lines.append(f"{r['method']:<26}" + "".join(f"{r[c] * 100:>8.1f}%" if c in r else f"{'':>9}" for c in cols))
    lines.append(f"results grid: {Path(cfg['out_dir']) / 'results_grid.csv'}")
    _emit(args, {"grid": res["grid"], "columns": cols, "timings": res["timings"]}, "\n".join(lines))


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="repmobile", description="Reparameterizable mobile CNN: train, distill, prune, merge, count.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file with option defaults")
        sp.add_argument("--json", action="store_true", help="print a JSON summary instead of text")
        sp.add_argument("--seed", type=int, default=0)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "synthesise a scene corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-class", type=int, default=100)
    sp.add_argument("--n-test-per-class", type=int, default=50)
    sp.add_argument("--devices", type=int, default=4)
    sp.add_argument("--held-out-device", type=int, default=3, help="-1 to keep every device in training")

    sp = add("subsets", cmd_subsets, "nested stratified training subsets")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fractions", type=_csv_floats, default=[1.0, 0.5, 0.25, 0.1, 0.05])
    sp.add_argument("--out", required=True, help="subsets.json path (a .csv summary is written alongside)")

    sp = add("train", cmd_train, "train a model with cross-entropy")
    _add_train_opts(sp)
    _add_arch_opts(sp)
    sp.add_argument("--out", required=True)

    sp = add("cache", cmd_cache, "score augmented views with frozen teachers into a logits cache")
    sp.add_argument("--data", required=True)
    sp.add_argument("--teacher", action="append", required=True, help="teacher model directory (repeatable)")
    sp.add_argument("--subsets")
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--no-roll", action="store_true")
    sp.add_argument("--no-specaug", action="store_true")
    sp.add_argument("--no-fms", action="store_true")
    sp.add_argument("--out", required=True)

    sp = add("distill", cmd_distill, "train a student against a logits cache")
    _add_train_opts(sp)
    _add_arch_opts(sp, width=96)
    sp.add_argument("--cache", required=True)
    sp.add_argument("--lam", type=float, default=0.5)
    sp.add_argument("--tau", type=float, default=0.1)
    sp.add_argument("--out", required=True)

    sp = add("prune", cmd_prune, "progressive channel pruning with fine-tuning")
    sp.add_argument("--model", required=True)
    sp.add_argument("--schedule", type=_csv_ints, required=True, help="widths, e.g. 96,64,32")
    sp.add_argument("--finetune-epochs", type=int, default=1)
    sp.add_argument("--data", help="dataset for fine-tuning and evaluation (omit to prune only)")
    sp.add_argument("--cache", help="fine-tune with distillation from this cache")
    sp.add_argument("--subsets")
    sp.add_argument("--fraction", type=float, default=1.0)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--warmup", type=float, default=0.0)
    sp.add_argument("--lr", type=float, default=0.005)
    sp.add_argument("--weight-decay", type=float, default=0.0)
    sp.add_argument("--eval-every", type=int, default=1000)
    sp.add_argument("--no-roll", action="store_true")
    sp.add_argument("--no-specaug", action="store_true")
    sp.add_argument("--no-fms", action="store_true")
    sp.add_argument("--lam", type=float, default=0.5)
    sp.add_argument("--tau", type=float, default=0.1)
    sp.add_argument("--out", required=True)
    sp.set_defaults(epochs=1)

    sp = add("merge", cmd_merge, "fold batch norms and merge depthwise branches")
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--verify", type=int, default=0, metavar="N", help="check equivalence on N random inputs; exit 1 on failure")
    sp.add_argument("--tol", type=float, default=None, help="max-abs logit tolerance (default 1e-4 for float32)")

    sp = add("count", cmd_count, "parameter and MAC accounting")
    sp.add_argument("--model", help="model directory; otherwise a fresh model from --width/--branches")
    _add_arch_opts(sp)
    sp.add_argument("--merged", action="store_true", help="count the merged form of the fresh model")
    sp.add_argument("--csv", help="write the per-layer report here")

    sp = add("eval", cmd_eval, "evaluate a saved model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--out", help="write the JSON breakdown here")

    sp = add("pipeline", cmd_pipeline, "run the full teacher -> distill -> prune -> merge recipe")
    sp.add_argument("--out-dir")
    sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. distill_train.epochs=3")
    sp.set_defaults(seed=None)
    return p


def _config_defaults(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    """Install ``--config`` values as subcommand defaults before the real parse."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not argv or argv[0] == "pipeline":
        return
    sp = parser._subparsers._group_actions[0].choices.get(argv[0])
    if sp is None:
        return
    cfg = json.loads(Path(known.config).read_text())
    if not isinstance(cfg, dict):
        raise ValueError(f"{known.config}: config must be a JSON object")
    dests = {a.dest: a for a in sp._actions}
    defaults = {}
    for k, v in cfg.items():
        dest = k.replace("-", "_")
        if dest not in dests:
            raise ValueError(f"unknown option {k!r} in {known.config}")
        defaults[dest] = v
        dests[dest].required = False
    sp.set_defaults(**defaults)


def main(argv: list[str] | None = None) -> int:
    from .errors import ConfigError, DataError, InputError
    from .runtime import tune_allocator

    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    try:
        _config_defaults(parser, argv)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    tune_allocator()
    try:
        args.func(args)
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError, InputError, ReparamError, KeyError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report the failing stage and keep a nonzero status
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
