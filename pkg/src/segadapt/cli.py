"""Command line interface.

Subcommands: gen-data, pretrain, adapt, eval, ablate. Every run writes a
manifest.json (config snapshot, root seed, input hashes, outputs, timing)
next to its outputs. Exit codes: 0 success, 2 usage or config error,
3 data or format error, 4 numeric failure (non-finite loss, with a
diagnostic dump in the output directory).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import Config, ConfigError, default_config, parse_config, snapshot
from .data import DatasetError, LabeledSet, load_dataset, save_dataset
from .estimators import (FineTuner, MultiHeadAdapter, NumericFailure, PtbnAdapter,
                         SelfTrainAdapter, SourceTrainer, TentAdapter)
from .inference import infer_ensemble, infer_single
from .metrics import (CaseResult, DegenerateStatsError, aggregate, assd,
                      dice_coefficient, paired_t_test)
from .pseudolabel import export_label_pgm, export_reliability_pgm
from .rng import SeedBundle
from .synthdata import generate_benchmark

SPLITS = ("train", "val", "test")
DOMAINS = ("source", "target")

ABLATE_FLAGS = {
    "M": "use_reliability",
    "TDG": "use_dropout",
    "T": "use_transforms",
    "TFS": "use_pseudo_supervision",
    "LMENT": "use_mean_entropy",
}


def _sha256(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, cfg: Config, seed: int,
                    inputs: dict, outputs: list, t0: float):
    manifest = {
        "command": command,
        "config": snapshot(cfg),
        "seed": int(seed),
        "inputs": {str(k): _sha256(v) for k, v in inputs.items()},
        "outputs": sorted(str(o) for o in outputs),
        "timing_s": time.monotonic() - t0,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_config(args) -> Config:
    if getattr(args, "config", None):
        return parse_config(args.config)
    return default_config()


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args)
    if args.benchmark:
        cfg.data.benchmark = args.benchmark  # manifest snapshots the effective name
    out = _out_dir(args)
    try:
        domains = generate_benchmark(cfg.data.benchmark, cfg.data.n_cases, args.seed,
                                     size=cfg.data.image_size)
    except ValueError as e:
        raise DatasetError(str(e)) from e
    outputs = []
    for domain in DOMAINS:
        for split in SPLITS:
            path = out / f"{domain}_{split}.upld"
            save_dataset(path, domains[domain][split])
            outputs.append(path)
    inputs = {"config": args.config} if args.config else {}
    _write_manifest(out, "gen-data", cfg, args.seed, inputs, outputs, t0)
    print(f"wrote {len(outputs)} dataset files to {out}")
    return 0


def _dataset(data_dir: Path, name: str) -> LabeledSet:
    path = Path(data_dir) / f"{name}.upld"
    if not path.exists():
        raise DatasetError(f"missing dataset file: {path}")
    return load_dataset(path)


def cmd_pretrain(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args)
    out = _out_dir(args)
    train = _dataset(args.data, "source_train")
    val = _dataset(args.data, "source_val")
    pc = cfg.pretrain
    trainer = SourceTrainer(num_classes=train.num_classes, epochs=pc.epochs, lr=pc.lr,
                            lr_decay=pc.lr_decay, decay_every=pc.decay_every,
                            batch=pc.batch, seed=args.seed)
    trainer.fit(train, val)
    ckpt = out / "checkpoint.uplc"
    save_checkpoint(ckpt, trainer.model_, epoch=trainer.best_epoch_,
                    seeds={"root": args.seed})
    logp = out / "trainlog.jsonl"
    trainer.log_.write(logp)
    inputs = {"source_train": Path(args.data) / "source_train.upld",
              "source_val": Path(args.data) / "source_val.upld"}
    if args.config:
        inputs["config"] = args.config
    _write_manifest(out, "pretrain", cfg, args.seed, inputs, [ckpt, logp], t0)
    print(f"best val dice {trainer.best_val_dice_:.4f} at epoch {trainer.best_epoch_}")
    return 0


def _build_adapter(method: str, model, cfg: Config, seed: int, ablate: set):
    ac = cfg.adapt
    if method == "upl":
        kwargs = {v: False for k, v in ABLATE_FLAGS.items() if k in ablate}
        return MultiHeadAdapter(model=model, heads=ac.heads, tau=ac.tau,
                                entropy_weight=ac.entropy_weight, lr=ac.lr,
                                epochs=ac.epochs, batch=ac.batch, cleanup=ac.cleanup,
                                seed=seed, **kwargs)
    if method == "tent":
        return TentAdapter(model=model, lr=ac.lr, epochs=ac.epochs, batch=ac.batch, seed=seed)
    if method == "ptbn":
        return PtbnAdapter(model=model, seed=seed)
    if method == "selftrain":
        return SelfTrainAdapter(model=model, entropy_weight=ac.entropy_weight, lr=ac.lr,
                                epochs=ac.epochs, batch=ac.batch, cleanup=ac.cleanup, seed=seed)
    if method in ("finetune-train", "finetune-valid"):
        return FineTuner(model=model, epochs=ac.epochs, lr=ac.lr, batch=ac.batch, seed=seed)
    raise ValueError(f"unhandled method {method}")


def cmd_adapt(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args)
    out = _out_dir(args)
    ablate = set()
    if args.ablate:
        if args.method != "upl":
            print(f"--ablate only applies to --method upl, got {args.method}", file=sys.stderr)
            return 2
        for token in args.ablate.split(","):
            token = token.strip()
            if token not in ABLATE_FLAGS:
                print(f"unknown ablation flag {token!r}; known: {sorted(ABLATE_FLAGS)}",
                      file=sys.stderr)
                return 2
            ablate.add(token)

    train = _dataset(args.data, "target_train")
    val = _dataset(args.data, "target_val")

    if args.method == "target-only":
        pc = cfg.pretrain
        est = SourceTrainer(num_classes=train.num_classes, epochs=pc.epochs, lr=pc.lr,
                            lr_decay=pc.lr_decay, decay_every=pc.decay_every,
                            batch=pc.batch, seed=args.seed)
        est.fit(train, val)
        model_header_epoch = est.best_epoch_
    else:
        model, _, _ = load_checkpoint(args.checkpoint)
        if model.num_heads != 1:
            raise CheckpointError("adaptation expects a single-head source checkpoint")
        est = _build_adapter(args.method, model, cfg, args.seed, ablate)
        if args.method == "upl":
            est.fit(train.drop_labels(), val)
        elif args.method in ("tent", "ptbn", "selftrain"):
            est.fit(train.drop_labels(), val)
        elif args.method == "finetune-train":
            est.fit(train, val)
        else:  # finetune-valid
            est.fit(val, val)
        model_header_epoch = est.best_epoch_

    ckpt = out / "adapted.uplc"
    save_checkpoint(ckpt, est.model_, epoch=model_header_epoch, seeds={"root": args.seed})
    logp = out / "trainlog.jsonl"
    est.log_.write(logp)
    outputs = [ckpt, logp]
    if args.dump_maps:
        outputs += _dump_maps(Path(args.dump_maps), est, train, cfg)
    inputs = {"target_train": Path(args.data) / "target_train.upld",
              "target_val": Path(args.data) / "target_val.upld"}
    if args.method != "target-only":
        inputs["checkpoint"] = args.checkpoint
    if args.config:
        inputs["config"] = args.config
    _write_manifest(out, f"adapt:{args.method}", cfg, args.seed, inputs, outputs, t0)
    best = est.best_val_dice_
    print(f"method {args.method}: best val dice {best:.4f} at epoch {est.best_epoch_}")
    return 0


def _dump_maps(dump_dir: Path, est, train: LabeledSet, cfg: Config) -> list:
    """PGM snapshots of the fitted model's pseudo labels and reliability on
    the first training case."""
    dump_dir.mkdir(parents=True, exist_ok=True)
    model = est.model_
    imgs = train.images[train.case_slices(0)]
    rng = SeedBundle(getattr(est, "seed", 0)).stream("dump")
    if model.num_heads > 1:
        labels, mean_prob, _ = infer_ensemble(model, imgs, rng, tau=cfg.adapt.tau,
                                              cleanup=cfg.adapt.cleanup)
        rel = (mean_prob.max(axis=1) > cfg.adapt.tau).astype(np.float32)
    else:
        labels, probs = infer_single(model, imgs)
        rel = (probs.max(axis=1) > cfg.adapt.tau).astype(np.float32)
    outputs = []
    for i in range(len(imgs)):
        lp = dump_dir / f"pseudo_{i:03d}.pgm"
        rp = dump_dir / f"reliability_{i:03d}.pgm"
        export_label_pgm(lp, labels[i], model.num_classes)
        export_reliability_pgm(rp, rel[i])
        outputs += [lp, rp]
    return outputs


def _eval_results(model, ds: LabeledSet, mode: str, cfg: Config, seed: int,
                  method_name: str) -> list:
    if mode == "ensemble" and model.num_heads == 1:
        model = model.grow(cfg.adapt.heads)  # transform ensemble of one head
    rng = SeedBundle(seed).stream("eval")
    results = []
    for cid, imgs, labs in ds.cases():
        if mode == "ensemble":
            pred, _, _ = infer_ensemble(model, imgs, rng, tau=cfg.adapt.tau,
                                        cleanup=cfg.adapt.cleanup)
        else:
            pred, _ = infer_single(model, imgs, cleanup=cfg.adapt.cleanup)
        for c in range(1, model.num_classes):
            results.append(CaseResult(method_name, cid, c,
                                      dice_coefficient(pred, labs, c),
                                      assd(pred, labs, c)))
    return results


def _write_results_csv(path, results: list):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["method", "case_id", "class", "dice", "assd", "flags"])
        for r in results:
            flags = "" if r.assd_defined else "EMPTY"
            w.writerow([r.method, r.case_id, r.cls, f"{r.dice:.6f}",
                        "" if not r.assd_defined else f"{r.assd:.6f}", flags])


def _read_results_csv(path) -> list:
    results = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        need = {"method", "case_id", "class", "dice", "assd", "flags"}
        if reader.fieldnames is None or not need.issubset(reader.fieldnames):
            raise DatasetError(f"{path}: not a results CSV (columns {reader.fieldnames})")
        for row in reader:
            results.append(CaseResult(row["method"], row["case_id"], int(row["class"]),
                                      float(row["dice"]),
                                      float(row["assd"]) if row["assd"] else float("nan")))
    return results


def _write_summary_csv(path, results: list, baseline: list | None):
    summary = aggregate(results)
    tcols = baseline is not None
    base_by_key = {}
    if tcols:
        base_by_key = {(r.case_id, r.cls): r.dice for r in baseline}
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        header = ["class", "n", "dice_mean", "dice_sd", "assd_mean", "assd_sd", "assd_excluded"]
        if tcols:
            header += ["t_vs_baseline", "p_vs_baseline"]
        w.writerow(header)
        for cls, s in summary.items():
            row = [cls, s.n, f"{s.dice_mean:.6f}", f"{s.dice_sd:.6f}",
                   f"{s.assd_mean:.6f}" if np.isfinite(s.assd_mean) else "",
                   f"{s.assd_sd:.6f}" if np.isfinite(s.assd_sd) else "",
                   s.assd_excluded]
            if tcols:
                ours, theirs = [], []
                for r in results:
                    if r.cls != cls:
                        continue
                    key = (r.case_id, r.cls)
                    if key not in base_by_key:
                        raise DatasetError(f"baseline CSV missing case {key[0]} class {key[1]}")
                    ours.append(r.dice)
                    theirs.append(base_by_key[key])
                t, p = paired_t_test(ours, theirs)
                row += [f"{t:.6f}", f"{p:.6g}"]
            w.writerow(row)


def cmd_eval(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    # one-sided: a split may legitimately lack its highest class
    if ds.num_classes > model.num_classes:
        raise DatasetError(
            f"class count mismatch: checkpoint has {model.num_classes} classes, "
            f"dataset {args.data} has labels up to class {ds.num_classes - 1}")
    name = args.name or args.mode
    results = _eval_results(model, ds, args.mode, cfg, args.seed, name)
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    _write_results_csv(out_csv, results)
    # summary and t-test read the emitted CSV back so both comparison sides
    # carry the same 6-decimal quantization (a file against itself is exactly
    # zero-difference, which the t-test rejects as degenerate)
    results = _read_results_csv(out_csv)
    baseline = _read_results_csv(args.baseline) if args.baseline else None
    summary_csv = out_csv.with_name(out_csv.stem + "_summary.csv")
    _write_summary_csv(summary_csv, results, baseline)
    inputs = {"checkpoint": args.checkpoint, "data": args.data}
    if args.baseline:
        inputs["baseline"] = args.baseline
    if args.config:
        inputs["config"] = args.config
    _write_manifest(out_csv.parent, "eval", cfg, args.seed, inputs,
                    [out_csv, summary_csv], t0)
    mean_dice = float(np.mean([r.dice for r in results]))
    print(f"evaluated {ds.n_cases} cases: mean foreground dice {mean_dice:.4f}")
    return 0


def _parse_grid(tokens: list) -> list:
    allowed = {"heads": int, "tau": float, "entropy_weight": float}
    axes = []
    for token in tokens:
        if "=" not in token:
            raise ConfigError(f"grid token {token!r} is not key=v1,v2,...")
        key, vals = token.split("=", 1)
        key = key.strip()
        if key not in allowed:
            raise ConfigError(f"grid key {key!r} not allowed; choose from {sorted(allowed)}")
        try:
            values = [allowed[key](v) for v in vals.split(",") if v.strip()]
        except ValueError as e:
            raise ConfigError(f"grid axis {key!r}: {e}") from e
        if not values:
            raise ConfigError(f"grid axis {key!r} has no values")
        axes.append((key, values))
    if not axes:
        raise ConfigError("empty grid")
    names = [k for k, _ in axes]
    combos = [dict(zip(names, combo)) for combo in itertools.product(*[v for _, v in axes])]
    return combos


def cmd_ablate(args) -> int:
    t0 = time.monotonic()
    cfg = _load_config(args)
    out = _out_dir(args)
    combos = _parse_grid(args.grid)
    model, _, _ = load_checkpoint(args.checkpoint)
    train = _dataset(args.data, "target_train")
    val = _dataset(args.data, "target_val")
    ac = cfg.adapt
    rows = []
    for combo in combos:
        est = MultiHeadAdapter(model=model, heads=combo.get("heads", ac.heads),
                               tau=combo.get("tau", ac.tau),
                               entropy_weight=combo.get("entropy_weight", ac.entropy_weight),
                               lr=ac.lr, epochs=ac.epochs, batch=ac.batch,
                               cleanup=ac.cleanup, seed=args.seed)
        est.fit(train.drop_labels(), val)
        rows.append({**combo, "val_dice": est.best_val_dice_, "best_epoch": est.best_epoch_})
        print(f"{combo} -> val dice {est.best_val_dice_:.4f}")
    keys = sorted({k for row in rows for k in row})
    sweep_csv = out / "sweep.csv"
    with open(sweep_csv, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(keys)
        for row in rows:
            w.writerow([row.get(k, "") for k in keys])
    inputs = {"checkpoint": args.checkpoint,
              "target_train": Path(args.data) / "target_train.upld",
              "target_val": Path(args.data) / "target_val.upld"}
    if args.config:
        inputs["config"] = args.config
    _write_manifest(out, "ablate", cfg, args.seed, inputs, [sweep_csv], t0)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segadapt",
                                description="source-free segmentation adaptation toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic two-domain benchmark")
    g.add_argument("--out", required=True)
    g.add_argument("--benchmark", help="benchmark name (default: from config)")
    g.add_argument("--config")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="supervised source training")
    t.add_argument("--data", required=True, help="directory from gen-data")
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_pretrain)

    a = sub.add_parser("adapt", help="adapt a source checkpoint to the target domain")
    a.add_argument("--checkpoint", help="source checkpoint (unused for target-only)")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config")
    a.add_argument("--method", default="upl",
                   choices=["upl", "tent", "ptbn", "selftrain", "finetune-train",
                            "finetune-valid", "target-only"])
    a.add_argument("--ablate", help="comma list from M,TDG,T,TFS,LMENT (upl only)")
    a.add_argument("--dump-maps", help="directory for PGM pseudo-label dumps")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_adapt)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one dataset file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True, help="a single .upld file")
    e.add_argument("--out", required=True, help="per-case results CSV path")
    e.add_argument("--mode", default="ensemble", choices=["ensemble", "single"])
    e.add_argument("--baseline", help="earlier results CSV for a paired t-test")
    e.add_argument("--name", help="method column value (default: the mode)")
    e.add_argument("--config")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("ablate", help="hyperparameter sweep of the adaptation")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--grid", nargs="+", required=True,
                   help="axes like heads=1,2,4 tau=0.9,0.95 entropy_weight=0.5,1")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "adapt" and args.method != "target-only" and not args.checkpoint:
        print("adapt needs --checkpoint for this method", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DegenerateStatsError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (DatasetError, CheckpointError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericFailure as e:
        out = Path(getattr(args, "out", "."))
        out.mkdir(parents=True, exist_ok=True)
        dump = out / "nan_dump.json"
        dump.write_text(json.dumps(e.diagnostics, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        print(f"numeric failure: {e} (diagnostics in {dump})", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
