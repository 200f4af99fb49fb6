"""Command-line entry point: ``tent gen|train|eval|ablate|report``.

Failures exit with status 1 and print one JSON error line to stderr;
argument errors exit with status 2 (argparse).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from tent import report as rp
from tent.model import VARIANTS, GraphContext
from tent.sbm import PRESETS, generate_preset, generate_sbm, load_dataset
from tent.training import TrainConfig, load_model, meta_eval, run_variant, save_model, write_summary

log = logging.getLogger("tent")

# flag name -> TrainConfig field
OVERRIDES = {
    "seed": "seed",
    "variant": "variant",
    "epochs": "epochs",
    "n_way": "n_way",
    "k_shot": "k_shot",
    "query": "query_size",
    "train_n_way": "train_n_way",
    "train_k_shot": "train_k_shot",
    "lr": "lr",
    "test_tasks": "test_tasks",
}


class JsonLines:
    def __init__(self, path: Path):
        self.fh = open(path, "w", encoding="utf-8")

    def __call__(self, event: dict) -> None:
        self.fh.write(json.dumps(event, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def load_config(args) -> TrainConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    cfg = TrainConfig.from_json(base)
    changes = {field: getattr(args, flag) for flag, field in OVERRIDES.items()
               if getattr(args, flag, None) is not None}
    return replace(cfg, **changes) if changes else cfg


def train_one(ctx: GraphContext, split, cfg: TrainConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    events = JsonLines(out / "metrics.jsonl")
    try:
        model, rec = run_variant(cfg.variant, ctx, split, cfg, on_event=events)
    finally:
        events.close()
    save_model(out / "model.tentc", model, cfg, split)
    write_summary(out / "summary.json", rec)
    # wall clock lives apart so summary.json stays byte-reproducible
    (out / "timing.json").write_text(json.dumps({"wall_clock_seconds": rec.wall_clock}) + "\n", encoding="utf-8")
    return rec.summary()


def cmd_gen(args) -> dict:
    if args.preset:
        generate_preset(args.out, args.preset, args.seed)
    else:
        generate_sbm(args.out, args.classes, args.nodes_per_class, args.p_in, args.p_out, args.feature_dim,
                     args.feature_noise, args.seed, tuple(args.split) if args.split else None)
    return {"out": str(args.out), "preset": args.preset, "seed": args.seed}


def cmd_train(args) -> dict:
    cfg = load_config(args)
    g, split = load_dataset(args.data)
    s = train_one(GraphContext(g), split, cfg, Path(args.out))
    return {"out": args.out, "variant": s["variant"], "seed": s["seed"], "test_accuracy": s["test_accuracy"],
            "test_std": s["test_std"]}


def cmd_eval(args) -> dict:
    model, cfg, split = load_model(args.model)
    changes = {f: getattr(args, k) for k, f in (("tasks", "test_tasks"), ("n_way", "n_way"), ("k_shot", "k_shot"),
                                                ("query", "query_size")) if getattr(args, k) is not None}
    cfg = replace(cfg, **changes)
    g, _ = load_dataset(args.data)
    classes = {"novel": split.novel, "val": split.val, "base": split.base}[args.classes]
    seed = cfg.eval_seed if args.seed is None else args.seed
    res = meta_eval(model, g, classes, cfg, seed=seed, variant=args.variant or cfg.variant)
    out = {"variant": args.variant or cfg.variant, "classes": args.classes, "seed": seed,
           "accuracy": res["accuracy"], "std": res["std"], "tasks": cfg.test_tasks,
           "stream_fingerprint": res["fingerprint"]}
    if args.out:
        Path(args.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def cmd_ablate(args) -> dict:
    cfg = load_config(args)
    g, split = load_dataset(args.data)
    ctx = GraphContext(g)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ValueError(f"unknown variants {bad}; choose from {VARIANTS}")
    seeds = list(range(args.first_seed, args.first_seed + args.seeds))
    records = JsonLines(out / "records.jsonl")
    fingerprints: dict[int, set] = {}
    try:
        for seed in seeds:
            for v in variants:
                start = time.perf_counter()
                s = train_one(ctx, split, replace(cfg, seed=seed, variant=v), out / f"{v}_seed{seed}")
                fingerprints.setdefault(seed, set()).add(s["test_stream_fingerprint"])
                records({k: s[k] for k in ("variant", "seed", "test_accuracy", "test_std",
                                           "test_stream_fingerprint", "config_fingerprint", "best_epoch")})
                log.info("%s seed %d: %.4f (%.1fs)", v, seed, s["test_accuracy"], time.perf_counter() - start)
    finally:
        records.close()
    shared = {seed: len(fp) == 1 for seed, fp in fingerprints.items()}
    if not all(shared.values()):
        raise RuntimeError(f"variants saw different test streams for seeds {[s for s, ok in shared.items() if not ok]}")
    summary = rp.render(out, out / "report") if not args.no_report else {}
    return {"out": str(out), "runs": len(seeds) * len(variants), "shared_streams": True,
            "mean_accuracy": summary.get("mean_accuracy"), "deltas_vs_full": summary.get("deltas_vs_full")}


def cmd_report(args) -> dict:
    return {"out": str(args.out), **rp.render(args.runs, args.out)}


def add_train_flags(p: argparse.ArgumentParser, with_variant: bool = True) -> None:
    p.add_argument("--data", required=True, help="directory with edges.tsv, features.bin, labels.txt, split.json")
    p.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--train-n-way", type=int)
    p.add_argument("--train-k-shot", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--test-tasks", type=int)
    if with_variant:
        p.add_argument("--seed", type=int)
        p.add_argument("--variant", choices=VARIANTS)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tent", description="Task-adaptive few-shot node classification.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic block-model dataset")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=15)
    p.add_argument("--nodes-per-class", type=int, default=50)
    p.add_argument("--p-in", type=float, default=0.2)
    p.add_argument("--p-out", type=float, default=0.01)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--feature-noise", type=float, default=0.3)
    p.add_argument("--split", type=int, nargs=3, metavar=("BASE", "VAL", "NOVEL"))
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="meta-train one variant and evaluate it on novel classes")
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved model on a fixed task stream")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--classes", choices=("novel", "val", "base"), default="novel")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seed", type=int)
    p.add_argument("--tasks", type=int)
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--query", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every variant over several seeds on shared task streams")
    add_train_flags(p, with_variant=False)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--variants", help=f"comma-separated subset of {','.join(VARIANTS)}")
    p.add_argument("--no-report", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="CSV table and figures from run directories")
    p.add_argument("--runs", required=True, help="a run directory or a directory of run directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        print(json.dumps({"status": "error", "command": args.command, "error": type(exc).__name__,
                          "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
