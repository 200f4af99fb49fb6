"""Tables and figures from finished runs.

A run directory holds ``summary.json`` (and usually ``metrics.jsonl``); an
ablation directory holds one run directory per (variant, seed).
"""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from tent.model import VARIANTS  # noqa: E402

CSV_FIELDS = ("variant", "seed", "accuracy", "std", "test_tasks", "best_epoch", "stream_fingerprint")


def find_runs(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "summary.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/summary.json"))


def load_summaries(root: str | Path) -> list[dict]:
    runs = []
    for d in find_runs(root):
        s = json.loads((d / "summary.json").read_text(encoding="utf-8"))
        s["_dir"] = d
        runs.append(s)
    if not runs:
        raise FileNotFoundError(f"no summary.json under {root}")
    return runs


def _order(variant: str) -> int:
    return VARIANTS.index(variant) if variant in VARIANTS else len(VARIANTS)


def write_table(runs: list[dict], path: str | Path) -> None:
    rows = sorted(runs, key=lambda s: (_order(s["variant"]), s["seed"]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for s in rows:
            w.writerow([s["variant"], s["seed"], f"{s['test_accuracy']:.6f}", f"{s['test_std']:.6f}",
                        s["test_tasks"], s["best_epoch"], s.get("test_stream_fingerprint") or ""])


def by_variant(runs: list[dict]) -> dict[str, list[float]]:
    acc = defaultdict(list)
    for s in sorted(runs, key=lambda s: s["seed"]):
        acc[s["variant"]].append(s["test_accuracy"])
    return dict(sorted(acc.items(), key=lambda kv: _order(kv[0])))


def ablation_deltas(runs: list[dict], reference: str = "full") -> dict[str, float]:
    """Mean accuracy of ``reference`` minus each other variant's mean."""
    acc = by_variant(runs)
    if reference not in acc:
        return {}
    ref = float(np.mean(acc[reference]))
    return {v: ref - float(np.mean(a)) for v, a in acc.items() if v != reference}


def plot_accuracy(runs: list[dict], path: str | Path) -> None:
    acc = by_variant(runs)
    names = list(acc)
    means = [np.mean(acc[v]) for v in names]
    stds = [np.std(acc[v]) for v in names]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    x = np.arange(len(names))
    ax.bar(x, means, yerr=stds, capsize=4, color="0.75", edgecolor="k", linewidth=0.6)
    for i, v in enumerate(names):
        ax.scatter(np.full(len(acc[v]), x[i]), acc[v], s=12, color="k", zorder=3)
    ax.set_xticks(x, names)
    ax.set_ylabel("meta-test accuracy")
    ax.set_ylim(0, 1)
    ax.axhline(1.0 / max(1, runs[0].get("config", {}).get("n_way", 5)), ls=":", color="0.4", lw=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_validation(runs: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    colors = dict(zip(VARIANTS, plt.rcParams["axes.prop_cycle"].by_key()["color"]))
    seen = set()
    for s in sorted(runs, key=lambda s: (_order(s["variant"]), s["seed"])):
        hist = s.get("val_history") or []
        if not hist:
            continue
        ep, acc = zip(*hist)
        label = None if s["variant"] in seen else s["variant"]
        seen.add(s["variant"])
        ax.plot(ep, acc, color=colors.get(s["variant"], "k"), lw=0.9, alpha=0.8, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(0, 1)
    if seen:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_losses(runs: list[dict], path: str | Path, window: int = 25) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    colors = dict(zip(VARIANTS, plt.rcParams["axes.prop_cycle"].by_key()["color"]))
    seen = set()
    for s in sorted(runs, key=lambda s: (_order(s["variant"]), s["seed"])):
        losses = np.asarray(s.get("losses") or [], dtype=float)
        if losses.size == 0:
            continue
        w = min(window, losses.size)
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        label = None if s["variant"] in seen else s["variant"]
        seen.add(s["variant"])
        ax.plot(np.arange(w, losses.size + 1), smooth, color=colors.get(s["variant"], "k"), lw=0.9, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"training loss ({window}-epoch mean)")
    ax.set_yscale("log")
    if seen:
        ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render(root: str | Path, out_dir: str | Path) -> dict:
    """Write ``accuracies.csv`` and three PNG figures; returns what was written."""
    runs = load_summaries(root)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_table(runs, out / "accuracies.csv")
    plot_accuracy(runs, out / "accuracy_by_variant.png")
    plot_validation(runs, out / "validation_curves.png")
    plot_losses(runs, out / "training_loss.png")
    acc = by_variant(runs)
    return {
        "runs": len(runs),
        "files": ["accuracies.csv", "accuracy_by_variant.png", "validation_curves.png", "training_loss.png"],
        "mean_accuracy": {v: float(np.mean(a)) for v, a in acc.items()},
        "deltas_vs_full": ablation_deltas(runs),
    }
