"""Meta-training / meta-test loops, Adam, and the metrics record."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch

from tent.encoder import NumericError, read_checkpoint, write_checkpoint
from tent.episodes import EpisodeConfig, stream_fingerprint, task_at
from tent.graph import ClassSplit, Graph
from tent.model import VARIANTS, EpisodeOutput, GraphContext, ModelParams, episode_forward

log = logging.getLogger(__name__)

# episode stream tags
TRAIN_STREAM, VAL_STREAM, TEST_STREAM, DROPOUT_STREAM = 1, 2, 3, 4


@dataclass(frozen=True)
class TrainConfig:
    n_way: int = 5
    k_shot: int = 5
    query_size: int = 10
    train_n_way: int = 5
    train_k_shot: int = 5
    epochs: int = 500
    lr: float = 0.05
    weight_decay: float = 1e-4
    gamma: float = 1.0
    dropout: float = 0.2
    hidden_dim: int = 16
    out_dim: int = 16
    seed: int = 0
    variant: str = "full"
    test_tasks: int = 500
    val_every: int = 25
    val_tasks: int = 50
    # settings used for the prototypical-network baseline
    protonet_lr: float = 0.005
    protonet_weight_decay: float = 5e-4
    test_seed: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.epochs < 0 or self.test_tasks < 1 or self.val_every < 1 or self.val_tasks < 1:
            raise ValueError("epochs >= 0, test_tasks/val_every/val_tasks >= 1 required")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        self.episodes  # validates the N/K/Q values

    @property
    def episodes(self) -> EpisodeConfig:
        return EpisodeConfig(self.n_way, self.k_shot, self.query_size, self.train_n_way, self.train_k_shot)

    @property
    def eval_seed(self) -> int:
        return self.seed if self.test_seed is None else self.test_seed

    def optimizer_settings(self) -> tuple[float, float]:
        if self.variant == "protonet":
            return self.protonet_lr, self.protonet_weight_decay
        return self.lr, self.weight_decay

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class OptimizerState:
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, model: ModelParams) -> "OptimizerState":
        return cls({k: torch.zeros_like(p) for k, p in model.items()}, {k: torch.zeros_like(p) for k, p in model.items()})


def optimizer_step(model: ModelParams, grads: Mapping[str, torch.Tensor], st: OptimizerState, lr: float,
                   weight_decay: float) -> tuple[ModelParams, OptimizerState]:
    """One Adam step with L2 weight decay folded into the gradient. Updates in place."""
    for name, g in grads.items():
        if g.shape != model.groups[name].shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(model.groups[name].shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient in parameter group {name}")
    st.step += 1
    c1 = 1.0 - st.beta1**st.step
    c2 = 1.0 - st.beta2**st.step
    with torch.no_grad():
        for name, p in model.items():
            g = grads[name] + weight_decay * p
            m = st.m[name].mul_(st.beta1).add_(g, alpha=1.0 - st.beta1)
            v = st.v[name].mul_(st.beta2).addcmul_(g, g, value=1.0 - st.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + st.eps))
    return model, st


@dataclass
class MetricsRecord:
    variant: str
    seed: int
    config_fingerprint: str
    losses: list[float] = field(default_factory=list)
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_epoch: int = 0
    test_accuracy: float | None = None
    test_std: float | None = None
    test_tasks: int = 0
    task_accuracies: list[float] = field(default_factory=list)
    test_stream_fingerprint: str | None = None
    failed_epoch: int | None = None
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def summary(self) -> dict:
        """Deterministic part of the record (wall clock excluded)."""
        d = asdict(self)
        d.pop("wall_clock")
        d["val_history"] = [list(p) for p in self.val_history]
        return d


def _generator(seed: int, epoch: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(np.random.SeedSequence([DROPOUT_STREAM, seed, epoch]).generate_state(1, np.uint64)[0] >> 1))
    return gen


def meta_eval(model: ModelParams, g: Graph | GraphContext, classes, cfg: TrainConfig, *, stream: int = TEST_STREAM,
              count: int | None = None, seed: int | None = None, variant: str | None = None) -> dict:
    """Accuracy over a fixed task stream; no parameter updates, no cross-entropy term."""
    ctx = g if isinstance(g, GraphContext) else GraphContext(g)
    count = cfg.test_tasks if count is None else count
    seed = cfg.eval_seed if seed is None else seed
    variant = variant or cfg.variant
    accs, tasks = [], []
    with torch.no_grad():
        H = ctx.first_step(model)
        for i in range(count):
            task = task_at(ctx.g, classes, cfg.episodes.test_shape, seed, i, stream)
            out = episode_forward(model, ctx, task, variant, H=H)
            accs.append(float(np.mean(out.predictions == task.query_slots())))
            tasks.append(task)
    accs = np.asarray(accs)
    return {"accuracy": float(accs.mean()), "std": float(accs.std()), "task_accuracies": accs.tolist(),
            "fingerprint": stream_fingerprint(tasks)}


def meta_train(g: Graph | GraphContext, split: ClassSplit, cfg: TrainConfig,
               on_event: Callable[[dict], None] | None = None) -> tuple[ModelParams, MetricsRecord]:
    """Episodic training; returns the best-on-validation parameters."""
    ctx = g if isinstance(g, GraphContext) else GraphContext(g)
    split.check_against(ctx.g, cfg.train_n_way, cfg.n_way)
    emit = on_event or (lambda e: None)
    start = time.perf_counter()
    rec = MetricsRecord(cfg.variant, cfg.seed, cfg.fingerprint(), config=cfg.to_json())
    model = ModelParams.init(ctx.g.feature_dim, len(split.base), cfg.seed, cfg.hidden_dim, cfg.out_dim, cfg.dropout)
    if cfg.epochs == 0:
        rec.wall_clock = time.perf_counter() - start
        return model, rec
    model = model.clone(requires_grad=True)
    state = OptimizerState.zeros_like(model)
    lr, wd = cfg.optimizer_settings()
    base_index = {c: i for i, c in enumerate(sorted(split.base))}
    best_acc, best = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        task = task_at(ctx.g, split.base, cfg.episodes.train_shape, cfg.seed, epoch - 1, TRAIN_STREAM)
        try:
            out = episode_forward(model, ctx, task, cfg.variant, training=True, gamma=cfg.gamma,
                                  base_index=base_index, generator=_generator(cfg.seed, epoch))
            grads = dict(zip(model.groups, torch.autograd.grad(out.loss, list(model.groups.values()), allow_unused=True)))
            grads = {k: torch.zeros_like(model.groups[k]) if v is None else v for k, v in grads.items()}
            optimizer_step(model, grads, state, lr, wd)
        except (NumericError, FloatingPointError) as exc:
            rec.failed_epoch = epoch
            emit({"event": "abort", "epoch": epoch, "error": str(exc)})
            raise
        loss = float(out.loss.detach())
        rec.losses.append(loss)
        emit({"event": "train", "epoch": epoch, "loss": loss})
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            val = meta_eval(model, ctx, split.val, cfg, stream=VAL_STREAM, count=cfg.val_tasks, seed=cfg.seed)
            rec.val_history.append((epoch, val["accuracy"]))
            emit({"event": "val", "epoch": epoch, "accuracy": val["accuracy"]})
            log.debug("epoch %d loss %.4f val %.4f", epoch, loss, val["accuracy"])
            if val["accuracy"] > best_acc:
                best_acc, best, rec.best_epoch = val["accuracy"], model.clone(), epoch
    rec.wall_clock = time.perf_counter() - start
    return best, rec


def run_variant(variant: str, g: Graph | GraphContext, split: ClassSplit, cfg: TrainConfig,
                on_event=None) -> tuple[ModelParams, MetricsRecord]:
    """Train ``variant`` and evaluate it on the novel-class test stream."""
    cfg = replace(cfg, variant=variant)
    ctx = g if isinstance(g, GraphContext) else GraphContext(g)
    start = time.perf_counter()
    model, rec = meta_train(ctx, split, cfg, on_event)
    res = meta_eval(model, ctx, split.novel, cfg)
    rec.test_accuracy, rec.test_std = res["accuracy"], res["std"]
    rec.task_accuracies = res["task_accuracies"]
    rec.test_tasks = cfg.test_tasks
    rec.test_stream_fingerprint = res["fingerprint"]
    rec.wall_clock = time.perf_counter() - start
    if on_event:
        on_event({"event": "test", "accuracy": rec.test_accuracy, "std": rec.test_std})
    return model, rec


# ---------------------------------------------------------------------------
# persistence


def save_model(path: str | Path, model: ModelParams, cfg: TrainConfig, split: ClassSplit) -> None:
    echo = {"train_config": cfg.to_json(), "dims": model.dims(), "split": split.to_json()}
    write_checkpoint(path, echo, model.groups)


def load_model(path: str | Path) -> tuple[ModelParams, TrainConfig, ClassSplit]:
    echo, groups = read_checkpoint(path)
    model = ModelParams.from_groups(echo["dims"], groups)
    return model, TrainConfig.from_json(echo["train_config"]), ClassSplit.from_json(echo["split"])


def write_summary(path: str | Path, rec: MetricsRecord) -> None:
    Path(path).write_text(json.dumps(rec.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
