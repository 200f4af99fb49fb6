"""Acceptance suite. Each test prints one ``[criterion N] PASS|FAIL|SKIP`` line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Criteria 6 and 7 train every variant on five seeds and take several minutes.
"""

import json
import math
import os
import sys
import time
from collections import deque
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import random_graph
from tent.adaptation import build_class_ego_subgraph, build_query_subgraph, class_prototype, film_adapt
from tent.cli import main as cli_main
from tent.episodes import task_at
from tent.graph import from_edges
from tent.matching import DEGENERATE_SPREAD, adaptive_temperatures, info_loss
from tent.model import GraphContext, ModelParams, episode_forward
from tent.sbm import generate_preset, load_dataset
from tent.training import TrainConfig, run_variant

ROOT = Path(__file__).resolve().parents[1]
PRESET_CONFIG = ROOT / "configs" / "sbm-small.json"
DATA_SEED = 7
SEEDS = range(5)
ABLATIONS = ("no_node", "no_class", "no_task")


def verdict(capsys, n, ok, detail, skip=False):
    tag = "SKIP" if skip else ("PASS" if ok else "FAIL")
    with capsys.disabled():
        print(f"\n[criterion {n}] {tag}: {detail}")
    if skip:
        pytest.skip(detail)
    assert ok, detail


def randomize(model: ModelParams, rng, scale=0.3) -> ModelParams:
    """Perturb every group (adapters included) so no gradient is trivially zero."""
    groups = {k: (v + torch.tensor(rng.normal(scale=scale, size=v.shape), dtype=v.dtype)).requires_grad_()
              for k, v in model.groups.items()}
    return ModelParams(model.phi_cfg, model.theta_cfg, groups)


# ---------------------------------------------------------------------------
# 1. gradients


def smooth_at(model, ctx, task) -> bool:
    """False when a support row coincides with its prototype; the norm in the
    spread has no derivative there, so a difference quotient means nothing."""
    H = ctx.first_step(model)
    for c in range(task.n_way):
        ces = build_class_ego_subgraph(ctx.g, task.support_nodes(c), H)
        proto, rows = class_prototype(film_adapt(model.theta, H[list(task.support_nodes(c))], model.alpha, model.beta),
                                      model.theta_cfg, ces)
        if torch.linalg.vector_norm(rows - proto, dim=1).min() < 1e-6:
            return False
    return True


def test_c1_finite_difference_gradients(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    h, coords_per_group = 1e-6, 12
    worst, checked, episodes, redrawn = 0.0, 0, 0, 0
    while episodes < 20:
        n, k = int(rng.integers(2, 4)), int(rng.integers(1, 3))
        d, hid, out = (int(x) for x in rng.integers(4, 9, size=3))
        g, raw = random_graph(20, 0.25, 100 + episodes + redrawn, d=d)
        g = from_edges(20, raw, g.features, np.repeat(np.arange(4), 5))
        ctx = GraphContext(g)
        base = {c: c for c in range(4)}
        task = task_at(g, range(4), (n, k, 2 * n), episodes, 0)
        model = randomize(ModelParams.init(d, 4, episodes, hid, out, dropout=0.0), rng, scale=0.1)
        with torch.no_grad():
            if not smooth_at(model, ctx, task):
                redrawn += 1
                continue
        episodes += 1

        def loss():
            return episode_forward(model, ctx, task, "full", training=True, gamma=1.0, base_index=base).loss

        names = list(model.groups)
        value = loss()
        grads = torch.autograd.grad(value, [model.groups[k_] for k_ in names])
        # gradients smaller than this cannot be resolved to 1e-4 by a central difference at h = 1e-6
        floor = 1e-5 * max(1.0, abs(value.item()))
        with torch.no_grad():
            for name, grad in zip(names, grads):
                p = model.groups[name]
                idx = rng.choice(p.numel(), size=min(coords_per_group, p.numel()), replace=False)
                for i in idx:
                    flat = p.view(-1)
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = loss().item()
                    flat[i] = orig - h
                    down = loss().item()
                    flat[i] = orig
                    fd = (up - down) / (2 * h)
                    an = grad.view(-1)[i].item()
                    worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), floor))
                    checked += 1
    elapsed = time.perf_counter() - start
    verdict(capsys, 1, worst < 1e-4 and elapsed < 120,
            f"max relative error {worst:.2e} over {checked} coordinates in 20 episodes "
            f"({redrawn} non-smooth draws replaced), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. loss oracle


def brute_force_loss(q, s, tau, slots):
    """Sum over queries of -log( exp(q.s'/tau') / sum_j exp(q.s_j/tau_j) ) on unit vectors, plain floats."""

    def unit(v):
        norm = math.sqrt(sum(x * x for x in v))
        return [x / norm for x in v]

    qs = [unit(v) for v in q]
    ss = [unit(v) for v in s]
    total = 0.0
    for qi, y in zip(qs, slots):
        terms = [math.exp(sum(a * b for a, b in zip(qi, sj)) / tj) for sj, tj in zip(ss, tau)]
        total += -math.log(terms[y] / sum(terms))
    return total


def test_c2_loss_oracle(capsys):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, nq, d = int(rng.integers(2, 6)), int(rng.integers(1, 11)), int(rng.integers(2, 17))
        q, s = rng.normal(size=(nq, d)) * rng.uniform(0.1, 50), rng.normal(size=(n, d))
        tau = rng.uniform(0.2, 3.0, size=n)
        tau *= n / tau.sum()
        slots = rng.integers(0, n, size=nq)
        got = info_loss(torch.tensor(q), torch.tensor(s), torch.tensor(tau), slots).item()
        worst = max(worst, abs(got - brute_force_loss(q.tolist(), s.tolist(), tau.tolist(), slots.tolist())))
    verdict(capsys, 2, worst <= 1e-12, f"max |info_loss - oracle| = {worst:.2e} over 100 episodes")


# ---------------------------------------------------------------------------
# 3. temperature invariants


def support_sets(rng, total=None):
    n, k, d = int(rng.integers(2, 8)), int(rng.integers(1, 6)), int(rng.integers(2, 17))
    protos = rng.normal(size=(n, d)) * rng.uniform(0.1, 100)
    offs = rng.normal(size=(n, k, d)) * rng.uniform(0.01, 10, size=(n, 1, 1))
    if total is not None:
        offs *= total / np.linalg.norm(offs, axis=-1).sum()
    return protos, offs


def tau_of(protos, offs, scale=1.0):
    p = torch.tensor(protos)
    return adaptive_temperatures([p[i] + torch.tensor(scale * offs[i]) for i in range(len(protos))], p)


def test_c3_temperature_invariants(capsys):
    rng = np.random.default_rng(3)
    mean_err = 0.0
    for _ in range(1000):
        tau = tau_of(*support_sets(rng))
        assert (tau > 0).all()
        mean_err = max(mean_err, abs(tau.mean().item() - 1.0))
    fallback_ok, near = True, 0
    for _ in range(400):
        total = 10 ** rng.uniform(-14, -10)
        protos, offs = support_sets(rng, total)
        protos *= 0  # keep the differences exact in floating point
        # independent recomputation of the spread sum from the tensors actually passed
        sup = [torch.tensor(offs[i]) for i in range(len(protos))]
        spread = sum(float(np.linalg.norm(s.numpy(), axis=-1).sum()) for s in sup)
        tau = adaptive_temperatures(sup, torch.tensor(protos))
        fell_back = bool((tau == 1.0).all())
        near += abs(math.log10(spread) + 12) < 0.5
        fallback_ok &= fell_back == (spread < DEGENERATE_SPREAD)
    scale_err = 0.0
    for _ in range(200):
        protos, offs = support_sets(rng)
        c = 10 ** rng.uniform(-3, 3)
        scale_err = max(scale_err, (tau_of(protos, offs) - tau_of(protos, offs, c)).abs().max().item())
    ok = mean_err <= 1e-9 and fallback_ok and scale_err <= 1e-9
    verdict(capsys, 3, ok, f"max |mean(tau)-1| = {mean_err:.1e}; fallback iff sum D < 1e-12 on 400 episodes "
                           f"({near} within half a decade of the threshold): {fallback_ok}; "
                           f"max scaling change {scale_err:.1e}")


# ---------------------------------------------------------------------------
# 4. FiLM identity


def test_c4_film_identity(capsys, tmp_path):
    g, split = generate_preset(tmp_path, "sbm-small", DATA_SEED)
    ctx = GraphContext(g)
    model = ModelParams.init(g.feature_dim, len(split.base), 0)
    H = ctx.first_step(model)
    bitwise, worst = True, 0.0
    for i in range(10):
        task = task_at(g, split.novel, (5, 5, 10), 0, i, 3)
        for c in range(5):
            theta_i = film_adapt(model.theta, H[list(task.support_nodes(c))], model.alpha, model.beta)
            bitwise &= torch.equal(theta_i, model.theta)
        theta_q = film_adapt(model.theta, H[list(task.support_nodes())], model.alpha, model.beta)
        bitwise &= torch.equal(theta_q, model.theta)
        a = episode_forward(model, ctx, task, "full", H=H)
        b = episode_forward(model, ctx, task, "no_class", H=H)
        worst = max(worst, (a.logits - b.logits).abs().max().item())
    verdict(capsys, 4, bitwise and worst <= 1e-12,
            f"theta_i == theta_q == theta bitwise: {bitwise}; max |full - no_class| logit gap {worst:.1e}")


# ---------------------------------------------------------------------------
# 5. subgraph structure


def bfs_ball(raw, n, v, depth):
    adj = [set() for _ in range(n)]
    for a, b in raw:
        adj[a].add(b)
        adj[b].add(a)
    seen, todo = {v: 0}, deque([v])
    while todo:
        u = todo.popleft()
        if seen[u] == depth:
            continue
        for w in adj[u]:
            if w not in seen:
                seen[w] = seen[u] + 1
                todo.append(w)
    return set(seen)


def test_c5_subgraph_structure(capsys):
    rng = np.random.default_rng(5)
    bad = []
    for t in range(500):
        n = int(rng.integers(5, 60))
        g, raw = random_graph(n, rng.uniform(0.02, 0.3), 1000 + t)
        raw = [(int(a), int(b)) for a, b in raw]
        k = int(rng.integers(1, min(5, n) + 1))
        support = rng.choice(n, size=k, replace=False).tolist()
        sg = build_class_ego_subgraph(g, support, None).sg
        nbrs = set().union(*({b for a, b in raw if a == v} | {a for a, b in raw if b == v} for v in support))
        nodes = set(support) | nbrs
        pairs = sg.edge_pairs()
        virtual_degree = sum(1 for u, _ in pairs if u == 0)
        real = {(int(sg.nodes[u]), int(sg.nodes[v])) for u, v in pairs if u and v and u < v}
        brute = {(a, b) if a < b else (b, a) for a, b in raw if a in nodes and b in nodes}
        if (virtual_degree != k or set(sg.nodes[1:].tolist()) != nodes
                or {(min(e), max(e)) for e in real} != brute):
            bad.append(("ego", t))
        q = int(rng.integers(0, n))
        qsg, _ = build_query_subgraph(g, q)
        if set(qsg.nodes.tolist()) != bfs_ball(raw, n, q, 2) or qsg.nodes[qsg.centroid_index] != q:
            bad.append(("query", t))
    verdict(capsys, 5, not bad, f"500 class-ego and 500 query subgraphs checked against oracles; mismatches: {bad[:5]}")


# ---------------------------------------------------------------------------
# 6 and 7. end-to-end SBM and ablation ordering


def preset_config() -> TrainConfig:
    return TrainConfig.from_json(json.loads(PRESET_CONFIG.read_text()))


@pytest.fixture(scope="module")
def sbm_runs(tmp_path_factory):
    g, split = generate_preset(tmp_path_factory.mktemp("sbm"), "sbm-small", DATA_SEED)
    ctx = GraphContext(g)
    cfg = preset_config()
    runs = {}
    for seed in SEEDS:
        for variant in ("full", "protonet", *ABLATIONS):
            start = time.perf_counter()
            _, rec = run_variant(variant, ctx, split, replace(cfg, seed=seed))
            runs[variant, seed] = (rec, time.perf_counter() - start)
    return runs


def test_c6_end_to_end_sbm(capsys, sbm_runs):
    full = [sbm_runs["full", s][0].test_accuracy for s in SEEDS]
    proto = [sbm_runs["protonet", s][0].test_accuracy for s in SEEDS]
    same_streams = all(sbm_runs["full", s][0].test_stream_fingerprint == sbm_runs["protonet", s][0].test_stream_fingerprint
                       for s in SEEDS)
    slowest = max(sbm_runs["full", s][1] for s in SEEDS)
    hits = sum(a >= 0.90 for a in full)
    ok = hits >= 4 and min(proto) >= 0.60 and same_streams and slowest < 600
    verdict(capsys, 6, ok, f"full {[round(a, 4) for a in full]} ({hits}/5 >= 0.90); "
                           f"protonet {[round(a, 4) for a in proto]}; shared streams {same_streams}; "
                           f"slowest full run {slowest:.0f}s")


def test_c7_ablation_ordering(capsys, sbm_runs):
    mean = {v: float(np.mean([sbm_runs[v, s][0].test_accuracy for s in SEEDS])) for v in ("full", *ABLATIONS)}
    deltas = {v: mean["full"] - mean[v] for v in ABLATIONS}
    ok = all(d >= 0 for d in deltas.values())
    verdict(capsys, 7, ok, f"mean full {mean['full']:.4f}; deltas full-minus-variant "
                           + ", ".join(f"{v} {d:+.4f}" for v, d in deltas.items()))


# ---------------------------------------------------------------------------
# 8. determinism


def test_c8_determinism(capsys, tmp_path):
    assert cli_main(["gen", "--preset", "sbm-small", "--seed", str(DATA_SEED), "--out", str(tmp_path / "data")]) == 0
    args = ["train", "--data", str(tmp_path / "data"), "--config", str(PRESET_CONFIG), "--seed", "3",
            "--epochs", "60", "--test-tasks", "100"]
    assert cli_main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli_main([*args, "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a/summary.json").read_bytes(), (tmp_path / "b/summary.json").read_bytes()
    verdict(capsys, 8, a == b, f"summary.json byte-identical across two runs: {a == b} ({len(a)} bytes)")


# ---------------------------------------------------------------------------
# 9. chance level


def null_graph(seed):
    """Edges and features carry no label information."""
    rng = np.random.default_rng(seed)
    n, classes = 600, 12
    labels = np.repeat(np.arange(classes), n // classes)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.size) < 0.01
    return from_edges(n, np.stack([iu[keep], ju[keep]], 1), rng.normal(size=(n, 16)), rng.permutation(labels))


def test_c9_chance_level(capsys):
    g = null_graph(9)
    ctx = GraphContext(g)
    model = ModelParams.init(16, 4, 0)
    H = ctx.first_step(model)
    lines, ok = [], True
    for n in (2, 5):
        q = 10
        accs = [float(np.mean(episode_forward(model, ctx, t, "full", H=H).predictions == t.query_slots()))
                for t in (task_at(g, range(12), (n, 5, q), 0, i, 3) for i in range(500))]
        acc = float(np.mean(accs))
        sigma = math.sqrt((1 / n) * (1 - 1 / n) / (500 * q))
        ok &= abs(acc - 1 / n) <= 3 * sigma
        lines.append(f"N={n}: {acc:.4f} vs {1 / n:.4f} (3 sigma {3 * sigma:.4f})")
    verdict(capsys, 9, ok, "; ".join(lines))


# ---------------------------------------------------------------------------
# 10. Cora-full stretch (non-binding)


def test_c10_cora_full_stretch(capsys):
    data = os.environ.get("TENT_CORA_DIR")
    if not data or not Path(data).exists():
        verdict(capsys, 10, True, "non-binding stretch; set TENT_CORA_DIR to a converted Cora-full directory "
                                  "to record accuracy against the reported 69.24 +/- 4.49", skip=True)
    g, split = load_dataset(data)
    _, rec = run_variant("full", g, split, TrainConfig())
    verdict(capsys, 10, True, f"recorded {100 * rec.test_accuracy:.2f} +/- {100 * rec.test_std:.2f} "
                              f"vs reported 69.24 +/- 4.49 (no threshold)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
