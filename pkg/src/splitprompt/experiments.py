"""Experiment runners: wire data, planner, federation and scheduler together.

Six experiments:
  E1  pre-training vs from-scratch fine-tuning (two arms, same budget)
  E2  fine-tuning rounds with full resource metrics
  E3  frozen-backbone vs full fine-tuning compute cost
  E4  non-IID sweep over classes per client
  E5  cluster-count sweep
  E6  fine-tune-vs-inference scheduling economy

Each experiment writes rows.csv (per-seed rows, every row stamped with the
seed and the config hash) plus derived summary tables. All output is
deterministic for a given config: fixed row order, repr-formatted floats,
no timestamps.
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import scheduler
from .config import ExperimentConfig
from .data import PartitionSpec, generate, partition_noniid, pretrain_backbone
from .federation import (ClusterTask, EdgeModelState, TrainParams,
                         evaluate_accuracy, finetune_round)
from .model import backward_step, build_model
from .planner import form_clusters, make_partition
from .scheduler import policy_msip, policy_rs, run_episode
from .simnet import Link, Node, Topology, training_flops_per_sample
from .splitnet import build_chain
from .util import chunked, rng_for, spearman_rho


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    return rows[0], rows[1:]


# ---------------------------------------------------------------------------
# Topology and data plumbing
# ---------------------------------------------------------------------------

def client_ids(n: int) -> list[str]:
    return [f"c{i:02d}" for i in range(n)]


def build_topology(cfg: ExperimentConfig) -> tuple[Topology, str]:
    edge_id = "edge0"
    clients = client_ids(cfg.n_clients)
    nodes = [Node(id=edge_id, kind="edge", compute_rate=cfg.edge_compute_rate,
                  power_compute=cfg.edge_power_compute, power_tx=cfg.edge_power_tx,
                  memory_cap=cfg.edge_memory_cap)]
    nodes += [Node(id=c, kind="client", compute_rate=cfg.client_compute_rate,
                   power_compute=cfg.client_power_compute,
                   power_tx=cfg.client_power_tx,
                   memory_cap=cfg.client_memory_cap) for c in clients]

    links: list[Link] = []
    cs_clients = clients if cfg.cs == "all" else cfg.cs.split()
    for c in cs_clients:
        links.append(Link(kind="CS", a=c, b=edge_id, bandwidth=cfg.cs_bandwidth,
                          energy_per_bit=cfg.cs_energy_per_bit))

    def d2d(a: str, b: str) -> Link:
        return Link(kind="D2D", a=a, b=b, bandwidth=cfg.d2d_bandwidth,
                    energy_per_bit=cfg.d2d_energy_per_bit)

    tokens = cfg.d2d.split()
    kind = tokens[0]
    if kind == "complete":
        links += [d2d(a, b) for i, a in enumerate(clients) for b in clients[i + 1:]]
    elif kind == "line":
        links += [d2d(a, b) for a, b in zip(clients, clients[1:])]
    elif kind == "ring":
        links += [d2d(a, b) for a, b in zip(clients, clients[1:])]
        if len(clients) > 2:
            links.append(d2d(clients[-1], clients[0]))
    elif kind == "pairs":
        for pair in tokens[1:]:
            a, _, b = pair.partition("-")
            links.append(d2d(a, b))
    else:
        raise ValueError(f"unknown d2d graph kind {kind!r}")
    return Topology(nodes, links), edge_id


def cloud_seed(seed: int) -> int:
    # disjoint sample stream for the cloud split; task_seed keeps the class
    # means shared with the edge-side data
    return seed * 1000003 + 7919


def _generate_client_data(cfg: ExperimentConfig, seed: int,
                          classes_per_client: int):
    dataset = generate(seed, cfg.n_classes, cfg.per_class,
                       n_patches=cfg.n_patches, in_dim=cfg.in_dim,
                       mean_scale=cfg.mean_scale, noise=cfg.noise)
    spec = PartitionSpec(n_clients=cfg.n_clients,
                         classes_per_client=classes_per_client,
                         samples_per_client=cfg.samples_per_client,
                         train_ratio=cfg.train_ratio, val_ratio=cfg.val_ratio)
    return partition_noniid(dataset, spec)


_BACKBONE_CACHE: dict[tuple[str, int, int], object] = {}


def _pretrained_backbone(cfg: ExperimentConfig, seed: int, epochs: int):
    # several sweep levels share one (seed, epochs) backbone; build_model
    # deep-copies it, so caching cannot leak state between levels
    key = (cfg.config_hash(), seed, epochs)
    cached = _BACKBONE_CACHE.get(key)
    if cached is None:
        cloud = generate(cloud_seed(seed), cfg.n_classes, cfg.per_class,
                         n_patches=cfg.n_patches, in_dim=cfg.in_dim,
                         mean_scale=cfg.mean_scale, noise=cfg.noise,
                         task_seed=seed)
        cached = pretrain_backbone(cfg.model_config(), cloud.samples,
                                   epochs=epochs, lr=cfg.lr,
                                   batch_size=cfg.batch_size, seed=seed)
        if len(_BACKBONE_CACHE) > 16:
            _BACKBONE_CACHE.clear()
        _BACKBONE_CACHE[key] = cached
    return cached


def train_val_split(dataset, train_ratio: int, val_ratio: int):
    train, val = [], []
    denom = train_ratio + val_ratio
    for c, pool in dataset.by_class().items():
        n_val = (len(pool) * val_ratio) // denom
        cut = len(pool) - n_val
        train.extend(dataset.samples[i] for i in pool[:cut])
        val.extend(dataset.samples[i] for i in pool[cut:])
    return train, val


def _finetune_rows(cfg: ExperimentConfig, seed: int, *, k_clusters: int,
                   chain_len: int, classes_per_client: int):
    """Shared federated-split pipeline: pretrain once, cluster, run the
    configured number of rounds. Returns one metrics dict per round."""
    mc = cfg.model_config()
    split = _generate_client_data(cfg, seed, classes_per_client)
    backbone = _pretrained_backbone(cfg, seed, cfg.pretrain_epochs)
    model = build_model(mc, seed=seed, backbone=backbone)
    state = EdgeModelState(domain="edge0", model=model)

    topology, edge_id = build_topology(cfg)
    clients = client_ids(cfg.n_clients)
    data_size = {c: len(split.clients[i]) for i, c in enumerate(clients)}
    specs = form_clusters(topology, "finetune", k_clusters, chain_len,
                          edge_id=edge_id, data_size=data_size,
                          data_quality={c: cfg.data_quality for c in clients})
    tasks = []
    for idx, spec in enumerate(specs):
        holders = (list(spec.members) if len(spec.members) == 1
                   else list(spec.members[1:]))
        plan = make_partition(mc, [(h, topology.nodes[h].compute_rate)
                                   for h in holders])
        chain = build_chain(spec.members, plan.blocks)
        data = split.clients[clients.index(spec.start_point)]
        tasks.append(ClusterTask(cluster_id=f"cluster{idx}", chain=chain,
                                 data=data))

    train = TrainParams(lr=cfg.lr, batch_size=cfg.batch_size,
                        local_epochs=cfg.local_epochs, sensing_s=cfg.sensing_s,
                        count_gradient_comm=cfg.count_gradient_comm)
    out = []
    for rnd in range(1, cfg.rounds + 1):
        state, metrics, _, _ = finetune_round(state, tasks, topology, train,
                                              split.val, edge_id=edge_id)
        row = {"round": rnd}
        row.update(metrics.to_flat_dict())
        out.append(row)
    return out


# ---------------------------------------------------------------------------
# Per-experiment seed runners
# ---------------------------------------------------------------------------

def _run_e1(cfg: ExperimentConfig, seed: int) -> list[list]:
    mc = cfg.model_config()
    dataset = generate(seed, cfg.n_classes, cfg.per_class,
                       n_patches=cfg.n_patches, in_dim=cfg.in_dim,
                       mean_scale=cfg.mean_scale, noise=cfg.noise)
    train, val = train_val_split(dataset, cfg.train_ratio, cfg.val_ratio)
    arms = (("pretrained", cfg.pretrain_epochs), ("scratch", 0))
    rows = []
    for arm, pre_epochs in arms:
        backbone = _pretrained_backbone(cfg, seed, pre_epochs)
        model = build_model(mc, seed=seed, backbone=backbone)
        for epoch in range(1, cfg.epochs + 1):
            order = rng_for(seed, arm, "epoch", epoch).permutation(len(train))
            for batch in chunked([train[i] for i in order], cfg.batch_size):
                backward_step(model, batch, cfg.lr)
            acc = evaluate_accuracy(model, val)
            rows.append([seed, arm, epoch, acc])
    return rows


def _run_e2(cfg: ExperimentConfig, seed: int) -> list[list]:
    per_round = _finetune_rows(cfg, seed, k_clusters=cfg.k_clusters,
                               chain_len=cfg.chain_len,
                               classes_per_client=cfg.classes_per_client)
    return [[seed, m["round"], m["accuracy"], m["latency_s"], m["compute_flops"],
             m["energy_j"], m["cs_bytes"], m["d2d_bytes"], m["channel_seconds"],
             m["peak_memory_max"]] for m in per_round]


def _run_e3(cfg: ExperimentConfig, seed: int) -> list[list]:
    mc = cfg.model_config()
    dataset = generate(seed, cfg.n_classes, cfg.per_class,
                       n_patches=cfg.n_patches, in_dim=cfg.in_dim,
                       mean_scale=cfg.mean_scale, noise=cfg.noise)
    train, val = train_val_split(dataset, cfg.train_ratio, cfg.val_ratio)
    backbone = _pretrained_backbone(cfg, seed, cfg.pretrain_epochs)
    rows = []
    for arm, frozen in (("frozen", True), ("full", False)):
        model = build_model(mc, seed=seed, backbone=backbone,
                            freeze_backbone=frozen)
        flops_epoch = training_flops_per_sample(mc, frozen) * len(train)
        for epoch in range(1, cfg.epochs + 1):
            order = rng_for(seed, arm, "epoch", epoch).permutation(len(train))
            for batch in chunked([train[i] for i in order], cfg.batch_size):
                backward_step(model, batch, cfg.lr)
            acc = evaluate_accuracy(model, val)
            rows.append([seed, arm, epoch, acc, flops_epoch])
    return rows


def _run_e4(cfg: ExperimentConfig, seed: int) -> list[list]:
    rows = []
    for cpc in range(1, cfg.n_classes + 1):
        per_round = _finetune_rows(cfg, seed, k_clusters=cfg.k_clusters,
                                   chain_len=cfg.chain_len,
                                   classes_per_client=cpc)
        rows += [[seed, cpc, m["round"], m["accuracy"]] for m in per_round]
    return rows


def _run_e5(cfg: ExperimentConfig, seed: int) -> list[list]:
    rows = []
    for k in range(1, cfg.k_clusters + 1):
        per_round = _finetune_rows(cfg, seed, k_clusters=k,
                                   chain_len=cfg.chain_len,
                                   classes_per_client=cfg.classes_per_client)
        rows += [[seed, k, m["round"], m["accuracy"]] for m in per_round]
    return rows


def _run_e6(cfg: ExperimentConfig, seed: int) -> list[list]:
    eco = cfg.economy()
    stream = cfg.stream
    rows = []
    for name in cfg.policies:
        if name == "MLCP":
            if cfg.mlcp_variant == "oracle":
                policy = scheduler.mlcp_policy(stream, eco)
            else:
                freq = {g: stream.count(g) / len(stream) for g in scheduler.GOODS}
                policy = scheduler.mlcp_distribution_policy(freq, len(stream), eco)
        elif name == "MSIP":
            policy = lambda s: policy_msip(s, eco)            # noqa: E731
        else:
            rng = rng_for(seed, "rs")
            policy = lambda s: policy_rs(s, eco, rng)         # noqa: E731
        for row in run_episode(policy, stream, eco):
            rows.append([seed, name, row.round, row.request, row.action_label,
                         row.reward, row.cumulative])
    return rows


_HEADERS = {
    "E1": ["experiment", "seed", "config", "arm", "epoch", "accuracy"],
    "E2": ["experiment", "seed", "config", "round", "accuracy", "latency_s",
           "compute_flops", "energy_j", "cs_bytes", "d2d_bytes",
           "channel_seconds", "peak_memory_max"],
    "E3": ["experiment", "seed", "config", "arm", "epoch", "accuracy",
           "train_flops"],
    "E4": ["experiment", "seed", "config", "classes_per_client", "round",
           "accuracy"],
    "E5": ["experiment", "seed", "config", "n_clusters", "round", "accuracy"],
    "E6": ["experiment", "seed", "config", "policy", "round", "request",
           "action", "reward", "cumulative"],
}

_RUNNERS: dict[str, Callable[[ExperimentConfig, int], list[list]]] = {
    "E1": _run_e1, "E2": _run_e2, "E3": _run_e3,
    "E4": _run_e4, "E5": _run_e5, "E6": _run_e6,
}


def _seed_job(args) -> list[list]:
    cfg, seed = args
    return _RUNNERS[cfg.experiment_id](cfg, seed)


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

def _mean(values: list[float]) -> float:
    return float(np.mean(values)) if values else 0.0


def _col(header: list[str], name: str) -> int:
    return header.index(name)


def summarize(experiment_id: str, header: list[str],
              rows: list[list[str]]) -> dict[str, tuple[list[str], list[list]]]:
    """Aggregate per-seed rows into the experiment's summary tables."""
    out: dict[str, tuple[list[str], list[list]]] = {}
    if experiment_id == "E1":
        arm_i, ep_i, acc_i = (_col(header, k) for k in ("arm", "epoch", "accuracy"))
        summary = []
        for arm in ("pretrained", "scratch"):
            ep1 = [float(r[acc_i]) for r in rows
                   if r[arm_i] == arm and int(r[ep_i]) == 1]
            by_seed: dict[str, float] = {}
            for r in rows:
                if r[arm_i] == arm:
                    key = r[_col(header, "seed")]
                    by_seed[key] = max(by_seed.get(key, 0.0), float(r[acc_i]))
            summary.append([arm, _mean(ep1), _mean(list(by_seed.values()))])
        out["summary.csv"] = (["arm", "epoch1_accuracy_mean", "best_accuracy_mean"],
                              summary)
    elif experiment_id == "E2":
        rnd_i = _col(header, "round")
        metric_names = header[header.index("accuracy"):]
        rounds = sorted({int(r[rnd_i]) for r in rows})
        summary = []
        for rnd in rounds:
            sel = [r for r in rows if int(r[rnd_i]) == rnd]
            summary.append([rnd] + [_mean([float(r[_col(header, m)]) for r in sel])
                                    for m in metric_names])
        out["summary.csv"] = (["round"] + [m + "_mean" for m in metric_names],
                              summary)
    elif experiment_id == "E3":
        arm_i, acc_i, fl_i = (_col(header, k) for k in ("arm", "accuracy",
                                                        "train_flops"))
        stats = []
        flops = {}
        for arm in ("frozen", "full"):
            sel = [r for r in rows if r[arm_i] == arm]
            flops[arm] = _mean([float(r[fl_i]) for r in sel])
            by_seed: dict[str, float] = {}
            for r in sel:
                key = r[_col(header, "seed")]
                by_seed[key] = max(by_seed.get(key, 0.0), float(r[acc_i]))
            stats.append([f"{arm}_train_flops_per_epoch", flops[arm]])
            stats.append([f"{arm}_best_accuracy_mean", _mean(list(by_seed.values()))])
        ratio = flops["frozen"] / flops["full"] if flops["full"] else 0.0
        stats.append(["train_flops_ratio", ratio])
        out["summary.csv"] = (["metric", "value"], stats)
    elif experiment_id in ("E4", "E5"):
        level_name = "classes_per_client" if experiment_id == "E4" else "n_clusters"
        lvl_i, rnd_i, acc_i = (_col(header, k) for k in (level_name, "round",
                                                         "accuracy"))
        last_round = max(int(r[rnd_i]) for r in rows)
        levels = sorted({int(r[lvl_i]) for r in rows})
        summary, means = [], []
        for lvl in levels:
            accs = [float(r[acc_i]) for r in rows
                    if int(r[lvl_i]) == lvl and int(r[rnd_i]) == last_round]
            summary.append([lvl, _mean(accs)])
            means.append(_mean(accs))
        out["summary.csv"] = ([level_name, "final_accuracy_mean"], summary)
        rho = spearman_rho(levels, means) if len(levels) >= 2 else 0.0
        out["trend.csv"] = (["metric", "value"], [["spearman_rho", rho]])
    elif experiment_id == "E6":
        pol_i, rnd_i, cum_i = (_col(header, k) for k in ("policy", "round",
                                                         "cumulative"))
        seed_i, act_i, rew_i = (_col(header, k) for k in ("seed", "action",
                                                          "reward"))
        last = max(int(r[rnd_i]) for r in rows)
        summary = []
        for pol in sorted({r[pol_i] for r in rows}):
            totals = [float(r[cum_i]) for r in rows
                      if r[pol_i] == pol and int(r[rnd_i]) == last]
            summary.append([pol, _mean(totals)])
        out["summary.csv"] = (["policy", "total_mean"], summary)
        # one action/reward cell per round, first seed: the decision table
        first_seed = rows[0][seed_i]
        table = []
        for pol in sorted({r[pol_i] for r in rows}):
            sel = {int(r[rnd_i]): r for r in rows
                   if r[pol_i] == pol and r[seed_i] == first_seed}
            cells = [f"{sel[rnd][act_i]}/{float(sel[rnd][rew_i]):g}"
                     for rnd in range(1, last + 1)]
            total = float(sel[last][cum_i])
            table.append([pol] + cells + [total])
        out["actions.csv"] = (["policy"] + [f"round{r}" for r in
                                            range(1, last + 1)] + ["total"],
                              table)
    else:
        raise ValueError(f"unknown experiment id {experiment_id!r}")
    return out


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out_dir: str | Path,
                   jobs: int = 1) -> list[Path]:
    """Run every seed, write rows.csv and the summary tables; returns the
    written paths."""
    out_dir = Path(out_dir)
    runner = _RUNNERS.get(cfg.experiment_id)
    if runner is None:
        raise ValueError(f"unknown experiment id {cfg.experiment_id!r}")
    chash = cfg.config_hash()
    per_seed: list[list[list]] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            per_seed = list(pool.map(_seed_job, [(cfg, s) for s in cfg.seeds]))
    else:
        per_seed = [runner(cfg, seed) for seed in cfg.seeds]

    header = _HEADERS[cfg.experiment_id]
    rows = []
    for seed_rows in per_seed:
        for r in seed_rows:
            rows.append([cfg.experiment_id, r[0], chash] + r[1:])

    written = []
    rows_path = out_dir / "rows.csv"
    write_csv(rows_path, header, rows)
    written.append(rows_path)
    formatted = [[_fmt(v) for v in row] for row in rows]
    for name, (sub_header, sub_rows) in summarize(cfg.experiment_id, header,
                                                  formatted).items():
        path = out_dir / name
        write_csv(path, sub_header, sub_rows)
        written.append(path)
    return written


def report(out_dir: str | Path) -> list[Path]:
    """Re-aggregate an existing rows.csv into fresh summary tables."""
    out_dir = Path(out_dir)
    rows_path = out_dir / "rows.csv"
    if not rows_path.exists():
        raise FileNotFoundError(f"no rows.csv under {out_dir}")
    header, rows = read_csv(rows_path)
    if not rows:
        raise ValueError(f"{rows_path} has no data rows")
    experiment_id = rows[0][0]
    written = []
    for name, (sub_header, sub_rows) in summarize(experiment_id, header,
                                                  rows).items():
        path = out_dir / name
        write_csv(path, sub_header, sub_rows)
        written.append(path)
    return written
