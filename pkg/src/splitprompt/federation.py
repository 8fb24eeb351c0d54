"""Inter-cluster federated averaging over the tunable modules, full
fine-tuning round orchestration, and the thin cloud tier.

A round: deliver each cluster's tunable blocks, sense local data at the
start points, train serially along every chain (clusters are independent
and would run in parallel; we execute them in cluster-id order so the
aggregate is deterministic), upload the blocks, and average homologous
modules index by index. The backbone never moves.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import splitnet
from .model import SplitModel, predict
from .simnet import (ComputeEvent, Event, ResidentEvent, SenseEvent, Topology,
                     TransmitEvent, account_round, block_param_bytes,
                     head_flops, layer_flops, embed_flops, token_bytes)
from .splitnet import ClientChain, SmashedRecord
from .tensor import ShapeError
from .util import chunked


@dataclass
class ClusterUpdate:
    cluster_id: str
    prompts: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray
    n_samples: int


@dataclass
class EdgeModelState:
    domain: str
    model: SplitModel
    round: int = 0


@dataclass(frozen=True)
class TrainParams:
    lr: float = 0.001
    batch_size: int = 10
    local_epochs: int = 1
    sensing_s: float = 0.001       # per generated sample
    count_gradient_comm: bool = False


@dataclass
class ClusterTask:
    cluster_id: str
    chain: ClientChain
    data: list


def extract_update(cluster_id: str, model: SplitModel, n_samples: int) -> ClusterUpdate:
    return ClusterUpdate(
        cluster_id=cluster_id,
        prompts=[pm.tokens.value.copy() for pm in model.prompts],
        head_w=model.head.w.value.copy(),
        head_b=model.head.b.value.copy(),
        n_samples=n_samples,
    )


def fedavg(updates: Sequence[ClusterUpdate], weighting: str = "uniform"):
    """Weighted mean of homologous modules, index-aligned across clusters.

    Updates are summed in cluster-id order so the result is invariant to
    the order the caller collected them in.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    if weighting not in ("uniform", "by-sample-count"):
        raise ValueError(f"unknown weighting {weighting!r}")
    ordered = sorted(updates, key=lambda u: u.cluster_id)
    ref = ordered[0]
    for u in ordered[1:]:
        if len(u.prompts) != len(ref.prompts) or any(
                a.shape != b.shape for a, b in zip(u.prompts, ref.prompts)) \
                or u.head_w.shape != ref.head_w.shape \
                or u.head_b.shape != ref.head_b.shape:
            raise ShapeError(f"update {u.cluster_id} is not homologous with "
                             f"{ref.cluster_id}")
    if weighting == "uniform":
        weights = [1.0 / len(ordered)] * len(ordered)
    else:
        total = sum(u.n_samples for u in ordered)
        if total <= 0:
            raise ValueError("by-sample-count weighting needs positive counts")
        weights = [u.n_samples / total for u in ordered]
    prompts = [np.zeros_like(p) for p in ref.prompts]
    head_w = np.zeros_like(ref.head_w)
    head_b = np.zeros_like(ref.head_b)
    for w, u in zip(weights, ordered):
        for i, p in enumerate(u.prompts):
            prompts[i] += w * p
        head_w += w * u.head_w
        head_b += w * u.head_b
    return prompts, head_w, head_b


def apply_modules(model: SplitModel, prompts: Sequence[np.ndarray],
                  head_w: np.ndarray, head_b: np.ndarray) -> None:
    if len(prompts) != len(model.prompts):
        raise ShapeError("prompt module count mismatch")
    for pm, p in zip(model.prompts, prompts):
        if pm.tokens.value.shape != p.shape:
            raise ShapeError("prompt shape mismatch")
        pm.tokens.value[...] = p
    if model.head.w.value.shape != head_w.shape or model.head.b.value.shape != head_b.shape:
        raise ShapeError("head shape mismatch")
    model.head.w.value[...] = head_w
    model.head.b.value[...] = head_b


def evaluate_accuracy(model: SplitModel, samples: Sequence) -> float:
    if not samples:
        return 0.0
    hits = sum(1 for feats, label in samples if predict(model, feats) == label)
    return hits / len(samples)


# ---------------------------------------------------------------------------
# Round orchestration
# ---------------------------------------------------------------------------

def _records_to_events(records: Sequence[SmashedRecord], topology: Topology,
                       group: str, unit: int) -> list[Event]:
    """Coalesce smashed records into one transmit event per (src, dst, kind)."""
    tally: dict[tuple[str, str, str], int] = {}
    for rec in records:
        if rec.src == rec.dst:
            continue
        key = (rec.src, rec.dst, rec.direction)
        tally[key] = tally.get(key, 0) + rec.bytes
    events: list[Event] = []
    payload_of = {splitnet.FORWARD_TOKEN: "tokens",
                  splitnet.BACKWARD_GRADIENT: "gradient",
                  splitnet.RESULT_FEEDBACK: "result"}
    for (src, dst, direction), total in sorted(tally.items()):
        events.append(TransmitEvent(
            src=src, dst=dst, link_kind=topology.transport_kind(src, dst),
            bytes=total, payload=payload_of[direction],
            unit_bytes=unit if direction != splitnet.RESULT_FEEDBACK else total,
            group=group))
    return events


def _chain_compute_events(chain: ClientChain, model: SplitModel, n_steps: int,
                          group: str, training: bool) -> list[Event]:
    """Physical execution cost per chain member: forward plus, when
    training, the 2x backward over the layers that member runs."""
    cfg = model.config
    mult = 3 if training else 1
    events: list[Event] = [ComputeEvent(node=chain.start,
                                        flops=n_steps * embed_flops(cfg),
                                        group=group)]
    for holder, block in chain.blocks:
        flops = len(block.prompt_layers) * layer_flops(cfg)
        if block.has_head:
            flops += head_flops(cfg)
        events.append(ComputeEvent(node=holder, flops=n_steps * mult * flops,
                                   group=group))
    return events


def _delivery_events(chain: ClientChain, model: SplitModel, edge_id: str,
                     group: str, upload: bool) -> list[Event]:
    events: list[Event] = []
    for holder, block in chain.blocks:
        nbytes = block_param_bytes(model.config, block)
        if holder != edge_id:   # a cooperating edge server already has the model
            src, dst = (holder, edge_id) if upload else (edge_id, holder)
            events.append(TransmitEvent(src=src, dst=dst, link_kind="CS",
                                        bytes=nbytes, payload="params",
                                        group=group))
        if not upload:
            events.append(ResidentEvent(node=holder, bytes=nbytes, group=group))
    return events


def finetune_round(state: EdgeModelState, tasks: Sequence[ClusterTask],
                   topology: Topology, train: TrainParams,
                   val_data: Sequence, *, edge_id: str,
                   weighting: str = "uniform"):
    """One hybrid federated-split round: split training inside every chain,
    FedAvg across chains. Returns (new state, metrics, events, smashed
    records)."""
    if not tasks:
        raise ValueError("need at least one cluster task")
    events: list[Event] = []
    all_records: list[SmashedRecord] = []
    updates: list[ClusterUpdate] = []
    cfg = state.model.config
    unit = token_bytes(cfg)

    for task in sorted(tasks, key=lambda t: t.cluster_id):
        task.chain.validate(cfg.n_layers)
        local = state.model.clone()
        gid = task.cluster_id
        events.extend(_delivery_events(task.chain, local, edge_id, gid,
                                       upload=False))
        events.append(SenseEvent(node=task.chain.start,
                                 seconds=train.sensing_s * len(task.data),
                                 group=gid))
        records: list[SmashedRecord] = []
        n_steps = 0
        for _ in range(train.local_epochs):
            for batch in chunked(task.data, train.batch_size):
                _, recs = splitnet.pipeline_backward(task.chain, local, batch,
                                                     train.lr)
                records.extend(recs)
                n_steps += len(batch)
        events.extend(_chain_compute_events(task.chain, local, n_steps, gid,
                                            training=True))
        events.extend(_records_to_events(records, topology, gid, unit))
        events.extend(_delivery_events(task.chain, local, edge_id, gid,
                                       upload=True))
        all_records.extend(records)
        updates.append(extract_update(task.cluster_id, local, len(task.data)))

    # aggregation happens at the edge after every cluster reports in
    tunable = sum(p.value.size for p in state.model.tunable_params())
    events.append(ComputeEvent(node=edge_id, flops=len(updates) * tunable,
                               group=None))
    events.append(ResidentEvent(node=edge_id,
                                bytes=(1 + len(updates)) * tunable * 8,
                                group=None))

    new_model = state.model.clone()
    apply_modules(new_model, *fedavg(updates, weighting))
    accuracy = evaluate_accuracy(new_model, val_data)
    metrics = account_round("finetune", events, topology, performance=accuracy,
                            count_gradient_comm=train.count_gradient_comm)
    new_state = EdgeModelState(domain=state.domain, model=new_model,
                               round=state.round + 1)
    return new_state, metrics, events, all_records


def run_inference(state: EdgeModelState, chain: ClientChain, features,
                  topology: Topology, *, edge_id: str, label: int | None = None,
                  sensing_s: float = 0.001, deliver: bool = True):
    """One SL inference task; returns (predicted class, metrics, records)."""
    cfg = state.model.config
    events: list[Event] = []
    gid = f"inference-{chain.start}"
    if deliver:
        events.extend(_delivery_events(chain, state.model, edge_id, gid,
                                       upload=False))
    events.append(SenseEvent(node=chain.start, seconds=sensing_s, group=gid))
    predicted, records = splitnet.inference_round(chain, state.model, features,
                                                  topology)
    events.extend(_chain_compute_events(chain, state.model, 1, gid,
                                        training=False))
    events.extend(_records_to_events(records, topology, gid, token_bytes(cfg)))
    performance = float(predicted == label) if label is not None else 0.0
    metrics = account_round("inference", events, topology, performance=performance)
    return predicted, metrics, records


# ---------------------------------------------------------------------------
# Cloud tier
# ---------------------------------------------------------------------------

def cloud_aggregate(cloud_model: SplitModel,
                    edge_states: Sequence[EdgeModelState]) -> SplitModel:
    """FedAvg the edges' tunable modules into a copy of the cloud model;
    the cloud backbone is untouched."""
    if not edge_states:
        raise ValueError("need at least one edge state")
    updates = [extract_update(s.domain, s.model, 1) for s in edge_states]
    merged = cloud_model.clone()
    apply_modules(merged, *fedavg(updates, "uniform"))
    return merged


def deliver_cloud_modules(cloud_model: SplitModel,
                          edge_states: Sequence[EdgeModelState]) -> list[EdgeModelState]:
    """Push the cloud's tunable modules down to every edge model. Cadence is
    the caller's choice; edges keep their own backbones."""
    out = []
    prompts = [pm.tokens.value.copy() for pm in cloud_model.prompts]
    head_w = cloud_model.head.w.value.copy()
    head_b = cloud_model.head.b.value.copy()
    for s in edge_states:
        m = s.model.clone()
        apply_modules(m, prompts, head_w, head_b)
        out.append(EdgeModelState(domain=s.domain, model=m, round=s.round))
    return out
