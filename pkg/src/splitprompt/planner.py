"""Decides how to split the tunable part and how to cluster clients.

Partitioning apportions prompt modules to clients in proportion to their
compute rates (largest remainder, ties to the lower client id). Cluster
formation is a greedy depth-first search: start points are ranked, chains
extend along the best D2D neighbour first, and the search backtracks when
a prefix cannot be completed, so it finds a feasible clustering whenever
one exists on the instance sizes we care about. Optimality is explicitly
not a goal; feasibility and proportionality are the contracts.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping, Sequence

from .model import ModelConfig, TunableBlock, blocks_from_sizes
from .simnet import Topology
from .util import largest_remainder


class InfeasibleClusterError(RuntimeError):
    """No clustering satisfies the constraints; names the one that failed."""

    def __init__(self, constraint: str, message: str):
        super().__init__(f"{constraint}: {message}")
        self.constraint = constraint


@dataclass(frozen=True)
class PartitionPlan:
    clients: tuple[str, ...]
    blocks: tuple[TunableBlock, ...]

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def assignment(self) -> dict[str, TunableBlock]:
        return dict(zip(self.clients, self.blocks))

    def to_json(self) -> str:
        return json.dumps({
            "clients": list(self.clients),
            "blocks": [{"index": b.index, "prompt_layers": list(b.prompt_layers),
                        "has_head": b.has_head} for b in self.blocks],
        })

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        blob = json.loads(text)
        blocks = tuple(TunableBlock(index=b["index"],
                                    prompt_layers=tuple(b["prompt_layers"]),
                                    has_head=b["has_head"])
                       for b in blob["blocks"])
        return cls(clients=tuple(blob["clients"]), blocks=blocks)


@dataclass(frozen=True)
class ClusterSpec:
    role: str                    # finetune | inference
    members: tuple[str, ...]

    @property
    def start_point(self) -> str:
        return self.members[0]

    @property
    def end_point(self) -> str:
        return self.members[-1]

    def to_json(self) -> str:
        return json.dumps({"role": self.role, "members": list(self.members)})

    @classmethod
    def from_json(cls, text: str) -> "ClusterSpec":
        blob = json.loads(text)
        return cls(role=blob["role"], members=tuple(blob["members"]))


def make_partition(config: ModelConfig,
                   clients: Sequence[tuple[str, float]]) -> PartitionPlan:
    """One block per client, sized proportionally to compute rate."""
    if not clients:
        raise ValueError("need at least one client")
    n_blocks = len(clients)
    if n_blocks > config.n_layers + 1:
        raise ValueError(f"{n_blocks} blocks exceed the {config.n_layers + 1} "
                         f"tunable modules")
    ids = [cid for cid, _ in clients]
    rates = [rate for _, rate in clients]
    if any(r <= 0 for r in rates):
        raise ValueError("compute rates must be positive")
    sizes = largest_remainder(config.n_layers, rates, tie_keys=ids)
    return PartitionPlan(clients=tuple(ids), blocks=tuple(blocks_from_sizes(sizes)))


# ---------------------------------------------------------------------------
# Cluster formation
# ---------------------------------------------------------------------------

def validate_cluster(topology: Topology, spec: ClusterSpec, *,
                     edge_id: str) -> list[str]:
    """Independent invariant checks; returns human-readable violations."""
    out: list[str] = []
    members = spec.members
    if not members:
        return ["cluster has no members"]
    if len(set(members)) != len(members):
        out.append("cluster members must be distinct")
    for node_id in members:
        if node_id not in topology.nodes:
            out.append(f"unknown member {node_id}")
    if out:
        return out
    for a, b in zip(members, members[1:]):
        kind = topology.transport_kind(a, b)
        if topology.link(a, b, kind) is None:
            out.append(f"consecutive members {a},{b} lack a {kind} link")
    block_holders = members if len(members) == 1 else members[1:]
    for node_id in block_holders:
        if topology.nodes[node_id].kind == "client" and not topology.cs(node_id, edge_id):
            out.append(f"block holder {node_id} lacks a CS link to the edge "
                       f"server {edge_id}")
    if spec.role == "inference" and spec.start_point != spec.end_point:
        kind = topology.transport_kind(spec.end_point, spec.start_point)
        if topology.link(spec.end_point, spec.start_point, kind) is None:
            out.append(f"end point {spec.end_point} lacks a {kind} link back to "
                       f"start point {spec.start_point} for result feedback")
    return out


def _rank_start_points(topology: Topology, edge_id: str,
                       data_size: Mapping[str, float],
                       data_quality: Mapping[str, float],
                       require_cs: bool) -> list[str]:
    # start points of multi-member chains hold no tunable block, so a CS
    # link is only mandatory when the chain is the single member
    candidates = [c for c in topology.clients()
                  if data_size.get(c, 0.0) > 0
                  and (not require_cs or topology.cs(c, edge_id))]
    return sorted(candidates,
                  key=lambda c: (-data_quality.get(c, 1.0),
                                 -data_size.get(c, 0.0), c))


def form_clusters(topology: Topology, role: str, k_clusters: int, chain_len: int, *,
                  edge_id: str,
                  data_size: Mapping[str, float] | None = None,
                  data_quality: Mapping[str, float] | None = None,
                  requesters: Sequence[str] | None = None,
                  allow_edge_member: bool = False) -> list[ClusterSpec]:
    """Form `k_clusters` disjoint chains of length `chain_len`.

    Fine-tuning clusters pick start points ranked by data quality then
    data size; inference clusters start at the requesting clients. Chains
    extend along the highest-compute linked neighbour first, backtracking
    on dead ends. The edge server may take the final slot of a chain when
    `allow_edge_member` is set and no client fits.
    """
    if role not in ("finetune", "inference"):
        raise ValueError(f"role must be 'finetune' or 'inference', got {role!r}")
    if k_clusters < 1 or chain_len < 1:
        raise ValueError("k_clusters and chain_len must be >= 1")
    data_size = dict(data_size or {c: 1.0 for c in topology.clients()})
    data_quality = dict(data_quality or {})

    if role == "inference":
        if requesters is None:
            raise ValueError("inference clustering needs the requesting clients")
        if len(requesters) != k_clusters:
            raise ValueError(f"need {k_clusters} requesters, got {len(requesters)}")
        starts_pool = list(requesters)
    else:
        starts_pool = _rank_start_points(topology, edge_id, data_size, data_quality,
                                         require_cs=(chain_len == 1))

    failure = {"constraint": "insufficient-clients",
               "message": f"could not form {k_clusters} disjoint chains of "
                          f"length {chain_len}"}

    def note_failure(constraint: str, message: str) -> None:
        failure["constraint"] = constraint
        failure["message"] = message

    def extension_candidates(current: str, used: set[str]) -> list[str]:
        out = [c for c in topology.clients()
               if c not in used and topology.d2d(current, c)
               and topology.cs(c, edge_id)]
        out.sort(key=lambda c: (-topology.nodes[c].compute_rate, c))
        return out

    def chain_completions(chain: list[str], used: set[str]):
        """Yield every valid completion in preference order; `used` holds the
        yielded chain's clients while the consumer works with it."""
        if len(chain) == chain_len:
            spec = ClusterSpec(role=role, members=tuple(chain))
            bad = validate_cluster(topology, spec, edge_id=edge_id)
            if bad:
                note_failure("cluster-invariant", "; ".join(bad))
            else:
                yield chain
            return
        nexts = extension_candidates(chain[-1], used)
        if not nexts:
            note_failure("no-d2d-extension",
                         f"no unused CS-linked client is D2D-linked to {chain[-1]}")
        for nxt in nexts:
            used.add(nxt)
            yield from chain_completions(chain + [nxt], used)
            used.discard(nxt)
        if (allow_edge_member and len(chain) == chain_len - 1
                and topology.cs(chain[-1], edge_id)):
            spec = ClusterSpec(role=role, members=tuple(chain + [edge_id]))
            bad = validate_cluster(topology, spec, edge_id=edge_id)
            if not bad:
                yield chain + [edge_id]
            else:
                note_failure("cluster-invariant", "; ".join(bad))

    def solve(idx: int, used: set[str],
              acc: list[ClusterSpec]) -> list[ClusterSpec] | None:
        if idx == k_clusters:
            return acc
        if role == "inference":
            start = starts_pool[idx]
            if start not in topology.nodes:
                raise InfeasibleClusterError("unknown-requester",
                                             f"requester {start} is not in the topology")
            starts = [start] if start not in used else []
            if not starts:
                note_failure("requester-reuse",
                             f"requester {start} already belongs to a cluster")
        else:
            starts = [s for s in starts_pool if s not in used]
            if not starts:
                note_failure("no-start-point",
                             "no remaining client with data and a CS link to "
                             "the edge server")
        for start in starts:
            used.add(start)
            for chain in chain_completions([start], used):
                spec = ClusterSpec(role=role, members=tuple(chain))
                result = solve(idx + 1, used, acc + [spec])
                if result is not None:
                    return result
            used.discard(start)
        return None

    result = solve(0, set(), [])
    if result is None:
        raise InfeasibleClusterError(failure["constraint"], failure["message"])
    return result
