"""Topology and multi-domain resource accounting.

Rounds are folded from an event trace into six metrics: model performance,
latency, compute cost, energy, communication overhead, and per-node peak
memory. Latency sums serially inside a group (one cluster chain) and takes
the max across groups, since clusters run in parallel; every other metric
is additive.

Conventions (deliberate modeling choices, not measured facts):
  - one FLOP = one multiply-add, and only matmuls are counted;
  - backward cost = 2x forward cost;
  - a parameter is 8 bytes (float64), no compression;
  - gradient-feedback hops are timed and energized but excluded from the
    communication-overhead totals unless explicitly counted;
  - a node's peak memory is its resident module bytes plus two in-flight
    smashed buffers while fine-tuning (retained input + gradient) or one
    while inferring.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .model import ModelConfig, TunableBlock, block_param_count, param_counts

PARAM_BYTES = 8


class UnknownEndpointError(KeyError):
    """An event references a node or link missing from the topology."""


@dataclass(frozen=True)
class Node:
    id: str
    kind: str                      # cloud | edge | client
    compute_rate: float            # FLOP/s
    power_compute: float = 1.0     # W while computing
    power_tx: float = 1.0          # W while transmitting
    memory_cap: float = float("inf")  # bytes

    def __post_init__(self):
        if self.kind not in ("cloud", "edge", "client"):
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.compute_rate <= 0 or self.power_compute < 0 or self.power_tx < 0:
            raise ValueError(f"node {self.id}: rates and powers must be positive")
        if self.memory_cap <= 0:
            raise ValueError(f"node {self.id}: memory_cap must be positive")


@dataclass(frozen=True)
class Link:
    kind: str                      # CS | D2D
    a: str
    b: str
    bandwidth: float               # bit/s
    energy_per_bit: float = 0.0    # J/bit

    def __post_init__(self):
        if self.kind not in ("CS", "D2D"):
            raise ValueError(f"unknown link kind {self.kind!r}")
        if self.bandwidth <= 0:
            raise ValueError(f"link {self.a}-{self.b}: bandwidth must be positive")
        if self.energy_per_bit < 0:
            raise ValueError(f"link {self.a}-{self.b}: energy_per_bit must be >= 0")


class Topology:
    """Undirected node/link graph with kind-checked links."""

    def __init__(self, nodes: Iterable[Node], links: Iterable[Link]):
        self.nodes: dict[str, Node] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise ValueError(f"duplicate node id {n.id}")
            self.nodes[n.id] = n
        self._links: dict[tuple[str, frozenset], Link] = {}
        for link in links:
            if link.a not in self.nodes or link.b not in self.nodes:
                raise UnknownEndpointError(f"link {link.a}-{link.b} references "
                                           f"an unknown node")
            ka, kb = self.nodes[link.a].kind, self.nodes[link.b].kind
            if link.kind == "D2D" and not (ka == kb == "client"):
                raise ValueError(f"D2D link {link.a}-{link.b} must join two clients")
            if link.kind == "CS" and {ka, kb} not in ({"client", "edge"},
                                                      {"edge", "cloud"}):
                raise ValueError(f"CS link {link.a}-{link.b} must join "
                                 f"client-edge or edge-cloud")
            self._links[(link.kind, frozenset((link.a, link.b)))] = link

    def node(self, node_id: str) -> Node:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownEndpointError(f"unknown node {node_id!r}") from None

    def link(self, a: str, b: str, kind: str) -> Link | None:
        return self._links.get((kind, frozenset((a, b))))

    def d2d(self, a: str, b: str) -> bool:
        return self.link(a, b, "D2D") is not None

    def cs(self, a: str, b: str) -> bool:
        return self.link(a, b, "CS") is not None

    def clients(self) -> list[str]:
        return sorted(i for i, n in self.nodes.items() if n.kind == "client")

    def transport_kind(self, a: str, b: str) -> str:
        """Link kind used between two chain neighbours: D2D for client pairs,
        CS when an edge server takes part."""
        if self.nodes[a].kind == "client" and self.nodes[b].kind == "client":
            return "D2D"
        return "CS"


# ---------------------------------------------------------------------------
# Events
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ComputeEvent:
    node: str
    flops: float
    group: str | None = None


@dataclass(frozen=True)
class TransmitEvent:
    src: str
    dst: str
    link_kind: str                # CS | D2D
    bytes: float                  # total payload
    payload: str                  # tokens | gradient | params | result
    unit_bytes: float = 0.0       # one in-flight buffer, for peak memory
    group: str | None = None


@dataclass(frozen=True)
class SenseEvent:
    node: str
    seconds: float
    group: str | None = None


@dataclass(frozen=True)
class ResidentEvent:
    """Module bytes parked on a node for the duration of the round."""
    node: str
    bytes: float
    group: str | None = None


Event = ComputeEvent | TransmitEvent | SenseEvent | ResidentEvent


# ---------------------------------------------------------------------------
# Timing primitives
# ---------------------------------------------------------------------------

def tx_time(n_bytes: float, link: Link) -> float:
    if n_bytes < 0:
        raise ValueError("bytes must be non-negative")
    return 8.0 * n_bytes / link.bandwidth


def compute_time(flops: float, node: Node) -> float:
    if flops < 0:
        raise ValueError("flops must be non-negative")
    return flops / node.compute_rate


# ---------------------------------------------------------------------------
# FLOP formulas (multiply-adds of the matmuls actually executed)
# ---------------------------------------------------------------------------

def layer_flops_at(config: ModelConfig, n_prompt: int) -> int:
    """One encoder layer forward with `n_prompt` injected prompt rows."""
    t = 1 + n_prompt + config.n_patches
    d, f = config.hidden, config.mlp_dim
    return 4 * t * d * d + 2 * t * t * d + 2 * t * d * f


def layer_flops(config: ModelConfig) -> int:
    return layer_flops_at(config, config.prompt_len)


def embed_flops(config: ModelConfig) -> int:
    return config.n_patches * config.input_dim * config.hidden


def head_flops(config: ModelConfig) -> int:
    return config.hidden * config.n_classes


def block_flops(block: TunableBlock, config: ModelConfig, direction: str) -> int:
    """Execution cost of one block's layers for a single sample."""
    fwd = len(block.prompt_layers) * layer_flops(config)
    if block.has_head:
        fwd += head_flops(config)
    if direction == "forward":
        return fwd
    if direction == "backward":
        return 2 * fwd
    raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")


def prompt_marginal_flops(config: ModelConfig) -> int:
    """Extra matmul work one layer does because of its prompt rows."""
    return layer_flops(config) - layer_flops_at(config, 0)


def training_flops_per_sample(config: ModelConfig, frozen_backbone: bool) -> int:
    """Per-sample optimization workload (forward + 2x backward) over the
    modules being trained. With a frozen backbone only the prompt rows'
    marginal work and the head count; unfrozen training counts everything."""
    if frozen_backbone:
        per = config.n_layers * prompt_marginal_flops(config) + head_flops(config)
    else:
        per = (embed_flops(config) + config.n_layers * layer_flops(config)
               + head_flops(config))
    return 3 * per


def distribution_bytes(config: ModelConfig, parameter_efficient: bool) -> int:
    """Bytes to deliver a model: tunable modules only, or every parameter."""
    counts = param_counts(config)
    return PARAM_BYTES * (counts.tunable if parameter_efficient else counts.total)


def block_param_bytes(config: ModelConfig, block: TunableBlock) -> int:
    return PARAM_BYTES * block_param_count(config, block)


def token_bytes(config: ModelConfig) -> int:
    """Size of one smashed token payload: the persistent rows, prompts stay
    local to their owning client."""
    return config.tokens * config.hidden * PARAM_BYTES


# ---------------------------------------------------------------------------
# Round metrics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CommOverhead:
    cs_bytes: float = 0.0
    d2d_bytes: float = 0.0
    channel_seconds: float = 0.0

    @property
    def total_bytes(self) -> float:
        return self.cs_bytes + self.d2d_bytes


@dataclass(frozen=True)
class RoundMetrics:
    model_performance: float
    latency_s: float
    compute_flops: float
    energy_j: float
    comm: CommOverhead
    peak_memory: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.model_performance <= 1.0:
            raise ValueError("model_performance must lie in [0, 1]")
        for name in ("latency_s", "compute_flops", "energy_j"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def peak_memory_max(self) -> float:
        return max(self.peak_memory.values(), default=0.0)

    def to_flat_dict(self) -> dict[str, float]:
        return {
            "accuracy": self.model_performance,
            "latency_s": self.latency_s,
            "compute_flops": self.compute_flops,
            "energy_j": self.energy_j,
            "cs_bytes": self.comm.cs_bytes,
            "d2d_bytes": self.comm.d2d_bytes,
            "channel_seconds": self.comm.channel_seconds,
            "peak_memory_max": self.peak_memory_max,
        }


def account_round(kind: str, events: Sequence[Event], topology: Topology, *,
                  performance: float = 0.0,
                  count_gradient_comm: bool = False) -> RoundMetrics:
    """Fold an event trace into RoundMetrics.

    Groups (cluster ids) run in parallel: latency is the longest group plus
    all ungrouped serial events. Everything else adds up.
    """
    if kind not in ("finetune", "inference"):
        raise ValueError(f"kind must be 'finetune' or 'inference', got {kind!r}")
    buffers_held = 2 if kind == "finetune" else 1

    group_time: dict[str, float] = {}
    serial_time = 0.0
    flops_total = 0.0
    energy = 0.0
    cs_bytes = d2d_bytes = channel_s = 0.0
    resident: dict[str, float] = {}
    unit_peak: dict[str, float] = {}

    def add_time(group, dur):
        nonlocal serial_time
        if group is None:
            serial_time += dur
        else:
            group_time[group] = group_time.get(group, 0.0) + dur

    for ev in events:
        if isinstance(ev, ComputeEvent):
            node = topology.node(ev.node)
            dur = compute_time(ev.flops, node)
            add_time(ev.group, dur)
            flops_total += ev.flops
            energy += node.power_compute * dur
        elif isinstance(ev, TransmitEvent):
            link = topology.link(ev.src, ev.dst, ev.link_kind)
            if link is None:
                raise UnknownEndpointError(
                    f"no {ev.link_kind} link between {ev.src} and {ev.dst}")
            dur = tx_time(ev.bytes, link)
            add_time(ev.group, dur)
            energy += (topology.node(ev.src).power_tx * dur
                       + link.energy_per_bit * 8.0 * ev.bytes)
            if count_gradient_comm or ev.payload != "gradient":
                if ev.link_kind == "CS":
                    cs_bytes += ev.bytes
                else:
                    d2d_bytes += ev.bytes
                channel_s += dur
            unit = ev.unit_bytes if ev.unit_bytes > 0 else ev.bytes
            if ev.payload in ("tokens", "gradient"):
                for node_id in (ev.src, ev.dst):
                    unit_peak[node_id] = max(unit_peak.get(node_id, 0.0), unit)
        elif isinstance(ev, SenseEvent):
            node = topology.node(ev.node)
            add_time(ev.group, ev.seconds)
            energy += node.power_compute * ev.seconds
        elif isinstance(ev, ResidentEvent):
            topology.node(ev.node)
            resident[ev.node] = resident.get(ev.node, 0.0) + ev.bytes
        else:
            raise TypeError(f"unknown event type {type(ev).__name__}")

    latency = serial_time + max(group_time.values(), default=0.0)
    peak = dict(resident)
    for node_id, unit in unit_peak.items():
        peak[node_id] = peak.get(node_id, 0.0) + buffers_held * unit
    return RoundMetrics(
        model_performance=performance,
        latency_s=latency,
        compute_flops=flops_total,
        energy_j=energy,
        comm=CommOverhead(cs_bytes=cs_bytes, d2d_bytes=d2d_bytes,
                          channel_seconds=channel_s),
        peak_memory=peak,
    )
