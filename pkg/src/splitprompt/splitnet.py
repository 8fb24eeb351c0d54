"""Serial split execution of the tunable blocks over a client chain.

A chain runs one sample at a time, strictly in order. The start point
holds the data and the (synchronized) embedding; with two or more members
the tunable blocks live on the members after the start, one block each,
and the head sits in the last block. A single-member chain holds
everything locally and produces no smashed traffic.

Only the persistent 1 + n_patches token rows cross a hop; prompt rows are
injected locally by the block that owns them and their outputs are
discarded, so split execution is bitwise identical to monolithic
execution.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import model as M
from .model import SplitModel, TunableBlock
from .simnet import Topology, token_bytes

RESULT_FEEDBACK_BYTES = 8

FORWARD_TOKEN = "forward-token"
BACKWARD_GRADIENT = "backward-gradient"
RESULT_FEEDBACK = "result-feedback"


class ChainCoverageError(ValueError):
    """The chain's blocks do not cover the tunable part exactly once."""


class InfeasibleChainError(RuntimeError):
    """The chain cannot run: a required link or assignment is missing."""


@dataclass(frozen=True)
class SmashedRecord:
    direction: str      # forward-token | backward-gradient | result-feedback
    src: str
    dst: str
    bytes: int


@dataclass(frozen=True)
class ClientChain:
    members: tuple[str, ...]
    blocks: tuple[tuple[str, TunableBlock], ...]   # (holder, block), chain order

    @property
    def start(self) -> str:
        return self.members[0]

    @property
    def end(self) -> str:
        return self.members[-1]

    def holders(self) -> list[str]:
        return [holder for holder, _ in self.blocks]

    def validate(self, n_layers: int) -> None:
        if not self.members:
            raise ChainCoverageError("chain has no members")
        if len(set(self.members)) != len(self.members):
            raise ChainCoverageError("chain members must be distinct")
        expected_holders = (list(self.members) if len(self.members) == 1
                            else list(self.members[1:]))
        if self.holders() != expected_holders:
            raise ChainCoverageError(
                f"blocks must sit on {expected_holders}, got {self.holders()}")
        covered: list[int] = []
        for idx, (_, block) in enumerate(self.blocks):
            covered.extend(block.prompt_layers)
            if block.has_head != (idx == len(self.blocks) - 1):
                raise ChainCoverageError("head must be in the final block only")
        if covered != list(range(1, n_layers + 1)):
            raise ChainCoverageError(
                f"blocks cover layers {covered}, expected 1..{n_layers}")


def build_chain(members: Sequence[str], blocks: Sequence[TunableBlock]) -> ClientChain:
    members = tuple(members)
    holders = list(members) if len(members) == 1 else list(members[1:])
    if len(holders) != len(blocks):
        raise ChainCoverageError(
            f"{len(holders)} block holders but {len(blocks)} blocks")
    return ClientChain(members=members, blocks=tuple(zip(holders, blocks)))


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

def pipeline_forward(chain: ClientChain, model: SplitModel, features):
    """Run one sample through the chain; returns (logits, smashed records)."""
    chain.validate(model.config.n_layers)
    hop_bytes = token_bytes(model.config)
    records: list[SmashedRecord] = []
    tokens = M.embed(model, features)
    current = chain.start
    logits = None
    for holder, block in chain.blocks:
        if holder != current:
            records.append(SmashedRecord(FORWARD_TOKEN, current, holder, hop_bytes))
            current = holder
        for li in block.prompt_layers:
            tokens = M.layer_forward(model, li, tokens)
        if block.has_head:
            logits = M.head_forward(model, tokens[0])
    return logits, records


def pipeline_backward(chain: ClientChain, model: SplitModel, batch, lr: float):
    """One SGD step over `batch`, executed block-by-block along the chain.

    Gradients equal the monolithic backward exactly; token and gradient
    hops are logged per sample (gradients flow holder-to-holder, never
    back into a start point that holds no block).
    """
    chain.validate(model.config.n_layers)
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not batch:
        raise ValueError("batch must be non-empty")
    hop_bytes = token_bytes(model.config)
    records: list[SmashedRecord] = []
    model.zero_grads()
    scale = 1.0 / len(batch)
    total = 0.0
    holders = chain.holders()
    for features, label in batch:
        tokens = M.embed(model, features)
        current = chain.start
        per_block_caches: list[list] = []
        head_cache = None
        logits = None
        for holder, block in chain.blocks:
            if holder != current:
                records.append(SmashedRecord(FORWARD_TOKEN, current, holder, hop_bytes))
                current = holder
            caches = []
            for li in block.prompt_layers:
                tokens, cache = M._layer_fwd(model, li, tokens)
                caches.append(cache)
            per_block_caches.append(caches)
            if block.has_head:
                logits, head_cache = M._head_fwd(model, tokens)
        loss, dlogits = M.softmax_ce(logits, label)
        total += loss

        dtokens = None
        for j in range(len(chain.blocks) - 1, -1, -1):
            holder, block = chain.blocks[j]
            if block.has_head:
                dtokens = M._head_bwd(model, head_cache, dlogits * scale)
            for li, cache in zip(reversed(block.prompt_layers),
                                 reversed(per_block_caches[j])):
                dtokens = M._layer_bwd(model, li, cache, dtokens)
            if j > 0:
                records.append(SmashedRecord(BACKWARD_GRADIENT, holder,
                                             holders[j - 1], hop_bytes))
    for _, block in chain.blocks:
        for li in block.prompt_layers:
            model.prompts[li - 1].tokens.sgd_step(lr)
        if block.has_head:
            model.head.w.sgd_step(lr)
            model.head.b.sgd_step(lr)
    return total * scale, records


def inference_round(chain: ClientChain, model: SplitModel, features,
                    topology: Topology | None = None):
    """Run one unlabeled sample; the end point feeds the predicted class
    back to the start point as a small fixed-size payload."""
    chain.validate(model.config.n_layers)
    if topology is not None and chain.start != chain.end:
        kind = topology.transport_kind(chain.end, chain.start)
        if topology.link(chain.end, chain.start, kind) is None:
            raise InfeasibleChainError(
                f"no {kind} link from end point {chain.end} to start point "
                f"{chain.start} for result feedback")
    logits, records = pipeline_forward(chain, model, features)
    predicted = int(np.argmax(logits))
    records.append(SmashedRecord(RESULT_FEEDBACK, chain.end, chain.start,
                                 RESULT_FEEDBACK_BYTES))
    return predicted, records


def write_smashed_csv(records: Sequence[SmashedRecord], path: str | Path,
                      round_id: int = 0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "direction", "from", "to", "bytes"])
        for rec in records:
            writer.writerow([round_id, rec.direction, rec.src, rec.dst, rec.bytes])
