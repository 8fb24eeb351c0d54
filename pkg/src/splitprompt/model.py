"""Prompt-tuned transformer encoder with a frozen backbone.

The backbone (patch embedding, CLS seed, encoder layers) is ordinarily
frozen; the tunable part is a per-layer block of prompt tokens plus a
linear classification head. Prompt tokens are injected into each layer's
input and their output positions are discarded, so the persistent token
count stays 1 + n_patches through the whole stack.

Forward and backward are written by hand on top of the tensor kernels,
which keeps split execution bitwise identical to monolithic execution.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Param, Tensor, ShapeError
from .util import content_hash, largest_remainder, rng_for


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    hidden: int
    n_heads: int
    n_patches: int
    prompt_len: int
    n_classes: int
    mlp_ratio: float = 4.0
    in_dim: int = 0          # 0 means "same as hidden"
    eps: float = 1e-5

    @property
    def input_dim(self) -> int:
        return self.in_dim if self.in_dim > 0 else self.hidden

    @property
    def mlp_dim(self) -> int:
        return int(round(self.mlp_ratio * self.hidden))

    @property
    def tokens(self) -> int:
        """Persistent token count: CLS plus patches."""
        return 1 + self.n_patches

    @property
    def layer_tokens(self) -> int:
        """Token count inside a layer, with prompts injected."""
        return 1 + self.prompt_len + self.n_patches

    def violations(self) -> list[str]:
        out = []
        for name in ("n_layers", "hidden", "n_heads", "n_patches", "n_classes"):
            if getattr(self, name) <= 0:
                out.append(f"{name}: must be positive (got {getattr(self, name)})")
        if self.prompt_len < 0:
            out.append(f"prompt_len: must be non-negative (got {self.prompt_len})")
        if self.mlp_ratio <= 0:
            out.append(f"mlp_ratio: must be positive (got {self.mlp_ratio})")
        if self.in_dim < 0:
            out.append(f"in_dim: must be non-negative (got {self.in_dim})")
        if self.eps <= 0:
            out.append(f"eps: must be positive (got {self.eps})")
        if self.hidden > 0 and self.n_heads > 0 and self.hidden % self.n_heads != 0:
            out.append(f"hidden: must be divisible by n_heads "
                       f"({self.hidden} % {self.n_heads} != 0)")
        return out

    def validate(self) -> None:
        bad = self.violations()
        if bad:
            raise ValueError("; ".join(bad))


@dataclass
class LayerWeights:
    ln1_g: Param
    ln1_b: Param
    wq: Param
    bq: Param
    wk: Param
    bk: Param
    wv: Param
    bv: Param
    wo: Param
    bo: Param
    ln2_g: Param
    ln2_b: Param
    w1: Param
    b1: Param
    w2: Param
    b2: Param

    FIELDS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
              "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")

    def params(self) -> Iterator[Param]:
        for name in self.FIELDS:
            yield getattr(self, name)


@dataclass
class Backbone:
    embed_w: Param
    embed_b: Param
    cls_seed: Param
    layers: list[LayerWeights]

    def params(self) -> Iterator[Param]:
        yield self.embed_w
        yield self.embed_b
        yield self.cls_seed
        for lw in self.layers:
            yield from lw.params()

    def freeze_all(self) -> None:
        for p in self.params():
            p.freeze()

    def content_hash(self) -> str:
        return content_hash([p.value for p in self.params()])


@dataclass
class PromptModule:
    layer_index: int          # 1-based
    tokens: Param             # (prompt_len, hidden)


@dataclass
class HeadModule:
    w: Param                  # (hidden, n_classes)
    b: Param                  # (n_classes,)


@dataclass(frozen=True)
class TunableBlock:
    """A contiguous slice of the tunable part: prompt modules and maybe the head."""

    index: int
    prompt_layers: tuple[int, ...]   # 1-based layer indices, contiguous
    has_head: bool


@dataclass
class SplitModel:
    config: ModelConfig
    backbone: Backbone
    prompts: list[PromptModule]
    head: HeadModule

    def tunable_params(self) -> Iterator[Param]:
        for pm in self.prompts:
            yield pm.tokens
        yield self.head.w
        yield self.head.b

    def all_params(self) -> Iterator[Param]:
        yield from self.backbone.params()
        yield from self.tunable_params()

    def zero_grads(self) -> None:
        for p in self.all_params():
            p.zero_grad()

    def backbone_hash(self) -> str:
        return self.backbone.content_hash()

    def clone(self) -> "SplitModel":
        return copy.deepcopy(self)


def named_params(model: SplitModel) -> list[tuple[str, Param]]:
    out: list[tuple[str, Param]] = [
        ("backbone.embed_w", model.backbone.embed_w),
        ("backbone.embed_b", model.backbone.embed_b),
        ("backbone.cls_seed", model.backbone.cls_seed),
    ]
    for i, lw in enumerate(model.backbone.layers, start=1):
        for fname in LayerWeights.FIELDS:
            out.append((f"backbone.layer{i}.{fname}", getattr(lw, fname)))
    for pm in model.prompts:
        out.append((f"prompt{pm.layer_index}", pm.tokens))
    out.append(("head.w", model.head.w))
    out.append(("head.b", model.head.b))
    return out


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def init_backbone(config: ModelConfig, rng: np.random.Generator) -> Backbone:
    d, f, ind = config.hidden, config.mlp_dim, config.input_dim
    sd = 1.0 / np.sqrt(d)

    def w(shape, scale):
        return Param.of(rng.standard_normal(shape) * scale)

    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerWeights(
            ln1_g=Param.of(np.ones(d)), ln1_b=Param.of(np.zeros(d)),
            wq=w((d, d), sd), bq=Param.of(np.zeros(d)),
            wk=w((d, d), sd), bk=Param.of(np.zeros(d)),
            wv=w((d, d), sd), bv=Param.of(np.zeros(d)),
            wo=w((d, d), sd), bo=Param.of(np.zeros(d)),
            ln2_g=Param.of(np.ones(d)), ln2_b=Param.of(np.zeros(d)),
            w1=w((d, f), sd), b1=Param.of(np.zeros(f)),
            w2=w((f, d), 1.0 / np.sqrt(f)), b2=Param.of(np.zeros(d)),
        ))
    return Backbone(
        embed_w=w((ind, d), 1.0 / np.sqrt(ind)),
        embed_b=Param.of(np.zeros(d)),
        cls_seed=Param.of(rng.standard_normal(d)),
        layers=layers,
    )


def build_model(config: ModelConfig, seed: int, backbone: Backbone | None = None,
                freeze_backbone: bool = True) -> SplitModel:
    """Assemble a model; prompts and head are freshly initialized from `seed`.

    A provided backbone is deep-copied, so callers can reuse one pretrained
    backbone across many models without sharing state.
    """
    config.validate()
    if backbone is None:
        backbone = init_backbone(config, rng_for(seed, "backbone"))
    else:
        backbone = copy.deepcopy(backbone)
    for p in backbone.params():
        p.frozen = freeze_backbone
        p.zero_grad()

    prompts = []
    for i in range(1, config.n_layers + 1):
        toks = rng_for(seed, "prompt", i).standard_normal(
            (config.prompt_len, config.hidden)) * 0.1
        prompts.append(PromptModule(layer_index=i, tokens=Param.of(toks)))
    head = HeadModule(
        w=Param.of(np.zeros((config.hidden, config.n_classes))),
        b=Param.of(np.zeros(config.n_classes)),
    )
    return SplitModel(config=config, backbone=backbone, prompts=prompts, head=head)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

def embed(model: SplitModel, features: Tensor) -> Tensor:
    """Map (n_patches, in_dim) features to (1 + n_patches, hidden) tokens.

    Row 0 is the CLS seed; the rest are linear patch embeddings.
    """
    cfg = model.config
    if features.shape != (cfg.n_patches, cfg.input_dim):
        raise ShapeError(f"expected features of shape "
                         f"({cfg.n_patches}, {cfg.input_dim}), got {features.shape}")
    patches = T.matmul(features, model.backbone.embed_w.value) + model.backbone.embed_b.value
    return np.concatenate([model.backbone.cls_seed.value[None, :], patches], axis=0)


def _layer_fwd(model: SplitModel, i: int, tokens: Tensor):
    cfg = model.config
    if not 1 <= i <= cfg.n_layers:
        raise IndexError(f"layer index {i} out of range 1..{cfg.n_layers}")
    lw = model.backbone.layers[i - 1]
    p, d, nh = cfg.prompt_len, cfg.hidden, cfg.n_heads
    dh = d // nh

    prompt = model.prompts[i - 1].tokens.value
    z = np.concatenate([tokens[:1], prompt, tokens[1:]], axis=0)

    h1, ln1c = T.layer_norm_with_cache(z, lw.ln1_g.value, lw.ln1_b.value, cfg.eps)
    q = T.matmul(h1, lw.wq.value) + lw.bq.value
    k = T.matmul(h1, lw.wk.value) + lw.bk.value
    v = T.matmul(h1, lw.wv.value) + lw.bv.value

    head_outs, head_caches = [], []
    for h in range(nh):
        sl = slice(h * dh, (h + 1) * dh)
        o, c = T.attention_with_cache(q[:, sl], k[:, sl], v[:, sl])
        head_outs.append(o)
        head_caches.append(c)
    attn_cat = np.concatenate(head_outs, axis=1)
    attn_out = T.matmul(attn_cat, lw.wo.value) + lw.bo.value
    z2 = z + attn_out

    h2, ln2c = T.layer_norm_with_cache(z2, lw.ln2_g.value, lw.ln2_b.value, cfg.eps)
    a1 = T.matmul(h2, lw.w1.value) + lw.b1.value
    g1 = T.gelu(a1)
    mlp_out = T.matmul(g1, lw.w2.value) + lw.b2.value
    z3 = z2 + mlp_out

    out = np.concatenate([z3[:1], z3[1 + p:]], axis=0)
    cache = (h1, ln1c, head_caches, attn_cat, h2, ln2c, a1, g1)
    return out, cache


def layer_forward(model: SplitModel, i: int, tokens: Tensor) -> Tensor:
    """One encoder layer: inject this layer's prompts, run attention + MLP
    with pre-norm residuals, then drop the prompt output rows."""
    out, _ = _layer_fwd(model, i, tokens)
    return out


def _head_fwd(model: SplitModel, tokens: Tensor):
    x = tokens[0]
    logits = T.matmul(x[None, :], model.head.w.value)[0] + model.head.b.value
    return logits, (x,)


def head_forward(model: SplitModel, cls_vector: Tensor) -> Tensor:
    """Logits from the final CLS representation."""
    logits = T.matmul(cls_vector[None, :], model.head.w.value)[0] + model.head.b.value
    return logits


def forward_logits(model: SplitModel, features: Tensor) -> Tensor:
    tokens = embed(model, features)
    for i in range(1, model.config.n_layers + 1):
        tokens = layer_forward(model, i, tokens)
    return head_forward(model, tokens[0])


def predict(model: SplitModel, features: Tensor) -> int:
    # argmax with lowest-index tie-break
    return int(np.argmax(forward_logits(model, features)))


def softmax_ce(logits: Tensor, label: int) -> tuple[float, Tensor]:
    """Cross-entropy of one sample and its gradient w.r.t. the logits."""
    if not 0 <= label < logits.size:
        raise ValueError(f"label {label} out of range 0..{logits.size - 1}")
    shifted = logits - logits.max()
    lse = float(np.log(np.exp(shifted).sum()))
    loss = lse - float(shifted[label])
    dlogits = np.exp(shifted - lse)
    dlogits[label] -= 1.0
    return loss, dlogits


def forward_loss(model: SplitModel, batch: Sequence[tuple[Tensor, int]]):
    """Mean cross-entropy over a labeled batch; returns (loss, logits)."""
    if not batch:
        raise ValueError("batch must be non-empty")
    losses, logit_rows = [], []
    for features, label in batch:
        logits = forward_logits(model, features)
        loss, _ = softmax_ce(logits, label)
        losses.append(loss)
        logit_rows.append(logits)
    return float(np.mean(losses)), np.stack(logit_rows)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def _head_bwd(model: SplitModel, cache, dlogits: Tensor) -> Tensor:
    (x,) = cache
    dxrow, dw = T.matmul_backward(dlogits[None, :], x[None, :], model.head.w.value)
    model.head.w.accumulate(dw)
    model.head.b.accumulate(dlogits)
    dtokens = np.zeros((model.config.tokens, model.config.hidden))
    dtokens[0] = dxrow[0]
    return dtokens


def _layer_bwd(model: SplitModel, i: int, cache, dout: Tensor) -> Tensor:
    cfg = model.config
    lw = model.backbone.layers[i - 1]
    p, d, nh = cfg.prompt_len, cfg.hidden, cfg.n_heads
    dh = d // nh
    h1, ln1c, head_caches, attn_cat, h2, ln2c, a1, g1 = cache

    # prompt output rows were discarded, so their upstream gradient is zero
    dz3 = np.concatenate([dout[:1], np.zeros((p, d)), dout[1:]], axis=0)

    dg1, dw2 = T.matmul_backward(dz3, g1, lw.w2.value)
    lw.w2.accumulate(dw2)
    lw.b2.accumulate(dz3.sum(axis=0))
    da1 = T.gelu_backward(dg1, a1)
    dh2, dw1 = T.matmul_backward(da1, h2, lw.w1.value)
    lw.w1.accumulate(dw1)
    lw.b1.accumulate(da1.sum(axis=0))
    dz2_ln, dg2, db2 = T.layer_norm_backward(dh2, ln2c, lw.ln2_g.value)
    lw.ln2_g.accumulate(dg2)
    lw.ln2_b.accumulate(db2)
    dz2 = dz3 + dz2_ln

    dattn_cat, dwo = T.matmul_backward(dz2, attn_cat, lw.wo.value)
    lw.wo.accumulate(dwo)
    lw.bo.accumulate(dz2.sum(axis=0))

    t = h1.shape[0]
    dq = np.zeros((t, d))
    dk = np.zeros((t, d))
    dv = np.zeros((t, d))
    for h in range(nh):
        sl = slice(h * dh, (h + 1) * dh)
        dqh, dkh, dvh = T.attention_backward(dattn_cat[:, sl], head_caches[h])
        dq[:, sl], dk[:, sl], dv[:, sl] = dqh, dkh, dvh

    dh1 = np.zeros_like(h1)
    for dproj, w_param, b_param in ((dq, lw.wq, lw.bq), (dk, lw.wk, lw.bk),
                                    (dv, lw.wv, lw.bv)):
        dh1_part, dw = T.matmul_backward(dproj, h1, w_param.value)
        dh1 += dh1_part
        w_param.accumulate(dw)
        b_param.accumulate(dproj.sum(axis=0))

    dz_ln, dg1_, db1_ = T.layer_norm_backward(dh1, ln1c, lw.ln1_g.value)
    lw.ln1_g.accumulate(dg1_)
    lw.ln1_b.accumulate(db1_)
    dz = dz2 + dz_ln

    model.prompts[i - 1].tokens.accumulate(dz[1:1 + p])
    return np.concatenate([dz[:1], dz[1 + p:]], axis=0)


def _embed_bwd(model: SplitModel, features: Tensor, dtokens: Tensor) -> None:
    bb = model.backbone
    bb.cls_seed.accumulate(dtokens[0])
    if not bb.embed_w.frozen:
        _, dw = T.matmul_backward(dtokens[1:], features, bb.embed_w.value)
        bb.embed_w.accumulate(dw)
    bb.embed_b.accumulate(dtokens[1:].sum(axis=0))


def accumulate_gradients(model: SplitModel,
                         batch: Sequence[tuple[Tensor, int]]) -> float:
    """Zero all grads, then accumulate the mean-cross-entropy gradient."""
    if not batch:
        raise ValueError("batch must be non-empty")
    model.zero_grads()
    scale = 1.0 / len(batch)
    total = 0.0
    backbone_frozen = model.backbone.embed_w.frozen
    for features, label in batch:
        tokens = embed(model, features)
        caches = []
        for i in range(1, model.config.n_layers + 1):
            tokens, cache = _layer_fwd(model, i, tokens)
            caches.append(cache)
        logits, hcache = _head_fwd(model, tokens)
        loss, dlogits = softmax_ce(logits, label)
        total += loss
        dtokens = _head_bwd(model, hcache, dlogits * scale)
        for i in range(model.config.n_layers, 0, -1):
            dtokens = _layer_bwd(model, i, caches[i - 1], dtokens)
        if not backbone_frozen:
            _embed_bwd(model, features, dtokens)
    return total * scale


def backward_step(model: SplitModel, batch: Sequence[tuple[Tensor, int]],
                  lr: float) -> float:
    """One SGD step on the batch. Frozen params never move."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    loss = accumulate_gradients(model, batch)
    for p in model.all_params():
        p.sgd_step(lr)
    return loss


def check_gradients(model: SplitModel, batch, eps: float = 1e-5) -> float:
    """Finite-difference check over every tunable param; frozen params must
    keep zero grads and are excluded from the comparison."""
    accumulate_gradients(model, batch)
    for p in model.all_params():
        if p.frozen and np.any(p.grad != 0.0):
            raise AssertionError("frozen param accumulated gradient")
    worst = 0.0
    for pm_name, param in named_params(model):
        if param.frozen:
            continue
        if pm_name.startswith("backbone."):
            continue
        analytic = param.grad.copy()
        original = param.value.copy()

        def objective(x, _param=param, _orig=original):
            _param.value[...] = x
            loss, _ = forward_loss(model, batch)
            _param.value[...] = _orig
            return loss

        worst = max(worst, T.fd_check(objective, original, analytic, eps))
    return worst


# ---------------------------------------------------------------------------
# Parameter counting and tunable-part splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamCounts:
    total: int
    tunable: int

    @property
    def ratio(self) -> float:
        return self.tunable / self.total


def param_counts(config: ModelConfig) -> ParamCounts:
    """Exact parameter counts from the configuration alone."""
    d, f, ind = config.hidden, config.mlp_dim, config.input_dim
    per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d)
    backbone = (ind * d + d) + d + config.n_layers * per_layer
    tunable = (config.n_layers * config.prompt_len * d
               + d * config.n_classes + config.n_classes)
    return ParamCounts(total=backbone + tunable, tunable=tunable)


def count_params(model: SplitModel) -> ParamCounts:
    """Counts measured from the actual arrays; matches param_counts(config)."""
    backbone = sum(p.value.size for p in model.backbone.params())
    tunable = sum(p.value.size for p in model.tunable_params())
    return ParamCounts(total=backbone + tunable, tunable=tunable)


def partition_blocks(n_layers: int, n_blocks: int,
                     proportions: Sequence[float] | None = None) -> list[TunableBlock]:
    """Split {prompt modules 1..n_layers, head} into ordered contiguous blocks.

    Block sizes follow largest-remainder apportionment of `proportions`
    (uniform when omitted); the head always lands in the final block.
    """
    if not 1 <= n_blocks <= n_layers + 1:
        raise ValueError(f"n_blocks must lie in 1..{n_layers + 1}, got {n_blocks}")
    props = [1.0] * n_blocks if proportions is None else [float(p) for p in proportions]
    if len(props) != n_blocks:
        raise ValueError("proportions length must equal n_blocks")
    sizes = largest_remainder(n_layers, props)
    return blocks_from_sizes(sizes)


def blocks_from_sizes(sizes: Sequence[int]) -> list[TunableBlock]:
    blocks = []
    start = 1
    for j, size in enumerate(sizes):
        layers = tuple(range(start, start + size))
        start += size
        blocks.append(TunableBlock(index=j, prompt_layers=layers,
                                   has_head=(j == len(sizes) - 1)))
    return blocks


def split_tunable(model: SplitModel, n_blocks: int,
                  proportions: Sequence[float] | None = None) -> list[TunableBlock]:
    return partition_blocks(model.config.n_layers, n_blocks, proportions)


def block_param_count(config: ModelConfig, block: TunableBlock) -> int:
    n = len(block.prompt_layers) * config.prompt_len * config.hidden
    if block.has_head:
        n += config.hidden * config.n_classes + config.n_classes
    return n


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_model(model: SplitModel, path: str | Path) -> None:
    """Versioned JSON checkpoint: config, every param, and a backbone hash."""
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "backbone_hash": model.backbone_hash(),
        "params": {name: {"value": p.value.tolist(), "frozen": p.frozen}
                   for name, p in named_params(model)},
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_model(path: str | Path) -> SplitModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    config = ModelConfig(**payload["config"])
    model = build_model(config, seed=0)
    for name, param in named_params(model):
        entry = payload["params"][name]
        value = np.asarray(entry["value"], dtype=np.float64).reshape(param.value.shape)
        param.value[...] = value
        param.frozen = bool(entry["frozen"])
        param.zero_grad()
    stored = payload["backbone_hash"]
    actual = model.backbone_hash()
    if stored != actual:
        raise ValueError("backbone hash mismatch in checkpoint")
    return model
