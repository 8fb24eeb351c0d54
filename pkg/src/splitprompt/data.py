"""Synthetic classification data, non-IID partitioning, simulated pre-training.

Samples are Gaussian clusters in patch-feature space: every patch row of a
sample shares its class mean, so the task is linearly separable at the
default spread and trend experiments have measurable headroom.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Backbone, ModelConfig, backward_step, build_model
from .util import chunked, rng_for

Sample = tuple[np.ndarray, int]


class InfeasiblePartitionError(ValueError):
    """The partition spec asks for more samples or classes than exist."""


@dataclass
class SyntheticDataset:
    samples: list[Sample]
    n_classes: int
    seed: int

    def __len__(self) -> int:
        return len(self.samples)

    def by_class(self) -> dict[int, list[int]]:
        pools: dict[int, list[int]] = {c: [] for c in range(self.n_classes)}
        for idx, (_, label) in enumerate(self.samples):
            pools[label].append(idx)
        return pools


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    classes_per_client: int
    samples_per_client: int
    train_ratio: int = 4
    val_ratio: int = 1

    def violations(self, n_classes: int) -> list[str]:
        out = []
        if self.n_clients < 1:
            out.append(f"n_clients: must be >= 1 (got {self.n_clients})")
        if not 1 <= self.classes_per_client <= n_classes:
            out.append(f"classes_per_client: must lie in 1..{n_classes} "
                       f"(got {self.classes_per_client})")
        if self.samples_per_client < 1:
            out.append(f"samples_per_client: must be >= 1 (got {self.samples_per_client})")
        if self.train_ratio < 1 or self.val_ratio < 1:
            out.append("train_ratio/val_ratio: must both be >= 1")
        return out


@dataclass
class ClientSplit:
    clients: list[list[Sample]]
    val: list[Sample]
    client_classes: list[tuple[int, ...]]


def class_means(task_seed: int, n_classes: int, in_dim: int,
                scale: float) -> np.ndarray:
    """Per-class mean vectors: unit directions scaled to `scale`."""
    raw = rng_for(task_seed, "means").standard_normal((n_classes, in_dim))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    return scale * raw / norms


def generate(seed: int, n_classes: int, per_class: int, *,
             n_patches: int = 16, in_dim: int = 16, mean_scale: float = 3.0,
             noise: float = 1.0, task_seed: int | None = None) -> SyntheticDataset:
    """Seeded Gaussian clusters; `task_seed` pins the class means so that
    disjoint sample sets (e.g. a cloud pre-training split) share the task."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if per_class < 0:
        raise ValueError("per_class must be non-negative")
    task = seed if task_seed is None else task_seed
    means = class_means(task, n_classes, in_dim, mean_scale)
    rng = rng_for(seed, "samples")
    samples: list[Sample] = []
    for c in range(n_classes):
        for _ in range(per_class):
            feats = means[c] + noise * rng.standard_normal((n_patches, in_dim))
            samples.append((feats, c))
    order = rng_for(seed, "order").permutation(len(samples))
    return SyntheticDataset(samples=[samples[i] for i in order],
                            n_classes=n_classes, seed=seed)


def partition_noniid(dataset: SyntheticDataset, spec: PartitionSpec) -> ClientSplit:
    """Assign each client exactly `classes_per_client` distinct labels
    (classes handed out round-robin) and equal sample counts, drawn without
    replacement from per-class train pools. The validation slice (per the
    train:val ratio) is held out globally for the edge server."""
    bad = spec.violations(dataset.n_classes)
    if bad:
        raise InfeasiblePartitionError("; ".join(bad))

    pools = dataset.by_class()
    denom = spec.train_ratio + spec.val_ratio
    train_pools: dict[int, list[int]] = {}
    val_idx: list[int] = []
    for c in range(dataset.n_classes):
        pool = pools[c]
        n_val = (len(pool) * spec.val_ratio) // denom
        train_pools[c] = pool[:len(pool) - n_val]
        val_idx.extend(pool[len(pool) - n_val:])

    cpc = spec.classes_per_client
    client_classes = [tuple((j * cpc + i) % dataset.n_classes for i in range(cpc))
                      for j in range(spec.n_clients)]

    cursors = {c: 0 for c in range(dataset.n_classes)}
    clients: list[list[Sample]] = []
    for j, classes in enumerate(client_classes):
        base, rem = divmod(spec.samples_per_client, cpc)
        take = [base + (1 if i < rem else 0) for i in range(cpc)]
        mine: list[Sample] = []
        for cls, n in zip(classes, take):
            pool = train_pools[cls]
            if cursors[cls] + n > len(pool):
                raise InfeasiblePartitionError(
                    f"class {cls} exhausted while filling client {j}: "
                    f"needs {n}, has {len(pool) - cursors[cls]} left")
            for idx in pool[cursors[cls]:cursors[cls] + n]:
                mine.append(dataset.samples[idx])
            cursors[cls] += n
        clients.append(mine)

    val = [dataset.samples[i] for i in val_idx]
    return ClientSplit(clients=clients, val=val, client_classes=client_classes)


def linear_probe_accuracy(train: Sequence[Sample], val: Sequence[Sample],
                          n_classes: int, iters: int = 300, lr: float = 0.5) -> float:
    """Multinomial logistic regression on mean-pooled patch features.

    Independent of the transformer; used to calibrate dataset separability.
    """
    if not train or not val:
        raise ValueError("need non-empty train and val sets")
    x = np.stack([feats.mean(axis=0) for feats, _ in train])
    y = np.array([label for _, label in train])
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-9
    xa = np.concatenate([(x - mu) / sd, np.ones((len(x), 1))], axis=1)
    w = np.zeros((xa.shape[1], n_classes))
    onehot = np.eye(n_classes)[y]
    for _ in range(iters):
        logits = xa @ w
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        w -= lr * xa.T @ (probs - onehot) / len(xa)
    xv = np.stack([feats.mean(axis=0) for feats, _ in val])
    xva = np.concatenate([(xv - mu) / sd, np.ones((len(xv), 1))], axis=1)
    pred = np.argmax(xva @ w, axis=1)
    truth = np.array([label for _, label in val])
    return float((pred == truth).mean())


def pretrain_backbone(config: ModelConfig, cloud_split: Sequence[Sample], *,
                      epochs: int, lr: float = 0.05, batch_size: int = 10,
                      seed: int = 0) -> Backbone:
    """Train the whole model (nothing frozen) on the cloud split, then
    freeze and return the backbone. epochs=0 yields a random frozen backbone."""
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    model = build_model(config, seed=seed, freeze_backbone=False)
    data = list(cloud_split)
    for ep in range(epochs):
        order = rng_for(seed, "pretrain-order", ep).permutation(len(data))
        shuffled = [data[i] for i in order]
        for batch in chunked(shuffled, batch_size):
            backward_step(model, batch, lr)
    model.backbone.freeze_all()
    return model.backbone


# ---------------------------------------------------------------------------
# Dataset cache
# ---------------------------------------------------------------------------

DATASET_CACHE_VERSION = 1


def save_dataset(dataset: SyntheticDataset, path: str | Path) -> None:
    feats = np.stack([f for f, _ in dataset.samples]) if dataset.samples else \
        np.zeros((0, 0, 0))
    labels = np.array([y for _, y in dataset.samples], dtype=np.int64)
    np.savez(path, version=DATASET_CACHE_VERSION, features=feats, labels=labels,
             n_classes=dataset.n_classes, seed=dataset.seed)


def load_dataset(path: str | Path) -> SyntheticDataset:
    with np.load(path) as blob:
        if int(blob["version"]) != DATASET_CACHE_VERSION:
            raise ValueError(f"unsupported dataset cache version {blob['version']}")
        samples = [(blob["features"][i].copy(), int(blob["labels"][i]))
                   for i in range(len(blob["labels"]))]
        return SyntheticDataset(samples=samples, n_classes=int(blob["n_classes"]),
                                seed=int(blob["seed"]))
