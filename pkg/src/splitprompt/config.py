"""Experiment configuration: a small INI schema, validation, hashing.

The file format is flat `key = value` pairs under fixed sections, chosen
for diff-ability. Every knob has a default, so a minimal config is just
`[experiment]` with an id. validate() reports every violated invariant
with its section.key path instead of stopping at the first problem.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

from .model import ModelConfig
from .scheduler import Economy

EXPERIMENT_IDS = ("E1", "E2", "E3", "E4", "E5", "E6")

_SCHEMA: dict[str, dict[str, str]] = {
    "experiment": {"id": "str", "seeds": "int_list", "rounds": "int",
                   "out": "str"},
    "model": {"n_layers": "int", "hidden": "int", "n_heads": "int",
              "n_patches": "int", "prompt_len": "int", "n_classes": "int",
              "mlp_ratio": "float", "in_dim": "int"},
    "data": {"per_class": "int", "noise": "float", "mean_scale": "float",
             "samples_per_client": "int", "classes_per_client": "int",
             "train_ratio": "int", "val_ratio": "int", "sensing_s": "float"},
    "train": {"lr": "float", "batch_size": "int", "local_epochs": "int",
              "epochs": "int", "pretrain_epochs": "int",
              "count_gradient_comm": "bool"},
    "topology": {"n_clients": "int", "d2d": "str", "cs": "str",
                 "client_compute_rate": "float", "client_power_compute": "float",
                 "client_power_tx": "float", "client_memory_cap": "float",
                 "edge_compute_rate": "float", "edge_power_compute": "float",
                 "edge_power_tx": "float", "edge_memory_cap": "float",
                 "d2d_bandwidth": "float", "d2d_energy_per_bit": "float",
                 "cs_bandwidth": "float", "cs_energy_per_bit": "float",
                 "data_quality": "float"},
    "clusters": {"k": "int", "chain_len": "int"},
    "economy": {"base_profit": "float", "upgrade_cost": "float",
                "upgrade_increment": "float", "max_level": "int",
                "stream": "str_list"},
    "schedule": {"policies": "str_list", "rs_episodes": "int",
                 "mlcp_variant": "str"},
}


@dataclass
class ExperimentConfig:
    experiment_id: str = "E2"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    rounds: int = 5
    out: str = ""

    n_layers: int = 2
    hidden: int = 16
    n_heads: int = 2
    n_patches: int = 16
    prompt_len: int = 2
    n_classes: int = 5
    mlp_ratio: float = 4.0
    in_dim: int = 16

    per_class: int = 60
    noise: float = 2.5
    mean_scale: float = 2.4
    samples_per_client: int = 30
    classes_per_client: int = 2
    train_ratio: int = 4
    val_ratio: int = 1
    sensing_s: float = 0.001

    lr: float = 0.05
    batch_size: int = 10
    local_epochs: int = 1
    epochs: int = 8
    pretrain_epochs: int = 12
    count_gradient_comm: bool = False

    n_clients: int = 6
    d2d: str = "complete"
    cs: str = "all"
    client_compute_rate: float = 1e9
    client_power_compute: float = 2.0
    client_power_tx: float = 1.0
    client_memory_cap: float = 1e9
    edge_compute_rate: float = 1e10
    edge_power_compute: float = 10.0
    edge_power_tx: float = 5.0
    edge_memory_cap: float = 1e10
    d2d_bandwidth: float = 1e7
    d2d_energy_per_bit: float = 1e-9
    cs_bandwidth: float = 5e7
    cs_energy_per_bit: float = 2e-9
    data_quality: float = 1.0

    k_clusters: int = 2
    chain_len: int = 3

    base_profit: float = 50.0
    upgrade_cost: float = 50.0
    upgrade_increment: float = 25.0
    max_level: int = 2
    stream: tuple[str, ...] = ("A", "A", "B", "C", "C", "C", "C", "C", "C", "C")

    policies: tuple[str, ...] = ("MLCP", "MSIP", "RS")
    rs_episodes: int = 1000
    mlcp_variant: str = "oracle"

    def model_config(self) -> ModelConfig:
        return ModelConfig(n_layers=self.n_layers, hidden=self.hidden,
                           n_heads=self.n_heads, n_patches=self.n_patches,
                           prompt_len=self.prompt_len, n_classes=self.n_classes,
                           mlp_ratio=self.mlp_ratio, in_dim=self.in_dim)

    def economy(self) -> Economy:
        return Economy(base_profit=self.base_profit, upgrade_cost=self.upgrade_cost,
                       upgrade_increment=self.upgrade_increment,
                       max_level=self.max_level)

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(dc_fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = " ".join(str(v) for v in value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]


_KEY_TO_FIELD = {
    ("experiment", "id"): "experiment_id",
    ("clusters", "k"): "k_clusters",
}

# Calibrated per-experiment defaults; every file key still overrides them.
# E4 fine-tunes a single cluster so its data covers exactly
# classes_per_client labels; E5 gives each of six clusters one fresh class
# so every added cluster contributes new personalized data.
_PRESETS: dict[str, dict] = {
    "E1": {"epochs": 8},
    "E2": {},
    "E3": {"epochs": 6},
    "E4": {"n_clients": 5, "k_clusters": 1, "chain_len": 3},
    "E5": {"n_classes": 6, "n_clients": 6, "k_clusters": 6, "chain_len": 1,
           "classes_per_client": 1, "samples_per_client": 24},
    "E6": {},
}


def preset(experiment_id: str) -> ExperimentConfig:
    """Experiment config with the calibrated defaults for one experiment."""
    cfg = ExperimentConfig()
    cfg.experiment_id = experiment_id
    for name, value in _PRESETS.get(experiment_id, {}).items():
        setattr(cfg, name, value)
    return cfg


def _field_name(section: str, key: str) -> str:
    return _KEY_TO_FIELD.get((section, key), key)


def _parse_value(kind: str, raw: str, path: str, diags: list[str]):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(tok) for tok in raw.split())
        if kind == "str_list":
            return tuple(raw.split())
        return raw
    except ValueError:
        diags.append(f"{path}: cannot parse {raw!r} as {kind}")
        return None


def load_config(path: str | Path) -> tuple[ExperimentConfig | None, list[str]]:
    """Parse and validate; returns (config, diagnostics). The config is None
    only when the file cannot be parsed at all."""
    diags: list[str] = []
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        return None, [f"experiment: cannot read config: {exc}"]
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        return None, [f"experiment: parse error: {exc}".replace("\n", " ")]

    experiment_id = parser.get("experiment", "id", fallback="E2").strip()
    cfg = preset(experiment_id) if experiment_id in _PRESETS else ExperimentConfig()
    cfg.experiment_id = experiment_id
    for section in parser.sections():
        if section not in _SCHEMA:
            diags.append(f"{section}: unknown section")
            continue
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                diags.append(f"{section}.{key}: unknown key")
                continue
            value = _parse_value(_SCHEMA[section][key], raw, f"{section}.{key}", diags)
            if value is not None:
                setattr(cfg, _field_name(section, key), value)
    diags.extend(validate_experiment(cfg))
    return cfg, diags


def validate_experiment(cfg: ExperimentConfig) -> list[str]:
    diags: list[str] = []
    if cfg.experiment_id not in EXPERIMENT_IDS:
        diags.append(f"experiment.id: unknown experiment {cfg.experiment_id!r} "
                     f"(expected one of {', '.join(EXPERIMENT_IDS)})")
    if not cfg.seeds:
        diags.append("experiment.seeds: must list at least one seed")
    if cfg.rounds < 1:
        diags.append(f"experiment.rounds: must be >= 1 (got {cfg.rounds})")

    for violation in cfg.model_config().violations():
        diags.append(f"model.{violation}")

    if cfg.per_class < 1:
        diags.append(f"data.per_class: must be >= 1 (got {cfg.per_class})")
    if cfg.noise <= 0 or cfg.mean_scale <= 0:
        diags.append("data.noise/mean_scale: must be positive")
    if not 1 <= cfg.classes_per_client <= cfg.n_classes:
        diags.append(f"data.classes_per_client: must lie in 1..{cfg.n_classes} "
                     f"(got {cfg.classes_per_client})")
    if cfg.samples_per_client < 1:
        diags.append(f"data.samples_per_client: must be >= 1 "
                     f"(got {cfg.samples_per_client})")
    if cfg.train_ratio < 1 or cfg.val_ratio < 1:
        diags.append("data.train_ratio/val_ratio: must both be >= 1")
    if cfg.sensing_s < 0:
        diags.append(f"data.sensing_s: must be >= 0 (got {cfg.sensing_s})")

    if cfg.lr < 0:
        diags.append(f"train.lr: must be >= 0 (got {cfg.lr})")
    for name in ("batch_size", "local_epochs", "epochs"):
        if getattr(cfg, name) < 1:
            diags.append(f"train.{name}: must be >= 1 (got {getattr(cfg, name)})")
    if cfg.pretrain_epochs < 0:
        diags.append(f"train.pretrain_epochs: must be >= 0 "
                     f"(got {cfg.pretrain_epochs})")

    if cfg.n_clients < 1:
        diags.append(f"topology.n_clients: must be >= 1 (got {cfg.n_clients})")
    d2d_kind = cfg.d2d.split()[0] if cfg.d2d.split() else ""
    if d2d_kind not in ("complete", "line", "ring", "pairs"):
        diags.append(f"topology.d2d: unknown graph kind {cfg.d2d!r}")
    for name in ("client_compute_rate", "edge_compute_rate", "d2d_bandwidth",
                 "cs_bandwidth"):
        if getattr(cfg, name) <= 0:
            diags.append(f"topology.{name}: must be positive "
                         f"(got {getattr(cfg, name)})")
    for name in ("client_power_compute", "client_power_tx", "edge_power_compute",
                 "edge_power_tx", "d2d_energy_per_bit", "cs_energy_per_bit"):
        if getattr(cfg, name) < 0:
            diags.append(f"topology.{name}: must be >= 0 (got {getattr(cfg, name)})")

    if cfg.k_clusters < 1:
        diags.append(f"clusters.k: must be >= 1 (got {cfg.k_clusters})")
    if cfg.chain_len < 1:
        diags.append(f"clusters.chain_len: must be >= 1 (got {cfg.chain_len})")

    try:
        cfg.economy()
    except ValueError as exc:
        diags.append(f"economy: {exc}")
    for tok in cfg.stream:
        if tok not in ("A", "B", "C"):
            diags.append(f"economy.stream: unknown request {tok!r}")
            break
    for pol in cfg.policies:
        if pol not in ("MLCP", "MSIP", "RS"):
            diags.append(f"schedule.policies: unknown policy {pol!r}")
    if cfg.rs_episodes < 1:
        diags.append(f"schedule.rs_episodes: must be >= 1 (got {cfg.rs_episodes})")
    if cfg.mlcp_variant not in ("oracle", "distribution"):
        diags.append(f"schedule.mlcp_variant: must be 'oracle' or 'distribution' "
                     f"(got {cfg.mlcp_variant!r})")
    return diags


def validate_config(path: str | Path) -> list[str]:
    _, diags = load_config(path)
    return diags
