"""Flat key=value experiment configuration.

Unknown keys are rejected so typos cannot silently fall back to defaults;
missing keys take the documented default.  `dumps_config` emits the
canonical form (every field, fixed order) used for checkpoint echoes and
byte-stable reproduction.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .encoder import EncoderConfig, LAYER_KINDS
from .errors import ConfigError
from .finetune import REPARAM_SCALES
from .graphs import DatasetSpec, MotifSpec


def _positive_int(v):
    return isinstance(v, int) and v >= 1


def _nonneg(v):
    return v >= 0


def _fraction(v):
    return 0.0 <= v <= 1.0


def _open_fraction(v):
    return 0.0 < v < 1.0


_FIELDS = {
    # name: (python type, default, validator, description)
    "seed": (int, 0, lambda v: v >= 0, "master seed for all named RNG streams"),
    "n_graphs": (int, 400, _positive_int, "dataset size"),
    "nodes_min": (int, 8, _positive_int, "minimum nodes per graph"),
    "nodes_max": (int, 16, _positive_int, "maximum nodes per graph"),
    "edge_density": (float, 0.3, _fraction, "independent edge probability"),
    "node_channels": (int, 2, _positive_int, "categorical node attribute channels"),
    "node_cardinality": (int, 4, lambda v: v >= 2, "codes per node channel"),
    "edge_channels": (int, 1, _positive_int, "categorical edge attribute channels"),
    "edge_cardinality": (int, 3, lambda v: v >= 2, "codes per edge channel"),
    "motif_nodes": (int, 3, lambda v: v >= 2, "clique size of the planted motif"),
    "motif_channel": (int, 0, lambda v: v >= 0, "channel carrying the motif code"),
    "motif_code": (int, 1, lambda v: v >= 0, "attribute code marking motif nodes"),
    "positive_fraction": (float, 0.5, _open_fraction, "label-1 share of the dataset"),
    "train_frac": (float, 0.8, _open_fraction, "training split fraction"),
    "valid_frac": (float, 0.1, _open_fraction, "validation split fraction"),
    "test_frac": (float, 0.1, _open_fraction, "test split fraction"),
    "layer_kind": (str, "gin", lambda v: v in LAYER_KINDS, "message-passing layer type"),
    "num_layers": (int, 3, _positive_int, "encoder depth"),
    "hidden_dim": (int, 32, _positive_int, "representation width"),
    "gin_eps": (float, 0.0, lambda v: True, "self-loop weight offset in GIN"),
    "alpha": (float, 0.1, _nonneg, "reconstruction weight during pre-training"),
    "beta": (float, 0.001, _nonneg, "compression weight during fine-tuning"),
    "mask_ratio": (float, 0.25, _fraction, "fraction of nodes masked per view"),
    "lr": (float, 1e-3, lambda v: v >= 0, "Adam learning rate"),
    "epochs_pretrain": (int, 100, _positive_int, "pre-training epochs"),
    "epochs_finetune": (int, 100, _positive_int, "fine-tuning epochs"),
    "batch_size": (int, 32, _positive_int, "graphs per mini-batch"),
    "scheduler_factor": (float, 0.3, _open_fraction, "learning-rate multiplier"),
    "scheduler_period": (int, 30, _positive_int, "epochs between rate drops"),
    "mi_bins": (int, 30, lambda v: v >= 2, "bins per coordinate for MI tracking"),
    "mi_every": (int, 1, _positive_int, "epochs between MI estimates"),
    "reparam_scale": (str, "std", lambda v: v in REPARAM_SCALES,
                      "noise multiplier: exp(logvar/2) or exp(logvar)"),
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_graphs: int = 400
    nodes_min: int = 8
    nodes_max: int = 16
    edge_density: float = 0.3
    node_channels: int = 2
    node_cardinality: int = 4
    edge_channels: int = 1
    edge_cardinality: int = 3
    motif_nodes: int = 3
    motif_channel: int = 0
    motif_code: int = 1
    positive_fraction: float = 0.5
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    layer_kind: str = "gin"
    num_layers: int = 3
    hidden_dim: int = 32
    gin_eps: float = 0.0
    alpha: float = 0.1
    beta: float = 0.001
    mask_ratio: float = 0.25
    lr: float = 1e-3
    epochs_pretrain: int = 100
    epochs_finetune: int = 100
    batch_size: int = 32
    scheduler_factor: float = 0.3
    scheduler_period: int = 30
    mi_bins: int = 30
    mi_every: int = 1
    reparam_scale: str = "std"

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(
            n_graphs=self.n_graphs, nodes_min=self.nodes_min,
            nodes_max=self.nodes_max, edge_density=self.edge_density,
            node_channels=self.node_channels, node_cardinality=self.node_cardinality,
            edge_channels=self.edge_channels, edge_cardinality=self.edge_cardinality,
            motif=MotifSpec(self.motif_nodes, self.motif_channel, self.motif_code),
            positive_fraction=self.positive_fraction)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(layer_kind=self.layer_kind, num_layers=self.num_layers,
                             hidden_dim=self.hidden_dim, gin_eps=self.gin_eps)

    def split_fractions(self):
        return (self.train_frac, self.valid_frac, self.test_frac)

    def validate(self) -> None:
        for f in fields(self):
            _, _, check, _ = _FIELDS[f.name]
            value = getattr(self, f.name)
            if not check(value):
                raise ConfigError(f"config value out of range: {f.name}={value!r}")
        if abs(self.train_frac + self.valid_frac + self.test_frac - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        if self.nodes_min > self.nodes_max:
            raise ConfigError("nodes_min exceeds nodes_max")
        if self.motif_nodes > self.nodes_min:
            raise ConfigError("motif_nodes exceeds nodes_min")
        if self.motif_channel >= self.node_channels:
            raise ConfigError("motif_channel outside node channels")
        if self.motif_code >= self.node_cardinality:
            raise ConfigError("motif_code outside node cardinality")


def parse_config(text: str) -> ExperimentConfig:
    """Parse `key=value` lines; `#` starts a comment; unknown keys error."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, raw_value = line.partition("=")
        key, raw_value = key.strip(), raw_value.strip()
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        kind = _FIELDS[key][0]
        try:
            if kind is int:
                values[key] = int(raw_value)
            elif kind is float:
                values[key] = float(raw_value)
            else:
                values[key] = raw_value
        except ValueError:
            raise ConfigError(
                f"line {lineno}: cannot parse {key}={raw_value!r} as {kind.__name__}"
            ) from None
    config = ExperimentConfig(**values)
    config.validate()
    return config


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dumps_config(config: ExperimentConfig) -> str:
    lines = [f"{f.name}={getattr(config, f.name)}" for f in fields(config)]
    return "\n".join(lines) + "\n"
