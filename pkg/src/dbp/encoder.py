"""Message-passing encoders (GIN and GCN) over categorical-attribute graphs.

Categorical codes are embedded (one table per channel, summed across
channels, with a reserved final row for the MASK token) before any
message passing.  The final layer omits its nonlinearity so node
representations stay signed; mean pooling turns them into a graph
representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .graphs import Graph, GraphSchema

LAYER_KINDS = ("gin", "gcn")


@dataclass(frozen=True)
class EncoderConfig:
    layer_kind: str = "gin"
    num_layers: int = 3
    hidden_dim: int = 32
    gin_eps: float = 0.0

    def validate(self) -> None:
        if self.layer_kind not in LAYER_KINDS:
            raise ContractError(f"layer_kind must be one of {LAYER_KINDS}")
        if self.num_layers < 1 or self.hidden_dim < 1:
            raise ContractError("num_layers and hidden_dim must be >= 1")


EMBED_INIT_STD = 0.1
# Sum aggregation grows representations by roughly the mean degree per
# layer; damping the last layer's output weights keeps initial pair inner
# products inside the live region of the sigmoid in the contrastive loss.
FINAL_LAYER_DAMPING = 0.01


def init_encoder_params(config: EncoderConfig, schema: GraphSchema, rng) -> dict:
    """Fresh parameter blocks; embedding tables carry K+1 rows for MASK."""
    config.validate()
    h = config.hidden_dim
    params = {}
    for ch in range(schema.node_channels):
        params[f"node_embed.{ch}"] = Tensor(
            EMBED_INIT_STD * rng.standard_normal((schema.node_cardinality + 1, h)),
            requires_grad=True)
    for ch in range(schema.edge_channels):
        params[f"edge_embed.{ch}"] = Tensor(
            EMBED_INIT_STD * rng.standard_normal((schema.edge_cardinality + 1, h)),
            requires_grad=True)
    for layer in range(config.num_layers):
        damp = FINAL_LAYER_DAMPING if layer == config.num_layers - 1 else 1.0
        if config.layer_kind == "gin":
            scale = np.sqrt(2.0 / h)
            params[f"layer.{layer}.w1"] = Tensor(scale * rng.standard_normal((h, h)), requires_grad=True)
            params[f"layer.{layer}.b1"] = Tensor(np.zeros(h), requires_grad=True)
            params[f"layer.{layer}.w2"] = Tensor(damp * scale * rng.standard_normal((h, h)), requires_grad=True)
            params[f"layer.{layer}.b2"] = Tensor(np.zeros(h), requires_grad=True)
        else:
            scale = np.sqrt(1.0 / h)
            params[f"layer.{layer}.w"] = Tensor(damp * scale * rng.standard_normal((h, h)), requires_grad=True)
            params[f"layer.{layer}.b"] = Tensor(np.zeros(h), requires_grad=True)
    return params


def embed_inputs(g: Graph, params: dict):
    """Sum of per-channel embedding rows for nodes and for edges."""
    schema = g.schema
    node_feats = None
    for ch in range(schema.node_channels):
        table = params[f"node_embed.{ch}"]
        codes = g.node_attrs[:, ch]
        if codes.size and codes.max() >= table.data.shape[0]:
            raise ContractError("node attribute code outside embedding table")
        rows = ad.gather_rows(table, codes)
        node_feats = rows if node_feats is None else ad.add(node_feats, rows)
    edge_feats = None
    for ch in range(schema.edge_channels):
        table = params[f"edge_embed.{ch}"]
        codes = g.edge_attrs[:, ch]
        if codes.size and codes.max() >= table.data.shape[0]:
            raise ContractError("edge attribute code outside embedding table")
        rows = ad.gather_rows(table, codes)
        edge_feats = rows if edge_feats is None else ad.add(edge_feats, rows)
    return node_feats, edge_feats


def gin_aggregate(h: Tensor, g: Graph, edge_feats, eps: float) -> Tensor:
    """(1 + eps) * h[v] + sum over neighbors u of (h[u] + edge_feat(u, v))."""
    self_term = ad.scalar_scale(h, 1.0 + eps)
    if g.num_edges == 0:
        return self_term
    src, dst, eidx = g.incidence()
    msgs = ad.gather_rows(h, src)
    if edge_feats is not None:
        msgs = ad.add(msgs, ad.gather_rows(edge_feats, eidx))
    agg = ad.scatter_add_rows(msgs, dst, g.num_nodes)
    return ad.add(self_term, agg)


def gin_mlp(x: Tensor, layer_params: dict, prefix: str) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, layer_params[f"{prefix}.w1"]),
                            layer_params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, layer_params[f"{prefix}.w2"]),
                  layer_params[f"{prefix}.b2"])


def gin_layer_forward(h: Tensor, g: Graph, edge_feats, layer_params: dict,
                      eps: float, prefix: str = "layer.0") -> Tensor:
    return gin_mlp(gin_aggregate(h, g, edge_feats, eps), layer_params, prefix)


def _gcn_norm_adj(g: Graph) -> np.ndarray:
    # Dense symmetric-normalized adjacency with self-loops; constant per graph.
    n = g.num_nodes
    a = np.eye(n)
    for u, v in g.edge_list:
        a[u, v] = a[v, u] = 1.0
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


def gcn_layer_forward(h: Tensor, g: Graph, layer_params: dict,
                      prefix: str = "layer.0") -> Tensor:
    mixed = ad.matmul(Tensor(_gcn_norm_adj(g)), h)
    return ad.add(ad.matmul(mixed, layer_params[f"{prefix}.w"]),
                  layer_params[f"{prefix}.b"])


def encode(g: Graph, params: dict, config: EncoderConfig) -> Tensor:
    """Node representations: embedding followed by message-passing layers.

    Every layer output except the last passes through relu.
    """
    h, edge_feats = embed_inputs(g, params)
    for layer in range(config.num_layers):
        prefix = f"layer.{layer}"
        if config.layer_kind == "gin":
            h = gin_layer_forward(h, g, edge_feats, params, config.gin_eps, prefix)
        else:
            h = gcn_layer_forward(h, g, params, prefix)
        if layer < config.num_layers - 1:
            h = ad.relu(h)
    return h


def readout_mean(z: Tensor) -> Tensor:
    """Mean over node rows, returned as a 1 x hidden_dim tensor."""
    n = z.data.shape[0]
    if n == 0:
        raise ContractError("readout over an empty representation")
    return ad.matmul(Tensor(np.full((1, n), 1.0 / n)), z)
