"""Self-supervised pre-training: masked-view contrast plus reconstruction.

Per graph, a noisy view is made by masking; both views are encoded with
the same encoder.  The contrastive term pushes masked-node/neighbor inner
products up in the original view and down in the noisy view.  The
reconstruction term decodes the original view's node representations back
to attribute logits and scores them with softmax cross-entropy, which
keeps the representation informative about its inputs.  The combined
objective is l_con + alpha * l_pi, averaged over the batch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, param_grads
from .encoder import EncoderConfig, encode, gin_aggregate, init_encoder_params
from .errors import ContractError, NumericalAbort
from .graphs import Graph, GraphSchema, MaskedGraph, mask_graph

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainLossParts:
    l_con: float
    l_pi: float
    l_pre: float
    alpha: float

    @classmethod
    def combine(cls, l_con: float, l_pi: float, alpha: float) -> "PretrainLossParts":
        return cls(l_con=l_con, l_pi=l_pi, l_pre=l_con + alpha * l_pi, alpha=alpha)


def init_decoder_params(config: EncoderConfig, schema: GraphSchema, rng) -> dict:
    """Two single-layer graph decoders: node logits, and per-node edge
    features whose endpoint sums map linearly to edge logits."""
    h = config.hidden_dim
    n_out = schema.node_channels * schema.node_cardinality
    e_out = schema.edge_channels * schema.edge_cardinality
    scale = np.sqrt(2.0 / h)
    return {
        "node.w1": Tensor(scale * rng.standard_normal((h, h)), requires_grad=True),
        "node.b1": Tensor(np.zeros(h), requires_grad=True),
        "node.w2": Tensor(scale * rng.standard_normal((h, n_out)), requires_grad=True),
        "node.b2": Tensor(np.zeros(n_out), requires_grad=True),
        "edge.w1": Tensor(scale * rng.standard_normal((h, h)), requires_grad=True),
        "edge.b1": Tensor(np.zeros(h), requires_grad=True),
        "edge.w2": Tensor(scale * rng.standard_normal((h, h)), requires_grad=True),
        "edge.b2": Tensor(np.zeros(h), requires_grad=True),
        "edge.out_w": Tensor(scale * rng.standard_normal((h, e_out)), requires_grad=True),
        "edge.out_b": Tensor(np.zeros(e_out), requires_grad=True),
    }


def contrastive_loss(z: Tensor, z_noisy: Tensor, mask_pairs) -> Tensor:
    """Sum over pairs of -ln sigma(z_u . z_v) - ln sigma(-z'_u . z'_v)."""
    pairs = np.asarray(mask_pairs, dtype=np.intp).reshape(-1, 2)
    if len(pairs) == 0:
        raise ContractError("contrastive_loss requires at least one mask pair")
    if z.data.shape != z_noisy.data.shape:
        raise ContractError("original and noisy representations must be index-aligned")
    ones = Tensor(np.ones((z.data.shape[1], 1)))
    u, v = pairs[:, 0], pairs[:, 1]
    dots = ad.matmul(ad.mul(ad.gather_rows(z, u), ad.gather_rows(z, v)), ones)
    noisy_dots = ad.matmul(ad.mul(ad.gather_rows(z_noisy, u),
                                  ad.gather_rows(z_noisy, v)), ones)
    pos = ad.tsum(ad.log(ad.sigmoid(dots)))
    neg = ad.tsum(ad.log(ad.sigmoid(ad.scalar_scale(noisy_dots, -1.0))))
    return ad.scalar_scale(ad.add(pos, neg), -1.0)


def _mlp(x, params, w1, b1, w2, b2):
    hidden = ad.relu(ad.add(ad.matmul(x, params[w1]), params[b1]))
    return ad.add(ad.matmul(hidden, params[w2]), params[b2])


def decode(z: Tensor, g: Graph, params: dict):
    """Attribute logits for every node and edge from node representations.

    Returns (node_logits, edge_logits) with widths summed over channels.
    Edge logits come from the endpoint-sum of a per-node output, so they
    are symmetric under swapping an edge's endpoints.
    """
    agg = gin_aggregate(z, g, None, eps=0.0)
    node_logits = _mlp(agg, params, "node.w1", "node.b1", "node.w2", "node.b2")
    edge_h = _mlp(agg, params, "edge.w1", "edge.b1", "edge.w2", "edge.b2")
    if g.num_edges:
        ends = ad.add(ad.gather_rows(edge_h, g.edge_list[:, 0]),
                      ad.gather_rows(edge_h, g.edge_list[:, 1]))
    else:
        ends = Tensor(np.zeros((0, edge_h.data.shape[1])))
    edge_logits = ad.add(ad.matmul(ends, params["edge.out_w"]), params["edge.out_b"])
    return node_logits, edge_logits


def _channel_selector(n_channels: int, width: int, channel: int) -> np.ndarray:
    sel = np.zeros((n_channels * width, width))
    sel[channel * width:(channel + 1) * width] = np.eye(width)
    return sel


def _mean_ce(logits: Tensor, onehot: np.ndarray) -> Tensor:
    probs = ad.softmax_rows(logits)
    picked = ad.matmul(ad.mul(ad.log(probs), Tensor(onehot)),
                       Tensor(np.ones((onehot.shape[1], 1))))
    return ad.scalar_scale(ad.tmean(picked), -1.0)


def reconstruction_loss(node_logits: Tensor, edge_logits: Tensor, g: Graph) -> Tensor:
    """Mean softmax cross-entropy over node slots and edge slots, averaged.

    Every attribute slot is a target, not only masked ones.  A graph with
    no edges contributes its node term alone.
    """
    schema = g.schema
    k_n, k_e = schema.node_cardinality, schema.edge_cardinality
    expected_n = (g.num_nodes, schema.node_channels * k_n)
    if node_logits.data.shape != expected_n:
        raise ContractError(f"node logits shape {node_logits.data.shape} != {expected_n}")
    node_terms = []
    for ch in range(schema.node_channels):
        sel = _channel_selector(schema.node_channels, k_n, ch)
        node_terms.append(_mean_ce(ad.matmul(node_logits, Tensor(sel)),
                                   g.node_onehot(ch, k_n)))
    node_mean = node_terms[0]
    for term in node_terms[1:]:
        node_mean = ad.add(node_mean, term)
    node_mean = ad.scalar_scale(node_mean, 1.0 / len(node_terms))

    if g.num_edges == 0 or schema.edge_channels == 0:
        return node_mean
    expected_e = (g.num_edges, schema.edge_channels * k_e)
    if edge_logits.data.shape != expected_e:
        raise ContractError(f"edge logits shape {edge_logits.data.shape} != {expected_e}")
    edge_terms = []
    for ch in range(schema.edge_channels):
        sel = _channel_selector(schema.edge_channels, k_e, ch)
        edge_terms.append(_mean_ce(ad.matmul(edge_logits, Tensor(sel)),
                                   g.edge_onehot(ch, k_e)))
    edge_mean = edge_terms[0]
    for term in edge_terms[1:]:
        edge_mean = ad.add(edge_mean, term)
    edge_mean = ad.scalar_scale(edge_mean, 1.0 / len(edge_terms))
    return ad.scalar_scale(ad.add(node_mean, edge_mean), 0.5)


def pretrain_batch_loss(graphs, masked_views, enc_params, dec_params,
                        config: EncoderConfig, alpha: float):
    """Tape-differentiable batch objective for a fixed set of masked views.

    When alpha == 0 the reconstruction term is left off the loss graph
    entirely, so decoder gradients are structurally zero.
    """
    total = None
    con_vals, pi_vals = [], []
    for g, view in zip(graphs, masked_views):
        z = encode(g, enc_params, config)
        z_noisy = encode(view.noisy, enc_params, config)
        l_con = contrastive_loss(z, z_noisy, view.mask_pairs)
        node_logits, edge_logits = decode(z, g, dec_params)
        l_pi = reconstruction_loss(node_logits, edge_logits, g)
        graph_loss = l_con if alpha == 0.0 else \
            ad.add(l_con, ad.scalar_scale(l_pi, alpha))
        total = graph_loss if total is None else ad.add(total, graph_loss)
        con_vals.append(l_con.item())
        pi_vals.append(l_pi.item())
    loss = ad.scalar_scale(total, 1.0 / len(graphs))
    return loss, float(np.mean(con_vals)), float(np.mean(pi_vals))


def pretrain_step(batch, enc_params, dec_params, config: EncoderConfig,
                  alpha: float, mask_ratio: float, rng):
    """Mask, encode both views, score, and backprop one mini-batch.

    Graphs whose masked nodes are all isolated produce no contrast pairs
    and are skipped with a warning.
    """
    if not batch:
        raise ContractError("pretrain_step needs a nonempty batch")
    if alpha < 0:
        raise ContractError("alpha must be >= 0")
    kept, views = [], []
    for g in batch:
        view = mask_graph(g, mask_ratio, rng)
        if len(view.mask_pairs) == 0:
            logger.warning("skipping graph with %d nodes: all masked nodes isolated",
                           g.num_nodes)
            continue
        kept.append(g)
        views.append(view)
    if not kept:
        raise ContractError("every graph in the batch was skipped")
    with Tape() as tape:
        loss, l_con, l_pi = pretrain_batch_loss(kept, views, enc_params,
                                                dec_params, config, alpha)
        gradmap = tape.backward(loss)
    enc_grads = param_grads(tape, gradmap, enc_params)
    dec_grads = param_grads(tape, gradmap, dec_params)
    parts = PretrainLossParts.combine(l_con, l_pi, alpha)
    return parts, enc_grads, dec_grads


def run_pretraining(train_graphs, config: EncoderConfig, schema: GraphSchema, *,
                    alpha: float, mask_ratio: float, lr: float, epochs: int,
                    batch_size: int, init_rng, mask_rng, shuffle_rng,
                    on_epoch=None):
    """Adam over shuffled mini-batches; returns params and per-epoch parts.

    `on_epoch(epoch, enc_params, parts)` runs after each epoch's updates,
    which is where the harness hooks in its tracking.
    """
    if not train_graphs:
        raise ContractError("empty training set")
    enc_params = init_encoder_params(config, schema, init_rng)
    dec_params = init_decoder_params(config, schema, init_rng)
    enc_state = ad.AdamState.init(enc_params)
    dec_state = ad.AdamState.init(dec_params)
    history = []
    n = len(train_graphs)
    for epoch in range(1, epochs + 1):
        order = shuffle_rng.permutation(n)
        con_sum = pi_sum = 0.0
        seen = 0
        for start in range(0, n, batch_size):
            batch = [train_graphs[i] for i in order[start:start + batch_size]]
            parts, enc_grads, dec_grads = pretrain_step(
                batch, enc_params, dec_params, config, alpha, mask_ratio, mask_rng)
            if not np.isfinite(parts.l_pre):
                raise NumericalAbort(
                    f"non-finite pre-training loss at epoch {epoch}: {parts}")
            ad.adam_step(enc_params, enc_grads, enc_state, lr)
            ad.adam_step(dec_params, dec_grads, dec_state, lr)
            k = len(batch)
            con_sum += parts.l_con * k
            pi_sum += parts.l_pi * k
            seen += k
        epoch_parts = PretrainLossParts.combine(con_sum / seen, pi_sum / seen, alpha)
        history.append(epoch_parts)
        if on_epoch is not None:
            on_epoch(epoch, enc_params, epoch_parts)
    return enc_params, dec_params, history
