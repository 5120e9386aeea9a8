"""Information-controlled fine-tuning on labeled graphs.

The fine-tuning encoder starts from transferred pre-trained weights.  A
compression head of two MLPs maps the pooled graph representation to a
mean and log-variance; sampling uses the reparameterization z_t = mu +
scale(logvar) * epsilon so gradients reach both MLPs.  The objective is
binary cross-entropy on the classifier output plus beta times the closed
-form KL divergence to a standard normal prior, which is the knob that
compresses the representation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, clamp, param_grads
from .encoder import EncoderConfig, encode, readout_mean
from .errors import ContractError, NumericalAbort

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
REPARAM_SCALES = ("std", "var")


@dataclass(frozen=True)
class FinetuneLossParts:
    l_cls: float
    l_fi: float
    l_fine: float
    beta: float

    @classmethod
    def combine(cls, l_cls: float, l_fi: float, beta: float) -> "FinetuneLossParts":
        return cls(l_cls=l_cls, l_fi=l_fi, l_fine=l_cls + beta * l_fi, beta=beta)


LOGVAR_INIT = -5.0


def init_compression_params(hidden_dim: int, rng) -> dict:
    # Both heads start with zero output weights, so the bottleneck
    # representation grows from the origin only along directions training
    # asks for.  The log-variance bias starts negative (small noise); the
    # hard clamp has zero gradient outside its range, so the head must
    # begin well inside it.
    scale = np.sqrt(2.0 / hidden_dim)
    h = hidden_dim
    return {
        "mean.w1": Tensor(scale * rng.standard_normal((h, h)), requires_grad=True),
        "mean.b1": Tensor(np.zeros(h), requires_grad=True),
        "mean.w2": Tensor(np.zeros((h, h)), requires_grad=True),
        "mean.b2": Tensor(np.zeros(h), requires_grad=True),
        "logvar.w1": Tensor(scale * rng.standard_normal((h, h)), requires_grad=True),
        "logvar.b1": Tensor(np.zeros(h), requires_grad=True),
        "logvar.w2": Tensor(np.zeros((h, h)), requires_grad=True),
        "logvar.b2": Tensor(np.full(h, LOGVAR_INIT), requires_grad=True),
    }


def init_classifier_params(hidden_dim: int, rng) -> dict:
    return {
        "w": Tensor(np.sqrt(1.0 / hidden_dim) * rng.standard_normal((hidden_dim, 1)),
                    requires_grad=True),
        "b": Tensor(np.zeros(1), requires_grad=True),
    }


def transfer_parameters(pretrained_encoder: dict) -> dict:
    """Deep copy of the pre-trained encoder blocks, bit-identical values."""
    for name, t in pretrained_encoder.items():
        if not np.all(np.isfinite(t.data)):
            raise ContractError(f"non-finite values in pretrained block {name!r}")
    return {name: Tensor(t.data.copy(), requires_grad=True)
            for name, t in pretrained_encoder.items()}


def _mlp(x, params, prefix):
    hidden = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]),
                            params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, params[f"{prefix}.w2"]),
                  params[f"{prefix}.b2"])


def compress(z_graph: Tensor, params: dict, epsilon, scale: str = "std"):
    """(mu, logvar, z_t) with caller-supplied noise, so the op stays pure.

    `scale` picks the multiplier on epsilon: exp(logvar / 2) (standard
    deviation, default) or exp(logvar) (variance).
    """
    if scale not in REPARAM_SCALES:
        raise ContractError(f"reparam scale must be one of {REPARAM_SCALES}")
    mu = _mlp(z_graph, params, "mean")
    logvar = clamp(_mlp(z_graph, params, "logvar"), LOGVAR_MIN, LOGVAR_MAX)
    eps_t = epsilon if isinstance(epsilon, Tensor) else Tensor(
        np.asarray(epsilon, dtype=np.float64).reshape(mu.data.shape))
    mult = ad.exp(ad.scalar_scale(logvar, 0.5)) if scale == "std" else ad.exp(logvar)
    z_t = ad.add(mu, ad.mul(mult, eps_t))
    return mu, logvar, z_t


def kl_compression_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, diag e^logvar) || N(0, I)) in closed form, meaned over rows."""
    one = Tensor(np.ones(mu.data.shape))
    inner = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(logvar)),
                   ad.add(logvar, one))
    per_row = ad.matmul(inner, Tensor(np.ones((mu.data.shape[1], 1))))
    return ad.scalar_scale(ad.tmean(per_row), 0.5)


def classification_loss(z_t: Tensor, label: int, params: dict):
    """Sigmoid probability and binary cross-entropy for one graph."""
    if label not in (0, 1):
        raise ContractError("label must be 0 or 1")
    logit = ad.add(ad.matmul(z_t, params["w"]), params["b"])
    prob = ad.sigmoid(logit)
    if label == 1:
        loss = ad.scalar_scale(ad.tsum(ad.log(prob)), -1.0)
    else:
        loss = ad.scalar_scale(ad.tsum(ad.log(ad.sub(Tensor(1.0), prob))), -1.0)
    return float(prob.data.reshape(())), loss


def finetune_batch_loss(graphs, epsilons, enc_params, comp_params, clf_params,
                        config: EncoderConfig, beta: float, scale: str = "std"):
    """Tape-differentiable batch objective with the noise draws fixed.

    The KL term is computed for reporting even at beta == 0 but joins the
    loss graph only when beta > 0.
    """
    total = None
    cls_vals, fi_vals = [], []
    for g, eps in zip(graphs, epsilons):
        z = encode(g, enc_params, config)
        pooled = readout_mean(z)
        mu, logvar, z_t = compress(pooled, comp_params, eps, scale)
        _, bce = classification_loss(z_t, g.label, clf_params)
        kl = kl_compression_loss(mu, logvar)
        graph_loss = bce if beta == 0.0 else ad.add(bce, ad.scalar_scale(kl, beta))
        total = graph_loss if total is None else ad.add(total, graph_loss)
        cls_vals.append(bce.item())
        fi_vals.append(kl.item())
    loss = ad.scalar_scale(total, 1.0 / len(graphs))
    return loss, float(np.mean(cls_vals)), float(np.mean(fi_vals))


def finetune_step(batch, enc_params, comp_params, clf_params,
                  config: EncoderConfig, beta: float, rng, scale: str = "std"):
    """One mini-batch update with a fresh noise draw per graph."""
    if not batch:
        raise ContractError("finetune_step needs a nonempty batch")
    if beta < 0:
        raise ContractError("beta must be >= 0")
    h = config.hidden_dim
    epsilons = [rng.standard_normal((1, h)) for _ in batch]
    with Tape() as tape:
        loss, l_cls, l_fi = finetune_batch_loss(
            batch, epsilons, enc_params, comp_params, clf_params, config, beta, scale)
        gradmap = tape.backward(loss)
    grads = {
        "enc": param_grads(tape, gradmap, enc_params),
        "comp": param_grads(tape, gradmap, comp_params),
        "clf": param_grads(tape, gradmap, clf_params),
    }
    return FinetuneLossParts.combine(l_cls, l_fi, beta), grads


def deterministic_scores(graphs, enc_params, comp_params, clf_params,
                         config: EncoderConfig) -> np.ndarray:
    """Classifier probabilities along the noise-free path (epsilon = 0)."""
    h = config.hidden_dim
    zero = np.zeros((1, h))
    scores = np.empty(len(graphs))
    for i, g in enumerate(graphs):
        pooled = readout_mean(encode(g, enc_params, config))
        _, _, z_t = compress(pooled, comp_params, zero)
        prob, _ = classification_loss(z_t, g.label, clf_params)
        scores[i] = prob
    return scores


def lr_at(epoch: int, lr0: float, factor: float, period: int) -> float:
    """Step schedule: the rate is multiplied by `factor` every `period` epochs."""
    return lr0 * factor ** ((epoch - 1) // period)


def run_finetuning(train_graphs, valid_graphs, test_graphs, enc_params,
                   config: EncoderConfig, *, beta: float,
                   lr: float, epochs: int, batch_size: int,
                   scheduler_factor: float, scheduler_period: int,
                   reparam_scale: str, init_rng, epsilon_rng, shuffle_rng,
                   on_epoch=None):
    """Train classifier/compression/encoder jointly with a step-scheduled
    Adam; evaluation each epoch scores the noise-free path.

    Returns (enc, comp, clf, loss history, eval history).
    """
    from .metrics import EvalMetrics, roc_auc

    if not train_graphs:
        raise ContractError("empty training set")
    comp_params = init_compression_params(config.hidden_dim, init_rng)
    clf_params = init_classifier_params(config.hidden_dim, init_rng)
    enc_state = ad.AdamState.init(enc_params)
    comp_state = ad.AdamState.init(comp_params)
    clf_state = ad.AdamState.init(clf_params)

    history, evals = [], []
    n = len(train_graphs)
    train_labels = [g.label for g in train_graphs]
    test_labels = [g.label for g in test_graphs]
    for epoch in range(1, epochs + 1):
        lr_now = lr_at(epoch, lr, scheduler_factor, scheduler_period)
        order = shuffle_rng.permutation(n)
        cls_sum = fi_sum = 0.0
        seen = 0
        for start in range(0, n, batch_size):
            batch = [train_graphs[i] for i in order[start:start + batch_size]]
            parts, grads = finetune_step(batch, enc_params, comp_params,
                                         clf_params, config, beta, epsilon_rng,
                                         reparam_scale)
            if not np.isfinite(parts.l_fine):
                raise NumericalAbort(
                    f"non-finite fine-tuning loss at epoch {epoch}: {parts}")
            ad.adam_step(enc_params, grads["enc"], enc_state, lr_now)
            ad.adam_step(comp_params, grads["comp"], comp_state, lr_now)
            ad.adam_step(clf_params, grads["clf"], clf_state, lr_now)
            k = len(batch)
            cls_sum += parts.l_cls * k
            fi_sum += parts.l_fi * k
            seen += k
        epoch_parts = FinetuneLossParts.combine(cls_sum / seen, fi_sum / seen, beta)
        history.append(epoch_parts)

        train_auc = roc_auc(deterministic_scores(train_graphs, enc_params,
                                                 comp_params, clf_params, config),
                            train_labels)
        test_auc = roc_auc(deterministic_scores(test_graphs, enc_params,
                                                comp_params, clf_params, config),
                           test_labels)
        metrics = EvalMetrics(roc_auc=test_auc, train_auc=train_auc,
                              test_auc=test_auc,
                              generalization_gap=train_auc - test_auc)
        evals.append(metrics)
        if on_epoch is not None:
            on_epoch(epoch, enc_params, comp_params, clf_params, epoch_parts,
                     metrics, lr_now)
    return enc_params, comp_params, clf_params, history, evals
