import math

import numpy as np
import pytest
from scipy import integrate

from dbp.autodiff import Tensor, grad_check
from dbp.encoder import EncoderConfig, encode, init_encoder_params
from dbp.errors import ContractError
from dbp.finetune import (
    FinetuneLossParts, classification_loss, compress, deterministic_scores,
    finetune_batch_loss, finetune_step, init_classifier_params,
    init_compression_params, kl_compression_loss, lr_at, run_finetuning,
    transfer_parameters,
)
from dbp.graphs import DatasetSpec, GraphSchema, generate_synthetic_dataset, split_dataset
from dbp.seeding import named_stream

SCHEMA = GraphSchema(2, 4, 1, 3)
CFG = EncoderConfig(layer_kind="gin", num_layers=2, hidden_dim=6)


def small_graphs(n=8, seed=0):
    return generate_synthetic_dataset(
        DatasetSpec(n_graphs=n, nodes_min=6, nodes_max=9), seed=seed)


# ---------------------------------------------------------------------------
# parameter transfer
# ---------------------------------------------------------------------------

def test_transfer_copies_every_block():
    enc = init_encoder_params(CFG, SCHEMA, np.random.default_rng(0))
    copy = transfer_parameters(enc)
    assert set(copy) == set(enc)
    for k in enc:
        assert copy[k].data.tobytes() == enc[k].data.tobytes()


def test_transfer_is_deep():
    enc = init_encoder_params(CFG, SCHEMA, np.random.default_rng(1))
    copy = transfer_parameters(enc)
    copy["layer.0.w1"].data[0, 0] += 1.0
    assert enc["layer.0.w1"].data[0, 0] != copy["layer.0.w1"].data[0, 0]


def test_transfer_outputs_bit_identical():
    enc = init_encoder_params(CFG, SCHEMA, np.random.default_rng(2))
    copy = transfer_parameters(enc)
    g = small_graphs(1, seed=3)[0]
    assert encode(g, copy, CFG).data.tobytes() == encode(g, enc, CFG).data.tobytes()


# ---------------------------------------------------------------------------
# compression head
# ---------------------------------------------------------------------------

def test_compress_zero_epsilon_returns_mu():
    comp = init_compression_params(6, np.random.default_rng(4))
    z = Tensor(np.random.default_rng(5).normal(size=(1, 6)))
    mu, logvar, z_t = compress(z, comp, np.zeros((1, 6)))
    assert np.array_equal(z_t.data, mu.data)
    assert np.all(logvar.data >= -10.0) and np.all(logvar.data <= 10.0)


def test_compress_unit_sigma_adds_epsilon():
    comp = init_compression_params(4, np.random.default_rng(6))
    for k in ("logvar.w1", "logvar.w2", "logvar.b1", "logvar.b2"):
        comp[k].data = np.zeros_like(comp[k].data)  # logvar == 0 -> sigma == 1
    z = Tensor(np.random.default_rng(7).normal(size=(1, 4)))
    eps = np.array([[0.3, -1.2, 0.0, 2.0]])
    mu, logvar, z_t = compress(z, comp, eps)
    assert np.allclose(logvar.data, 0.0)
    assert np.allclose(z_t.data, mu.data + eps)


def test_compress_variance_scaling_mode():
    comp = init_compression_params(4, np.random.default_rng(8))
    z = Tensor(np.random.default_rng(9).normal(size=(1, 4)))
    eps = np.ones((1, 4))
    mu, logvar, z_std = compress(z, comp, eps, scale="std")
    _, _, z_var = compress(z, comp, eps, scale="var")
    assert np.allclose(z_std.data, mu.data + np.exp(0.5 * logvar.data))
    assert np.allclose(z_var.data, mu.data + np.exp(logvar.data))


def test_compress_monte_carlo_mean():
    comp = init_compression_params(4, np.random.default_rng(10))
    z = Tensor(np.random.default_rng(11).normal(size=(1, 4)))
    mu, logvar, _ = compress(z, comp, np.zeros((1, 4)))
    rng = np.random.default_rng(12)
    n = 10_000
    draws = np.zeros((n, 4))
    for i in range(n):
        _, _, z_t = compress(z, comp, rng.standard_normal((1, 4)))
        draws[i] = z_t.data[0]
    sigma = np.exp(0.5 * logvar.data[0])
    tol = 5.0 * sigma / math.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - mu.data[0]) < tol)


# ---------------------------------------------------------------------------
# KL compression loss
# ---------------------------------------------------------------------------

def kl_quad_oracle(mu, logvar):
    total = 0.0
    for m, lv in zip(mu, logvar):
        s2 = math.exp(lv)

        def integrand(x, m=m, s2=s2):
            q = math.exp(-(x - m) ** 2 / (2 * s2)) / math.sqrt(2 * math.pi * s2)
            p = math.exp(-x ** 2 / 2) / math.sqrt(2 * math.pi)
            if q <= 0.0:
                return 0.0
            return q * math.log(q / p)

        lo = m - 12 * math.sqrt(s2) - 1
        hi = m + 12 * math.sqrt(s2) + 1
        val, _ = integrate.quad(integrand, lo, hi, limit=200)
        total += val
    return total


def test_kl_zero_at_standard_normal():
    assert kl_compression_loss(Tensor(np.zeros((1, 3))),
                               Tensor(np.zeros((1, 3)))).item() == 0.0


def test_kl_unit_mean_is_half():
    val = kl_compression_loss(Tensor([[1.0]]), Tensor([[0.0]])).item()
    assert abs(val - 0.5) < 1e-12
    assert abs(val - kl_quad_oracle([1.0], [0.0])) < 1e-9


def test_kl_matches_quadrature_on_randoms():
    rng = np.random.default_rng(13)
    for _ in range(10):
        mu = rng.normal(size=3)
        logvar = rng.uniform(-2, 2, size=3)
        val = kl_compression_loss(Tensor(mu.reshape(1, 3)),
                                  Tensor(logvar.reshape(1, 3))).item()
        assert abs(val - kl_quad_oracle(mu, logvar)) < 1e-6


def test_kl_nonnegative_and_zero_only_at_origin():
    rng = np.random.default_rng(14)
    for _ in range(50):
        mu = rng.normal(size=(1, 4))
        logvar = rng.uniform(-3, 3, size=(1, 4))
        val = kl_compression_loss(Tensor(mu), Tensor(logvar)).item()
        assert val >= 0.0
        if abs(val) < 1e-12:
            assert np.all(np.abs(mu) < 1e-6) and np.all(np.abs(logvar) < 1e-6)


def test_kl_batch_is_row_mean():
    mu = np.array([[1.0, 0.0], [0.0, 2.0]])
    lv = np.zeros((2, 2))
    val = kl_compression_loss(Tensor(mu), Tensor(lv)).item()
    assert abs(val - 0.5 * (0.5 * 1.0 + 0.5 * 4.0)) < 1e-12


# ---------------------------------------------------------------------------
# classification loss
# ---------------------------------------------------------------------------

def zeroed_classifier(dim=4):
    clf = init_classifier_params(dim, np.random.default_rng(15))
    clf["w"].data = np.zeros_like(clf["w"].data)
    clf["b"].data = np.zeros_like(clf["b"].data)
    return clf


def test_classification_logit_zero():
    clf = zeroed_classifier()
    prob, loss = classification_loss(Tensor(np.ones((1, 4))), 1, clf)
    assert prob == 0.5
    assert abs(loss.item() - math.log(2.0)) < 1e-12


def test_classification_confident_correct():
    clf = zeroed_classifier(1)
    clf["w"].data = np.array([[40.0]])
    prob, loss = classification_loss(Tensor([[1.0]]), 1, clf)
    assert loss.item() < 1e-12


def test_classification_matches_bce_oracle():
    rng = np.random.default_rng(16)
    clf = init_classifier_params(5, rng)
    for _ in range(8):
        z = rng.normal(size=(1, 5))
        y = int(rng.integers(0, 2))
        prob, loss = classification_loss(Tensor(z), y, clf)
        logit = float(z @ clf["w"].data + clf["b"].data)
        p = 1.0 / (1.0 + math.exp(-logit))
        oracle = -y * math.log(p) - (1 - y) * math.log(1.0 - p)
        assert abs(loss.item() - oracle) < 1e-12
        assert abs(prob - p) < 1e-12


def test_classification_bad_label():
    with pytest.raises(ContractError):
        classification_loss(Tensor(np.ones((1, 4))), 2, zeroed_classifier())


# ---------------------------------------------------------------------------
# fine-tune step
# ---------------------------------------------------------------------------

def fresh_stack(seed=17):
    rng = np.random.default_rng(seed)
    enc = init_encoder_params(CFG, SCHEMA, rng)
    comp = init_compression_params(CFG.hidden_dim, rng)
    clf = init_classifier_params(CFG.hidden_dim, rng)
    return enc, comp, clf


def test_beta_zero_equals_cls_and_parts_affine():
    enc, comp, clf = fresh_stack()
    batch = small_graphs(4, seed=18)
    eps = [np.zeros((1, CFG.hidden_dim))] * len(batch)
    vals = {}
    for beta in (0.0, 0.5, 1.0):
        _, l_cls, l_fi = finetune_batch_loss(batch, eps, enc, comp, clf, CFG, beta)
        parts = FinetuneLossParts.combine(l_cls, l_fi, beta)
        assert parts.l_fine == parts.l_cls + beta * parts.l_fi
        vals[beta] = parts
    assert vals[0.0].l_fine == vals[0.0].l_cls
    assert vals[0.0].l_fi > 0.0  # compression still evaluated in forward
    assert (vals[1.0].l_fine - vals[1.0].l_cls) == pytest.approx(
        2.0 * (vals[0.5].l_fine - vals[0.5].l_cls), rel=1e-12)


def test_finetune_gradients_match_finite_differences():
    cfg = EncoderConfig(layer_kind="gin", num_layers=1, hidden_dim=4)
    schema = GraphSchema(1, 3, 1, 2)
    graphs = generate_synthetic_dataset(
        DatasetSpec(n_graphs=2, nodes_min=4, nodes_max=5, node_channels=1,
                    node_cardinality=3, edge_cardinality=2), seed=19)
    rng = np.random.default_rng(20)
    enc = init_encoder_params(cfg, schema, rng)
    comp = init_compression_params(4, rng)
    clf = init_classifier_params(4, rng)
    eps = [rng.standard_normal((1, 4)) for _ in graphs]
    params = {**{f"enc:{k}": v for k, v in enc.items()},
              **{f"comp:{k}": v for k, v in comp.items()},
              **{f"clf:{k}": v for k, v in clf.items()}}

    def f(_):
        loss, _, _ = finetune_batch_loss(graphs, eps, enc, comp, clf, cfg, beta=0.3)
        return loss

    report = grad_check(f, params, eps=1e-5)
    assert report.passed, [(e.name, e.max_rel_error) for e in report.entries if not e.passed]
    # gradients actually reach the compression head through mu and logvar
    mu_grads = [e for e in report.entries if e.name.startswith("comp:")]
    assert mu_grads and all(e.max_rel_error < 1e-4 for e in mu_grads)


def test_finetune_step_runs_and_reports():
    enc, comp, clf = fresh_stack(21)
    parts, grads = finetune_step(small_graphs(4, seed=22), enc, comp, clf, CFG,
                                 beta=0.001, rng=np.random.default_rng(23))
    assert parts.l_cls >= 0.0 and parts.l_fi >= 0.0
    assert set(grads) == {"enc", "comp", "clf"}
    assert any(np.any(g != 0) for g in grads["clf"].values())


# ---------------------------------------------------------------------------
# scheduler + training loop
# ---------------------------------------------------------------------------

def test_lr_schedule_steps():
    assert lr_at(1, 1e-3, 0.3, 30) == 1e-3
    assert lr_at(30, 1e-3, 0.3, 30) == 1e-3
    assert lr_at(31, 1e-3, 0.3, 30) == pytest.approx(3e-4)
    assert lr_at(60, 1e-3, 0.3, 30) == pytest.approx(3e-4)
    assert lr_at(61, 1e-3, 0.3, 30) == pytest.approx(9e-5)
    assert lr_at(91, 1e-3, 0.3, 30) == pytest.approx(2.7e-5)


def run_small_finetune(seed, epochs=3, beta=0.001, transfer_from=None):
    ds = generate_synthetic_dataset(
        DatasetSpec(n_graphs=30, nodes_min=6, nodes_max=9), seed=24)
    train, valid, test = split_dataset(ds, (0.6, 0.2, 0.2), seed=25)
    if transfer_from is None:
        enc = init_encoder_params(CFG, SCHEMA, named_stream(seed, "init"))
    else:
        enc = transfer_parameters(transfer_from)
    return run_finetuning(
        train, valid, test, enc, CFG, beta=beta, lr=1e-3, epochs=epochs,
        batch_size=8, scheduler_factor=0.3, scheduler_period=30,
        reparam_scale="std",
        init_rng=named_stream(seed, "init"),
        epsilon_rng=named_stream(seed, "epsilon"),
        shuffle_rng=named_stream(seed, "shuffle"))


def test_finetune_deterministic_given_seed():
    _, _, _, h1, e1 = run_small_finetune(seed=1)
    _, _, _, h2, e2 = run_small_finetune(seed=1)
    assert [p.l_fine for p in h1] == [p.l_fine for p in h2]
    assert [m.test_auc for m in e1] == [m.test_auc for m in e2]


def test_finetune_evaluation_deterministic():
    enc, comp, clf, _, _ = run_small_finetune(seed=2, epochs=2)
    graphs = small_graphs(6, seed=26)
    s1 = deterministic_scores(graphs, enc, comp, clf, CFG)
    s2 = deterministic_scores(graphs, enc, comp, clf, CFG)
    assert s1.tobytes() == s2.tobytes()


def test_finetune_learns_separation():
    _, _, _, _, evals = run_small_finetune(seed=3, epochs=25, beta=0.0)
    assert evals[-1].train_auc > 0.9
