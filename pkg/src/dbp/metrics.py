"""Mutual-information tracking, ROC-AUC, and generalization gap.

The MI estimator is the classic discretization scheme from the training
-dynamics literature: each coordinate of a representation is binned
uniformly over its observed range, a row's code is the tuple of bin
indices, and mutual information is computed from discrete joint counts
in bits.  With finite data, "X" is the sample identity, so I(X;Z) equals
the entropy of the code distribution; absolute values are estimator
-dependent and only trajectory shapes are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, encode, readout_mean
from .errors import ContractError


@dataclass
class JointCounts:
    """Co-occurrence counts of two discrete variables."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ContractError("joint counts must be a 2-D matrix")
        if self.counts.size and self.counts.min() < 0:
            raise ContractError("joint counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MITraceRow:
    epoch: int
    mi_xz_bits: float
    mi_yz_bits: float
    phase: str  # "pretrain" or "finetune"


@dataclass
class EvalMetrics:
    roc_auc: float
    train_auc: float
    test_auc: float
    generalization_gap: float


def mutual_information_discrete(counts) -> float:
    """I(X;Y) in bits from a joint count matrix; zero cells contribute 0."""
    if not isinstance(counts, JointCounts):
        counts = JointCounts(counts)
    c = counts.counts.astype(np.float64)
    total = c.sum()
    if total <= 0:
        raise ContractError("mutual information of an all-zero joint")
    p = c / total
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    mask = p > 0
    ratio = np.ones_like(p)
    ratio[mask] = p[mask] / (px @ py)[mask]
    return float((p[mask] * np.log2(ratio[mask])).sum())


def discretize_activations(rows, n_bins: int):
    """Integer code per row: per-coordinate uniform bins over the observed
    range, the exact maximum landing in the top bin, then tuple interning.

    A coordinate whose observed min equals its max maps to bin 0.
    """
    if n_bins < 2:
        raise ContractError("n_bins must be at least 2")
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ContractError("discretize_activations needs a nonempty 2-D input")
    lo = rows.min(axis=0)
    hi = rows.max(axis=0)
    span = hi - lo
    degenerate = span <= 0
    span = np.where(degenerate, 1.0, span)
    idx = np.floor((rows - lo) / span * n_bins).astype(np.int64)
    idx = np.clip(idx, 0, n_bins - 1)
    idx[:, degenerate] = 0
    interned = {}
    codes = []
    for row in map(tuple, idx):
        codes.append(interned.setdefault(row, len(interned)))
    return codes


def counts_from_codes(left_codes, right_codes) -> JointCounts:
    left = np.asarray(left_codes, dtype=np.int64)
    right = np.asarray(right_codes, dtype=np.int64)
    if left.shape != right.shape:
        raise ContractError("code sequences must be the same length")
    counts = np.zeros((left.max() + 1, right.max() + 1), dtype=np.int64)
    np.add.at(counts, (left, right), 1)
    return JointCounts(counts)


def estimate_epoch_mi(dataset, enc_params, config: EncoderConfig, n_bins: int,
                      compression_params=None):
    """(I(X;Z), I(Y;Z)) in bits over a dataset snapshot.

    X is the sample identity.  Z is the pooled graph representation, or
    the compression head's mean output when compression parameters are
    supplied (the deterministic epsilon = 0 path).
    """
    if not dataset:
        raise ContractError("estimate_epoch_mi needs a nonempty dataset")
    reprs = np.empty((len(dataset), config.hidden_dim))
    labels = np.empty(len(dataset), dtype=np.int64)
    zero = np.zeros((1, config.hidden_dim))
    if compression_params is not None:
        from .finetune import compress
    for i, g in enumerate(dataset):
        pooled = readout_mean(encode(g, enc_params, config))
        if compression_params is not None:
            pooled, _, _ = compress(pooled, compression_params, zero)
        reprs[i] = pooled.data[0]
        labels[i] = g.label
    codes = discretize_activations(reprs, n_bins)
    identity = np.arange(len(dataset))
    mi_xz = mutual_information_discrete(counts_from_codes(identity, codes))
    mi_yz = mutual_information_discrete(counts_from_codes(labels, codes))
    return mi_xz, mi_yz


def _tied_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties at
    half credit; exact via tie-averaged ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ContractError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("roc_auc needs at least one positive and one negative")
    ranks = _tied_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def generalization_gap(train_auc: float, test_auc: float) -> float:
    if not (0.0 <= train_auc <= 1.0 and 0.0 <= test_auc <= 1.0):
        raise ContractError("AUC values must lie in [0, 1]")
    return train_auc - test_auc
