"""Reverse-mode automatic differentiation over dense float64 arrays.

A dynamic tape records primitive operations while it is active; replaying
the tape backwards from a scalar loss yields gradients for every leaf
tensor that participated.  The tape is rebuilt on every training step.
Outside an active tape all primitives are plain numpy calls, which is the
fast path used for evaluation.

Guarded domains: `log` inputs are floored at LOG_FLOOR, `exp` inputs are
capped at EXP_CEIL, and both clamps have zero gradient in the saturated
region.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

LOG_FLOOR = 1e-12
EXP_CEIL = 60.0

_ACTIVE_TAPE = None


class Tensor:
    """Dense float64 array plus the bookkeeping needed for backprop.

    `node_id` identifies the tensor on the tape it was recorded on
    (None for constants that never joined a tape).  Data is treated as
    immutable once the tensor has been consumed by a recorded op; the
    only sanctioned mutation is the optimizer replacing a leaf's `data`
    between steps.
    """

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive ops; a context manager.

    Entry order is topological by construction: node ids are assigned
    at record time, so every input id precedes its consumer's output id.
    """

    def __init__(self):
        self._entries = []  # (output_id, input_ids, backward_fn, kind)
        self._n_nodes = 0

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._entries)

    def _claim(self, t: Tensor) -> int:
        # Assign this tensor a node id on *this* tape.  A tensor carrying
        # an id from an earlier tape is treated as a fresh leaf here.
        if t._tape is not self:
            t._tape = self
            t.node_id = self._n_nodes
            self._n_nodes += 1
        return t.node_id

    def _record(self, kind, inputs, out, backward_fn):
        in_ids = tuple(self._claim(t) if t.requires_grad else None for t in inputs)
        out._tape = self
        out.node_id = self._n_nodes
        self._n_nodes += 1
        out.requires_grad = True
        self._entries.append((out.node_id, in_ids, backward_fn, kind))

    def backward(self, loss: Tensor) -> dict:
        """Gradients of a scalar `loss` w.r.t. every participating leaf.

        Returns a map from node id to gradient array.  Each tape entry is
        visited at most once; fan-out is handled by summing into the
        accumulator before the producing entry is reached.
        """
        if loss.data.size != 1:
            raise ContractError("backward requires a scalar loss")
        if loss._tape is not self or loss.node_id is None:
            raise ContractError("loss was not recorded on this tape")
        grads = {loss.node_id: np.ones_like(loss.data)}
        for out_id, in_ids, backward_fn, _kind in reversed(self._entries):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for in_id, ig in zip(in_ids, backward_fn(g)):
                if in_id is None or ig is None:
                    continue
                cur = grads.get(in_id)
                # Never accumulate in place: backward fns may alias g.
                grads[in_id] = ig if cur is None else cur + ig
        return grads


def param_grads(tape: Tape, gradmap: dict, params: dict) -> dict:
    """Extract per-parameter gradient arrays, zeros where no path exists."""
    out = {}
    for name, t in params.items():
        if t._tape is tape and t.node_id in gradmap:
            g = gradmap[t.node_id]
            out[name] = np.array(g, dtype=np.float64) if g.shape == t.data.shape else g.reshape(t.data.shape)
        else:
            out[name] = np.zeros_like(t.data)
    return out


def _make(kind, inputs, out_data, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        tape._record(kind, inputs, out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", (a, b), ad @ bd,
                 lambda g: (g @ bd.T, ad.T @ g))


def _check_addsub_shapes(kind, a, b):
    sa, sb = a.data.shape, b.data.shape
    ok = (
        sa == sb
        or sa == ()
        or sb == ()
        or (len(sa) == 2 and sb == (sa[1],))
        or (len(sb) == 2 and sa == (sb[1],))
    )
    if not ok:
        raise ShapeError(f"{kind}: incompatible shapes {sa} and {sb}")
    return sa, sb


def _reduce_to(shape, g):
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = _check_addsub_shapes("add", a, b)
    return _make("add", (a, b), a.data + b.data,
                 lambda g: (_reduce_to(sa, g), _reduce_to(sb, g)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = _check_addsub_shapes("sub", a, b)
    return _make("sub", (a, b), a.data - b.data,
                 lambda g: (_reduce_to(sa, g), -_reduce_to(sb, g)))


def mul(a, b) -> Tensor:
    """Elementwise product; shapes must match or one operand is scalar."""
    a, b = _lift(a), _lift(b)
    sa, sb = a.data.shape, b.data.shape
    if not (sa == sb or sa == () or sb == ()):
        raise ShapeError(f"elementwise-mul: incompatible shapes {sa} and {sb}")
    ad, bd = a.data, b.data
    return _make("elementwise-mul", (a, b), ad * bd,
                 lambda g: (_reduce_to(sa, g * bd), _reduce_to(sb, g * ad)))


def relu(x) -> Tensor:
    x = _lift(x)
    xd = x.data
    # Subgradient 0 at exactly 0.
    return _make("relu", (x,), np.maximum(xd, 0.0),
                 lambda g: (g * (xd > 0.0),))


def sigmoid(x) -> Tensor:
    x = _lift(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    s[~pos] = e / (1.0 + e)
    return _make("sigmoid", (x,), s,
                 lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = _lift(x)
    xd = x.data
    y = np.exp(np.minimum(xd, EXP_CEIL))
    # Zero gradient once the cap engages (including exactly at the cap).
    return _make("exp", (x,), y,
                 lambda g: (g * y * (xd < EXP_CEIL),))


def log(x) -> Tensor:
    x = _lift(x)
    xd = x.data
    clamped = np.maximum(xd, LOG_FLOOR)
    return _make("log", (x,), np.log(clamped),
                 lambda g: (g / clamped * (xd > LOG_FLOOR),))


def tsum(x) -> Tensor:
    x = _lift(x)
    shape = x.data.shape
    return _make("sum", (x,), np.asarray(x.data.sum()),
                 lambda g: (np.broadcast_to(g, shape),))


def tmean(x) -> Tensor:
    x = _lift(x)
    shape = x.data.shape
    n = x.data.size
    return _make("mean", (x,), np.asarray(x.data.mean()),
                 lambda g: (np.broadcast_to(g / n, shape),))


def scalar_scale(x, c: float) -> Tensor:
    x = _lift(x)
    c = float(c)
    return _make("scalar-scale", (x,), x.data * c,
                 lambda g: (g * c,))


def concat_rows(tensors) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ContractError("concat-rows needs at least one input")
    if any(t.data.ndim != 2 for t in ts):
        raise ShapeError("concat-rows operates on 2-D tensors")
    cols = {t.data.shape[1] for t in ts}
    if len(cols) != 1:
        raise ShapeError(f"concat-rows: column counts differ: {sorted(cols)}")
    sizes = [t.data.shape[0] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return _make("concat-rows", tuple(ts), np.vstack([t.data for t in ts]), backward)


def gather_rows(x, indices) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError("gather-rows operates on a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ShapeError(f"gather-rows: index out of range for {n} rows")
    shape = x.data.shape

    def backward(g):
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return (z,)

    return _make("gather-rows", (x,), x.data[idx], backward)


def scatter_add_rows(x, indices, num_rows: int) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError("scatter-add-rows operates on a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.shape != (x.data.shape[0],):
        raise ShapeError("scatter-add-rows: one index per input row required")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError(f"scatter-add-rows: index out of range for {num_rows} rows")
    out = np.zeros((num_rows, x.data.shape[1]))
    np.add.at(out, idx, x.data)
    return _make("scatter-add-rows", (x,), out,
                 lambda g: (g[idx],))


def softmax_rows(x) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError("softmax-rows operates on a 2-D tensor")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)
    return _make("softmax-rows", (x,), s,
                 lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def transpose(x) -> Tensor:
    x = _lift(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose operates on a 2-D tensor")
    return _make("transpose", (x,), x.data.T.copy(),
                 lambda g: (g.T,))


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise-mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "sum": tsum,
    "mean": tmean,
    "scalar-scale": scalar_scale,
    "concat-rows": concat_rows,
    "gather-rows": gather_rows,
    "scatter-add-rows": scatter_add_rows,
    "softmax-rows": softmax_rows,
    "transpose": transpose,
}


def primitive_forward(kind: str, inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by kind name; records on the active tape."""
    try:
        op = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive kind {kind!r}") from None
    if kind in ("concat-rows",):
        return op(inputs, **kwargs)
    return op(*inputs, **kwargs)


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi], built from relu so saturated regions get zero grad."""
    if not lo < hi:
        raise ContractError("clamp requires lo < hi")
    x = _lift(x)
    lo_t = Tensor(np.full(x.data.shape, float(lo)))
    hi_t = Tensor(np.full(x.data.shape, float(hi)))
    floored = add(relu(sub(x, lo_t)), lo_t)          # max(x, lo)
    return sub(hi_t, relu(sub(hi_t, floored)))       # min(max(x, lo), hi)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second-moment accumulators, one per parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(t.data) for k, t in params.items()},
            v={k: np.zeros_like(t.data) for k, t in params.items()},
            step=0,
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update, applied in place to `params`."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape or state.m[name].shape != p.data.shape:
            raise ShapeError(f"adam_step: shape mismatch for {name!r}")
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    max_rel_error: float
    passed: bool


def grad_check(f, params: dict, eps: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of `f(params)` to central differences.

    Relative error per entry is |a - n| / max(|a|, |n|, 1e-6); the floor
    keeps finite-difference noise on near-zero gradients from dominating.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError("grad_check eps must lie in [1e-7, 1e-3]")
    with Tape() as tape:
        loss = f(params)
        gradmap = tape.backward(loss)
    analytic = param_grads(tape, gradmap, params)

    entries = []
    for name, t in params.items():
        flat = t.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params).item()
            flat[i] = orig - eps
            fm = f(params).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * eps)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-6)
        rel = float((np.abs(a - numeric) / denom).max()) if flat.size else 0.0
        entries.append(GradCheckEntry(name, rel, rel < tol))
    worst = max((e.max_rel_error for e in entries), default=0.0)
    return GradCheckReport(entries, worst, all(e.passed for e in entries))
