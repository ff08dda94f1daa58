"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: row-major numpy storage, a handful of
operations (exactly the ones the fusion encoder needs), and a recording
tape.  Forward passes run with or without an active tape; gradients are
only tracked while a :class:`Tape` is active, so inference pays no
bookkeeping cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

from .errors import ConfigError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYER_NORM_EPS = 1e-5


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Values are immutable by convention once used in a forward pass;
    training code mutates ``data`` in place only between steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; same-shape semantics, no broadcasting.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def parameter(data) -> Tensor:
    """A leaf tensor that receives gradients."""
    return Tensor(data, requires_grad=True)


class Tape:
    """Records operations in execution order for reverse-mode replay.

    Single-owner: exactly one tape may be active at a time, and a tape
    must not be shared across concurrent training steps.  Replaying the
    records in reverse order propagates gradients to every reachable
    tensor with ``requires_grad``.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, object]] = []

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _record(self, out: Tensor, pull) -> None:
        self._records.append((out, pull))

    def backward(self, root: Tensor) -> None:
        """Seed ``root`` with a unit gradient and replay the tape."""
        if root.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
        root.grad = np.ones_like(root.data)
        for out, pull in reversed(self._records):
            if out.grad is not None:
                pull(out.grad)


_ACTIVE_TAPE: Tape | None = None


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make_out(data: np.ndarray, inputs: tuple[Tensor, ...], pull) -> Tensor:
    """Wrap an op result, recording the backward rule if a tape is active."""
    tape = _ACTIVE_TAPE
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape._record(out, pull)
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def pull(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make_out(a.data @ b.data, (a, b), pull)


def transpose(a: Tensor) -> Tensor:
    def pull(g):
        if a.requires_grad:
            _accumulate(a, g.T)

    return _make_out(a.data.T.copy(), (a,), pull)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add: shapes differ {a.data.shape} vs {b.data.shape}")

    def pull(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _make_out(a.data + b.data, (a, b), pull)


def scale(a: Tensor, s: float) -> Tensor:
    def pull(g):
        if a.requires_grad:
            _accumulate(a, g * s)

    return _make_out(a.data * s, (a,), pull)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def pull(g):
        if a.requires_grad:
            _accumulate(a, g)

    return _make_out(a.data + s, (a,), pull)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul: shapes differ {a.data.shape} vs {b.data.shape}")

    def pull(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make_out(a.data * b.data, (a, b), pull)


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a length-d vector to every row of a (n, d) matrix."""
    if x.data.ndim != 2 or v.data.shape != (x.data.shape[1],):
        raise ShapeError(f"add_rowvec: {x.data.shape} incompatible with {v.data.shape}")

    def pull(g):
        if x.requires_grad:
            _accumulate(x, g)
        if v.requires_grad:
            _accumulate(v, g.sum(axis=0))

    return _make_out(x.data + v.data, (x, v), pull)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)

    def pull(g):
        if x.requires_grad:
            _accumulate(x, g * y * (1.0 - y))

    return _make_out(y, (x,), pull)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def pull(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
            _accumulate(x, g * (cdf + x.data * pdf))

    return _make_out(x.data * cdf, (x,), pull)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    def pull(g):
        if x.requires_grad:
            inner = (g * p).sum(axis=1, keepdims=True)
            _accumulate(x, p * (g - inner))

    return _make_out(p, (x,), pull)


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def pull(g):
        if x.requires_grad:
            _accumulate(x, g - np.exp(y) * g.sum(axis=1, keepdims=True))

    return _make_out(y, (x,), pull)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Row-wise standardization followed by a learned affine map.

    Each row of ``x`` (shape (k, d), d >= 2) is shifted to zero mean and
    scaled to unit variance with ``LAYER_NORM_EPS`` inside the square
    root, then multiplied by ``gain`` and shifted by ``bias`` (both
    length-d vectors).
    """
    if x.data.ndim != 2 or x.data.shape[1] < 2:
        raise ShapeError(f"layer_norm needs (k, d>=2) input, got {x.data.shape}")
    d = x.data.shape[1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm gain/bias must be length-d vectors")
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std

    def pull(g):
        if bias.requires_grad:
            _accumulate(bias, g.sum(axis=0))
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=1, keepdims=True)
            m2 = (gx * xhat).mean(axis=1, keepdims=True)
            _accumulate(x, inv_std * (gx - m1 - xhat * m2))

    return _make_out(xhat * gain.data + bias.data, (x, gain, bias), pull)


def l2_normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm (norm floor 1e-12)."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    norm = np.maximum(norm, 1e-12)
    y = x.data / norm

    def pull(g):
        if x.requires_grad:
            inner = (g * y).sum(axis=1, keepdims=True)
            _accumulate(x, (g - y * inner) / norm)

    return _make_out(y, (x,), pull)


def sum_all(x: Tensor) -> Tensor:
    def pull(g):
        if x.requires_grad:
            _accumulate(x, np.full_like(x.data, float(g)))

    return _make_out(np.asarray(x.data.sum()), (x,), pull)


def mean_diag(x: Tensor) -> Tensor:
    """Mean of the main diagonal of a square matrix."""
    if x.data.ndim != 2 or x.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"mean_diag needs a square matrix, got {x.data.shape}")
    n = x.data.shape[0]

    def pull(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.fill_diagonal(gx, float(g) / n)
            _accumulate(x, gx)

    return _make_out(np.asarray(np.trace(x.data) / n), (x,), pull)


def sum_rowmax(x: Tensor) -> Tensor:
    """Sum of each row's maximum; the subgradient routes to the first
    (lowest-index) maximising column of every row."""
    idx = x.data.argmax(axis=1)
    rows = np.arange(x.data.shape[0])

    def pull(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[rows, idx] = float(g)
            _accumulate(x, gx)

    return _make_out(np.asarray(x.data[rows, idx].sum()), (x,), pull)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    def pull(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, lo:hi] = g
            _accumulate(x, gx)

    return _make_out(x.data[:, lo:hi].copy(), (x,), pull)


def concat_cols(parts: list[Tensor]) -> Tensor:
    widths = [p.data.shape[1] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(widths)])

    def pull(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                _accumulate(p, g[:, lo:hi])

    return _make_out(np.concatenate([p.data for p in parts], axis=1), tuple(parts), pull)


def stack_scalars(grid: list[list[Tensor]]) -> Tensor:
    """Assemble a matrix from scalar tensors, preserving gradient flow."""
    data = np.array([[float(t.data) for t in row] for row in grid])

    def pull(g):
        for i, row in enumerate(grid):
            for j, t in enumerate(row):
                if t.requires_grad:
                    _accumulate(t, np.asarray(g[i, j]))

    flat = tuple(t for row in grid for t in row)
    return _make_out(data, flat, pull)


# ---------------------------------------------------------------------------
# attention

@dataclass
class AttentionParams:
    """Projections for one multi-head attention block.

    The key projection carries no bias: a shift common to every key row
    adds the same constant to all scores of a query row and cancels in
    the softmax, so such a bias could never receive gradient.
    """

    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


def init_attention_params(rng: np.random.Generator, d: int, heads: int,
                          std: float = 0.02) -> AttentionParams:
    if d % heads != 0:
        raise ConfigError(f"head count {heads} does not divide width {d}")
    return AttentionParams(
        heads=heads,
        wq=parameter(trunc_normal(rng, (d, d), std)),
        bq=parameter(np.zeros(d)),
        wk=parameter(trunc_normal(rng, (d, d), std)),
        wv=parameter(trunc_normal(rng, (d, d), std)),
        bv=parameter(np.zeros(d)),
        wo=parameter(trunc_normal(rng, (d, d), std)),
        bo=parameter(np.zeros(d)),
    )


def attention(q_in: Tensor, kv_in: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``q_in`` is (k, d) and ``kv_in`` is (n, d); self-attention is the
    call with ``kv_in = q_in``.  Output is (k, d).
    """
    d = q_in.data.shape[1]
    if kv_in.data.shape[1] != d:
        raise ShapeError(f"attention: widths differ {q_in.data.shape} vs {kv_in.data.shape}")
    if d % params.heads != 0:
        raise ConfigError(f"head count {params.heads} does not divide width {d}")
    dh = d // params.heads
    inv_scale = 1.0 / math.sqrt(dh)

    q = add_rowvec(matmul(q_in, params.wq), params.bq)
    k = matmul(kv_in, params.wk)
    v = add_rowvec(matmul(kv_in, params.wv), params.bv)

    head_outs = []
    for h in range(params.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = slice_cols(q, lo, hi)
        kh = slice_cols(k, lo, hi)
        vh = slice_cols(v, lo, hi)
        weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_scale))
        head_outs.append(matmul(weights, vh))
    merged = concat_cols(head_outs) if params.heads > 1 else head_outs[0]
    return add_rowvec(matmul(merged, params.wo), params.bo)


# ---------------------------------------------------------------------------
# initializers and constants


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02,
                 clip: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples redrawn until within ``clip`` standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bound = clip * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def sinusoidal_table(k: int, d: int) -> np.ndarray:
    """Fixed sine/cosine positional table of shape (k, d)."""
    pos = np.arange(k)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angles = pos / np.power(10000.0, i / d)
    table = np.zeros((k, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d // 2])
    return table
