"""Minimal reverse-mode autodiff on an explicit tape.

Tensors wrap float64 numpy arrays. Every op appends one record to a Tape;
records are topologically ordered by construction, so a single reverse sweep
computes all gradients. Each op checks its output for NaN/inf and fails fast
(padding masks may carry -inf, but they enter ops as plain constants, never
as op outputs).
"""

import itertools
import os

import numpy as np
from scipy.special import erf as _erf, expit as _expit

from .errors import DegenerateRowError, NumericsError
from . import kernels

# Scales the sigmoid backward rule. Anything other than 1.0 corrupts
# gradients on purpose, so the self-check tooling has a real fault to catch.
_FAULT_SCALE = float(os.environ.get("HREB_GRAD_FAULT_SCALE", "1.0"))

_ids = itertools.count()

_SQRT2 = float(np.sqrt(2.0))
_SQRT_PI = float(np.sqrt(np.pi))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "id")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = self.name or f"t{self.id}"
        return f"Tensor({tag}, shape={self.data.shape}, grad={self.requires_grad})"


class Tape:
    """Ordered op records: (op name, input tensors, output tensor, backward fn)."""

    def __init__(self):
        self.records = []

    def add(self, name, inputs, output, backward_fn):
        self.records.append((name, inputs, output, backward_fn))


def record_op(tape, name, inputs, out_data, backward_fn):
    out_data = np.asarray(out_data, dtype=np.float64)
    if not np.all(np.isfinite(out_data)):
        raise NumericsError(f"op {name!r} produced non-finite values")
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if tape is not None and out.requires_grad:
        tape.add(name, inputs, out, backward_fn)
    return out


def backward(tape, loss, keep=()):
    """Run the reverse sweep from a scalar loss.

    Returns {tensor id: this pass's gradient} and also accumulates into each
    reached tensor's .grad attribute, so calling twice without zero_grads
    doubles the stored gradients while the returned map stays per-pass.
    Intermediate gradients are dropped once consumed unless the tensor id is
    listed in keep.
    """
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss")
    keep = frozenset(keep)
    grads = {loss.id: np.ones(())}
    for name, inputs, out, backward_fn in reversed(tape.records):
        if out.id in keep:
            g = grads.get(out.id)
        else:
            g = grads.pop(out.id, None)
        if g is None:
            continue
        in_grads = backward_fn(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None or not t.requires_grad:
                continue
            ig = np.asarray(ig, dtype=np.float64)
            if t.id in grads:
                grads[t.id] = grads[t.id] + ig
            else:
                grads[t.id] = ig
    seen = {}
    for name, inputs, out, backward_fn in tape.records:
        for t in inputs:
            if t.requires_grad and t.id in grads:
                seen[t.id] = t
    for t in seen.values():
        g = grads[t.id]
        t.grad = g.copy() if t.grad is None else t.grad + g
    return grads


def zero_grads(tensors):
    for t in tensors:
        t.grad = None


def _unbroadcast(g, shape):
    # Reduce a broadcasted gradient back to the operand's shape.
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, (have, want) in enumerate(zip(g.shape, shape)):
        if want == 1 and have != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic (numpy broadcasting rules apply).
# ---------------------------------------------------------------------------

def add(tape, a, b):
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return record_op(tape, "add", (a, b), a.data + b.data, bw)


def sub(tape, a, b):
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return record_op(tape, "sub", (a, b), a.data - b.data, bw)


def mul(tape, a, b):
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return record_op(tape, "mul", (a, b), a.data * b.data, bw)


def div(tape, a, b):
    out_data = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out_data / b.data, b.shape),
        )
    return record_op(tape, "div", (a, b), out_data, bw)


def neg(tape, a):
    return record_op(tape, "neg", (a,), -a.data, lambda g: (-g,))


def scale(tape, a, c):
    c = float(c)
    return record_op(tape, "scale", (a,), a.data * c, lambda g: (g * c,))


def clamp_min(tape, a, lo):
    lo = float(lo)
    keep = a.data > lo
    return record_op(tape, "clamp_min", (a,), np.maximum(a.data, lo),
                     lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Linear algebra and shape ops.
# ---------------------------------------------------------------------------

def matmul(tape, a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return record_op(tape, "matmul", (a, b), a.data @ b.data, bw)


def transpose(tape, a):
    return record_op(tape, "transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def concat_cols(tape, a, b):
    split = a.data.shape[1]

    def bw(g):
        return g[:, :split], g[:, split:]
    return record_op(tape, "concat_cols", (a, b),
                     np.concatenate([a.data, b.data], axis=1), bw)


def reverse_rows(tape, a):
    return record_op(tape, "reverse_rows", (a,), a.data[::-1].copy(),
                     lambda g: (g[::-1],))


def slice_rows(tape, a, start, stop):
    start, stop = int(start), int(stop)

    def bw(g):
        da = np.zeros_like(a.data)
        da[start:stop] = g
        return (da,)
    return record_op(tape, "slice_rows", (a,), a.data[start:stop].copy(), bw)


def pad_rows(tape, a, total):
    """Append zero rows until the tensor has `total` rows."""
    n = a.data.shape[0]
    if total < n:
        raise ValueError(f"cannot pad {n} rows down to {total}")
    out_data = np.zeros((total,) + a.data.shape[1:])
    out_data[:n] = a.data
    return record_op(tape, "pad_rows", (a,), out_data, lambda g: (g[:n],))


def gather_rows(tape, table, idx):
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, idx, g)
        return (dt,)
    return record_op(tape, "gather_rows", (table,), table.data[idx], bw)


def repeat_entries(tape, a, reps):
    """Tile each entry of a 1-D tensor `reps` times (head -> per-dim layout)."""
    reps = int(reps)

    def bw(g):
        return (g.reshape(-1, reps).sum(axis=1),)
    return record_op(tape, "repeat_entries", (a,), np.repeat(a.data, reps), bw)


def pick_per_row(tape, a, idx):
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])

    def bw(g):
        da = np.zeros_like(a.data)
        da[rows, idx] = g
        return (da,)
    return record_op(tape, "pick_per_row", (a,), a.data[rows, idx], bw)


def sum_all(tape, a):
    def bw(g):
        return (np.full(a.shape, float(g)),)
    return record_op(tape, "sum_all", (a,), a.data.sum(), bw)


def mean_all(tape, a):
    n = a.data.size

    def bw(g):
        return (np.full(a.shape, float(g) / n),)
    return record_op(tape, "mean_all", (a,), a.data.mean(), bw)


def logsumexp(tape, a, axis):
    """Max-shifted log-sum-exp; -inf entries contribute exactly zero mass."""
    m = a.data.max(axis=axis, keepdims=True)
    out_data = np.squeeze(m, axis=axis) + np.log(
        np.exp(a.data - m).sum(axis=axis))

    def bw(g):
        w = np.exp(a.data - np.expand_dims(out_data, axis))
        return (np.expand_dims(g, axis) * w,)
    return record_op(tape, "logsumexp", (a,), out_data, bw)


# ---------------------------------------------------------------------------
# Pointwise nonlinearities.
# ---------------------------------------------------------------------------

def sigmoid(tape, a):
    y = _expit(a.data)

    def bw(g):
        return (g * y * (1.0 - y) * _FAULT_SCALE,)
    return record_op(tape, "sigmoid", (a,), y, bw)


def tanh(tape, a):
    y = np.tanh(a.data)

    def bw(g):
        return (g * (1.0 - y * y),)
    return record_op(tape, "tanh", (a,), y, bw)


def exp(tape, a):
    y = np.exp(a.data)

    def bw(g):
        return (g * y,)
    return record_op(tape, "exp", (a,), y, bw)


def log(tape, a):
    def bw(g):
        return (g / a.data,)
    return record_op(tape, "log", (a,), np.log(a.data), bw)


def erf(tape, a):
    def bw(g):
        return (g * (2.0 / _SQRT_PI) * np.exp(-np.square(a.data)),)
    return record_op(tape, "erf", (a,), _erf(a.data), bw)


def softplus(tape, a):
    y = np.logaddexp(0.0, a.data)

    def bw(g):
        return (g * _expit(a.data),)
    return record_op(tape, "softplus", (a,), y, bw)


def silu_standard(tape, a):
    s = _expit(a.data)

    def bw(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)
    return record_op(tape, "silu_standard", (a,), a.data * s, bw)


def silu_paper(tape, a):
    # s + x * s * (1 - s): the sigmoid-plus-scaled-derivative form.
    s = _expit(a.data)
    sp = s * (1.0 - s)

    def bw(g):
        return (g * sp * (2.0 + a.data * (1.0 - 2.0 * s)),)
    return record_op(tape, "silu_paper", (a,), s + a.data * sp, bw)


def silu(tape, a, variant):
    if variant == "paper":
        return silu_paper(tape, a)
    if variant == "standard":
        return silu_standard(tape, a)
    raise ValueError(f"unknown silu variant {variant!r}")


# ---------------------------------------------------------------------------
# Row-wise normalizations.
# ---------------------------------------------------------------------------

def layer_norm(tape, x, gain, bias, eps=1e-5):
    """Per-row standardization over features, then affine."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dx = (inv / d) * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        return dx, dgain, dbias
    return record_op(tape, "layer_norm", (x, gain, bias), out_data, bw)


def feature_norm(tape, x, gain, bias, row_mask=None, eps=1e-5):
    """Standardize each feature over the (unmasked) positions, then affine.

    Statistics come only from rows where row_mask is True; every row is
    transformed. This is the batch-statistics alternative to layer_norm for
    variable-length sequences.
    """
    if row_mask is None:
        stat = np.ones(x.data.shape[0], dtype=bool)
    else:
        stat = np.asarray(row_mask, dtype=bool)
    n_stat = int(stat.sum())
    if n_stat == 0:
        raise DegenerateRowError("feature_norm has no unmasked positions")
    sel = x.data[stat]
    mu = sel.mean(axis=0)
    var = sel.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bw(g):
        dxhat = g * gain.data
        dvar = (dxhat * (x.data - mu)).sum(axis=0) * (-0.5) * inv ** 3
        dmu = (dxhat * -inv).sum(axis=0)
        dx = dxhat * inv
        dx[stat] += dvar * 2.0 * (x.data[stat] - mu) / n_stat + dmu / n_stat
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        return dx, dgain, dbias
    return record_op(tape, "feature_norm", (x, gain, bias), out_data, bw)


def softmax_rows(tape, scores, mask=None):
    """Row softmax over unmasked keys. A row with no unmasked key is an error."""
    allowed = _check_mask(scores.data, mask)
    shifted = np.where(allowed, scores.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (w * (g - (g * w).sum(axis=-1, keepdims=True)),)
    return record_op(tape, "softmax_rows", (scores,), w, bw)


def laplace_map(tape, scores, mu, sigma_raw, mask=None):
    """Elementwise Gaussian-CDF squash of attention scores; no renormalization.

    mu and sigma_raw are scalar tensors; the scale is softplus(sigma_raw) so
    it stays positive. Masked entries map to exactly zero weight.
    """
    allowed = _check_mask(scores.data, mask)
    sig = float(np.logaddexp(0.0, sigma_raw.data))
    u = (scores.data - float(mu.data)) / (sig * _SQRT2)
    out_data = np.where(allowed, 0.5 * (1.0 + _erf(u)), 0.0)

    def bw(g):
        gm = np.where(allowed, g, 0.0)
        dw_du = np.exp(-u * u) / _SQRT_PI
        ds = gm * dw_du / (sig * _SQRT2)
        dmu = -ds.sum()
        dsig = (gm * dw_du * (-u)).sum() / sig
        dsig_raw = dsig * float(_expit(sigma_raw.data))
        return ds, np.float64(dmu), np.float64(dsig_raw)
    return record_op(tape, "laplace_map", (scores, mu, sigma_raw), out_data, bw)


def normalize_rows(tape, a, mask=None):
    """Divide each row by its sum over unmasked entries; masked entries read 0.

    Row sums must be strictly positive; a non-positive sum makes the row an
    undefined weight distribution and raises DegenerateRowError.
    """
    allowed = _check_mask(a.data, mask)
    masked = np.where(allowed, a.data, 0.0)
    s = masked.sum(axis=-1, keepdims=True)
    if np.any(s <= 0.0):
        row = int(np.argmax((s <= 0.0).ravel()))
        raise DegenerateRowError(f"row {row} sums to {float(s.ravel()[row])}; cannot normalize")
    out_data = masked / s

    def bw(g):
        gm = np.where(allowed, g, 0.0)
        return (np.where(allowed, (gm - (gm * out_data).sum(axis=-1, keepdims=True)) / s, 0.0),)
    return record_op(tape, "normalize_rows", (a,), out_data, bw)


def _check_mask(data, mask):
    # Masks may broadcast on trailing axes (e.g. one key-mask row shared by
    # every query). Every row must keep at least one live entry.
    if mask is None:
        return np.ones(data.shape, dtype=bool)
    allowed = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
    dead = ~allowed.any(axis=-1)
    if dead.any():
        row = int(np.argmax(dead.ravel()))
        raise DegenerateRowError(f"attention row {row} has every key masked")
    return allowed


def add_rel_bias(tape, scores, bias):
    """Add a learned bucketed relative-position bias to (query, key) scores.

    bias has odd length 2w+1; offset j - i is clipped into [-w, w].
    """
    n, m = scores.data.shape
    w = (bias.data.shape[0] - 1) // 2
    offs = np.arange(m)[None, :] - np.arange(n)[:, None]
    idx = np.clip(offs + w, 0, 2 * w)

    def bw(g):
        db = np.zeros_like(bias.data)
        np.add.at(db, idx, g)
        return g, db
    return record_op(tape, "add_rel_bias", (scores, bias), scores.data + bias.data[idx], bw)


# ---------------------------------------------------------------------------
# Recurrence ops backed by the compiled kernels.
# ---------------------------------------------------------------------------

def ema_scan(tape, x, alpha, h0):
    """h_t = alpha * x_t + (1 - alpha) * h_{t-1}, elementwise over features."""
    x64 = kernels.as_f64(x.data)
    a64 = kernels.as_f64(alpha.data)
    h64 = kernels.as_f64(h0.data)
    hist = kernels.ema_forward(x64, a64, h64)

    def bw(g):
        dx, dalpha, dh0 = kernels.ema_backward(x64, a64, h64, hist, kernels.as_f64(g))
        return dx, dalpha, dh0
    return record_op(tape, "ema_scan", (x, alpha, h0), hist, bw)


def lstm_seq(tape, xw, u, b):
    """One-direction LSTM over pre-projected inputs xw = x @ W (n, 4h)."""
    xw64 = kernels.as_f64(xw.data)
    u64 = kernels.as_f64(u.data)
    b64 = kernels.as_f64(b.data)
    hidden, gates, cells = kernels.lstm_forward(xw64, u64, b64)

    def bw(g):
        dxw, du, db = kernels.lstm_backward(gates, cells, hidden, u64, kernels.as_f64(g))
        return dxw, du, db
    return record_op(tape, "lstm_seq", (xw, u, b), hidden, bw)


def _split_transitions(trans_data, n_classes, extra_mask):
    t = trans_data if extra_mask is None else trans_data + extra_mask
    c = n_classes
    core = kernels.as_f64(t[:c, :c])
    start = kernels.as_f64(t[c, :c])
    stop = kernels.as_f64(t[:c, c + 1])
    return core, start, stop


def crf_log_z(tape, emissions, trans, n_classes, extra_mask=None):
    """Log partition of a linear-chain CRF.

    trans is (C+2, C+2) with the start state at row C and the stop state at
    column C+1; entries into start and out of stop are never read.
    extra_mask, if given, is added to the transition table before the scan
    (use -inf entries to forbid transitions without touching the parameters).
    """
    em64 = kernels.as_f64(emissions.data)
    core, start, stop = _split_transitions(trans.data, n_classes, extra_mask)
    log_z, alpha = kernels.crf_forward(em64, core, start, stop)
    c = n_classes

    def bw(g):
        demis, dcore, dstart, dstop = kernels.crf_backward(
            em64, core, start, stop, alpha, log_z, float(g))
        dt = np.zeros_like(trans.data)
        dt[:c, :c] = dcore
        dt[c, :c] = dstart
        dt[:c, c + 1] = dstop
        return demis, dt
    return record_op(tape, "crf_log_z", (emissions, trans), np.float64(log_z), bw)


def crf_path_score(tape, emissions, trans, path, n_classes, extra_mask=None):
    """Unnormalized log score of one tag path under the same CRF layout."""
    path = np.asarray(path, dtype=np.int64)
    n = emissions.data.shape[0]
    if path.shape != (n,):
        raise ValueError(f"path length {path.shape} != sequence length {n}")
    core, start, stop = _split_transitions(trans.data, n_classes, extra_mask)
    s = start[path[0]] + stop[path[-1]] + emissions.data[np.arange(n), path].sum()
    if n > 1:
        s += core[path[:-1], path[1:]].sum()
    c = n_classes

    def bw(g):
        g = float(g)
        demis = np.zeros_like(emissions.data)
        demis[np.arange(n), path] = g
        dt = np.zeros_like(trans.data)
        dt[c, path[0]] += g
        dt[path[-1], c + 1] += g
        if n > 1:
            np.add.at(dt, (path[:-1], path[1:]), g)
        return demis, dt
    return record_op(tape, "crf_path_score", (emissions, trans), np.float64(s), bw)
