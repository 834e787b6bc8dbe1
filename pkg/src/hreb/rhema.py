"""EMA-gated single-head attention blocks and their two-stage composition.

A block is two pre-normalized sublayers, each wrapped in a configurable
residual (module residual): first the gated attention path, then a
position-wise feed-forward. The attention path runs a multi-head EMA over
the input, projects a shared representation Z, derives queries and keys
from Z by per-dimension affines, values from the input by a widening
projection, squashes scores with one of three attention functions, and
merges the attended values back through GRU-style reset/update gates.

The hierarchical encoder stacks a chunk-masked (local) block and a global
block. The naive encoder is a plain softmax-attention transformer block,
kept for ablations.
"""

import numpy as np

from . import autodiff as ad
from . import residual
from .errors import ConfigError
from .moving_average import EmaState, multihead_ema

ATTN_FNS = ("softmax", "laplace", "reduced_laplace")
NORM_KINDS = ("layer", "batch")

# Starting point for the learnable score-squash location/scale: mean and
# standard deviation of a softmax weight under unit-normal scores.
LAPLACE_MU_INIT = 0.707107
LAPLACE_SIGMA_INIT = 0.282095


class RhemaConfig:
    """Shape and behavior switches for one attention block."""

    def __init__(self, d_model, z_dim=None, v_dim=None, n_ema_head=1,
                 chunk_size=0, attn_fn="reduced_laplace", attn_scale=None,
                 rel_bias_window=16, silu_variant="paper", norm="layer",
                 rb_mode="dynamic", rb_alpha=1.0, rb_beta=1.0):
        self.d_model = int(d_model)
        self.z_dim = self.d_model if z_dim is None else int(z_dim)
        self.v_dim = 2 * self.d_model if v_dim is None else int(v_dim)
        if self.z_dim != self.d_model:
            raise ConfigError(
                f"z_dim {self.z_dim} must equal d_model {self.d_model}: the "
                "shared representation is added to the input elementwise")
        self.n_ema_head = int(n_ema_head)
        self.chunk_size = int(chunk_size)
        if self.chunk_size < 0:
            raise ConfigError("chunk_size must be >= 0 (0 means global)")
        if attn_fn not in ATTN_FNS:
            raise ConfigError(f"attn_fn must be one of {ATTN_FNS}, got {attn_fn!r}")
        self.attn_fn = attn_fn
        self.attn_scale = float(np.sqrt(self.z_dim)) if attn_scale is None else float(attn_scale)
        if self.attn_scale <= 0:
            raise ConfigError("attn_scale must be positive")
        self.rel_bias_window = int(rel_bias_window)
        self.silu_variant = silu_variant
        if norm not in NORM_KINDS:
            raise ConfigError(f"norm must be one of {NORM_KINDS}, got {norm!r}")
        self.norm = norm
        self.rb_mode = rb_mode
        self.rb_alpha = float(rb_alpha)
        self.rb_beta = float(rb_beta)


class AttentionTrace:
    """Numpy snapshots of one block's attention internals, for inspection."""

    FIELDS = ("z", "q", "k", "v", "scores", "weights", "gamma", "phi")

    def __init__(self, label):
        self.label = label
        for f in self.FIELDS:
            setattr(self, f, None)

    def lines(self):
        """Line-delimited text dump: one 'label field i j value' per entry."""
        out = []
        for f in self.FIELDS:
            arr = getattr(self, f)
            if arr is None:
                continue
            arr = np.atleast_2d(arr)
            for i in range(arr.shape[0]):
                for j in range(arr.shape[1]):
                    out.append(f"{self.label} {f} {i} {j} {arr[i, j]:.10g}")
        return out


def _glorot(rng, shape):
    s = np.sqrt(6.0 / sum(shape))
    return rng.uniform(-s, s, shape)


class RhemaParams:
    """All learnable tensors of one block."""

    def __init__(self, config, rng, prefix=""):
        c = config
        d, z, v = c.d_model, c.z_dim, c.v_dim
        t = ad.Tensor

        self.ema = EmaState(d, c.n_ema_head, rng, prefix=prefix)
        self.w_z = t(_glorot(rng, (d, z)), requires_grad=True, name=prefix + "w_z")
        self.b_z = t(np.zeros(z), requires_grad=True, name=prefix + "b_z")
        self.kappa_q = t(np.ones(z), requires_grad=True, name=prefix + "kappa_q")
        self.mu_q = t(np.zeros(z), requires_grad=True, name=prefix + "mu_q")
        self.kappa_k = t(np.ones(z), requires_grad=True, name=prefix + "kappa_k")
        self.mu_k = t(np.zeros(z), requires_grad=True, name=prefix + "mu_k")
        self.w_v = t(_glorot(rng, (d, v)), requires_grad=True, name=prefix + "w_v")
        self.b_v = t(np.zeros(v), requires_grad=True, name=prefix + "b_v")
        self.b_rel = t(np.zeros(2 * c.rel_bias_window + 1), requires_grad=True,
                       name=prefix + "b_rel")
        self.w_h = t(_glorot(rng, (z, d)), requires_grad=True, name=prefix + "w_h")
        self.u_h = t(_glorot(rng, (v, d)), requires_grad=True, name=prefix + "u_h")
        self.b_h = t(np.zeros(d), requires_grad=True, name=prefix + "b_h")
        self.w_gamma = t(_glorot(rng, (z, v)), requires_grad=True, name=prefix + "w_gamma")
        self.b_gamma = t(np.zeros(v), requires_grad=True, name=prefix + "b_gamma")
        self.w_phi = t(_glorot(rng, (z, d)), requires_grad=True, name=prefix + "w_phi")
        self.b_phi = t(np.zeros(d), requires_grad=True, name=prefix + "b_phi")
        self.lap_mu = t(np.float64(LAPLACE_MU_INIT), requires_grad=True,
                        name=prefix + "lap_mu")
        # softplus(raw) == the intended starting scale
        raw = float(np.log(np.expm1(LAPLACE_SIGMA_INIT)))
        self.lap_sigma_raw = t(np.float64(raw), requires_grad=True,
                               name=prefix + "lap_sigma_raw")
        self.norm1_gain = t(np.ones(d), requires_grad=True, name=prefix + "norm1_gain")
        self.norm1_bias = t(np.zeros(d), requires_grad=True, name=prefix + "norm1_bias")
        self.norm2_gain = t(np.ones(d), requires_grad=True, name=prefix + "norm2_gain")
        self.norm2_bias = t(np.zeros(d), requires_grad=True, name=prefix + "norm2_bias")
        self.ffn_w1 = t(_glorot(rng, (d, 2 * d)), requires_grad=True, name=prefix + "ffn_w1")
        self.ffn_b1 = t(np.zeros(2 * d), requires_grad=True, name=prefix + "ffn_b1")
        self.ffn_w2 = t(_glorot(rng, (2 * d, d)), requires_grad=True, name=prefix + "ffn_w2")
        self.ffn_b2 = t(np.zeros(d), requires_grad=True, name=prefix + "ffn_b2")
        self.rb_attn = residual.GateState(d, config.rb_mode, rng, config.rb_alpha,
                                          config.rb_beta, prefix=prefix + "attn.")
        self.rb_ffn = residual.GateState(d, config.rb_mode, rng, config.rb_alpha,
                                         config.rb_beta, prefix=prefix + "ffn.")

    def params(self):
        own = [self.w_z, self.b_z, self.kappa_q, self.mu_q, self.kappa_k,
               self.mu_k, self.w_v, self.b_v, self.b_rel, self.w_h, self.u_h,
               self.b_h, self.w_gamma, self.b_gamma, self.w_phi, self.b_phi,
               self.lap_mu, self.lap_sigma_raw, self.norm1_gain, self.norm1_bias,
               self.norm2_gain, self.norm2_bias, self.ffn_w1, self.ffn_b1,
               self.ffn_w2, self.ffn_b2]
        return (self.ema.params() + own + self.rb_attn.params()
                + self.rb_ffn.params())

    def gate_states(self):
        return [self.rb_attn, self.rb_ffn]


def shared_rep(tape, x, params, config):
    """Z = silu(EMA(x) @ W_z + b_z) + x."""
    smoothed = multihead_ema(tape, x, params.ema)
    proj = ad.add(tape, ad.matmul(tape, smoothed, params.w_z), params.b_z)
    return ad.add(tape, ad.silu(tape, proj, config.silu_variant), x)


def qk_transform(tape, z, params):
    """Per-dimension affine views of Z: cheap extra degrees of freedom."""
    q = ad.add(tape, ad.mul(tape, z, params.kappa_q), params.mu_q)
    k = ad.add(tape, ad.mul(tape, z, params.kappa_k), params.mu_k)
    return q, k


def value_transform(tape, x, params, config):
    """V = silu(x @ W_v + b_v), widening to v_dim."""
    return ad.silu(tape, ad.add(tape, ad.matmul(tape, x, params.w_v), params.b_v),
                   config.silu_variant)


def attention(tape, q, k, v, params, config, pair_mask=None, trace=None):
    """O = f(Q K^T / scale + b_rel) V with the configured score squash."""
    scores = ad.scale(tape, ad.matmul(tape, q, ad.transpose(tape, k)),
                      1.0 / config.attn_scale)
    scores = ad.add_rel_bias(tape, scores, params.b_rel)
    if config.attn_fn == "softmax":
        weights = ad.softmax_rows(tape, scores, pair_mask)
    elif config.attn_fn == "laplace":
        weights = ad.laplace_map(tape, scores, params.lap_mu,
                                 params.lap_sigma_raw, pair_mask)
    else:
        squashed = ad.laplace_map(tape, scores, params.lap_mu,
                                  params.lap_sigma_raw, pair_mask)
        weights = ad.normalize_rows(tape, ad.add(tape, squashed, scores), pair_mask)
    if trace is not None:
        trace.scores = scores.data.copy()
        trace.weights = weights.data.copy()
    return ad.matmul(tape, weights, v)


def gated_output(tape, x, z, o, params, config, trace=None):
    """GRU-style merge: reset-gate the attended values, update-gate the mix."""
    gamma = ad.sigmoid(tape, ad.add(tape, ad.matmul(tape, z, params.w_gamma),
                                    params.b_gamma))
    phi = ad.sigmoid(tape, ad.add(tape, ad.matmul(tape, z, params.w_phi),
                                  params.b_phi))
    inner = ad.add(tape, ad.matmul(tape, z, params.w_h),
                   ad.add(tape, ad.matmul(tape, ad.mul(tape, gamma, o), params.u_h),
                          params.b_h))
    y_hat = ad.silu(tape, inner, config.silu_variant)
    one = ad.Tensor(np.float64(1.0), name="one")
    y = ad.add(tape, ad.mul(tape, phi, y_hat),
               ad.mul(tape, ad.sub(tape, one, phi), x))
    if trace is not None:
        trace.gamma = gamma.data.copy()
        trace.phi = phi.data.copy()
    return y


def chunk_pair_mask(n, chunk_size):
    """(i, j) allowed iff both fall in the same length-chunk_size block.

    chunk_size 0 (or >= n) imposes nothing. The trailing ragged chunk is its
    own block.
    """
    if chunk_size <= 0:
        return np.ones((n, n), dtype=bool)
    blocks = np.arange(n) // chunk_size
    return blocks[:, None] == blocks[None, :]


def _norm(tape, x, gain, bias, config, pad_mask):
    if config.norm == "batch":
        return ad.feature_norm(tape, x, gain, bias, row_mask=pad_mask)
    return ad.layer_norm(tape, x, gain, bias)


def rhema_block(tape, x, params, config, pad_mask=None, trace=None):
    """One full block: gated-attention sublayer, then feed-forward sublayer."""
    n = x.data.shape[0]
    allowed = chunk_pair_mask(n, config.chunk_size)
    if pad_mask is not None:
        allowed = allowed & np.asarray(pad_mask, dtype=bool)[None, :]

    def attn_branch(xin):
        xn = _norm(tape, xin, params.norm1_gain, params.norm1_bias, config, pad_mask)
        z = shared_rep(tape, xn, params, config)
        q, k = qk_transform(tape, z, params)
        v = value_transform(tape, xn, params, config)
        if trace is not None:
            trace.z = z.data.copy()
            trace.q = q.data.copy()
            trace.k = k.data.copy()
            trace.v = v.data.copy()
        o = attention(tape, q, k, v, params, config, allowed, trace)
        return gated_output(tape, xn, z, o, params, config, trace)

    def ffn_branch(xin):
        xn = _norm(tape, xin, params.norm2_gain, params.norm2_bias, config, pad_mask)
        h = ad.silu_paper(tape, ad.add(tape, ad.matmul(tape, xn, params.ffn_w1),
                                       params.ffn_b1))
        return ad.add(tape, ad.matmul(tape, h, params.ffn_w2), params.ffn_b2)

    mid = residual.apply(tape, x, attn_branch, params.rb_attn)
    return residual.apply(tape, mid, ffn_branch, params.rb_ffn)


class HierarchicalEncoder:
    """Chunk-local block feeding a global block."""

    def __init__(self, config, rng, prefix="enc."):
        if config.chunk_size < 1:
            raise ConfigError("hierarchical encoder needs chunk_size >= 1")
        self.local_config = config
        self.global_config = _with_chunk(config, 0)
        self.local = RhemaParams(self.local_config, rng, prefix=prefix + "local.")
        self.global_ = RhemaParams(self.global_config, rng, prefix=prefix + "global.")

    def params(self):
        return self.local.params() + self.global_.params()

    def gate_states(self):
        return self.local.gate_states() + self.global_.gate_states()

    def forward(self, tape, x, pad_mask=None, traces=None):
        t_local = AttentionTrace("local") if traces is not None else None
        t_global = AttentionTrace("global") if traces is not None else None
        mid = rhema_block(tape, x, self.local, self.local_config, pad_mask, t_local)
        out = rhema_block(tape, mid, self.global_, self.global_config, pad_mask, t_global)
        if traces is not None:
            traces.extend([t_local, t_global])
        return out


def _with_chunk(config, chunk_size):
    c = RhemaConfig.__new__(RhemaConfig)
    c.__dict__.update(config.__dict__)
    c.chunk_size = chunk_size
    return c


class NaiveParams:
    """Plain pre-norm softmax attention block (the ablation baseline)."""

    def __init__(self, config, rng, prefix="naive."):
        d = config.d_model
        t = ad.Tensor
        self.w_q = t(_glorot(rng, (d, d)), requires_grad=True, name=prefix + "w_q")
        self.w_k = t(_glorot(rng, (d, d)), requires_grad=True, name=prefix + "w_k")
        self.w_v = t(_glorot(rng, (d, d)), requires_grad=True, name=prefix + "w_v")
        self.w_o = t(_glorot(rng, (d, d)), requires_grad=True, name=prefix + "w_o")
        self.norm1_gain = t(np.ones(d), requires_grad=True, name=prefix + "norm1_gain")
        self.norm1_bias = t(np.zeros(d), requires_grad=True, name=prefix + "norm1_bias")
        self.norm2_gain = t(np.ones(d), requires_grad=True, name=prefix + "norm2_gain")
        self.norm2_bias = t(np.zeros(d), requires_grad=True, name=prefix + "norm2_bias")
        self.ffn_w1 = t(_glorot(rng, (d, 2 * d)), requires_grad=True, name=prefix + "ffn_w1")
        self.ffn_b1 = t(np.zeros(2 * d), requires_grad=True, name=prefix + "ffn_b1")
        self.ffn_w2 = t(_glorot(rng, (2 * d, d)), requires_grad=True, name=prefix + "ffn_w2")
        self.ffn_b2 = t(np.zeros(d), requires_grad=True, name=prefix + "ffn_b2")
        self.rb_attn = residual.GateState(d, config.rb_mode, rng, config.rb_alpha,
                                          config.rb_beta, prefix=prefix + "attn.")
        self.rb_ffn = residual.GateState(d, config.rb_mode, rng, config.rb_alpha,
                                         config.rb_beta, prefix=prefix + "ffn.")

    def params(self):
        own = [self.w_q, self.w_k, self.w_v, self.w_o, self.norm1_gain,
               self.norm1_bias, self.norm2_gain, self.norm2_bias,
               self.ffn_w1, self.ffn_b1, self.ffn_w2, self.ffn_b2]
        return own + self.rb_attn.params() + self.rb_ffn.params()

    def gate_states(self):
        return [self.rb_attn, self.rb_ffn]


class NaiveEncoder:
    """Single global scaled-dot softmax block, same residual scaffolding."""

    def __init__(self, config, rng, prefix="naive."):
        self.config = config
        self.p = NaiveParams(config, rng, prefix=prefix)

    def params(self):
        return self.p.params()

    def gate_states(self):
        return self.p.gate_states()

    def forward(self, tape, x, pad_mask=None, traces=None):
        c = self.config
        p = self.p
        n = x.data.shape[0]
        allowed = np.ones((n, n), dtype=bool)
        if pad_mask is not None:
            allowed = allowed & np.asarray(pad_mask, dtype=bool)[None, :]
        trace = AttentionTrace("naive") if traces is not None else None

        def attn_branch(xin):
            xn = _norm(tape, xin, p.norm1_gain, p.norm1_bias, c, pad_mask)
            q = ad.matmul(tape, xn, p.w_q)
            k = ad.matmul(tape, xn, p.w_k)
            v = ad.matmul(tape, xn, p.w_v)
            scores = ad.scale(tape, ad.matmul(tape, q, ad.transpose(tape, k)),
                              1.0 / np.sqrt(c.d_model))
            weights = ad.softmax_rows(tape, scores, allowed)
            if trace is not None:
                trace.q, trace.k, trace.v = q.data.copy(), k.data.copy(), v.data.copy()
                trace.scores = scores.data.copy()
                trace.weights = weights.data.copy()
            return ad.matmul(tape, ad.matmul(tape, weights, v), p.w_o)

        def ffn_branch(xin):
            xn = _norm(tape, xin, p.norm2_gain, p.norm2_bias, c, pad_mask)
            h = ad.silu_paper(tape, ad.add(tape, ad.matmul(tape, xn, p.ffn_w1),
                                           p.ffn_b1))
            return ad.add(tape, ad.matmul(tape, h, p.ffn_w2), p.ffn_b2)

        mid = residual.apply(tape, x, attn_branch, p.rb_attn)
        out = residual.apply(tape, mid, ffn_branch, p.rb_ffn)
        if traces is not None:
            traces.append(trace)
        return out
