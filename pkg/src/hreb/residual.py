"""Residual connections with configurable branch/skip weighting.

Three modes:
  classic  -> F(x) + x
  static   -> a * F(x) + b * x with fixed scalars
  dynamic  -> sigmoid-gated per-feature mixing, where the gates are driven by
              gradient statistics cached from the previous optimizer step
              (the current step's gradients do not exist at forward time).
The caches are plain arrays, never tape tensors: gradients are not
differentiated through.
"""

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError

MODES = ("classic", "static", "dynamic")


class GateState:
    """Mode, static weights, dynamic gate parameters, and gradient caches."""

    def __init__(self, d_model, mode, rng, alpha=1.0, beta=1.0, prefix=""):
        if mode not in MODES:
            raise ValueError(f"unknown residual mode {mode!r}")
        self.d_model = d_model
        self.mode = mode
        self.alpha = float(alpha)
        self.beta = float(beta)
        if mode == "classic" and (self.alpha != 1.0 or self.beta != 1.0):
            raise ValueError("classic mode fixes both residual weights at 1")
        self.w_alpha = ad.Tensor(np.zeros((d_model, d_model)),
                                 requires_grad=True, name=prefix + "rb.w_alpha")
        self.b_alpha = ad.Tensor(np.zeros(d_model),
                                 requires_grad=True, name=prefix + "rb.b_alpha")
        self.w_beta = ad.Tensor(np.zeros((d_model, d_model)),
                                requires_grad=True, name=prefix + "rb.w_beta")
        self.b_beta = ad.Tensor(np.zeros(d_model),
                                requires_grad=True, name=prefix + "rb.b_beta")
        # Previous-step mean gradients of the branch output and the skip
        # input; zero before the first optimizer step.
        self.cache_f = np.zeros(d_model)
        self.cache_x = np.zeros(d_model)
        # (branch output, skip input) tensors from forward passes of the
        # current step, so the training loop can read their gradients.
        self.pending = []

    def params(self):
        if self.mode == "dynamic":
            return [self.w_alpha, self.b_alpha, self.w_beta, self.b_beta]
        return []

    def pending_ids(self):
        return [t.id for pair in self.pending for t in pair]


def apply(tape, x, branch, state):
    """Combine branch(x) with x according to the state's mode."""
    f = branch(x)
    if f.data.shape != x.data.shape:
        raise ValueError(
            f"branch output shape {f.data.shape} != input shape {x.data.shape}")
    if state.mode == "classic":
        return ad.add(tape, f, x)
    if state.mode == "static":
        return ad.add(tape, ad.scale(tape, f, state.alpha),
                      ad.scale(tape, x, state.beta))
    if state.mode == "dynamic" and tape is not None:
        state.pending.append((f, x))
    gf = ad.Tensor(state.cache_f.reshape(1, -1), name="rb.cache_f")
    gx = ad.Tensor(state.cache_x.reshape(1, -1), name="rb.cache_x")
    gate_f = ad.sigmoid(tape, ad.add(tape, ad.matmul(tape, gf, state.w_alpha),
                                     state.b_alpha))
    gate_x = ad.sigmoid(tape, ad.add(tape, ad.matmul(tape, gx, state.w_beta),
                                     state.b_beta))
    return ad.add(tape, ad.mul(tape, gate_f, f), ad.mul(tape, gate_x, x))


def update_gate_cache(state, grad_f, grad_x, momentum):
    """Fold a step's branch/skip gradients into the caches.

    grad_f / grad_x are (seq, d) gradients w.r.t. the branch output and the
    skip input; the cached statistic is a running mean over positions.
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    grad_f = np.asarray(grad_f, dtype=np.float64)
    grad_x = np.asarray(grad_x, dtype=np.float64)
    if not (np.all(np.isfinite(grad_f)) and np.all(np.isfinite(grad_x))):
        raise DivergenceError("non-finite gradient entering residual gate cache")
    state.cache_f = momentum * state.cache_f + (1.0 - momentum) * grad_f.mean(axis=0)
    state.cache_x = momentum * state.cache_x + (1.0 - momentum) * grad_x.mean(axis=0)
    return state


def commit_gate_caches(states, grads, momentum):
    """Fold the just-computed gradients of every pending (branch, skip) pair
    into each dynamic gate's cache, then clear the pending lists.

    grads is the tensor-id map returned by autodiff.backward (run with the
    pending ids in keep). Pairs whose gradients never materialized (branch
    not on the loss path) contribute zeros.
    """
    for state in states:
        if state.mode != "dynamic" or not state.pending:
            state.pending = []
            continue
        gf_rows = []
        gx_rows = []
        for f, x in state.pending:
            gf_rows.append(np.asarray(grads.get(f.id, np.zeros_like(f.data))))
            gx_rows.append(np.asarray(grads.get(x.id, np.zeros_like(x.data))))
        update_gate_cache(state, np.vstack(gf_rows), np.vstack(gx_rows), momentum)
        state.pending = []
