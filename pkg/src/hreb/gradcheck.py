"""Central-difference gradient verification."""

import numpy as np

from .autodiff import backward
from .errors import VerificationError


def finite_diff_check(f, x, eps=1e-5):
    """Compare f's analytic gradient against central differences.

    f maps a float64 array to (scalar loss, gradient array of x's shape).
    The baseline is evaluated twice; a mismatch means f is nondeterministic
    and the comparison would be meaningless. Returns the max over entries of
    |analytic - numeric| / max(1, |analytic|).
    """
    x = np.asarray(x, dtype=np.float64)
    loss0, grad = f(x)
    loss1, _ = f(x)
    if not loss0 == loss1:
        raise VerificationError(
            f"function is not deterministic: {loss0!r} != {loss1!r}")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise VerificationError(
            f"gradient shape {grad.shape} does not match input {x.shape}")
    numeric = np.empty_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += eps
        xm = x.copy()
        xm.flat[i] -= eps
        numeric.flat[i] = (f(xp)[0] - f(xm)[0]) / (2.0 * eps)
    rel = np.abs(grad - numeric) / np.maximum(1.0, np.abs(grad))
    return float(rel.max())


def finite_diff_params(build_loss, params, eps=1e-5, max_entries=None, rng=None):
    """Check analytic parameter gradients of a rebuildable scalar loss.

    build_loss() must rerun the forward pass from current parameter values
    and return (loss tensor, tape). Perturbs each parameter entry in place
    (restoring it afterwards). max_entries caps the per-parameter probe count;
    entries are then sampled with rng. Returns {param name: max rel error}.
    """
    loss, tape = build_loss()
    base = float(loss.data)
    again, _ = build_loss()
    if float(again.data) != base:
        raise VerificationError("loss is not deterministic across rebuilds")
    grads = backward(tape, loss)

    results = {}
    for p in params:
        g = grads.get(p.id)
        if g is None:
            g = np.zeros_like(p.data)
        n = p.data.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        worst = 0.0
        for i in idxs:
            orig = p.data.flat[i]
            p.data.flat[i] = orig + eps
            lp = float(build_loss()[0].data)
            p.data.flat[i] = orig - eps
            lm = float(build_loss()[0].data)
            p.data.flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            analytic = g.flat[i]
            rel = abs(analytic - numeric) / max(1.0, abs(analytic))
            if rel > worst:
                worst = rel
        results[p.name or f"t{p.id}"] = worst
    return results
