"""Built-in correctness suites: gradients, CRF inference, EMA algebra.

Each suite returns CheckResult rows; the verify CLI command prints them and
fails if any check fails. Failing numeric checks embed their inputs at full
precision so a case can be replayed in isolation.
"""

import numpy as np

from . import autodiff as ad
from . import crf as crf_mod
from . import oracles
from .config import RunConfig
from .data import Vocab, Sentence
from .encoders import embed_tokens, EmbeddingTable
from .gradcheck import finite_diff_check, finite_diff_params
from .model import HrebModel
from .moving_average import EmaState, ema, multihead_ema

SUITES = ("grad", "crf", "ema")


class CheckResult:
    __slots__ = ("name", "passed", "detail")

    def __init__(self, name, passed, detail):
        self.name = name
        self.passed = passed
        self.detail = detail


def _dump(**arrays):
    parts = []
    for name, arr in arrays.items():
        parts.append(f"{name}={np.array_repr(np.asarray(arr), precision=17)}")
    return "; replay with " + ", ".join(parts)


# ----------------------------------------------------------------- gradients

def _grad_of(build, inputs, wrt, rng):
    """Finite-difference error of `build`'s output gradient w.r.t. one input.

    build(tape, tensors) returns the op output; the loss is a fixed random
    weighting of it, so every output entry influences the scalar.
    """
    tensors = {k: ad.Tensor(v, requires_grad=True, name=k)
               for k, v in inputs.items()}
    probe = build(ad.Tape(), tensors)
    w = rng.standard_normal(probe.data.shape) if probe.data.shape else np.float64(1.0)

    def f(x):
        tape = ad.Tape()
        ts = {k: ad.Tensor(v, requires_grad=True, name=k)
              for k, v in inputs.items()}
        ts[wrt] = ad.Tensor(x, requires_grad=True, name=wrt)
        out = build(tape, ts)
        loss = ad.sum_all(tape, ad.mul(tape, out, ad.Tensor(w)))
        grads = ad.backward(tape, loss)
        return float(loss.data), grads.get(ts[wrt].id, np.zeros_like(x))

    return finite_diff_check(f, inputs[wrt])


def op_grad_checks(seed=0, tol=1e-4):
    """Finite-difference check of every differentiable op, one entry per
    (op, input) pair."""
    rng = np.random.default_rng(seed)
    n, d = 3, 4
    a = rng.standard_normal((n, d))
    b = rng.standard_normal((n, d))
    vec = rng.standard_normal(d)
    pos = rng.uniform(0.5, 2.0, (n, d))
    sq = rng.standard_normal((d, d))
    idx = np.array([2, 0, 2])
    col_idx = np.array([1, 3, 0])
    mask = np.ones((n, n), dtype=bool)
    mask[0, 2] = mask[2, 0] = False
    row_mask = np.array([True, True, False])
    n_classes = 3
    crf_t = rng.standard_normal((n_classes + 2, n_classes + 2))
    crf_t[:, n_classes] = -np.inf
    crf_t[n_classes + 1, :] = -np.inf
    path = np.array([1, 0, 2])
    h = 3
    xw = rng.standard_normal((n, 4 * h))
    u = rng.standard_normal((h, 4 * h))
    bias4 = rng.standard_normal(4 * h)
    alpha = rng.uniform(0.1, 0.9, d)
    h0 = rng.standard_normal(d)
    gain = rng.uniform(0.5, 1.5, d)
    beta = rng.standard_normal(d)
    mu = np.float64(0.3)
    sig_raw = np.float64(-0.8)
    table = rng.standard_normal((5, d))
    ids = np.array([3, 1, 3, 0])

    cases = [
        ("add/a", {"a": a, "b": b}, lambda t, s: ad.add(t, s["a"], s["b"]), "a"),
        ("add/bias", {"a": a, "b": vec}, lambda t, s: ad.add(t, s["a"], s["b"]), "b"),
        ("sub/b", {"a": a, "b": b}, lambda t, s: ad.sub(t, s["a"], s["b"]), "b"),
        ("mul/a", {"a": a, "b": vec}, lambda t, s: ad.mul(t, s["a"], s["b"]), "a"),
        ("mul/b", {"a": a, "b": vec}, lambda t, s: ad.mul(t, s["a"], s["b"]), "b"),
        ("div/a", {"a": a, "b": pos}, lambda t, s: ad.div(t, s["a"], s["b"]), "a"),
        ("div/b", {"a": a, "b": pos}, lambda t, s: ad.div(t, s["a"], s["b"]), "b"),
        ("neg", {"a": a}, lambda t, s: ad.neg(t, s["a"]), "a"),
        ("scale", {"a": a}, lambda t, s: ad.scale(t, s["a"], 1.7), "a"),
        ("clamp_min", {"a": pos}, lambda t, s: ad.clamp_min(t, s["a"], 1.0), "a"),
        ("matmul/a", {"a": a, "b": sq}, lambda t, s: ad.matmul(t, s["a"], s["b"]), "a"),
        ("matmul/b", {"a": a, "b": sq}, lambda t, s: ad.matmul(t, s["a"], s["b"]), "b"),
        ("transpose", {"a": a}, lambda t, s: ad.transpose(t, s["a"]), "a"),
        ("concat_cols/a", {"a": a, "b": b}, lambda t, s: ad.concat_cols(t, s["a"], s["b"]), "a"),
        ("concat_cols/b", {"a": a, "b": b}, lambda t, s: ad.concat_cols(t, s["a"], s["b"]), "b"),
        ("reverse_rows", {"a": a}, lambda t, s: ad.reverse_rows(t, s["a"]), "a"),
        ("slice_rows", {"a": a}, lambda t, s: ad.slice_rows(t, s["a"], 1, 3), "a"),
        ("pad_rows", {"a": a}, lambda t, s: ad.pad_rows(t, s["a"], 5), "a"),
        ("gather_rows", {"a": table}, lambda t, s: ad.gather_rows(t, s["a"], ids), "a"),
        ("repeat_entries", {"a": vec}, lambda t, s: ad.repeat_entries(t, s["a"], 3), "a"),
        ("pick_per_row", {"a": a}, lambda t, s: ad.pick_per_row(t, s["a"], col_idx), "a"),
        ("sum_all", {"a": a}, lambda t, s: ad.sum_all(t, s["a"]), "a"),
        ("mean_all", {"a": a}, lambda t, s: ad.mean_all(t, s["a"]), "a"),
        ("logsumexp", {"a": a}, lambda t, s: ad.logsumexp(t, s["a"], 1), "a"),
        ("sigmoid", {"a": a}, lambda t, s: ad.sigmoid(t, s["a"]), "a"),
        ("tanh", {"a": a}, lambda t, s: ad.tanh(t, s["a"]), "a"),
        ("exp", {"a": a}, lambda t, s: ad.exp(t, s["a"]), "a"),
        ("log", {"a": pos}, lambda t, s: ad.log(t, s["a"]), "a"),
        ("erf", {"a": a}, lambda t, s: ad.erf(t, s["a"]), "a"),
        ("softplus", {"a": a}, lambda t, s: ad.softplus(t, s["a"]), "a"),
        ("silu_standard", {"a": a}, lambda t, s: ad.silu_standard(t, s["a"]), "a"),
        ("silu_paper", {"a": a}, lambda t, s: ad.silu_paper(t, s["a"]), "a"),
        ("layer_norm/x", {"x": a, "g": gain, "b": beta},
         lambda t, s: ad.layer_norm(t, s["x"], s["g"], s["b"]), "x"),
        ("layer_norm/gain", {"x": a, "g": gain, "b": beta},
         lambda t, s: ad.layer_norm(t, s["x"], s["g"], s["b"]), "g"),
        ("layer_norm/bias", {"x": a, "g": gain, "b": beta},
         lambda t, s: ad.layer_norm(t, s["x"], s["g"], s["b"]), "b"),
        ("feature_norm/x", {"x": a, "g": gain, "b": beta},
         lambda t, s: ad.feature_norm(t, s["x"], s["g"], s["b"], row_mask=row_mask), "x"),
        ("feature_norm/gain", {"x": a, "g": gain, "b": beta},
         lambda t, s: ad.feature_norm(t, s["x"], s["g"], s["b"], row_mask=row_mask), "g"),
        ("softmax_rows", {"s": a @ a.T},
         lambda t, s: ad.softmax_rows(t, s["s"], mask), "s"),
        ("laplace_map/scores", {"s": a @ a.T, "mu": mu, "sr": sig_raw},
         lambda t, s: ad.laplace_map(t, s["s"], s["mu"], s["sr"], mask), "s"),
        ("laplace_map/mu", {"s": a @ a.T, "mu": mu, "sr": sig_raw},
         lambda t, s: ad.laplace_map(t, s["s"], s["mu"], s["sr"], mask), "mu"),
        ("laplace_map/sigma", {"s": a @ a.T, "mu": mu, "sr": sig_raw},
         lambda t, s: ad.laplace_map(t, s["s"], s["mu"], s["sr"], mask), "sr"),
        ("reduced_laplace", {"s": np.abs(a @ a.T) + 0.5, "mu": mu, "sr": sig_raw},
         lambda t, s: ad.normalize_rows(
             t, ad.add(t, ad.laplace_map(t, s["s"], s["mu"], s["sr"], mask), s["s"]),
             mask), "s"),
        ("add_rel_bias/scores", {"s": a @ a.T, "b": rng.standard_normal(5)},
         lambda t, s: ad.add_rel_bias(t, s["s"], s["b"]), "s"),
        ("add_rel_bias/bias", {"s": a @ a.T, "b": rng.standard_normal(5)},
         lambda t, s: ad.add_rel_bias(t, s["s"], s["b"]), "b"),
        ("ema_scan/x", {"x": a, "al": alpha, "h0": h0},
         lambda t, s: ad.ema_scan(t, s["x"], s["al"], s["h0"]), "x"),
        ("ema_scan/alpha", {"x": a, "al": alpha, "h0": h0},
         lambda t, s: ad.ema_scan(t, s["x"], s["al"], s["h0"]), "al"),
        ("ema_scan/h0", {"x": a, "al": alpha, "h0": h0},
         lambda t, s: ad.ema_scan(t, s["x"], s["al"], s["h0"]), "h0"),
        ("lstm_seq/xw", {"xw": xw, "u": u, "b": bias4},
         lambda t, s: ad.lstm_seq(t, s["xw"], s["u"], s["b"]), "xw"),
        ("lstm_seq/u", {"xw": xw, "u": u, "b": bias4},
         lambda t, s: ad.lstm_seq(t, s["xw"], s["u"], s["b"]), "u"),
        ("lstm_seq/b", {"xw": xw, "u": u, "b": bias4},
         lambda t, s: ad.lstm_seq(t, s["xw"], s["u"], s["b"]), "b"),
        ("crf_log_z/emissions", {"e": a[:, :n_classes], "t": crf_t},
         lambda t, s: ad.crf_log_z(t, s["e"], s["t"], n_classes), "e"),
        ("crf_log_z/trans", {"e": a[:, :n_classes], "t": crf_t},
         lambda t, s: ad.crf_log_z(t, s["e"], s["t"], n_classes), "t"),
        ("crf_path_score/emissions", {"e": a[:, :n_classes], "t": crf_t},
         lambda t, s: ad.crf_path_score(t, s["e"], s["t"], path, n_classes), "e"),
        ("crf_path_score/trans", {"e": a[:, :n_classes], "t": crf_t},
         lambda t, s: ad.crf_path_score(t, s["e"], s["t"], path, n_classes), "t"),
    ]

    results = []
    for name, inputs, build, wrt in cases:
        err = _grad_of(build, inputs, wrt, np.random.default_rng(seed + 1))
        detail = f"max rel err {err:.3g} (tol {tol:g})"
        if err > tol:
            detail += _dump(**{wrt: inputs[wrt]})
        results.append(CheckResult(f"grad {name}", err <= tol, detail))

    # embedding lookup, including a repeated id
    emb_rng = np.random.default_rng(seed + 2)
    emb = EmbeddingTable(5, d, pad_id=0, unk_id=1, rng=emb_rng)
    eids = np.array([3, 2, 3])
    w = emb_rng.standard_normal((3, d))

    def f(x):
        tape = ad.Tape()
        emb.table.data = x
        out = embed_tokens(tape, eids, emb)
        loss = ad.sum_all(tape, ad.mul(tape, out, ad.Tensor(w)))
        grads = ad.backward(tape, loss)
        return float(loss.data), grads.get(emb.table.id, np.zeros_like(x))

    err = finite_diff_check(f, emb.table.data.copy())
    results.append(CheckResult("grad embed_tokens", err <= tol,
                               f"max rel err {err:.3g} (tol {tol:g})"))
    return results


def _tiny_vocab():
    sents = [Sentence(list("abcde"), ["O", "B-T0", "I-T0", "O", "O"]),
             Sentence(list("fgdba"), ["B-T0", "I-T0", "O", "B-T0", "O"])]
    return Vocab(sents), sents


def model_grad_check(attn_fn="reduced_laplace", reduced_bias="dynamic",
                     loss_head="crf", seed=0, max_entries=None):
    """Finite-difference check of the whole model's parameter gradients.

    Returns (worst rel err, {param name: rel err}). max_entries caps the
    probes per parameter (seeded sampling) to keep large sweeps affordable.
    """
    cfg = RunConfig(d_model=8, z_dim=8, v_dim=16, n_ema_head=2, chunk_size=2,
                    rel_bias_window=4, h_lstm=5, attn_fn=attn_fn,
                    reduced_bias=reduced_bias, loss_head=loss_head, seed=seed)
    vocab, sents = _tiny_vocab()
    model = HrebModel(cfg, vocab)
    rng = np.random.default_rng(seed + 7)
    # nonzero caches so the dynamic-gate path is exercised off its fixed point
    for gs in model.gate_states():
        gs.cache_f = rng.normal(0.0, 0.1, gs.cache_f.shape)
        gs.cache_x = rng.normal(0.0, 0.1, gs.cache_x.shape)
    ids = vocab.encode_tokens(sents[0].tokens)
    tag_ids = vocab.encode_tags(sents[0].tags)

    def build():
        for gs in model.gate_states():
            gs.pending = []
        tape = ad.Tape()
        return model.sentence_nll(tape, ids, tag_ids), tape

    errs = finite_diff_params(build, model.params(), max_entries=max_entries,
                              rng=np.random.default_rng(seed + 11))
    return max(errs.values()), errs


def grad_suite(seed=0):
    results = op_grad_checks(seed=seed)
    worst, errs = model_grad_check(seed=seed, max_entries=3)
    name = max(errs, key=errs.get)
    results.append(CheckResult(
        "grad full model", worst <= 1e-4,
        f"worst param {name}: rel err {worst:.3g} (tol 0.0001)"))
    return results


# ----------------------------------------------------------------------- crf

def _random_crf(rng):
    n = int(rng.integers(1, 7))
    c = int(rng.integers(1, 5))
    emissions = rng.standard_normal((n, c))
    params = crf_mod.CrfParams(c)
    params.trans.data[:c, :c] = rng.standard_normal((c, c))
    params.trans.data[c, :c] = rng.standard_normal(c)
    params.trans.data[:c, c + 1] = rng.standard_normal(c)
    return emissions, params


def _crf_pieces(params):
    c = params.n_classes
    t = params.trans.data
    return t[:c, :c], t[c, :c], t[:c, c + 1]


def crf_suite(seed=0, instances=200):
    """Exact-inference agreement with brute-force path enumeration."""
    rng = np.random.default_rng(seed)
    worst_z = 0.0
    path_fail = None
    for i in range(instances):
        emissions, params = _random_crf(rng)
        core, start, stop = _crf_pieces(params)
        log_z_ref, best_ref, _ = oracles.crf_enumerate(emissions, core, start, stop)
        log_z = float(crf_mod.log_partition(None, ad.Tensor(emissions), params).data)
        worst_z = max(worst_z, abs(log_z - log_z_ref))
        path, _ = crf_mod.viterbi(emissions, params)
        if path_fail is None and not np.array_equal(path, best_ref):
            path_fail = (i, emissions, params.trans.data, path, best_ref)
    results = [CheckResult(
        "crf log partition vs enumeration", worst_z <= 1e-8,
        f"max |dlogZ| {worst_z:.3g} over {instances} instances (tol 1e-08)")]
    if path_fail is None:
        results.append(CheckResult(
            "crf viterbi vs enumeration", True,
            f"paths identical on {instances} instances"))
    else:
        i, emissions, trans, got, want = path_fail
        results.append(CheckResult(
            "crf viterbi vs enumeration", False,
            f"instance {i}: got {got.tolist()}, want {want.tolist()}"
            + _dump(emissions=emissions, trans=trans)))

    # posterior marginals = gradient of logZ
    worst_m = 0.0
    for i in range(30):
        emissions, params = _random_crf(rng)
        core, start, stop = _crf_pieces(params)
        unary, pair, first, last = oracles.crf_enumerate_marginals(
            emissions, core, start, stop)
        tape = ad.Tape()
        e = ad.Tensor(emissions, requires_grad=True, name="e")
        lz = crf_mod.log_partition(tape, e, params)
        grads = ad.backward(tape, lz)
        c = params.n_classes
        dt = grads[params.trans.id]
        worst_m = max(worst_m,
                      float(np.abs(grads[e.id] - unary).max()),
                      float(np.abs(dt[:c, :c] - pair).max()),
                      float(np.abs(dt[c, :c] - first).max()),
                      float(np.abs(dt[:c, c + 1] - last).max()))
    results.append(CheckResult(
        "crf marginals vs enumeration", worst_m <= 1e-8,
        f"max marginal err {worst_m:.3g} over 30 instances (tol 1e-08)"))

    # per-position emission shifts cancel in the conditional likelihood
    worst_shift = 0.0
    worst_rowsum = 0.0
    for i in range(30):
        emissions, params = _random_crf(rng)
        n, c = emissions.shape
        gold = rng.integers(0, c, n)
        nll0 = float(crf_mod.crf_nll(None, ad.Tensor(emissions), gold, params).data)
        shifted = emissions + rng.standard_normal((n, 1))
        nll1 = float(crf_mod.crf_nll(None, ad.Tensor(shifted), gold, params).data)
        worst_shift = max(worst_shift, abs(nll1 - nll0))
        tape = ad.Tape()
        e = ad.Tensor(emissions, requires_grad=True, name="e")
        nll = crf_mod.crf_nll(tape, e, gold, params)
        grads = ad.backward(tape, nll)
        worst_rowsum = max(worst_rowsum,
                           float(np.abs(grads[e.id].sum(axis=1)).max()))
    results.append(CheckResult(
        "crf nll emission-shift invariance", worst_shift <= 1e-9,
        f"max |dnll| {worst_shift:.3g} over 30 instances (tol 1e-09)"))
    results.append(CheckResult(
        "crf nll emission grad row sums", worst_rowsum <= 1e-9,
        f"max |row sum| {worst_rowsum:.3g} over 30 instances (tol 1e-09)"))
    return results


# ----------------------------------------------------------------------- ema

def ema_suite(seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in (1, 7, 33, 64):
        x = rng.standard_normal((n, 3))
        alpha = rng.uniform(0.05, 0.95, 3)
        h0 = rng.standard_normal(3)
        got = ad.ema_scan(None, ad.Tensor(x), ad.Tensor(alpha), ad.Tensor(h0)).data
        ref = oracles.ema_closed_form(x, alpha, h0)
        worst = max(worst, float(np.abs(got - ref).max()))
        worst = max(worst, float(np.abs(ema(x, alpha, h0) - ref).max()))
    results = [CheckResult(
        "ema scan vs closed form", worst <= 1e-12,
        f"max abs err {worst:.3g} up to t=64 (tol 1e-12)")]

    x = rng.standard_normal((9, 4))
    got = ad.ema_scan(None, ad.Tensor(x), ad.Tensor(np.ones(4)),
                      ad.Tensor(rng.standard_normal(4))).data
    exact = bool(np.array_equal(got, x))
    results.append(CheckResult(
        "ema alpha=1 pass-through", exact,
        "output is bitwise the input" if exact else "output differs from input"))

    d = 4
    state = EmaState(d, 1, np.random.default_rng(seed + 1))
    state.w_down.data = np.eye(d)
    state.w_up.data = np.eye(d)
    alpha = 0.37
    state.alpha_raw.data = np.array([np.log(alpha / (1 - alpha))])
    x = rng.standard_normal((11, d))
    got = multihead_ema(None, ad.Tensor(x), state).data
    ref = ad.ema_scan(None, ad.Tensor(x), ad.Tensor(np.full(d, alpha)),
                      ad.Tensor(np.zeros(d))).data
    err = float(np.abs(got - ref).max())
    results.append(CheckResult(
        "ema one-head identity reduction", err <= 1e-12,
        f"max abs err {err:.3g} vs plain scan (tol 1e-12)"))
    return results


def run_suites(which="all"):
    """Run the requested suites; returns (all_passed, results)."""
    if which == "all":
        names = SUITES
    elif which in SUITES:
        names = (which,)
    else:
        raise ValueError(f"unknown suite {which!r}: pick from {('all',) + SUITES}")
    results = []
    for name in names:
        results.extend({"grad": grad_suite, "crf": crf_suite,
                        "ema": ema_suite}[name]())
    return all(r.passed for r in results), results
