"""Training loop, span evaluation, and the ablation harness."""

import itertools

import numpy as np

from . import autodiff as ad
from . import residual
from .config import RunConfig
from .data import Vocab, decode_spans, make_batches, span_prf
from .errors import DivergenceError, NumericsError
from .model import HrebModel
from .optim import AdamState


def evaluate(model, sentences):
    """Exact-span micro scores of the model's predictions on sentences.

    Both gold and predicted tags are decoded leniently (a stray I-X opens a
    span), so real-world annotation quirks score instead of crashing.
    """
    gold, pred = [], []
    for s in sentences:
        ids = model.vocab.encode_tokens(s.tokens)
        path = model.decode(ids)
        tags = [model.vocab.tags[i] for i in path]
        gold.append(decode_spans(s.tags, "lenient"))
        pred.append(decode_spans(tags, "lenient"))
    return span_prf(gold, pred)


def snapshot(model):
    """Copy everything a checkpoint needs: params and gate caches."""
    params = {p.name: p.data.copy() for p in model.params()}
    caches = [(gs.cache_f.copy(), gs.cache_x.copy())
              for gs in model.gate_states()]
    return {"params": params, "caches": caches}


def restore(model, state):
    for p in model.params():
        p.data = state["params"][p.name].copy()
    for gs, (cf, cx) in zip(model.gate_states(), state["caches"]):
        gs.cache_f = cf.copy()
        gs.cache_x = cx.copy()


class TrainResult:
    """Trained model (best weights restored) plus the run's paper trail."""

    def __init__(self, model, history, lines, best_epoch, best_f1, best_state,
                 final_state, diverged, stop_reason):
        self.model = model
        self.history = history
        self.lines = lines
        self.best_epoch = best_epoch
        self.best_f1 = best_f1
        self.best_state = best_state
        self.final_state = final_state
        self.diverged = diverged
        self.stop_reason = stop_reason

    def summary(self):
        return {
            "config": self.model.config.to_dict(),
            "best_epoch": self.best_epoch,
            "best_f1": self.best_f1,
            "epochs_run": len(self.history),
            "diverged": self.diverged,
            "stop_reason": self.stop_reason,
            "history": self.history,
        }


def _epoch_pass(model, batches, opt, states, momentum):
    """One pass over the batches; returns the mean per-sentence loss."""
    total = 0.0
    n_sent = 0
    for batch in batches:
        tape = ad.Tape()
        batch_loss = None
        for r in range(len(batch.lengths)):
            n = int(batch.lengths[r])
            nll = model.sentence_nll(tape, batch.ids[r, :n], batch.tags[r, :n])
            batch_loss = nll if batch_loss is None else ad.add(tape, batch_loss, nll)
            total += float(nll.data)
            n_sent += 1
        loss = ad.scale(tape, batch_loss, 1.0 / len(batch.lengths))
        if not np.isfinite(loss.data):
            raise DivergenceError("non-finite training loss")
        if opt is None:
            # Null optimizer: nothing may move, gate caches included.
            for gs in states:
                gs.pending = []
            continue
        keep = [i for gs in states for i in gs.pending_ids()]
        grads = ad.backward(tape, loss, keep=keep)
        opt.step(model.params(), grads)
        residual.commit_gate_caches(states, grads, momentum)
        ad.zero_grads(model.params())
    return total / n_sent


def train(config, corpus, log=None):
    """Full training run per the config; returns a TrainResult.

    Emits one "epoch N P x R x F1 x loss x" line per epoch (validation
    scores, training loss). Early-stops when validation F1 has not improved
    for `patience` epochs, or immediately once it reaches `stop_f1`. On
    divergence the run aborts and the best (or initial) weights survive.
    A zero learning rate turns every step into a no-op.
    """
    vocab = Vocab.from_corpus(corpus)
    model = HrebModel(config, vocab)
    names = model.param_names()
    if len(set(names)) != len(names):
        raise RuntimeError("duplicate parameter names: checkpointing would alias")
    opt = None
    if config.lr > 0:
        opt = AdamState(model.params(), lr=config.lr, beta1=config.beta1,
                        beta2=config.beta2, eps=config.adam_eps)
    states = model.gate_states()
    dev = corpus.dev if corpus.dev else corpus.test

    history = []
    lines = []
    best_f1 = -1.0
    best_epoch = 0
    best_state = snapshot(model)
    bad_epochs = 0
    diverged = False
    stop_reason = "max_epochs"

    def emit(line):
        lines.append(line)
        if log is not None:
            log(line)

    for epoch in range(1, config.max_epochs + 1):
        try:
            batches = make_batches(corpus.train, config.batch_size,
                                   config.seed + epoch, vocab)
            mean_loss = _epoch_pass(model, batches, opt, states,
                                    config.gate_momentum)
            report = evaluate(model, dev)
        except (DivergenceError, NumericsError) as e:
            diverged = True
            stop_reason = "diverged"
            emit(f"diverged at epoch {epoch}: {e}")
            break
        history.append({"epoch": epoch, "P": report.precision,
                        "R": report.recall, "F1": report.f1,
                        "loss": mean_loss})
        emit(f"epoch {epoch} P {report.precision:.6f} R {report.recall:.6f} "
             f"F1 {report.f1:.6f} loss {mean_loss:.6f}")
        if report.f1 > best_f1:
            best_f1 = report.f1
            best_epoch = epoch
            best_state = snapshot(model)
            bad_epochs = 0
        else:
            bad_epochs += 1
        if config.stop_f1 > 0 and report.f1 >= config.stop_f1:
            stop_reason = "stop_f1"
            break
        if bad_epochs >= config.patience:
            stop_reason = "patience"
            break

    final_state = snapshot(model)
    restore(model, best_state)
    return TrainResult(model, history, lines, best_epoch, best_f1, best_state,
                       final_state, diverged, stop_reason)


SWITCH_KEYS = {"attention": "attention_mode", "reduced_bias": "reduced_bias",
               "embeddings": "embeddings"}


def ablate(config, corpus, switches, log=None):
    """Train one model per combination of the requested switch values.

    switches maps a subset of {attention, reduced_bias, embeddings} to the
    values to sweep. Every run shares the base config (seed and budgets
    included); only the swept keys differ. Returns one row dict per
    combination with test-split scores and the parameter-name census.
    """
    unknown = set(switches) - set(SWITCH_KEYS)
    if unknown:
        raise ValueError(f"unknown ablation switches: {sorted(unknown)}")
    axes = [(SWITCH_KEYS[k], tuple(v)) for k, v in sorted(switches.items())]
    rows = []
    for combo in itertools.product(*(vals for _, vals in axes)):
        overrides = dict(zip((k for k, _ in axes), combo))
        cfg = RunConfig.from_dict({**config.to_dict(), **overrides})
        result = train(cfg, corpus, log=log)
        report = evaluate(result.model, corpus.test)
        rows.append({
            "attention": cfg.attention_mode,
            "reduced_bias": cfg.reduced_bias,
            "embeddings": cfg.embeddings,
            "P": report.precision,
            "R": report.recall,
            "F1": report.f1,
            "epochs": len(result.history),
            "config": cfg.to_dict(),
            "param_names": result.model.param_names(),
        })
    return rows


def ablation_table(rows):
    """Fixed-width text table over the ablation rows."""
    header = (f"{'attention':<10} {'reduced_bias':<13} {'embeddings':<11} "
              f"{'P':>8} {'R':>8} {'F1':>8}")
    out = [header, "-" * len(header)]
    for r in rows:
        out.append(f"{r['attention']:<10} {r['reduced_bias']:<13} "
                   f"{r['embeddings']:<11} {r['P']:>8.4f} {r['R']:>8.4f} "
                   f"{r['F1']:>8.4f}")
    return out
