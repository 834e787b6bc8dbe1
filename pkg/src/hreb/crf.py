"""Linear-chain CRF scoring, partition, decoding, and the ablation heads.

The transition table covers C tag classes plus synthetic start/stop states
(row C = leaving start, column C+1 = entering stop). Entries into start and
out of stop are -inf and never receive gradient; everything else is learned.
"""

import warnings

import numpy as np

from . import autodiff as ad
from . import kernels
from .errors import NumericsError

# Times a gold-label probability underflowed the token_nll clamp.
CLAMP_EVENTS = 0

PROB_FLOOR = 1e-12


class CrfParams:
    """Transition parameters over C classes plus start/stop."""

    def __init__(self, n_classes, tags=None, strict=False, name="crf.trans"):
        self.n_classes = n_classes
        self.start = n_classes
        self.stop = n_classes + 1
        data = np.zeros((n_classes + 2, n_classes + 2))
        data[:, self.start] = -np.inf
        data[self.stop, :] = -np.inf
        self.trans = ad.Tensor(data, requires_grad=True, name=name)
        self.strict_mask = None
        if strict:
            if tags is None:
                raise ValueError("strict transition masking needs the tag names")
            self.strict_mask = build_strict_mask(tags)

    def params(self):
        return [self.trans]


def build_strict_mask(tags):
    """Additive mask forbidding label bigrams that break BIO well-formedness.

    I-X may only follow B-X or I-X; every other entry is left at zero.
    """
    c = len(tags)
    mask = np.zeros((c + 2, c + 2))
    for j, tag in enumerate(tags):
        if not tag.startswith("I-"):
            continue
        body = tag[2:]
        legal = {"B-" + body, "I-" + body}
        for i, prev in enumerate(tags):
            if prev not in legal:
                mask[i, j] = -np.inf
        mask[c, j] = -np.inf  # start cannot enter a continuation
    return mask


def sequence_score(tape, emissions, tags, params):
    """Unnormalized log score of one tag path."""
    return ad.crf_path_score(tape, emissions, params.trans, tags,
                             params.n_classes, params.strict_mask)


def log_partition(tape, emissions, params):
    """Log of the path-sum, via the forward algorithm in log space."""
    return ad.crf_log_z(tape, emissions, params.trans,
                        params.n_classes, params.strict_mask)


def crf_nll(tape, emissions, tags, params):
    """Negative log conditional likelihood of the gold path."""
    return ad.sub(tape, log_partition(tape, emissions, params),
                  sequence_score(tape, emissions, tags, params))


def viterbi(emissions, params):
    """Exact best path and its score.

    Ties break toward the lower class index at every backtracking step, so
    the result is deterministic.
    """
    emissions = np.ascontiguousarray(
        emissions.data if isinstance(emissions, ad.Tensor) else emissions,
        dtype=np.float64)
    t = params.trans.data
    if params.strict_mask is not None:
        t = t + params.strict_mask
    c = params.n_classes
    core = np.ascontiguousarray(t[:c, :c])
    start = np.ascontiguousarray(t[c, :c])
    stop = np.ascontiguousarray(t[:c, c + 1])
    path, score = kernels.viterbi(emissions, core, start, stop)
    if not np.isfinite(score):
        raise NumericsError("no admissible tag path has finite score")
    return path, float(score)


def token_nll(tape, probs, onehot):
    """Per-token cross entropy, summed: the no-decoder ablation loss.

    probs rows must already be simplexes. Gold-label probabilities below
    PROB_FLOOR are clamped there; each such batch trips a warning and bumps
    the module counter.
    """
    global CLAMP_EVENTS
    onehot = np.asarray(onehot, dtype=np.float64)
    gold = probs.data[onehot > 0]
    n_low = int((gold < PROB_FLOOR).sum())
    if n_low:
        CLAMP_EVENTS += n_low
        warnings.warn(
            f"{n_low} gold-label probabilities fell below {PROB_FLOOR}; clamped")
    clamped = ad.clamp_min(tape, probs, PROB_FLOOR)
    picked = ad.mul(tape, ad.log(tape, clamped), ad.Tensor(onehot, name="onehot"))
    return ad.neg(tape, ad.sum_all(tape, picked))


def clamp_count():
    return CLAMP_EVENTS


def hmm_joint_log_prob(init, trans, emit, observations, states):
    """log P(states, observations) under a discrete HMM: the generative
    counterpart the discriminative chain is usually contrasted with.

    Zero-probability factors yield -inf, not an error.
    """
    init = np.asarray(init, dtype=np.float64)
    trans = np.asarray(trans, dtype=np.float64)
    emit = np.asarray(emit, dtype=np.float64)
    states = np.asarray(states, dtype=np.int64)
    observations = np.asarray(observations, dtype=np.int64)
    if states.shape != observations.shape:
        raise ValueError("states and observations must have equal length")
    with np.errstate(divide="ignore"):
        lp = np.log(init[states[0]]) + np.log(emit[states[0], observations[0]])
        for t in range(1, states.shape[0]):
            lp += np.log(trans[states[t - 1], states[t]])
            lp += np.log(emit[states[t], observations[t]])
    return float(lp)
