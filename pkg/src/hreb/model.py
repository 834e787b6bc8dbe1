"""The full tagger: embeddings, attention encoder, BiLSTM, projection, CRF."""

import numpy as np

from . import autodiff as ad
from . import crf as crf_mod
from .encoders import BiLstm, EmbeddingTable, embed_tokens, load_embedding_file
from .rhema import HierarchicalEncoder, NaiveEncoder, RhemaConfig, _glorot


def block_config(config):
    """Translate the flat run config into one attention-block config."""
    return RhemaConfig(
        d_model=config.d_model,
        z_dim=config.z_dim or None,
        v_dim=config.v_dim or None,
        n_ema_head=config.n_ema_head or config.d_model,
        chunk_size=config.chunk_size,
        attn_fn=config.attn_fn,
        rel_bias_window=config.rel_bias_window,
        silu_variant=config.silu_variant,
        norm="batch" if config.batch_norm_fidelity else "layer",
        rb_mode="classic" if config.reduced_bias == "off" else config.reduced_bias,
        rb_alpha=config.rb_alpha,
        rb_beta=config.rb_beta,
    )


class HrebModel:
    """Per-sentence forward pass producing class emissions and losses.

    Sentences are processed at their true length; callers slice padded
    batches first. All floats are 64-bit.
    """

    def __init__(self, config, vocab):
        self.config = config
        self.vocab = vocab
        rng = np.random.default_rng(config.seed)
        d = config.d_model
        n_classes = vocab.n_classes
        if n_classes < 1:
            raise ValueError("vocab carries no tags")

        if config.embeddings == "file":
            self.embed = load_embedding_file(config.embedding_path, vocab, d,
                                             seed=config.seed)
        else:
            self.embed = EmbeddingTable(len(vocab.tokens), d, vocab.pad_id,
                                        vocab.unk_id, rng)
        block = block_config(config)
        if config.attention_mode == "hema":
            self.encoder = HierarchicalEncoder(block, rng)
        else:
            self.encoder = NaiveEncoder(block, rng)
        self.lstm = BiLstm(d, config.h_lstm, rng)
        self.w_out = ad.Tensor(_glorot(rng, (2 * config.h_lstm, n_classes)),
                               requires_grad=True, name="proj.w")
        self.b_out = ad.Tensor(np.zeros(n_classes), requires_grad=True,
                               name="proj.b")
        self.crf = crf_mod.CrfParams(n_classes, tags=vocab.tags,
                                     strict=config.strict_transitions)

    def params(self):
        out = (self.embed.params() + self.encoder.params() + self.lstm.params()
               + [self.w_out, self.b_out])
        if self.config.loss_head == "crf":
            out = out + self.crf.params()
        return out

    def param_names(self):
        return [p.name for p in self.params()]

    def gate_states(self):
        return self.encoder.gate_states()

    def emissions(self, tape, ids, traces=None):
        """(n, C) class scores for one true-length id sequence."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError("expected a non-empty 1-d id sequence")
        x = embed_tokens(tape, ids, self.embed)
        h = self.encoder.forward(tape, x, pad_mask=None, traces=traces)
        ctx = self.lstm.forward(tape, h)
        return ad.add(tape, ad.matmul(tape, ctx, self.w_out), self.b_out)

    def sentence_nll(self, tape, ids, tag_ids):
        """Training loss for one sentence (a sum over its positions)."""
        e = self.emissions(tape, ids)
        tag_ids = np.asarray(tag_ids, dtype=np.int64)
        if self.config.loss_head == "crf":
            return crf_mod.crf_nll(tape, e, tag_ids, self.crf)
        probs = ad.softmax_rows(tape, e, np.ones(e.data.shape, dtype=bool))
        onehot = np.zeros(e.data.shape)
        onehot[np.arange(tag_ids.size), tag_ids] = 1.0
        return crf_mod.token_nll(tape, probs, onehot)

    def decode(self, ids, traces=None):
        """Best tag-id path for one true-length id sequence, no tape."""
        e = self.emissions(None, ids, traces=traces)
        if self.config.loss_head == "crf":
            path, _ = crf_mod.viterbi(e, self.crf)
            return np.asarray(path, dtype=np.int64)
        return np.argmax(e.data, axis=1).astype(np.int64)

    def predict_tags(self, tokens):
        """Tag names for one tokenized sentence."""
        ids = self.vocab.encode_tokens(tokens)
        path = self.decode(ids)
        return [self.vocab.tags[i] for i in path]
