"""Token embeddings and the bidirectional LSTM context encoder."""

import numpy as np

from . import autodiff as ad
from .errors import ConfigError

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class EmbeddingTable:
    """vocab_size x d_model lookup matrix with reserved padding/unknown rows."""

    def __init__(self, vocab_size, d_model, pad_id, unk_id, rng, name="embed.table"):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.pad_id = pad_id
        self.unk_id = unk_id
        self.coverage = None
        data = rng.uniform(-0.1, 0.1, (vocab_size, d_model))
        data[pad_id] = 0.0
        self.table = ad.Tensor(data, requires_grad=True, name=name)

    def params(self):
        return [self.table]


def embed_tokens(tape, ids, table):
    """Row lookup. The padding row never accumulates gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    live = ids != table.pad_id
    t = table.table

    def bw(g):
        dt = np.zeros_like(t.data)
        np.add.at(dt, ids[live], g[live])
        return (dt,)
    return ad.record_op(tape, "embed_tokens", (t,), t.data[ids], bw)


def load_embedding_file(path, vocab, d_model, seed=0):
    """Build an EmbeddingTable from a text file of pretrained vectors.

    Format: header line "count dim", then one "token v1 ... v_dim" line per
    token, UTF-8. Vocab tokens missing from the file get seeded
    uniform(-0.1, 0.1) rows; the hit fraction lands in table.coverage.
    """
    vectors = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise ValueError(f"{path}:1: header must be 'count dim', got {header!r}")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValueError(f"{path}:1: header must be two integers, got {header!r}")
        if dim != d_model:
            raise ConfigError(
                f"embedding file dim {dim} does not match configured d_model {d_model}")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            cols = line.rstrip("\n").split(" ")
            if len(cols) != dim + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected token plus {dim} values, got "
                    f"{len(cols)} fields")
            try:
                vectors[cols[0]] = np.array([float(c) for c in cols[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric vector component")
    if len(vectors) != count:
        raise ValueError(
            f"{path}: header promised {count} vectors, file held {len(vectors)}")

    rng = np.random.default_rng(seed)
    table = EmbeddingTable(len(vocab.tokens), d_model, vocab.pad_id, vocab.unk_id, rng)
    hits = 0
    # Iterate in id order so missing-token rows are drawn in a reproducible
    # sequence regardless of file order.
    for tid, tok in enumerate(vocab.tokens):
        vec = vectors.get(tok)
        if vec is not None:
            table.table.data[tid] = vec
            hits += 1
        else:
            table.table.data[tid] = rng.uniform(-0.1, 0.1, d_model)
    table.table.data[vocab.pad_id] = 0.0
    table.coverage = hits / len(vocab.tokens)
    return table


class LstmParams:
    """One direction's input/recurrent/bias weights, gate order i,f,c,o."""

    def __init__(self, d_in, h, rng, name):
        s_w = np.sqrt(6.0 / (d_in + 4 * h))
        s_u = np.sqrt(6.0 / (h + 4 * h))
        self.h = h
        self.w = ad.Tensor(rng.uniform(-s_w, s_w, (d_in, 4 * h)),
                           requires_grad=True, name=name + ".w")
        self.u = ad.Tensor(rng.uniform(-s_u, s_u, (h, 4 * h)),
                           requires_grad=True, name=name + ".u")
        self.b = ad.Tensor(np.zeros(4 * h), requires_grad=True, name=name + ".b")

    def params(self):
        return [self.w, self.u, self.b]


class BiLstm:
    """Left-to-right and right-to-left LSTM passes, concatenated per position."""

    def __init__(self, d_in, h, rng, prefix="lstm."):
        self.h = h
        self.fwd = LstmParams(d_in, h, rng, prefix + "fwd")
        self.bwd = LstmParams(d_in, h, rng, prefix + "bwd")

    def params(self):
        return self.fwd.params() + self.bwd.params()

    def forward(self, tape, x, length=None):
        """Encode x (seq, d_in) -> (seq, 2h). Positions at index >= length
        output zeros and contribute nothing to the recurrences."""
        n = x.data.shape[0]
        if length is None:
            length = n
        length = int(length)
        if length > n:
            raise ValueError(f"length {length} exceeds {n} rows")
        xs = x if length == n else ad.slice_rows(tape, x, 0, length)
        f = ad.lstm_seq(tape, ad.matmul(tape, xs, self.fwd.w), self.fwd.u, self.fwd.b)
        rev = ad.reverse_rows(tape, xs)
        b = ad.lstm_seq(tape, ad.matmul(tape, rev, self.bwd.w), self.bwd.u, self.bwd.b)
        out = ad.concat_cols(tape, f, ad.reverse_rows(tape, b))
        if length != n:
            out = ad.pad_rows(tape, out, n)
        return out
