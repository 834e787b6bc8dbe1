"""Command line: train, eval, predict, inspect, verify, stats.

Exit codes: 0 success, 1 verification failure, 2 config or data error,
3 checkpoint incompatibility, 4 numeric divergence. User errors print a
one-line message, never a traceback.
"""

import argparse
import json
import os
import sys

from . import verify as verify_mod
from .checkpoint import load_model, save_checkpoint
from .config import parse_config
from .data import Corpus, corpus_stats, decode_spans, parse_conll
from .errors import CheckpointError, ConfigError, DivergenceError, NumericsError
from .training import evaluate, train

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_CKPT = 3
EXIT_DIVERGED = 4


def _read_corpus_file(key, path):
    if not path:
        raise ConfigError(f"config key {key!r} is required for this command")
    try:
        return parse_conll(path)
    except OSError as e:
        raise ConfigError(f"config key {key!r}: cannot read {path}: {e.strerror}")
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: {path}: {e}")


def _load_corpus(cfg):
    train_split = _read_corpus_file("train_path", cfg.train_path)
    test_split = (_read_corpus_file("test_path", cfg.test_path)
                  if cfg.test_path else [])
    if cfg.dev_path:
        dev_split = _read_corpus_file("dev_path", cfg.dev_path)
    elif test_split:
        dev_split = test_split  # alias: validation reuses the test file
    else:
        dev_split = train_split
    return Corpus(train_split, dev_split, test_split)


def cmd_train(args):
    cfg = parse_config(args.config)
    corpus = _load_corpus(cfg)
    os.makedirs(args.out, exist_ok=True)
    for line in cfg.lines():
        print(line)
    result = train(cfg, corpus, log=lambda s: print(s, flush=True))
    vocab = result.model.vocab
    save_checkpoint(os.path.join(args.out, "best.ckpt"), cfg, vocab,
                    result.best_state)
    save_checkpoint(os.path.join(args.out, "final.ckpt"), cfg, vocab,
                    result.final_state)
    with open(os.path.join(args.out, "metrics.log"), "w", encoding="utf-8") as fh:
        fh.write("".join(cl + "\n" for cl in cfg.lines()))
        fh.write("".join(line + "\n" for line in result.lines))
    with open(os.path.join(args.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(result.summary(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"best epoch {result.best_epoch} F1 {result.best_f1:.6f} "
          f"({result.stop_reason})")
    if result.diverged:
        print("training diverged; best checkpoint retained", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_eval(args):
    model, _ = load_model(args.ckpt)
    try:
        sentences = parse_conll(args.corpus)
    except OSError as e:
        raise ConfigError(f"cannot read corpus {args.corpus}: {e.strerror}")
    report = evaluate(model, sentences)
    for line in report.lines():
        print(line)
    return EXIT_OK


def cmd_predict(args):
    model, _ = load_model(args.ckpt)
    try:
        with open(args.infile, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read input {args.infile}: {e.strerror}")
    skipped = 0
    out_lines = []
    for raw in lines:
        tokens = raw.split()
        if not tokens:
            skipped += 1
            continue
        for tok, tag in zip(tokens, model.predict_tags(tokens)):
            out_lines.append(f"{tok}\t{tag}\n")
        out_lines.append("\n")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("".join(out_lines))
    if skipped:
        print(f"warning: skipped {skipped} empty input line(s)", file=sys.stderr)
    return EXIT_OK


def cmd_inspect(args):
    model, _ = load_model(args.ckpt)
    text = args.sentence
    tokens = text.split() if " " in text else list(text)
    if not tokens:
        raise ConfigError("empty sentence")
    ids = model.vocab.encode_tokens(tokens)
    traces = []
    path = model.decode(ids, traces=traces)
    for trace in traces:
        for line in trace.lines():
            print(line)
    tags = [model.vocab.tags[i] for i in path]
    print("tokens " + " ".join(tokens))
    print("tags " + " ".join(tags))
    for start, end, kind in decode_spans(tags, "lenient"):
        print(f"span {start} {end} {kind}")
    return EXIT_OK


def cmd_verify(args):
    ok, results = verify_mod.run_suites(args.suite)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_stats(args):
    paths = args.corpus
    splits = []
    for p in paths:
        try:
            splits.append(parse_conll(p))
        except OSError as e:
            raise ConfigError(f"cannot read corpus {p}: {e.strerror}")
    if len(splits) == 1:
        corpus = Corpus(splits[0], [], [])
    elif len(splits) == 2:
        # train + test; validation aliases the test split
        corpus = Corpus(splits[0], splits[1], splits[1])
    elif len(splits) == 3:
        corpus = Corpus(splits[0], splits[1], splits[2])
    else:
        raise ConfigError("pass 1-3 corpus files: train [dev] test")
    st = corpus_stats(corpus)
    print(f"classes {st.n_classes}")
    print(f"train {st.sizes['train']}")
    print(f"dev {st.sizes['dev']}")
    print(f"test {st.sizes['test']}")
    print(f"avg_len {st.avg_len:.2f}")
    print(f"max_len {st.max_len}")
    print(f"min_len {st.min_len}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hreb",
        description="EMA-gated hierarchical attention sequence tagger")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a corpus")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="tag raw tokenized sentences")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True,
                   help="one space-separated sentence per line")
    p.add_argument("--out", required=True, help="CoNLL-format output file")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("inspect", help="dump attention internals for one sentence")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--sentence", required=True,
                   help="space-separated tokens, or an unsegmented string")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("verify", help="run the built-in correctness suites")
    p.add_argument("--suite", default="all",
                   choices=("all",) + verify_mod.SUITES)
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--corpus", nargs="+", required=True,
                   help="train [dev] test corpus files")
    p.set_defaults(fn=cmd_stats)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CKPT
    except (DivergenceError, NumericsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
