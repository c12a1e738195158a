"""Command-line entry point: gen-data, train, evaluate, bench, dump-attn."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import count_scores, run_bench, write_csv
from .checkpoint import load_checkpoint
from .config import read_key_values, coerce_dataclass
from .data import SPLITS, SyntheticSpec, generate_corpus, read_corpus, read_similarity, write_corpus
from .training import TrainConfig, evaluate, load_train_config, train, encode_split


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_gen_data(args) -> int:
    values = read_key_values(args.config) if args.config else {}
    spec = coerce_dataclass(SyntheticSpec, values)
    if args.seed is not None:
        spec.seed = args.seed
    corpus = generate_corpus(spec)  # validates before anything is written
    write_corpus(corpus, args.out)
    total = sum(len(v) for v in corpus.splits.values())
    print(f"samples={total} vocab_size={len(corpus.vocab)} out={args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_train_config(args.config) if args.config else TrainConfig()
    if args.data:
        cfg.data_dir = args.data
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    art = train(cfg)
    print(f"checkpoint={art.checkpoint} log={art.metric_log} best_dev_bleu4={art.best_dev_bleu4!r}")
    return 0


def _load_split(data_dir: str, split: str):
    corpus = read_corpus(data_dir, (split,))
    if split not in corpus.splits:
        raise FileNotFoundError(f"split {split!r} not found under {data_dir}")
    return corpus


def cmd_evaluate(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    corpus = _load_split(args.data, args.split)
    sim_path = Path(args.data) / f"similarity_{args.split}.csv"
    sim = read_similarity(sim_path) if sim_path.exists() else None
    result = evaluate(model, corpus[args.split], vocab or corpus.vocab, sim, beam=args.beam, max_len=args.max_len)
    lines = [f"{k}={v!r}" for k, v in result.metrics.items()]
    lines += [f"cad_layer{layer}={v!r}" for layer, v in result.layer_cad.items()]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    variants = [v.strip() for v in args.variant.split(",")]
    rows = run_bench(_ints(args.T), variants, args.N, args.d, args.repeats)
    for r in rows:
        # exact counts come from a cheap pass at small width
        r.scores = count_scores(r.variant, r.T, r.n_positions)
    if args.out:
        write_csv(args.out, rows)
    write_csv(sys.stdout, rows)
    return 0


def _write_matrix(path: Path, rows: np.ndarray) -> None:
    np.savetxt(path, rows, delimiter=",", fmt="%.17g")


def cmd_dump_attn(args) -> int:
    model, vocab, _ = load_checkpoint(args.checkpoint)
    corpus = read_corpus(args.data, (args.split,) if args.split else SPLITS)
    sample = corpus.find(args.sample_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (_, enc), = encode_split(model, [sample], vocab or corpus.vocab)
    written = 0
    for m in enc.maps:
        stem = f"layer{m.layer}_head{m.head}"
        _write_matrix(out / f"{stem}_weights.csv", m.weights)
        written += 1
        if m.positions is not None:
            _write_matrix(out / f"{stem}_positions.csv", m.positions)
            written += 1
    print(f"sample={sample.id} files={written} out={out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="glossattn", description=__doc__)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic corpus")
    g.add_argument("--config", help="key=value corpus spec (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a translator")
    t.add_argument("--config", help="key=value training config")
    t.add_argument("--data", help="corpus directory (overrides data_dir)")
    t.add_argument("--out", help="run directory (overrides out_dir)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=SPLITS, default="test")
    e.add_argument("--beam", type=int, default=1)
    e.add_argument("--max-len", type=int, default=30)
    e.add_argument("--out", help="also write the report here")
    e.set_defaults(func=cmd_evaluate)

    b = sub.add_parser("bench", help="time attention forward passes")
    b.add_argument("--T", default="512,1024,2048,4096", help="comma-separated lengths")
    b.add_argument("--N", type=int, default=7)
    b.add_argument("--d", type=int, default=64)
    b.add_argument("--variant", default="gloss,self")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out", help="CSV path (also printed)")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("dump-attn", help="write encoder attention maps of one sample")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--sample-id", required=True)
    d.add_argument("--split", choices=SPLITS)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.func(args)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        message = str(exc).replace("\n", " ").replace('"', "'")
        print(f'error={type(exc).__name__} message="{message}"', file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
