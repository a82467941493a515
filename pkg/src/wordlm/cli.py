"""Command-line entry point: train, evaluate, generate, analyze, tokenize.

One run directory per experiment holds everything needed to reproduce it:
config.json (the fully resolved settings), tokenizer files, checkpoints/,
metrics.jsonl, report.json, and rendered figures. Option precedence is
flags > --config file > preset > built-in defaults. Exit codes: 0 success,
2 usage or configuration error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .corpus import cleaned_text, clean_text, compute_stats, load_documents, split_documents
from .costmodel import PRESETS, CostModelParams, format_report, summary_report
from .errors import ConfigError, SchemeMismatchError, WordLMError
from .evaluation import evaluate_model
from .generation import GenAudit, generate_flat, generate_hierarchical, step_count_audit
from .model import ModelConfig, build_model, count_params, load_checkpoint, model_from_checkpoint
from .tokenizers import (
    BpeTokenizer,
    ByteTokenizer,
    CharTokenizer,
    Vocab,
    WordTokenizer,
    context_budget,
    make_tokenizer,
)
from .training import TrainConfig, train

TOKENIZERS = ("byte", "char", "subword", "word", "ebyte", "echar")

DEFAULTS = {
    "corpus": None,
    "tokenizer": "char",
    "preset": "desk",
    "n_cls": 4,
    "seed": 0,
    "name": None,
    "out": None,
    "block_chars": 192,
    "lr": None,
    "batch_size": None,
    "epochs": None,
    "weight_decay": 0.1,
    "eval_every": 1,
    "grad_clip": 1.0,
    "eval_positions": 60,
    "eval_blocks": 8,
    "layers": None,
    "dim": None,
    "heads": None,
    "encoder_layers": 2,
    "worddec_layers": 2,
    "max_word_len": 24,
    "bpe_vocab": 512,
    "train_ratio": 0.9,
}

MODEL_PRESETS = {
    "desk": {"layers": 4, "dim": 128, "heads": 4, "epochs": 5, "lr": 3e-4, "batch_size": 4},
    "paper": {"layers": 8, "dim": 512, "heads": 8, "epochs": 100, "lr": 1e-4, "batch_size": 2},
}


def _base_scheme(tokenizer: str) -> tuple[str, bool]:
    """Map a tokenizer name to (base token scheme, hierarchical?)."""
    if tokenizer not in TOKENIZERS:
        raise ConfigError(f"unknown tokenizer {tokenizer!r}; expected one of {TOKENIZERS}")
    if tokenizer.startswith("e"):
        return tokenizer[1:], True
    return tokenizer, False


def _resolve_config(args: argparse.Namespace) -> dict:
    """defaults < preset < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    preset = cfg["preset"]
    if preset not in MODEL_PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected desk or paper")
    for key, val in MODEL_PRESETS[preset].items():
        if cfg[key] is None:
            cfg[key] = val
    return cfg


def _output_root(cfg: dict) -> Path:
    root = cfg.get("out") or os.environ.get("WORDLM_OUTPUT_ROOT") or "runs"
    return Path(root)


def _save_tokenizer(tok, scheme: str, run_dir: Path) -> None:
    if scheme == "byte":
        return
    if isinstance(tok, BpeTokenizer):
        tok.save(run_dir / "tokenizer.json", run_dir / "merges.txt")
        return
    (run_dir / "tokenizer.json").write_text(tok.vocab.to_json(), encoding="utf-8")


def _load_tokenizer(scheme: str, run_dir: Path):
    if scheme == "byte":
        return ByteTokenizer()
    vocab_path = run_dir / "tokenizer.json"
    if not vocab_path.exists():
        raise ConfigError(f"tokenizer file not found: {vocab_path}")
    if scheme == "subword":
        return BpeTokenizer.load(vocab_path, run_dir / "merges.txt")
    vocab = Vocab.from_json(vocab_path.read_text(encoding="utf-8"))
    return CharTokenizer(vocab) if scheme == "char" else WordTokenizer(vocab)


def _load_run(run_dir: str | Path):
    """(config dict, checkpoint, model, tokenizer) for a finished run."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"not a run directory (missing config.json): {run_dir}")
    cfg = json.loads(cfg_path.read_text(encoding="utf-8"))
    ckpt_path = run_dir / "checkpoints" / "latest.ckpt"
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path)
    model = model_from_checkpoint(ckpt)
    tok = _load_tokenizer(model.config.scheme, run_dir)
    return cfg, ckpt, model, tok


# -- commands ----------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    if not cfg["corpus"]:
        raise ConfigError("train requires --corpus")
    corpus_path = Path(cfg["corpus"])
    if not corpus_path.exists():
        raise ConfigError(f"corpus file not found: {corpus_path}")

    scheme, hier = _base_scheme(cfg["tokenizer"])
    name = cfg["name"] or f"{cfg['tokenizer']}-{cfg['preset']}-seed{cfg['seed']}"
    run_dir = _output_root(cfg) / name
    run_dir.mkdir(parents=True, exist_ok=True)

    docs = load_documents(corpus_path)
    split = split_documents(docs, seed=cfg["seed"], train_ratio=cfg["train_ratio"])
    train_texts = cleaned_text(split.train)
    valid_texts = cleaned_text(split.valid)
    stats = compute_stats(split.train)

    tok = make_tokenizer(scheme, train_texts, bpe_vocab_size=cfg["bpe_vocab"])
    _save_tokenizer(tok, scheme, run_dir)

    block_tokens = 0
    if not hier:
        cps = tok.chars_per_token(train_texts) if scheme == "subword" else None
        block_tokens = context_budget(scheme, stats, cfg["block_chars"], cps)

    mcfg = ModelConfig(
        vocab_size=tok.vocab_size,
        scheme=scheme,
        base_layers=cfg["layers"],
        dim=cfg["dim"],
        heads=cfg["heads"],
        encoder_layers=cfg["encoder_layers"] if hier else 0,
        worddec_layers=cfg["worddec_layers"] if hier else 0,
        n_cls=cfg["n_cls"] if hier else 1,
        max_word_len=cfg["max_word_len"],
        block_chars=cfg["block_chars"],
        block_tokens=block_tokens,
    )
    tcfg = TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        block_chars=cfg["block_chars"],
        epochs=cfg["epochs"],
        weight_decay=cfg["weight_decay"],
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
        grad_clip=cfg["grad_clip"],
        eval_positions=cfg["eval_positions"],
        eval_blocks=cfg["eval_blocks"],
    )

    echo = dict(cfg)
    echo["vocab_size"] = tok.vocab_size
    echo["block_tokens"] = block_tokens
    echo["corpus"] = str(corpus_path)
    (run_dir / "config.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    model = build_model(mcfg, seed=cfg["seed"])
    print(f"training {cfg['tokenizer']} ({count_params(mcfg):,} params) -> {run_dir}")

    def log_fn(entry):
        print(
            "epoch {epoch} step {step} loss {train_loss:.4f} "
            "word_acc {val_word_acc:.2f}% char_acc {val_char_acc:.2f}%".format(**entry)
        )

    result = train(
        model,
        tok,
        train_texts,
        valid_texts,
        tcfg,
        run_dir,
        resume=bool(getattr(args, "resume", False)),
        log_fn=log_fn,
    )

    from .figures import training_curves

    fig = training_curves(run_dir / "metrics.jsonl", run_dir / "figures" / "training_curves.png")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"figure: {fig}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg, _ckpt, model, tok = _load_run(args.run_dir)
    if args.tokenizer is not None:
        scheme, hier = _base_scheme(args.tokenizer)
        if scheme != model.config.scheme or hier != model.config.hierarchical:
            raise SchemeMismatchError(
                f"checkpoint was trained as {cfg['tokenizer']!r}, not {args.tokenizer!r}"
            )
    corpus_path = Path(args.corpus or cfg["corpus"])
    if not corpus_path.exists():
        raise ConfigError(f"corpus file not found: {corpus_path}")
    docs = load_documents(corpus_path)
    split = split_documents(docs, seed=cfg["seed"], train_ratio=cfg["train_ratio"])
    valid_texts = cleaned_text(split.valid)
    stats = compute_stats(split.train)

    report = evaluate_model(
        model,
        tok,
        valid_texts,
        word_freq=stats.word_freq,
        budget=cfg["block_chars"],
        max_positions=args.max_positions,
        max_blocks=args.max_blocks,
    )
    run_dir = Path(args.run_dir)
    (run_dir / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.to_table())

    from .figures import accuracy_bars, training_curves

    figures = [accuracy_bars(json.loads(report.to_json()), run_dir / "figures" / "accuracy.png")]
    metrics = run_dir / "metrics.jsonl"
    if metrics.exists():
        figures.append(training_curves(metrics, run_dir / "figures" / "training_curves.png"))
    for fig in figures:
        print(f"figure: {fig}")
    print(f"report: {run_dir / 'report.json'}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    cfg, _ckpt, model, tok = _load_run(args.run_dir)
    if args.pipelined and not model.config.hierarchical:
        raise ConfigError("--pipelined applies only to hierarchical checkpoints")
    audit = GenAudit() if args.audit else None
    if model.config.hierarchical:
        text = generate_hierarchical(
            model, tok, args.prompt, args.max_new, pipelined=args.pipelined, audit=audit
        )
    else:
        text = generate_flat(model, tok, args.prompt, args.max_new, audit=audit)
    print(text)
    if audit is not None:
        print(json.dumps(step_count_audit(audit), sort_keys=True), file=sys.stderr)
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    if args.preset not in PRESETS:
        raise ConfigError(f"unknown preset {args.preset!r}; expected one of {sorted(PRESETS)}")
    params = CostModelParams(
        M=args.M,
        L=args.layers,
        D=args.dim,
        T=args.T,
        N_corpus=args.N,
        c=args.c if args.c is not None else PRESETS[args.preset],
        s=args.s,
        t=args.t,
    )
    report = summary_report(params, n_cls=args.n_cls)
    print(format_report(report))

    out_dir = Path(args.out) if args.out else _output_root({}) / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "analysis.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    from .figures import speedup_curves

    fig = speedup_curves(params, out_dir / "speedup_curves.png")
    print(f"analysis: {out_dir / 'analysis.json'}")
    print(f"figure: {fig}")
    return 0


def cmd_tokenize(args: argparse.Namespace) -> int:
    scheme, _ = _base_scheme(args.tokenizer)
    text = clean_text(args.text)
    if args.run_dir:
        tok = _load_tokenizer(scheme, Path(args.run_dir))
    else:
        tok = make_tokenizer(scheme, [text], bpe_vocab_size=args.bpe_vocab)
    ids = list(tok.encode(text).ids)
    print(json.dumps(ids))
    return 0


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wordlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model on a corpus")
    p_train.add_argument("--corpus", help="plain-text corpus; blank lines separate documents")
    p_train.add_argument("--config", help="flat JSON config file (flags override it)")
    p_train.add_argument("--tokenizer", choices=TOKENIZERS)
    p_train.add_argument("--preset", choices=sorted(MODEL_PRESETS))
    p_train.add_argument("--name", help="run directory name (default: tokenizer-preset-seed)")
    p_train.add_argument("--out", help="output root (default: $WORDLM_OUTPUT_ROOT or ./runs)")
    p_train.add_argument("--resume", action="store_true", help="resume from latest checkpoint")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--batch-size", dest="batch_size", type=int)
    p_train.add_argument("--block-chars", dest="block_chars", type=int)
    p_train.add_argument("--layers", type=int)
    p_train.add_argument("--dim", type=int)
    p_train.add_argument("--heads", type=int)
    p_train.add_argument("--n-cls", dest="n_cls", type=int)
    p_train.add_argument("--encoder-layers", dest="encoder_layers", type=int)
    p_train.add_argument("--worddec-layers", dest="worddec_layers", type=int)
    p_train.add_argument("--max-word-len", dest="max_word_len", type=int)
    p_train.add_argument("--weight-decay", dest="weight_decay", type=float)
    p_train.add_argument("--grad-clip", dest="grad_clip", type=float)
    p_train.add_argument("--eval-every", dest="eval_every", type=int)
    p_train.add_argument("--eval-positions", dest="eval_positions", type=int)
    p_train.add_argument("--eval-blocks", dest="eval_blocks", type=int)
    p_train.add_argument("--bpe-vocab", dest="bpe_vocab", type=int)
    p_train.add_argument("--train-ratio", dest="train_ratio", type=float)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a trained run on its validation split")
    p_eval.add_argument("--run-dir", required=True)
    p_eval.add_argument("--corpus", help="override the corpus path recorded in the run")
    p_eval.add_argument("--tokenizer", choices=TOKENIZERS, help="sanity check against checkpoint")
    p_eval.add_argument("--max-positions", dest="max_positions", type=int, default=500)
    p_eval.add_argument("--max-blocks", dest="max_blocks", type=int, default=None)
    p_eval.set_defaults(func=cmd_evaluate)

    p_gen = sub.add_parser("generate", help="greedy continuation from a trained checkpoint")
    p_gen.add_argument("--run-dir", required=True)
    p_gen.add_argument("--prompt", required=True)
    p_gen.add_argument(
        "--max-new", dest="max_new", type=int, default=50, help="words (hierarchical) or tokens"
    )
    p_gen.add_argument("--pipelined", action="store_true")
    p_gen.add_argument("--audit", action="store_true", help="print step counts to stderr")
    p_gen.set_defaults(func=cmd_generate)

    p_an = sub.add_parser("analyze", help="print the analytic cost model table")
    p_an.add_argument("--preset", default="en", help="language preset for chars/word")
    p_an.add_argument("--c", type=float, help="chars per word (overrides preset)")
    p_an.add_argument("--T", type=int, default=192)
    p_an.add_argument("--layers", type=int, default=8)
    p_an.add_argument("--dim", type=int, default=512)
    p_an.add_argument("--M", type=float, default=1e9)
    p_an.add_argument("--N", type=float, default=1e9)
    p_an.add_argument("--s", type=float, default=2.8)
    p_an.add_argument("--t", type=float, default=1.0)
    p_an.add_argument("--n-cls", dest="n_cls", type=int, default=4)
    p_an.add_argument("--out", help="directory for analysis.json and figures")
    p_an.set_defaults(func=cmd_analyze)

    p_tok = sub.add_parser("tokenize", help="show token ids for a text")
    p_tok.add_argument("text")
    p_tok.add_argument("--tokenizer", required=True, choices=TOKENIZERS)
    p_tok.add_argument("--run-dir", help="load the tokenizer of a trained run")
    p_tok.add_argument("--bpe-vocab", dest="bpe_vocab", type=int, default=512)
    p_tok.set_defaults(func=cmd_tokenize)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, SchemeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except WordLMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
