"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data/parse error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import os
import sys
from pathlib import Path
from typing import Sequence

from . import data
from .errors import BioMambaError, CheckpointError, ContractError, InputError, NumericError, ParseError
from .evaluation import EvalReport, evaluate_corpus, evaluate_qa
from .model import ModelConfig, attach_qa_head, generate, init_model, load_checkpoint, save_checkpoint
from .seeding import stream
from .train import TrainConfig, finetune_qa_loop, load_optimizer, pretrain_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RESOLVED_NAME = "config.resolved"


class UsageError(BioMambaError):
    pass


@dataclasses.dataclass
class RunConfig:
    """Flat union of model, training and data settings for one run."""

    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    train: TrainConfig = dataclasses.field(default_factory=lambda: TrainConfig(ckpt_every=100))
    vocab: str = ""
    corpus: str = ""
    out: str = ""

    _DATA_KEYS = ("vocab", "corpus", "out")

    def _section(self, key: str):
        if key in self._DATA_KEYS:
            return self
        if key in {f.name for f in dataclasses.fields(ModelConfig)}:
            return self.model
        if key in {f.name for f in dataclasses.fields(TrainConfig)}:
            return self.train
        return None

    def set(self, key: str, raw: str, where: str = "") -> None:
        target = self._section(key)
        if target is None:
            raise ParseError(f"{where}unknown config key {key!r}")
        current = getattr(target, key)
        try:
            value = _coerce(raw, type(current))
        except ValueError:
            raise ParseError(f"{where}cannot read {raw!r} as {type(current).__name__} for {key!r}") from None
        setattr(target, key, value)
        if key == "seed":
            self.model.seed = self.train.seed = value

    def items(self) -> list[tuple[str, object]]:
        out = [(f.name, getattr(self.model, f.name)) for f in dataclasses.fields(ModelConfig)]
        out += [(f.name, getattr(self.train, f.name)) for f in dataclasses.fields(TrainConfig) if f.name != "seed"]
        out += [(k, getattr(self, k)) for k in self._DATA_KEYS]
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.items())


def _coerce(raw: str, kind: type):
    raw = raw.strip()
    if kind is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str, cfg: RunConfig, source: str = "<config>") -> RunConfig:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ParseError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in stripped.split("=", 1))
        cfg.set(key, value, f"{source}:{lineno}: ")
    return cfg


def resolve_config(config_path: str | None, overrides: Sequence[str] = ()) -> RunConfig:
    """Defaults, then the config file, then ``key=value`` overrides."""
    cfg = RunConfig()
    if config_path:
        try:
            text = Path(config_path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read config {config_path}: {exc.strerror}") from None
        parse_config_text(text, cfg, str(config_path))
    for item in overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value, "--set: ")
    return cfg


def _load_vocab(path: str) -> data.Vocabulary:
    return data.load_vocab(path) if path else data.Vocabulary()


def _apply_threads() -> contextlib.AbstractContextManager:
    raw = os.environ.get("BIOMAMBA_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"BIOMAMBA_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# --------------------------------------------------------------------------- #
# commands


def cmd_tokenizer_train(args) -> int:
    if args.vocab_size < data.BASE_VOCAB:
        raise UsageError(f"--vocab-size must be at least {data.BASE_VOCAB}")
    texts = []
    for p in args.corpus:
        try:
            texts.append(Path(p).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read corpus {p}: {exc.strerror}") from None
    vocab = data.train_bpe(texts, args.vocab_size)
    try:
        data.save_vocab(vocab, args.out)
    except OSError as exc:
        raise InputError(f"cannot write {args.out}: {exc.strerror}") from None
    print(f"wrote {args.out}: {vocab.size} tokens, {len(vocab.merges)} merges")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.corpus:
        cfg.corpus = ",".join(args.corpus)
    if args.vocab is not None:
        cfg.vocab = args.vocab
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    cfg.out = args.out
    if not cfg.corpus:
        raise UsageError("pretrain needs --corpus or a 'corpus' config entry")
    vocab = _load_vocab(cfg.vocab)
    cfg.model.vocab_size = vocab.size
    cfg.model.validate()
    t = cfg.train
    tokens = data.read_corpus(cfg.corpus.split(","), vocab)
    micro_tokens = max(cfg.model.context_len, t.tokens_per_batch // t.accum_steps)
    batch_seed = int(stream(t.seed, "batching").integers(2**31))
    batches = data.build_lm_batches(tokens, cfg.model.context_len, micro_tokens, batch_seed)

    start_step, opt = 0, None
    if args.resume:
        model = load_checkpoint(args.resume)
        if dataclasses.asdict(model.config) != dataclasses.asdict(cfg.model):
            raise InputError(f"checkpoint {args.resume} was trained with a different model config")
        start_step = int(model.meta.get("step", 0))
        opt_path = Path(args.resume).with_suffix(".opt")
        if opt_path.exists():
            opt = load_optimizer(opt_path)
    else:
        model = init_model(cfg.model)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(cfg.dumps(), encoding="utf-8")
    with open(out / "train.log", "a" if args.resume else "w", encoding="utf-8") as log_fh:
        pretrain_loop(model, batches, t, out, start_step=start_step, opt=opt, log_file=log_fh)
    return EXIT_OK


def _vocab_for(model, flag: str | None) -> data.Vocabulary:
    vocab = _load_vocab(flag or "")
    if vocab.size != model.config.vocab_size:
        raise InputError(f"vocabulary has {vocab.size} tokens, checkpoint expects {model.config.vocab_size}")
    return vocab


def cmd_finetune(args) -> int:
    cfg = resolve_config(args.config, args.set)
    if args.seed is not None:
        cfg.set("seed", str(args.seed))
    model = load_checkpoint(args.ckpt)
    vocab = _vocab_for(model, args.vocab)
    examples = data.load_squad_file(args.qa)
    feats, skipped = data.build_qa_features(examples, vocab, model.config.context_len)
    print(f"examples={len(examples)} usable={len(feats)} n_skipped={skipped}")
    attach_qa_head(model, cfg.train.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(cfg.dumps(), encoding="utf-8")
    with open(out / "finetune.log", "w", encoding="utf-8") as log_fh:
        finetune_qa_loop(model, feats, cfg.train, log_file=log_fh)
    save_checkpoint(model, out / "finetuned.bmck", {"step": cfg.train.total_steps, "n_skipped": skipped})
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.corpus and not args.qa:
        raise UsageError("eval needs --corpus and/or --qa")
    model = load_checkpoint(args.ckpt)
    vocab = _vocab_for(model, args.vocab)
    report = EvalReport()
    if args.corpus:
        evaluate_corpus(model, data.read_corpus(args.corpus, vocab), report=report)
    if args.qa:
        examples = data.load_squad_file(args.qa)
        evaluate_qa(model, examples, vocab, args.k, args.max_answer_tokens, report=report)
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    print(report.table())
    return EXIT_OK


def cmd_generate(args) -> int:
    model = load_checkpoint(args.ckpt)
    vocab = _vocab_for(model, args.vocab)
    text = generate(model, vocab, args.prompt, args.max_new, args.temperature, args.top_k, args.seed)
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------- #


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="biomamba", description="Selective state-space language models for biomedical text.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    tok = sub.add_parser("tokenizer-train", help="train a byte-level BPE vocabulary")
    tok.add_argument("--corpus", nargs="+", required=True)
    tok.add_argument("--vocab-size", type=int, required=True)
    tok.add_argument("--out", required=True)
    tok.set_defaults(func=cmd_tokenizer_train)

    def run_opts(sp):
        sp.add_argument("--config", help="flat 'key = value' config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--vocab", help="vocabulary file (default: raw bytes)")
        sp.add_argument("--seed", type=int)

    pre = sub.add_parser("pretrain", help="next-token pretraining")
    run_opts(pre)
    pre.add_argument("--corpus", nargs="+")
    pre.add_argument("--out", required=True)
    pre.add_argument("--resume")
    pre.set_defaults(func=cmd_pretrain)

    ft = sub.add_parser("finetune", help="extractive QA fine-tuning")
    run_opts(ft)
    ft.add_argument("--ckpt", required=True)
    ft.add_argument("--qa", required=True)
    ft.add_argument("--out", required=True)
    ft.set_defaults(func=cmd_finetune)

    ev = sub.add_parser("eval", help="perplexity / cross-entropy and QA metrics")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", nargs="+")
    ev.add_argument("--qa")
    ev.add_argument("--out", required=True)
    ev.add_argument("--vocab")
    ev.add_argument("--k", type=int, default=5)
    ev.add_argument("--max-answer-tokens", type=int, default=30)
    ev.set_defaults(func=cmd_eval)

    gen = sub.add_parser("generate", help="sample a continuation")
    gen.add_argument("--ckpt", required=True)
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--max-new", type=int, default=64)
    gen.add_argument("--temperature", type=float, default=0.0)
    gen.add_argument("--top-k", type=int, default=0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--vocab")
    gen.set_defaults(func=cmd_generate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _apply_threads():
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: not found", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
