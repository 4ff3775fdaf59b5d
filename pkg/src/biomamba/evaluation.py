"""Corpus cross-entropy/perplexity and QA exact-match/MRR."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import QAExample, Vocabulary, collate, decode, make_windows, normalize_answer, qa_feature
from .errors import ContractError, InputError
from .model import LMModel, lm_forward, qa_logits

DEFAULT_TOP_K = 5
DEFAULT_MAX_ANSWER_TOKENS = 30


def corpus_nll(model: LMModel, tokens, context_len: int | None = None, batch_windows: int = 8) -> tuple[float, int]:
    """Summed next-token negative log-likelihood (nats, float64) and the target count."""
    context_len = context_len or model.config.context_len
    if context_len > model.config.context_len:
        raise ContractError(f"context_len {context_len} exceeds the model's {model.config.context_len}")
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise InputError("empty evaluation corpus")
    windows = make_windows(tokens, context_len)
    total, count = 0.0, 0
    with tn.no_grad():
        for i in range(0, len(windows), batch_windows):
            batch = collate(windows[i : i + batch_windows], context_len)
            logp = tn.log_softmax(lm_forward(model, batch.inputs)).data
            picked = np.take_along_axis(logp, batch.targets[..., None], axis=-1)[..., 0]
            total -= float(np.sum(picked[batch.valid_mask], dtype=np.float64))
            count += batch.n_targets
    return total, count


def corpus_cross_entropy(model: LMModel, tokens, context_len: int | None = None) -> float:
    total, count = corpus_nll(model, tokens, context_len)
    return total / count


def perplexity_from_ce(ce: float) -> float:
    return math.exp(ce)


def perplexity(model: LMModel, tokens, context_len: int | None = None) -> float:
    return perplexity_from_ce(corpus_cross_entropy(model, tokens, context_len))


# --------------------------------------------------------------------------- #
# span ranking


@dataclass(frozen=True)
class SpanCandidate:
    start: int
    end: int
    score: float


@dataclass
class RankedAnswers:
    answers: list[tuple[str, float]] = field(default_factory=list)
    spans: list[SpanCandidate] = field(default_factory=list)

    @property
    def texts(self) -> list[str]:
        return [t for t, _ in self.answers]


def extract_top_k_spans(start_logits, end_logits, k: int = DEFAULT_TOP_K, max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS) -> list[SpanCandidate]:
    """Best ``k`` spans by ``start[s] + end[e]`` with ``s <= e <= s + max_answer_tokens``.

    Positions holding ``-inf`` are masked. Equal scores prefer smaller ``s`` then ``e``.
    """
    s = np.asarray(getattr(start_logits, "data", start_logits), dtype=np.float64).reshape(-1)
    e = np.asarray(getattr(end_logits, "data", end_logits), dtype=np.float64).reshape(-1)
    if s.shape != e.shape:
        raise ContractError(f"start/end logits differ in length: {s.size} vs {e.size}")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    n = s.size
    ss, ee = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    legal = (ee >= ss) & (ee <= ss + max_answer_tokens) & np.isfinite(s)[:, None] & np.isfinite(e)[None, :]
    ss, ee = ss[legal], ee[legal]
    if ss.size == 0:
        return []
    scores = s[ss] + e[ee]
    order = np.lexsort((ee, ss, -scores))[:k]
    return [SpanCandidate(int(ss[i]), int(ee[i]), float(scores[i])) for i in order]


def rank_answers(tokens, start_logits, end_logits, vocab: Vocabulary, k: int = DEFAULT_TOP_K, max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS) -> RankedAnswers:
    spans = extract_top_k_spans(start_logits, end_logits, k, max_answer_tokens)
    answers = [(decode(tokens[c.start : c.end + 1], vocab).strip(), c.score) for c in spans]
    return RankedAnswers(answers, spans)


# --------------------------------------------------------------------------- #
# QA metrics


def _matches(prediction: str, golds: Sequence[str]) -> bool:
    p = normalize_answer(prediction)
    return any(p == normalize_answer(g) for g in golds)


def _check_lengths(a: Sequence, b: Sequence) -> None:
    if len(a) != len(b):
        raise ContractError(f"{len(a)} predictions for {len(b)} gold entries")
    if not a:
        raise InputError("cannot score an empty evaluation set")


def exact_match_accuracy(predictions: Sequence[str], golds: Sequence[Sequence[str]]) -> float:
    _check_lengths(predictions, golds)
    return sum(_matches(p, g) for p, g in zip(predictions, golds)) / len(predictions)


def mean_reciprocal_rank(ranked: Sequence[RankedAnswers | Sequence[str]], golds: Sequence[Sequence[str]]) -> float:
    _check_lengths(ranked, golds)
    total = 0.0
    for cands, gold in zip(ranked, golds):
        texts = cands.texts if isinstance(cands, RankedAnswers) else cands
        for rank, text in enumerate(texts, start=1):
            if _matches(text, gold):
                total += 1.0 / rank
                break
    return total / len(ranked)


@dataclass
class EvalReport:
    cross_entropy: float | None = None
    perplexity: float | None = None
    token_count: int | None = None
    acc: float | None = None
    mrr: float | None = None
    n_evaluated: int | None = None
    n_skipped: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def table(self) -> str:
        rows = [(k, f"{v:.6f}" if isinstance(v, float) else str(v)) for k, v in self.to_dict().items()]
        width = max((len(k) for k, _ in rows), default=0)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def evaluate_corpus(model: LMModel, tokens, context_len: int | None = None, report: EvalReport | None = None) -> EvalReport:
    report = report or EvalReport()
    total, count = corpus_nll(model, tokens, context_len)
    report.cross_entropy = total / count
    report.perplexity = math.exp(report.cross_entropy)
    report.token_count = count
    return report


def predict_qa(
    model: LMModel,
    examples: Sequence[QAExample],
    vocab: Vocabulary,
    k: int = DEFAULT_TOP_K,
    max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS,
) -> tuple[list[RankedAnswers], list[list[str]], int]:
    """Ranked candidates and gold variants for every example whose answer survives truncation."""
    ranked, golds, skipped = [], [], 0
    with tn.no_grad():
        for ex in examples:
            feat = qa_feature(ex, vocab, model.config.context_len)
            if feat is None:
                skipped += 1
                continue
            mask = np.zeros(feat.tokens.size, dtype=bool)
            mask[feat.context_start :] = True
            start, end = qa_logits(model, feat.tokens[None], mask[None])
            ranked.append(rank_answers(feat.tokens, start.data[0], end.data[0], vocab, k, max_answer_tokens))
            golds.append(ex.answer_texts)
    return ranked, golds, skipped


def evaluate_qa(
    model: LMModel,
    examples: Sequence[QAExample],
    vocab: Vocabulary,
    k: int = DEFAULT_TOP_K,
    max_answer_tokens: int = DEFAULT_MAX_ANSWER_TOKENS,
    report: EvalReport | None = None,
) -> EvalReport:
    report = report or EvalReport()
    ranked, golds, skipped = predict_qa(model, examples, vocab, k, max_answer_tokens)
    if not ranked:
        raise InputError("no QA example could be evaluated")
    top1 = [r.texts[0] if r.texts else "" for r in ranked]
    report.acc = exact_match_accuracy(top1, golds)
    report.mrr = mean_reciprocal_rank(ranked, golds)
    report.n_evaluated = len(ranked)
    report.n_skipped = skipped
    return report
