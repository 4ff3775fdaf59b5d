"""Byte-level BPE tokenizer, next-token batching, and SQuAD-format QA ingestion."""

from __future__ import annotations

import json
import logging
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, ParseError, ValidationError

log = logging.getLogger(__name__)

PAD, BOS, EOS, SEP = 256, 257, 258, 259
SPECIAL_IDS = {"pad": PAD, "bos": BOS, "eos": EOS, "sep": SEP}
BASE_VOCAB = 260
VOCAB_HEADER = "bpe-vocab v1"

# whitespace sticks to the following word, GPT2-style, so merges never span words
_CHUNK = re.compile(rb"\s*\S+|\s+")


@dataclass
class Vocabulary:
    """Token table: 256 raw bytes, 4 specials, then one id per merge.

    ``token_to_id`` covers non-special tokens only; specials have no byte form
    and live in ``special_ids``. When two merges spell the same bytes the lower
    id wins the reverse lookup.
    """

    merges: list[tuple[bytes, bytes]] = field(default_factory=list)
    id_to_token: list[bytes] = field(init=False)
    token_to_id: dict[bytes, int] = field(init=False)
    special_ids: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.special_ids = dict(SPECIAL_IDS)
        self.id_to_token = [bytes([i]) for i in range(256)] + [b""] * 4
        self.token_to_id = {bytes([i]): i for i in range(256)}
        self._ranks: dict[tuple[int, int], int] = {}
        for left, right in self.merges:
            try:
                pair = (self.token_to_id[left], self.token_to_id[right])
            except KeyError:
                raise ValidationError(f"merge {left!r}+{right!r} uses an unknown token") from None
            new_id = len(self.id_to_token)
            self._ranks[pair] = new_id
            self.id_to_token.append(left + right)
            self.token_to_id.setdefault(left + right, new_id)
        self._cache: dict[bytes, tuple[int, ...]] = {}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def is_special(self, token_id: int) -> bool:
        return 256 <= token_id < BASE_VOCAB

    def _encode_chunk(self, chunk: bytes) -> tuple[int, ...]:
        hit = self._cache.get(chunk)
        if hit is not None:
            return hit
        ids = list(chunk)
        while len(ids) > 1:
            best = None
            for pair in zip(ids, ids[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best is None or rank < best[1]):
                    best = (pair, rank)
            if best is None:
                break
            (a, b), new_id = best
            out, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        result = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[chunk] = result
        return result


def _pair_key(vocab_tokens: list[bytes], pair: tuple[int, int]) -> tuple[bytes, bytes]:
    return vocab_tokens[pair[0]], vocab_tokens[pair[1]]


def train_bpe(corpus: str | Iterable[str], target_vocab: int) -> Vocabulary:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Ties go to the lexicographically smallest (left bytes, right bytes) pair.
    Training stops at ``target_vocab`` ids or once no pair occurs twice.
    """
    if target_vocab < BASE_VOCAB:
        raise InputError(f"target vocabulary must be >= {BASE_VOCAB}, got {target_vocab}")
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    words: Counter[bytes] = Counter()
    for text in texts:
        words.update(_CHUNK.findall(text.encode("utf-8")))
    if not words:
        raise InputError("cannot train a tokenizer on an empty corpus")

    tokens = [bytes([i]) for i in range(256)] + [b""] * 4
    seqs = [list(w) for w in words]
    freqs = list(words.values())
    merges: list[tuple[bytes, bytes]] = []
    while len(tokens) < target_vocab:
        counts: Counter[tuple[int, int]] = Counter()
        for seq, n in zip(seqs, freqs):
            for pair in zip(seq, seq[1:]):
                counts[pair] += n
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        pair = min((p for p, c in counts.items() if c == top), key=lambda p: _pair_key(tokens, p))
        new_id = len(tokens)
        tokens.append(tokens[pair[0]] + tokens[pair[1]])
        merges.append(_pair_key(tokens, pair))
        a, b = pair
        for k, seq in enumerate(seqs):
            if len(seq) < 2:
                continue
            out, i = [], 0
            while i < len(seq):
                if i + 1 < len(seq) and seq[i] == a and seq[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(seq[i])
                    i += 1
            seqs[k] = out
    return Vocabulary(merges)


def encode(text: str, vocab: Vocabulary) -> list[int]:
    out: list[int] = []
    for chunk in _CHUNK.findall(text.encode("utf-8")):
        out.extend(vocab._encode_chunk(chunk))
    return out


def decode(tokens: Sequence[int], vocab: Vocabulary) -> str:
    return decode_bytes(tokens, vocab).decode("utf-8", errors="replace")


def decode_bytes(tokens: Sequence[int], vocab: Vocabulary) -> bytes:
    parts = []
    for t in tokens:
        t = int(t)
        if not 0 <= t < vocab.size:
            raise InputError(f"token id {t} outside vocabulary of size {vocab.size}")
        if not vocab.is_special(t):
            parts.append(vocab.id_to_token[t])
    return b"".join(parts)


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    lines = [f"{VOCAB_HEADER} {vocab.size}"]
    lines += [f"{a.hex()} {b.hex()}" for a, b in vocab.merges]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(VOCAB_HEADER + " "):
        raise ParseError(f"{path}:1: expected header '{VOCAB_HEADER} <V>'")
    try:
        declared = int(lines[0].split()[-1])
    except ValueError:
        raise ParseError(f"{path}:1: vocabulary size is not an integer") from None
    merges = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(f"{path}:{lineno}: expected two hex byte-strings")
        try:
            merges.append((bytes.fromhex(parts[0]), bytes.fromhex(parts[1])))
        except ValueError:
            raise ParseError(f"{path}:{lineno}: invalid hex") from None
    vocab = Vocabulary(merges)
    if vocab.size != declared:
        raise ParseError(f"{path}:1: header says {declared} tokens, merges give {vocab.size}")
    return vocab


def read_corpus(paths: Sequence[str | Path], vocab: Vocabulary) -> np.ndarray:
    """Encode text files in order, separated by ``<eos>``."""
    ids: list[int] = []
    for k, p in enumerate(paths):
        if k:
            ids.append(EOS)
        ids.extend(encode(Path(p).read_text(encoding="utf-8"), vocab))
    return np.asarray(ids, dtype=np.int64)


# --------------------------------------------------------------------------- #
# language-model batches


@dataclass
class LMBatch:
    inputs: np.ndarray
    targets: np.ndarray
    valid_mask: np.ndarray

    @property
    def n_targets(self) -> int:
        return int(self.valid_mask.sum())


def make_windows(tokens: np.ndarray, context_len: int) -> list[np.ndarray]:
    """Contiguous, non-overlapping slices of at most ``context_len`` tokens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if context_len < 2:
        raise InputError(f"context_len must be >= 2, got {context_len}")
    if tokens.size < 2:
        raise InputError("corpus needs at least 2 tokens")
    return [tokens[i : i + context_len] for i in range(0, tokens.size, context_len)]


def collate(windows: Sequence[np.ndarray], context_len: int) -> LMBatch:
    n = len(windows)
    inputs = np.full((n, context_len), PAD, dtype=np.int64)
    targets = np.full((n, context_len), PAD, dtype=np.int64)
    mask = np.zeros((n, context_len), dtype=bool)
    for i, w in enumerate(windows):
        inputs[i, : w.size] = w
        targets[i, : w.size - 1] = w[1:]
        mask[i, : w.size - 1] = True
    return LMBatch(inputs, targets, mask)


def build_lm_batches(
    corpus: np.ndarray | Sequence[int],
    context_len: int,
    tokens_per_batch: int,
    seed: int,
) -> list[LMBatch]:
    windows = make_windows(np.asarray(corpus), context_len)
    order = np.random.default_rng(seed).permutation(len(windows))
    per_batch = max(1, tokens_per_batch // context_len)
    return [
        collate([windows[j] for j in order[i : i + per_batch]], context_len)
        for i in range(0, len(order), per_batch)
    ]


# --------------------------------------------------------------------------- #
# question answering


@dataclass
class QAExample:
    id: str
    question: str
    context: str
    answers: list[tuple[str, int]]

    @property
    def answer_texts(self) -> list[str]:
        return [a for a, _ in self.answers]


def _need(node, key: str, path: str):
    if not isinstance(node, dict) or key not in node:
        raise ParseError(f"missing field {path}.{key}" if path else f"missing field {key}")
    return node[key]


def load_squad_qa(document: dict) -> list[QAExample]:
    """Flatten a SQuAD v1.1 document into one example per question."""
    examples: list[QAExample] = []
    bad: list[str] = []
    for i, article in enumerate(_need(document, "data", "")):
        for j, para in enumerate(_need(article, "paragraphs", f"data[{i}]")):
            ppath = f"data[{i}].paragraphs[{j}]"
            context = _need(para, "context", ppath)
            for k, qa in enumerate(_need(para, "qas", ppath)):
                qpath = f"{ppath}.qas[{k}]"
                qid = str(_need(qa, "id", qpath))
                question = _need(qa, "question", qpath)
                answers = []
                for m, ans in enumerate(_need(qa, "answers", qpath)):
                    apath = f"{qpath}.answers[{m}]"
                    text = _need(ans, "text", apath)
                    start = _need(ans, "answer_start", apath)
                    if not isinstance(start, int) or context[start : start + len(text)] != text:
                        bad.append(qid)
                    answers.append((text, start))
                examples.append(QAExample(qid, question, context, answers))
    if bad:
        raise ValidationError(f"answer_start does not match context for ids: {', '.join(dict.fromkeys(bad))}")
    return examples


def load_squad_file(path: str | Path) -> list[QAExample]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    try:
        return load_squad_qa(doc)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from None


@dataclass
class QAFeature:
    """A tokenized question/context pair; ``start``/``end`` index ``tokens``."""

    example_id: str
    tokens: np.ndarray
    context_start: int
    byte_spans: list[tuple[int, int]]
    start: int | None = None
    end: int | None = None


def encode_qa(question: str, context: str, vocab: Vocabulary, context_len: int) -> QAFeature | None:
    """Encode ``question <sep> context`` truncated to ``context_len``.

    Returns None when not a single context token fits.
    """
    q = encode(question, vocab)
    c = encode(context, vocab)
    spans, pos = [], 0
    for t in c:
        n = len(vocab.id_to_token[t])
        spans.append((pos, pos + n))
        pos += n
    tokens = (q + [SEP] + c)[:context_len]
    ctx_start = len(q) + 1
    if ctx_start >= len(tokens):
        return None
    return QAFeature("", np.asarray(tokens, dtype=np.int64), ctx_start, spans[: len(tokens) - ctx_start])


def map_answer_to_token_span(
    ex: QAExample,
    vocab: Vocabulary,
    context_len: int,
    answer_index: int = 0,
) -> tuple[int, int] | None:
    feat = qa_feature(ex, vocab, context_len, answer_index)
    if feat is None or feat.start is None:
        return None
    return feat.start, feat.end


def qa_feature(ex: QAExample, vocab: Vocabulary, context_len: int, answer_index: int = 0) -> QAFeature | None:
    """Tokenize ``ex`` and locate the gold span, or return None to skip it."""
    feat = encode_qa(ex.question, ex.context, vocab, context_len)
    if feat is None or not ex.answers:
        return None
    feat.example_id = ex.id
    text, start = ex.answers[answer_index]
    if not text or ex.context[start : start + len(text)] != text:
        return None
    b0 = len(ex.context[:start].encode("utf-8"))
    b1 = b0 + len(text.encode("utf-8"))
    s = e = None
    for i, (lo, hi) in enumerate(feat.byte_spans):
        if s is None and lo <= b0 < hi:
            s = i
        if lo < b1 <= hi:
            e = i
            break
    if s is None or e is None:
        return None
    feat.start = feat.context_start + s
    feat.end = feat.context_start + e
    return feat


def build_qa_features(
    examples: Sequence[QAExample], vocab: Vocabulary, context_len: int
) -> tuple[list[QAFeature], int]:
    feats, skipped = [], 0
    for ex in examples:
        f = qa_feature(ex, vocab, context_len)
        if f is None:
            skipped += 1
        else:
            feats.append(f)
    if skipped:
        log.warning("skipped %d of %d QA examples (answer missing or truncated)", skipped, len(examples))
    return feats, skipped


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())
