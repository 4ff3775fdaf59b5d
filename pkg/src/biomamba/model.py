"""Language model assembly: embeddings, a homogeneous block stack, heads, I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, ssm
from . import tensor as tn
from .data import BOS, EOS, SEP, Vocabulary, decode, encode
from .errors import (
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    InputError,
    UnknownTensorError,
)
from .seeding import stream
from .tensor import Tensor

BLOCK_TYPES = ("ssm", "transformer", "rnn")
MAGIC = b"BMCK"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
RMS_EPS = 1e-5


@dataclass
class ModelConfig:
    block_type: str = "ssm"
    n_layers: int = 4
    d_model: int = 128
    d_inner: int = 256
    n_state: int = 16
    n_heads: int = 2
    head_dim: int = 64
    k_conv: int = 4
    context_len: int = 256
    vocab_size: int = 260
    tie_embeddings: bool = True
    dynamic_d: bool = False
    seed: int = 0
    scan_mode: str = "recurrent"

    def validate(self) -> "ModelConfig":
        if self.block_type not in BLOCK_TYPES:
            raise ContractError(f"block_type must be one of {BLOCK_TYPES}, got {self.block_type!r}")
        for f in ("n_layers", "d_model", "d_inner", "n_state", "n_heads", "head_dim", "k_conv", "vocab_size"):
            if getattr(self, f) < 1:
                raise ContractError(f"{f} must be positive, got {getattr(self, f)}")
        if self.context_len < 2:
            raise ContractError(f"context_len must be >= 2, got {self.context_len}")
        if self.block_type == "transformer" and self.n_heads * self.head_dim != self.d_model:
            raise ContractError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} must equal d_model = {self.d_model}"
            )
        if self.scan_mode not in ssm.SCAN_MODES:
            raise ContractError(f"scan_mode must be one of {ssm.SCAN_MODES}, got {self.scan_mode!r}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class LMModel:
    """Parameters of one language model plus the config that shaped them."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.embed: Tensor | None = None
        self.pos: Tensor | None = None
        self.norms: list[Tensor] = []
        self.layers: list = []
        self.final_norm: Tensor | None = None
        self._head: Tensor | None = None
        self.qa_head: Tensor | None = None
        self.meta: dict = {}

    @property
    def lm_head(self) -> Tensor:
        """``[vocab, d_model]`` output table; the embedding itself when tied."""
        return self.embed if self.config.tie_embeddings else self._head

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        if self.pos is not None:
            out["pos"] = self.pos
        for i, layer in enumerate(self.layers):
            if self.norms:
                out[f"layers.{i}.norm"] = self.norms[i]
            out.update({f"layers.{i}.{k}": v for k, v in layer.named().items()})
        out["final_norm"] = self.final_norm
        if not self.config.tie_embeddings:
            out["lm_head"] = self._head
        if self.qa_head is not None:
            out["qa_head"] = self.qa_head
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def init_model(config: ModelConfig) -> LMModel:
    config.validate()
    rng = stream(config.seed, "init")
    c = config
    m = LMModel(config)

    def normal(shape):
        return Tensor(rng.normal(0.0, 0.02, shape), requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n), requires_grad=True)

    m.embed = normal((c.vocab_size, c.d_model))
    if c.block_type == "transformer":
        m.pos = normal((c.context_len, c.d_model))
    for _ in range(c.n_layers):
        if c.block_type == "ssm":
            m.norms.append(ones(c.d_model))
            m.layers.append(ssm.init_mamba_block(c.d_model, c.d_inner, c.n_state, c.k_conv, rng, c.dynamic_d))
        elif c.block_type == "rnn":
            m.norms.append(ones(c.d_model))
            m.layers.append(baselines.init_rnn(c.d_model, c.d_inner, rng))
        else:
            m.layers.append(baselines.init_transformer_block(c.d_model, c.n_heads, rng))
    m.final_norm = ones(c.d_model)
    if not c.tie_embeddings:
        m._head = normal((c.vocab_size, c.d_model))
    return m


def attach_qa_head(model: LMModel, seed: int | None = None) -> Tensor:
    if model.qa_head is None:
        rng = stream(model.config.seed if seed is None else seed, "qa_head")
        model.qa_head = Tensor(rng.normal(0.0, 0.02, (model.config.d_model, 2)), requires_grad=True)
    return model.qa_head


# --------------------------------------------------------------------------- #
# forward passes


def rmsnorm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    return x * tn.power(tn.mean(x * x, axis=-1, keepdims=True) + eps, -0.5) * gain


def _check_tokens(model: LMModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] > model.config.context_len:
        raise ContractError(f"sequence of {tokens.shape[1]} tokens exceeds context_len {model.config.context_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise ContractError("token id outside the model vocabulary")
    return tokens


def hidden_states(model: LMModel, tokens) -> Tensor:
    """Final-norm representations ``[B, T, d_model]`` for a token matrix."""
    tokens = _check_tokens(model, tokens)
    c = model.config
    x = tn.take_rows(model.embed, tokens)
    if c.block_type == "transformer":
        x = baselines.positional_embed(x, model.pos)
    for i, layer in enumerate(model.layers):
        if c.block_type == "ssm":
            x = x + ssm.mamba_block_forward(layer, rmsnorm(x, model.norms[i]), c.scan_mode)
        elif c.block_type == "rnn":
            x = x + baselines.rnn_forward(layer, rmsnorm(x, model.norms[i]))[1]
        else:
            x = baselines.transformer_block_forward(layer, x, causal=True)
    return rmsnorm(x, model.final_norm)


def lm_forward(model: LMModel, tokens) -> Tensor:
    """Next-token logits ``[B, T, vocab]``."""
    return hidden_states(model, tokens) @ tn.transpose(model.lm_head)


def lm_loss(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood (nats) over positions where ``mask`` is set."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ContractError(f"shape mismatch: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ContractError("loss mask selects no positions")
    picked = tn.gather_last(tn.log_softmax(logits), np.where(mask, targets, 0))
    return -tn.sum_(picked * mask.astype(logits.dtype)) * (1.0 / n)


def qa_logits(model: LMModel, tokens, context_mask) -> tuple[Tensor, Tensor]:
    """Start/end logits ``[B, T]``; positions outside ``context_mask`` are ``-inf``."""
    if model.qa_head is None:
        raise ContractError("model has no QA head; call attach_qa_head first")
    h = hidden_states(model, tokens) @ model.qa_head
    outside = ~np.asarray(context_mask, dtype=bool)
    start = tn.masked_fill(h[..., 0], outside, -np.inf)
    end = tn.masked_fill(h[..., 1], outside, -np.inf)
    return start, end


def qa_forward(model: LMModel, question_tokens: Sequence[int], context_tokens: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Span logits over ``question <sep> context``; question and separator are masked."""
    tokens = np.asarray([*question_tokens, SEP, *context_tokens], dtype=np.int64)
    mask = np.zeros(tokens.size, dtype=bool)
    mask[len(question_tokens) + 1 :] = True
    start, end = qa_logits(model, tokens[None], mask[None])
    return start[0], end[0]


def qa_loss(start: Tensor, end: Tensor, start_idx, end_idx) -> Tensor:
    """Mean over examples of ``-(log p_start[s] + log p_end[e]) / 2``."""
    s = tn.gather_last(tn.log_softmax(start), np.asarray(start_idx))
    e = tn.gather_last(tn.log_softmax(end), np.asarray(end_idx))
    return -tn.mean(s + e) * 0.5


# --------------------------------------------------------------------------- #
# generation


def _np_rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    return x * (np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS) ** -0.5 * gain


class StreamingDecoder:
    """Constant-memory next-token logits for ssm stacks, one token per call."""

    def __init__(self, model: LMModel):
        if model.config.block_type != "ssm":
            raise ContractError("streaming decode needs an ssm model")
        self.model = model
        self.states = [ssm.init_state(layer) for layer in model.layers]

    def push(self, token: int) -> np.ndarray:
        m = self.model
        x = m.embed.data[int(token)]
        for i, layer in enumerate(m.layers):
            self.states[i], y = ssm.step(layer, self.states[i], _np_rmsnorm(x, m.norms[i].data))
            x = x + y
        return _np_rmsnorm(x, m.final_norm.data) @ m.lm_head.data.T


def _pick(logits: np.ndarray, temperature: float, top_k: int, rng: np.random.Generator) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    if 0 < top_k < z.size:
        cut = np.sort(z)[-top_k]
        z = np.where(z >= cut, z, -np.inf)
    p = np.exp(z - z.max())
    p /= p.sum()
    return int(rng.choice(z.size, p=p))


def generate(
    model: LMModel,
    vocab: Vocabulary,
    prompt: str,
    max_new: int,
    temperature: float = 0.0,
    top_k: int = 0,
    seed: int = 0,
    streaming: bool | None = None,
) -> str:
    """Sample a continuation of ``prompt``; stops at ``<eos>`` or ``max_new`` tokens.

    ssm models decode through :class:`StreamingDecoder` unless ``streaming`` is
    False, in which case every step re-runs the full forward pass.
    """
    ids = encode(prompt, vocab) or [BOS]
    ctx = model.config.context_len
    if len(ids) > ctx:
        raise InputError(f"prompt encodes to {len(ids)} tokens, context holds {ctx}")
    if streaming is None:
        streaming = model.config.block_type == "ssm"
    rng = stream(seed, "sampling")
    new: list[int] = []
    if max_new <= 0:
        return ""
    with tn.no_grad():
        if streaming:
            dec = StreamingDecoder(model)
            for t in ids:
                logits = dec.push(t)
        else:
            logits = lm_forward(model, np.asarray(ids)[None]).data[0, -1]
        seq = list(ids)
        for _ in range(max_new):
            nxt = _pick(logits, temperature, top_k, rng)
            if nxt == EOS:
                break
            new.append(nxt)
            seq.append(nxt)
            if len(new) == max_new:
                break
            if streaming:
                logits = dec.push(nxt)
            else:
                logits = lm_forward(model, np.asarray(seq[-ctx:])[None]).data[0, -1]
    return decode(new, vocab)


# --------------------------------------------------------------------------- #
# persistence


def _header_bytes(config: dict, tensors: dict[str, np.ndarray], meta: dict | None) -> tuple[bytes, list[np.ndarray]]:
    entries, payloads, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr)
        offset += arr.nbytes
    header = {"config": config, "tensors": entries}
    if meta:
        header["meta"] = meta
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8"), payloads


def write_container(path: str | Path, config: dict, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header, payloads = _header_bytes(config, tensors, meta)
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in payloads:
            fh.write(arr.tobytes())
    tmp.replace(path)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file ends inside the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body = _PREFIX.size + hlen
    if len(raw) < body:
        raise CheckpointTruncatedError(f"{path}: file ends inside the header")
    try:
        header = json.loads(raw[_PREFIX.size : body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    tensors = {}
    for entry in header.get("tensors", []):
        shape = tuple(entry["shape"])
        start = body + entry["offset"]
        stop = start + 4 * int(np.prod(shape, dtype=np.int64))
        if stop > len(raw):
            raise CheckpointTruncatedError(f"{path}: payload for {entry['name']} is cut short")
        tensors[entry["name"]] = np.frombuffer(raw[start:stop], dtype="<f4").reshape(shape)
    return header, tensors


def save_checkpoint(model: LMModel, path: str | Path, meta: dict | None = None) -> None:
    arrays = {k: v.data for k, v in model.named_parameters().items()}
    write_container(path, asdict(model.config), arrays, meta)


def load_checkpoint(path: str | Path) -> LMModel:
    header, arrays = read_container(path)
    try:
        config = ModelConfig.from_dict(header["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: header has no usable config ({exc})") from None
    model = init_model(config)
    if "qa_head" in arrays:
        attach_qa_head(model)
    named = model.named_parameters()
    for name, arr in arrays.items():
        if name not in named:
            raise UnknownTensorError(f"{path}: unknown tensor {name!r}")
        if tuple(arr.shape) != named[name].shape:
            raise CheckpointFormatError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {named[name].shape}")
        named[name].data = np.array(arr, dtype=tn.get_dtype())
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise CheckpointFormatError(f"{path}: missing tensors {missing}")
    model.meta = header.get("meta", {})
    return model
