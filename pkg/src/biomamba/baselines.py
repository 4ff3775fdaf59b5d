"""Comparison blocks: an Elman RNN and a pre-norm causal Transformer layer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError
from .tensor import Tensor


def _normal(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, shape), requires_grad=True)


@dataclass
class RNNParams:
    w_x: Tensor  # [d_model, d_hidden]
    w_h: Tensor  # [d_hidden, d_hidden]
    b: Tensor  # [d_hidden]
    w_o: Tensor  # [d_hidden, d_model]

    def named(self) -> dict[str, Tensor]:
        return {"w_x": self.w_x, "w_h": self.w_h, "b": self.b, "w_o": self.w_o}

    @classmethod
    def from_named(cls, named: dict[str, Tensor]) -> "RNNParams":
        return cls(named["w_x"], named["w_h"], named["b"], named["w_o"])


def init_rnn(d_model: int, d_hidden: int, rng: np.random.Generator) -> RNNParams:
    return RNNParams(
        w_x=_normal(rng, (d_model, d_hidden)),
        w_h=_normal(rng, (d_hidden, d_hidden)),
        b=Tensor(np.zeros(d_hidden), requires_grad=True),
        w_o=_normal(rng, (d_hidden, d_model)),
    )


def rnn_forward(params: RNNParams, x: Tensor) -> tuple[Tensor, Tensor]:
    """``h_t = tanh(x_t W_x + h_{t-1} W_h + b)``, ``o_t = h_t W_o``; ``x`` is ``[(B,) T, d]``."""
    squeeze = x.ndim == 2
    if squeeze:
        x = tn.reshape(x, (1, *x.shape))
    if x.shape[1] < 1:
        raise ContractError("rnn_forward needs at least one step")
    xw = tn.swapaxes(x @ params.w_x, 0, 1)  # [T, B, H]
    hs = []
    h = None
    for t in range(xw.shape[0]):
        pre = xw[t] + params.b if h is None else xw[t] + h @ params.w_h + params.b
        h = tn.tanh(pre)
        hs.append(h)
    hidden = tn.stack(hs, axis=1)
    out = hidden @ params.w_o
    if squeeze:
        return tn.reshape(hidden, hidden.shape[1:]), tn.reshape(out, out.shape[1:])
    return hidden, out


@dataclass
class TransformerBlockParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ff_in: Tensor  # [d_model, 4 d_model]
    ff_out: Tensor  # [4 d_model, d_model]
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def named(self) -> dict[str, Tensor]:
        return {
            k: getattr(self, k)
            for k in ("w_q", "w_k", "w_v", "w_o", "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias", "ff_in", "ff_out")
        }

    @classmethod
    def from_named(cls, named: dict[str, Tensor], n_heads: int) -> "TransformerBlockParams":
        return cls(**named, n_heads=n_heads)


def init_transformer_block(d_model: int, n_heads: int, rng: np.random.Generator) -> TransformerBlockParams:
    if d_model % n_heads:
        raise ContractError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
    return TransformerBlockParams(
        w_q=_normal(rng, (d_model, d_model)),
        w_k=_normal(rng, (d_model, d_model)),
        w_v=_normal(rng, (d_model, d_model)),
        w_o=_normal(rng, (d_model, d_model)),
        ln1_gain=Tensor(np.ones(d_model), requires_grad=True),
        ln1_bias=Tensor(np.zeros(d_model), requires_grad=True),
        ln2_gain=Tensor(np.ones(d_model), requires_grad=True),
        ln2_bias=Tensor(np.zeros(d_model), requires_grad=True),
        ff_in=_normal(rng, (d_model, 4 * d_model)),
        ff_out=_normal(rng, (4 * d_model, d_model)),
        n_heads=n_heads,
    )


def positional_embed(x: Tensor, table: Tensor) -> Tensor:
    t_len = x.shape[-2]
    if t_len > table.shape[0]:
        raise ContractError(f"sequence of {t_len} exceeds positional table of {table.shape[0]} rows")
    return x + table[:t_len]


def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot products ``q k^T / sqrt(d)`` for ``[..., T, d]`` operands."""
    return (q @ tn.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))


def multi_head_attention(
    params: TransformerBlockParams,
    x: Tensor,
    causal: bool = True,
    return_weights: bool = False,
):
    squeeze = x.ndim == 2
    if squeeze:
        x = tn.reshape(x, (1, *x.shape))
    batch, t_len, d = x.shape
    if d != params.d_model:
        raise DimensionError(f"attention expects d_model={params.d_model}, got {d}")
    h = params.n_heads
    hd = d // h

    def heads(m: Tensor) -> Tensor:
        return tn.transpose(tn.reshape(x @ m, (batch, t_len, h, hd)), (0, 2, 1, 3))

    scores = attention_scores(heads(params.w_q), heads(params.w_k))
    if causal:
        scores = tn.masked_fill(scores, np.triu(np.ones((t_len, t_len), dtype=bool), k=1), -np.inf)
    weights = tn.softmax(scores)
    mixed = tn.reshape(tn.transpose(weights @ heads(params.w_v), (0, 2, 1, 3)), (batch, t_len, d))
    out = mixed @ params.w_o
    if squeeze:
        out = tn.reshape(out, (t_len, d))
        weights = tn.reshape(weights, (h, t_len, t_len))
    return (out, weights) if return_weights else out


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] < 2:
        raise ContractError("layer_norm needs at least 2 features")
    centered = x - tn.mean(x, axis=-1, keepdims=True)
    var = tn.mean(centered * centered, axis=-1, keepdims=True)
    out = centered * tn.power(var + eps, -0.5)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def transformer_block_forward(params: TransformerBlockParams, x: Tensor, causal: bool = True) -> Tensor:
    """Two residual sublayers: attention, then a silu feed-forward (LM plumbing)."""
    x = x + multi_head_attention(params, layer_norm(x, params.ln1_gain, params.ln1_bias), causal)
    ff = tn.silu(layer_norm(x, params.ln2_gain, params.ln2_bias) @ params.ff_in) @ params.ff_out
    return x + ff
