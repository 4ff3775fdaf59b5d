"""AdamW, gradient clipping, warmup-cosine schedule, and the two training loops."""

from __future__ import annotations

import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence, TextIO

import numpy as np

from . import tensor as tn
from .data import PAD, LMBatch, QAFeature
from .errors import ContractError, InputError, NumericError
from .model import LMModel, lm_forward, lm_loss, qa_logits, qa_loss, read_container, save_checkpoint, write_container
from .seeding import stream
from .tensor import Tensor


@dataclass
class LRSchedule:
    warmup_steps: int
    total_steps: int
    peak_lr: float = 6e-4
    min_lr: float = 1e-5

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ContractError(
                f"need 0 < warmup_steps < total_steps, got {self.warmup_steps} and {self.total_steps}"
            )
        if self.min_lr > self.peak_lr:
            raise ContractError(f"min_lr {self.min_lr} exceeds peak_lr {self.peak_lr}")


def lr_at(schedule: LRSchedule, step: int) -> float:
    """Linear warmup to ``peak_lr``, then half-cosine down to ``min_lr``.

    ``step`` counts optimizer updates from 0; past ``total_steps`` the rate stays at ``min_lr``.
    """
    s = schedule
    if step < 0:
        raise ContractError(f"step must be non-negative, got {step}")
    if step < s.warmup_steps:
        return s.peak_lr * (step + 1) / s.warmup_steps
    if step >= s.total_steps:
        return s.min_lr
    progress = (step - s.warmup_steps) / (s.total_steps - s.warmup_steps)
    return s.min_lr + 0.5 * (s.peak_lr - s.min_lr) * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Sequence[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> float:
    """Rescale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the factor applied (1.0 when already within bounds).
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= g.dtype.type(scale)
    return scale


_NO_DECAY_SUFFIXES = ("norm", "_gain", "_bias", ".b", "a_log")


def decays(name: str) -> bool:
    """Weight decay skips normalization gains, biases and the SSM log-timescales."""
    return not name.endswith(_NO_DECAY_SUFFIXES)


@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.1


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> OptimizerState:
    """One decoupled-weight-decay Adam update, applied in place to ``params``."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if decays(name) and state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)
    return state


def save_optimizer(state: OptimizerState, path: str | Path) -> None:
    tensors = {f"m.{k}": v for k, v in state.m.items()}
    tensors.update({f"v.{k}": v for k, v in state.v.items()})
    config = {"kind": "adamw", "betas": list(state.betas), "eps": state.eps, "weight_decay": state.weight_decay}
    write_container(path, config, tensors, {"step": state.step})


def load_optimizer(path: str | Path) -> OptimizerState:
    header, arrays = read_container(path)
    cfg = header["config"]
    state = OptimizerState(
        step=int(header.get("meta", {}).get("step", 0)),
        betas=tuple(cfg["betas"]),
        eps=cfg["eps"],
        weight_decay=cfg["weight_decay"],
    )
    for key, arr in arrays.items():
        kind, name = key.split(".", 1)
        (state.m if kind == "m" else state.v)[name] = np.array(arr)
    return state


# --------------------------------------------------------------------------- #
# loops


@dataclass
class TrainConfig:
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 6e-4
    min_lr: float = 1e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    grad_clip: float = 1.0
    accum_steps: int = 1
    tokens_per_batch: int = 8192
    qa_batch_size: int = 8
    ckpt_every: int = 0
    log_every: int = 1
    seed: int = 0

    def schedule(self) -> LRSchedule:
        return LRSchedule(self.warmup_steps, self.total_steps, self.peak_lr, self.min_lr)

    def optimizer(self) -> OptimizerState:
        return OptimizerState(betas=(self.beta1, self.beta2), eps=self.eps, weight_decay=self.weight_decay)


@dataclass
class TrainReport:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def record(self, step: int, loss: float, lr: float, gnorm: float, tokens: int, wall: float) -> str:
        self.steps.append(step)
        self.loss.append(loss)
        self.lr.append(lr)
        self.grad_norm.append(gnorm)
        self.tokens.append(tokens)
        self.wall_time.append(wall)
        return f"step={step} loss={loss:.6f} lr={lr:.6e} gnorm={gnorm:.6f} tokens={tokens}"


class _Logger:
    def __init__(self, stdout: TextIO | None, log_file: TextIO | None, every: int):
        self.stdout, self.log_file, self.every = stdout, log_file, max(1, every)

    def __call__(self, step: int, line: str) -> None:
        if step % self.every:
            return
        for fh in (self.stdout, self.log_file):
            if fh is not None:
                fh.write(line + "\n")
                fh.flush()


def _cycle(n: int, seed: int) -> Iterator[int]:
    """Endless index stream: identity order first, then a fresh permutation per epoch."""
    rng = stream(seed, "batching")
    order = np.arange(n)
    while True:
        yield from order.tolist()
        order = rng.permutation(n)


def _apply_update(model: LMModel, opt: OptimizerState, lr: float, clip: float) -> float:
    named = model.named_parameters()
    grads = {k: p.grad for k, p in named.items() if p.grad is not None}
    gnorm = global_norm(list(grads.values()))
    if not math.isfinite(gnorm):
        raise NumericError("non-finite gradient norm")
    clip_gradients(list(grads.values()), clip)
    adamw_step(named, grads, opt, lr)
    model.zero_grad()
    return gnorm


def _checkpoint(model: LMModel, opt: OptimizerState, out_dir: Path, stem: str, step: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / f"{stem}.bmck", {"step": step})
    save_optimizer(opt, out_dir / f"{stem}.opt")


def pretrain_loop(
    model: LMModel,
    batches: Sequence[LMBatch],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    start_step: int = 0,
    opt: OptimizerState | None = None,
    stdout: TextIO | None = sys.stdout,
    log_file: TextIO | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainReport:
    """Next-token training. Step numbers in logs and checkpoint names start at 1.

    Each step averages ``cfg.accum_steps`` micro-batch losses before clipping. A
    non-finite loss raises :class:`NumericError` before any parameter is touched,
    so the last written checkpoint stays the last good one.
    """
    if not batches:
        raise InputError("no training batches")
    schedule = cfg.schedule()
    opt = opt or cfg.optimizer()
    out = Path(out_dir) if out_dir is not None else None
    emit = _Logger(stdout, log_file, cfg.log_every)
    report = TrainReport()
    order = _cycle(len(batches), cfg.seed)
    for _ in range(start_step * cfg.accum_steps):
        next(order)
    tokens = 0
    t0 = time.perf_counter()
    for step in range(start_step + 1, schedule.total_steps + 1):
        lr = lr_at(schedule, step - 1)
        step_loss = 0.0
        for _ in range(cfg.accum_steps):
            batch = batches[next(order)]
            loss = lm_loss(lm_forward(model, batch.inputs), batch.targets, batch.valid_mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"loss became non-finite at step {step}")
            tn.backward(loss * (1.0 / cfg.accum_steps))
            step_loss += value / cfg.accum_steps
            tokens += batch.n_targets
        gnorm = _apply_update(model, opt, lr, cfg.grad_clip)
        emit(step, report.record(step, step_loss, lr, gnorm, tokens, time.perf_counter() - t0))
        if out is not None and cfg.ckpt_every and step % cfg.ckpt_every == 0:
            _checkpoint(model, opt, out, f"step-{step}", step)
        if on_step is not None:
            on_step(step, step_loss)
    if out is not None:
        _checkpoint(model, opt, out, "final", schedule.total_steps)
    return report


def collate_qa(features: Sequence[QAFeature]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad features into ``tokens``, ``context_mask``, ``starts``, ``ends``."""
    width = max(f.tokens.size for f in features)
    tokens = np.full((len(features), width), PAD, dtype=np.int64)
    mask = np.zeros((len(features), width), dtype=bool)
    for i, f in enumerate(features):
        tokens[i, : f.tokens.size] = f.tokens
        mask[i, f.context_start : f.tokens.size] = True
    starts = np.array([f.start for f in features], dtype=np.int64)
    ends = np.array([f.end for f in features], dtype=np.int64)
    return tokens, mask, starts, ends


def finetune_qa_loop(
    model: LMModel,
    features: Sequence[QAFeature],
    cfg: TrainConfig,
    stdout: TextIO | None = sys.stdout,
    log_file: TextIO | None = None,
) -> TrainReport:
    """Span-extraction fine-tuning; features without a gold span are ignored."""
    usable = [f for f in features if f.start is not None]
    if not usable:
        raise InputError("no usable QA examples after span mapping")
    if model.qa_head is None:
        raise ContractError("attach a QA head before fine-tuning")
    schedule = cfg.schedule()
    opt = cfg.optimizer()
    emit = _Logger(stdout, log_file, cfg.log_every)
    report = TrainReport()
    bs = max(1, min(cfg.qa_batch_size, len(usable)))
    order = _cycle(len(usable), cfg.seed)
    tokens_seen = 0
    t0 = time.perf_counter()
    for step in range(1, schedule.total_steps + 1):
        lr = lr_at(schedule, step - 1)
        step_loss = 0.0
        for _ in range(cfg.accum_steps):
            chunk = [usable[next(order)] for _ in range(bs)]
            tokens, mask, starts, ends = collate_qa(chunk)
            start, end = qa_logits(model, tokens, mask)
            loss = qa_loss(start, end, starts, ends)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"QA loss became non-finite at step {step}")
            tn.backward(loss * (1.0 / cfg.accum_steps))
            step_loss += value / cfg.accum_steps
            tokens_seen += int(sum(f.tokens.size for f in chunk))
        gnorm = _apply_update(model, opt, lr, cfg.grad_clip)
        emit(step, report.record(step, step_loss, lr, gnorm, tokens_seen, time.perf_counter() - t0))
    return report
