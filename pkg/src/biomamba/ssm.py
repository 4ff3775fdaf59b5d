"""Selective state-space block.

The hidden state of every channel follows ``h_t = a_t * h_{t-1} + b_t`` where the
per-step decay ``a_t`` and input ``b_t`` come from the current token through a
softplus step size. That recurrence can run sequentially (``"recurrent"``), as a
fixed-shape Blelloch tree (``"parallel"``), or one token at a time from a cached
state (:func:`step`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, DimensionError, NumericError
from .tensor import Tensor

SCAN_MODES = ("recurrent", "parallel")


@dataclass
class SSMCoreParams:
    a_log: Tensor  # [d_inner, n_state]; continuous A = -exp(a_log)
    d_skip: Tensor  # [d_inner]
    w_delta: Tensor  # [d_inner, d_inner]
    delta_bias: Tensor  # [d_inner]
    w_b: Tensor  # [d_inner, n_state]
    w_c: Tensor  # [d_inner, n_state]
    w_d: Tensor | None = None  # [d_inner, d_inner], only with dynamic D

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def n_state(self) -> int:
        return self.a_log.shape[1]

    def named(self) -> dict[str, Tensor]:
        out = {
            "a_log": self.a_log,
            "d_skip": self.d_skip,
            "w_delta": self.w_delta,
            "delta_bias": self.delta_bias,
            "w_b": self.w_b,
            "w_c": self.w_c,
        }
        if self.w_d is not None:
            out["w_d"] = self.w_d
        return out


@dataclass
class MambaBlockParams:
    in_proj: Tensor  # [d_model, 2 * d_inner]
    conv_kernel: Tensor  # [d_inner, k_conv]
    core: SSMCoreParams
    out_proj: Tensor  # [d_inner, d_model]

    @property
    def d_model(self) -> int:
        return self.in_proj.shape[0]

    @property
    def k_conv(self) -> int:
        return self.conv_kernel.shape[1]

    def named(self) -> dict[str, Tensor]:
        out = {"in_proj": self.in_proj, "conv_kernel": self.conv_kernel, "out_proj": self.out_proj}
        out.update({f"core.{k}": v for k, v in self.core.named().items()})
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor]) -> "MambaBlockParams":
        core = SSMCoreParams(
            **{k[len("core.") :]: v for k, v in named.items() if k.startswith("core.")}
        )
        return cls(named["in_proj"], named["conv_kernel"], core, named["out_proj"])


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


def init_core(d_inner: int, n_state: int, rng: np.random.Generator, dynamic_d: bool = False) -> SSMCoreParams:
    dt = tn.get_dtype()
    a_log = np.log(np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1)))
    # initial step sizes log-uniform in [1e-3, 1e-1]
    delta0 = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d_inner))
    core = SSMCoreParams(
        a_log=Tensor(a_log, requires_grad=True, dtype=dt),
        d_skip=Tensor(np.ones(d_inner), requires_grad=True, dtype=dt),
        w_delta=Tensor(rng.normal(0.0, 0.02, (d_inner, d_inner)), requires_grad=True, dtype=dt),
        delta_bias=Tensor(_inverse_softplus(delta0), requires_grad=True, dtype=dt),
        w_b=Tensor(rng.normal(0.0, 0.02, (d_inner, n_state)), requires_grad=True, dtype=dt),
        w_c=Tensor(rng.normal(0.0, 0.02, (d_inner, n_state)), requires_grad=True, dtype=dt),
    )
    if dynamic_d:
        core.w_d = Tensor(rng.normal(0.0, 0.02, (d_inner, d_inner)), requires_grad=True, dtype=dt)
    return core


def init_mamba_block(
    d_model: int,
    d_inner: int,
    n_state: int,
    k_conv: int,
    rng: np.random.Generator,
    dynamic_d: bool = False,
) -> MambaBlockParams:
    if k_conv < 1:
        raise ContractError(f"k_conv must be >= 1, got {k_conv}")
    dt = tn.get_dtype()
    bound = 1.0 / np.sqrt(k_conv)
    return MambaBlockParams(
        in_proj=Tensor(rng.normal(0.0, 0.02, (d_model, 2 * d_inner)), requires_grad=True, dtype=dt),
        conv_kernel=Tensor(rng.uniform(-bound, bound, (d_inner, k_conv)), requires_grad=True, dtype=dt),
        core=init_core(d_inner, n_state, rng, dynamic_d),
        out_proj=Tensor(rng.normal(0.0, 0.02, (d_inner, d_model)), requires_grad=True, dtype=dt),
    )


# --------------------------------------------------------------------------- #
# discretization and the scan primitive


def discretize(delta: Tensor, a: Tensor, b_t: Tensor, u_t: Tensor) -> tuple[Tensor, Tensor]:
    """Zero-order-hold transition and Euler input term.

    Shapes broadcast over leading axes: ``delta``/``u_t`` are ``[..., D]``,
    ``a`` is ``[D, N]``, ``b_t`` is ``[..., N]``; both results are ``[..., D, N]``.
    """
    if delta.data.size and delta.data.min() <= 0:
        raise ContractError("step size delta must be strictly positive")
    lead = delta.shape[:-1]
    d = delta.shape[-1]
    n = a.shape[-1]
    a_bar = tn.exp(tn.reshape(delta, (*lead, d, 1)) * a)
    bu = tn.reshape(delta * u_t, (*lead, d, 1)) * tn.reshape(b_t, (*b_t.shape[:-1], 1, n))
    return a_bar, bu


def combine(first: tuple, second: tuple) -> tuple:
    """Compose two affine steps, ``first`` applied earlier in time."""
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def scan_recurrent(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``h_t = a_t h_{t-1} + b_t`` along axis 0 with ``h_{-1} = 0``."""
    h = np.empty_like(b)
    acc = np.zeros_like(b[0])
    for t in range(b.shape[0]):
        acc = a[t] * acc + b[t]
        h[t] = acc
    return h


def scan_parallel(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same recurrence as :func:`scan_recurrent`, via a work-efficient exclusive scan.

    The tree is padded to the next power of two with identity pairs ``(1, 0)``, so
    its shape depends only on the length and results are reproducible.
    """
    t_len = b.shape[0]
    size = 1 << max(t_len - 1, 0).bit_length()
    acc_a = np.ones((size, *b.shape[1:]), dtype=b.dtype)
    acc_b = np.zeros((size, *b.shape[1:]), dtype=b.dtype)
    acc_a[:t_len] = a
    acc_b[:t_len] = b

    d = 1
    while d < size:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        acc_b[right] = acc_a[right] * acc_b[left] + acc_b[right]
        acc_a[right] = acc_a[right] * acc_a[left]
        d *= 2

    acc_a[size - 1] = 1
    acc_b[size - 1] = 0
    d = size // 2
    while d >= 1:
        left, right = slice(d - 1, size, 2 * d), slice(2 * d - 1, size, 2 * d)
        sum_a = acc_a[left].copy()
        sum_b = acc_b[left].copy()
        acc_a[left] = acc_a[right]
        acc_b[left] = acc_b[right]
        acc_b[right] = sum_a * acc_b[right] + sum_b
        acc_a[right] = sum_a * acc_a[right]
        d //= 2

    # acc_b[t] now holds h_{t-1}
    return a * acc_b[:t_len] + b


_SCANS = {"recurrent": scan_recurrent, "parallel": scan_parallel}


def _reverse_scan(a: np.ndarray, g: np.ndarray, mode: str) -> np.ndarray:
    """Adjoint recurrence ``lam_t = g_t + a_{t+1} lam_{t+1}``."""
    if mode == "recurrent":
        lam = np.empty_like(g)
        acc = g[-1].copy()
        lam[-1] = acc
        for t in range(g.shape[0] - 2, -1, -1):
            acc = a[t + 1] * acc + g[t]
            lam[t] = acc
        return lam
    shifted = np.concatenate([a[1:], np.zeros_like(a[:1])], axis=0)
    return np.ascontiguousarray(scan_parallel(shifted[::-1], g[::-1])[::-1])


def linear_scan(a: Tensor, b: Tensor, mode: str = "recurrent") -> Tensor:
    """Differentiable first-order linear recurrence over axis 0.

    The backward pass is the time-reversed recurrence, evaluated with the same
    scan mode as the forward pass.
    """
    if mode not in _SCANS:
        raise ContractError(f"unknown scan mode {mode!r}; expected one of {SCAN_MODES}")
    if a.shape != b.shape:
        raise DimensionError(f"scan operands differ in shape: {a.shape} vs {b.shape}")
    h = _SCANS[mode](a.data, b.data)

    def back(g):
        lam = _reverse_scan(a.data, g, mode)
        ga = None
        if a.requires_grad:
            ga = np.zeros_like(lam)
            np.multiply(lam[1:], h[:-1], out=ga[1:])
        return ga, lam

    return tn._result(h, (a, b), back, f"scan_{mode}")


# --------------------------------------------------------------------------- #
# block forward


def _fused_scan(delta: Tensor, a: Tensor, b_t: Tensor, c_t: Tensor, u: Tensor, mode: str) -> Tensor:
    """``y_t = <C_t, h_t>`` with ``h_t = exp(delta_t a) h_{t-1} + (delta_t u_t) B_t``, as one op.

    Time-major operands: ``delta``/``u`` ``[T, B, D]``, ``a`` ``[D, N]``, ``b_t``/``c_t``
    ``[T, B, N]``. Equivalent to the composed path in :func:`selective_scan` with
    ``fused=False`` but never materializes the broadcast intermediates' gradients.
    """
    dl, am, bm, cm, um = delta.data, a.data, b_t.data, c_t.data, u.data
    if dl.size and dl.min() <= 0:
        raise ContractError("step size delta must be strictly positive")
    a_bar = np.exp(dl[..., None] * am)
    du = dl * um
    h = _SCANS[mode](a_bar, du[..., None] * bm[..., None, :])
    y = (h @ cm[..., None])[..., 0]

    def back(gy):
        lam = _reverse_scan(a_bar, gy[..., None] * cm[..., None, :], mode)
        g_c = (gy[..., None, :] @ h)[..., 0, :]
        g_b = (du[..., None, :] @ lam)[..., 0, :]
        g_du = (lam @ bm[..., None])[..., 0]
        g_da = np.zeros_like(lam)
        np.multiply(lam[1:], h[:-1], out=g_da[1:])
        g_da *= a_bar
        g_delta = np.einsum("tbdn,dn->tbd", g_da, am)
        g_delta += g_du * um
        g_a = np.einsum("tbdn,tbd->dn", g_da, dl)
        return g_delta, g_a, g_b, g_c, g_du * dl

    return tn._result(y, (delta, a, b_t, c_t, u), back, f"selective_scan_{mode}")


def selective_scan(core: SSMCoreParams, u: Tensor, mode: str = "recurrent", fused: bool = True) -> Tensor:
    """Input-dependent SSM over ``u`` of shape ``[T, D]`` or ``[B, T, D]``.

    ``fused=False`` builds the same computation from primitive tensor ops; it is
    slower and exists as an independent reference.
    """
    if mode not in _SCANS:
        raise ContractError(f"unknown scan mode {mode!r}; expected one of {SCAN_MODES}")
    squeeze = u.ndim == 2
    if squeeze:
        u = tn.reshape(u, (1, *u.shape))
    if u.shape[-1] != core.d_inner:
        raise DimensionError(f"scan input has {u.shape[-1]} channels, core expects {core.d_inner}")
    ut = tn.swapaxes(u, 0, 1)  # time-major: [T, B, D]
    t_len, batch, d = ut.shape
    delta = tn.softplus(ut @ core.w_delta + core.delta_bias)
    b_t = ut @ core.w_b
    c_t = ut @ core.w_c
    a = -tn.exp(core.a_log)
    if fused:
        y = _fused_scan(delta, a, b_t, c_t, ut, mode)
    else:
        a_bar, bu = discretize(delta, a, b_t, ut)
        h = linear_scan(a_bar, bu, mode)
        y = tn.sum_(h * tn.reshape(c_t, (t_len, batch, 1, core.n_state)), axis=-1)
    skip = core.d_skip if core.w_d is None else ut @ core.w_d
    y = y + ut * skip
    y = tn.swapaxes(y, 0, 1)
    if not np.isfinite(y.data).all():
        raise NumericError("selective scan produced non-finite values")
    return tn.reshape(y, y.shape[1:]) if squeeze else y


def selective_scan_recurrent(core: SSMCoreParams, u: Tensor) -> Tensor:
    return selective_scan(core, u, "recurrent")


def selective_scan_parallel(core: SSMCoreParams, u: Tensor) -> Tensor:
    return selective_scan(core, u, "parallel")


def causal_conv(u: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise causal convolution over time; ``u`` is ``[B, T, D]``, kernel ``[D, k]``."""
    batch, t_len, d = u.shape
    k = kernel.shape[1]
    if k == 1:
        return u * tn.reshape(kernel, (d,))
    padded = tn.concat([tn.zeros((batch, k - 1, d)), u], axis=1)
    out = None
    for j in range(k):
        term = padded[:, j : j + t_len, :] * kernel[:, j]
        out = term if out is None else out + term
    return out


def mamba_block_forward(params: MambaBlockParams, x: Tensor, mode: str = "recurrent") -> Tensor:
    """Gated selective-SSM block mapping ``[(B,) T, d_model]`` to the same shape.

    Residual connection and pre-normalization belong to the caller.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = tn.reshape(x, (1, *x.shape))
    if x.shape[-1] != params.d_model:
        raise ContractError(f"block expects d_model={params.d_model}, got {x.shape[-1]}")
    di = params.core.d_inner
    xz = x @ params.in_proj
    u = tn.silu(causal_conv(xz[..., :di], params.conv_kernel))
    y = selective_scan(params.core, u, mode)
    out = (y * tn.silu(xz[..., di:])) @ params.out_proj
    return tn.reshape(out, out.shape[1:]) if squeeze else out


# --------------------------------------------------------------------------- #
# streaming


@dataclass
class SSMState:
    h: np.ndarray  # [..., d_inner, n_state]
    conv_buffer: np.ndarray  # [..., k_conv - 1, d_inner]


def init_state(params: MambaBlockParams, batch: tuple[int, ...] = ()) -> SSMState:
    dt = params.in_proj.dtype
    di, n = params.core.d_inner, params.core.n_state
    return SSMState(
        h=np.zeros((*batch, di, n), dtype=dt),
        conv_buffer=np.zeros((*batch, params.k_conv - 1, di), dtype=dt),
    )


def _np_silu(v: np.ndarray) -> np.ndarray:
    return v * tn._sigmoid(v)


def step(params: MambaBlockParams, state: SSMState, x_t: np.ndarray) -> tuple[SSMState, np.ndarray]:
    """Advance one token. ``x_t`` is ``[..., d_model]``; returns the new state and output."""
    core = params.core
    di, n, k = core.d_inner, core.n_state, params.k_conv
    if state.h.shape[-2:] != (di, n) or state.conv_buffer.shape[-2:] != (k - 1, di):
        raise ContractError("state was produced by a block with a different configuration")
    x_t = np.asarray(x_t, dtype=params.in_proj.dtype)
    xz = x_t @ params.in_proj.data
    u_raw, gate = xz[..., :di], xz[..., di:]
    window = np.concatenate([state.conv_buffer, u_raw[..., None, :]], axis=-2)  # [..., k, D]
    conv = window[..., 0, :] * params.conv_kernel.data[:, 0]
    for j in range(1, k):
        conv = conv + window[..., j, :] * params.conv_kernel.data[:, j]
    u = _np_silu(conv)
    delta = np.logaddexp(0.0, u @ core.w_delta.data + core.delta_bias.data).astype(u.dtype, copy=False)
    b_t = u @ core.w_b.data
    c_t = u @ core.w_c.data
    a = -np.exp(core.a_log.data)
    h = np.exp(delta[..., None] * a) * state.h + (delta * u)[..., None] * b_t[..., None, :]
    skip = core.d_skip.data if core.w_d is None else u @ core.w_d.data
    y = (h * c_t[..., None, :]).sum(axis=-1) + u * skip
    out = (y * _np_silu(gate)) @ params.out_proj.data
    return SSMState(h=h, conv_buffer=window[..., 1:, :]), out
