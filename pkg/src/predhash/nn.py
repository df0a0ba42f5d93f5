"""Small numpy neural-network kernel for the recurrent hashing model.

Everything here works on batched arrays of shape ``(B, features)``; a single
vector is promoted to a batch of one and squeezed back on return.  Forward
functions that are used during training return a cache consumed by the
matching ``*_backward`` function.  Gate order inside the packed LSTM weight
matrices is ``i, f, o, g``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

Params = dict[str, np.ndarray]

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
STE_CLIP = 1.0
GRAD_CLIP_NORM = 5.0


class ConfigurationError(ValueError):
    """Raised when array shapes do not match the declared layer sizes."""


class LSTMParams(NamedTuple):
    Wx: np.ndarray  # (input_size, 4 * hidden)
    Wh: np.ndarray  # (hidden, 4 * hidden)
    b: np.ndarray  # (4 * hidden,)

    @property
    def input_size(self) -> int:
        return self.Wx.shape[0]

    @property
    def hidden_size(self) -> int:
        return self.Wh.shape[0]


def init_lstm(params: Params, prefix: str, input_size: int, hidden_size: int,
              rng: np.random.Generator) -> None:
    """Add uniformly initialised LSTM weights to ``params`` under ``prefix``."""
    s = 1.0 / np.sqrt(input_size + hidden_size)
    params[f"{prefix}.Wx"] = rng.uniform(-s, s, (input_size, 4 * hidden_size))
    params[f"{prefix}.Wh"] = rng.uniform(-s, s, (hidden_size, 4 * hidden_size))
    params[f"{prefix}.b"] = rng.uniform(-s, s, 4 * hidden_size)


def init_dense(params: Params, prefix: str, input_size: int, output_size: int,
               rng: np.random.Generator) -> None:
    s = 1.0 / np.sqrt(input_size)
    params[f"{prefix}.W"] = rng.uniform(-s, s, (input_size, output_size))
    params[f"{prefix}.b"] = rng.uniform(-s, s, output_size)


def init_batchnorm(params: Params, prefix: str, size: int) -> None:
    params[f"{prefix}.gamma"] = np.ones(size)
    params[f"{prefix}.beta"] = np.zeros(size)


def lstm_view(params: Params, prefix: str) -> LSTMParams:
    return LSTMParams(params[f"{prefix}.Wx"], params[f"{prefix}.Wh"], params[f"{prefix}.b"])


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sign(x: np.ndarray) -> np.ndarray:
    """Binarise to {-1, +1} with sign(0) = +1."""
    return np.where(x >= 0, 1.0, -1.0)


def ste_backward(pre: np.ndarray, grad: np.ndarray, clip: float = STE_CLIP) -> np.ndarray:
    """Clipped straight-through gradient of ``sign``: pass where |pre| <= clip."""
    return grad * (np.abs(pre) <= clip)


def _as_batch(*arrays: np.ndarray) -> tuple[bool, list[np.ndarray]]:
    single = arrays[0].ndim == 1
    if single:
        return True, [a[None, :] for a in arrays]
    return False, list(arrays)


def _check_shapes(p: LSTMParams, x: np.ndarray, h: np.ndarray, c: np.ndarray) -> None:
    H = p.hidden_size
    if p.Wx.shape[1] != 4 * H or p.Wh.shape[1] != 4 * H or p.b.shape != (4 * H,):
        raise ConfigurationError(f"inconsistent LSTM parameter shapes {p.Wx.shape}, {p.Wh.shape}, {p.b.shape}")
    if x.shape[-1] != p.input_size:
        raise ConfigurationError(f"input has {x.shape[-1]} features, layer expects {p.input_size}")
    if h.shape[-1] != H or c.shape[-1] != H:
        raise ConfigurationError(f"state width {h.shape[-1]}/{c.shape[-1]} != hidden size {H}")
    if not (x.shape[:-1] == h.shape[:-1] == c.shape[:-1]):
        raise ConfigurationError("batch dimensions of x, h and c differ")


# ---------------------------------------------------------------- plain LSTM

class _LSTMCache(NamedTuple):
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    tanh_c: np.ndarray


def _gates(p: LSTMParams, x: np.ndarray, h_prev: np.ndarray):
    H = p.hidden_size
    z = x @ p.Wx + h_prev @ p.Wh + p.b
    i = sigmoid(z[:, :H])
    f = sigmoid(z[:, H:2 * H])
    o = sigmoid(z[:, 2 * H:3 * H])
    g = np.tanh(z[:, 3 * H:])
    return i, f, o, g


def lstm_forward(p: LSTMParams, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """Batched LSTM step returning ``(h, c, cache)``."""
    _check_shapes(p, x, h_prev, c_prev)
    i, f, o, g = _gates(p, x, h_prev)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, _LSTMCache(x, h_prev, c_prev, i, f, o, g, tanh_c)


def lstm_step(params: LSTMParams, x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """One LSTM recurrence step; accepts vectors or ``(B, n)`` batches."""
    single, (x, h_prev, c_prev) = _as_batch(x, h_prev, c_prev)
    h, c, _ = lstm_forward(params, x, h_prev, c_prev)
    if single:
        return h[0], c[0]
    return h, c


def _gate_backward(p: LSTMParams, grads: Params, prefix: str, cache, dc: np.ndarray,
                   do: np.ndarray):
    """Shared tail of both LSTM backward passes (from dc, do to the gate inputs)."""
    i, f, o, g = cache.i, cache.f, cache.o, cache.g
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * cache.c_prev * f * (1.0 - f),
        do * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=1)
    grads[f"{prefix}.Wx"] += cache.x.T @ dz
    grads[f"{prefix}.Wh"] += cache.h_prev.T @ dz
    grads[f"{prefix}.b"] += dz.sum(axis=0)
    return dz @ p.Wx.T, dz @ p.Wh.T, dc * f


def lstm_backward(p: LSTMParams, grads: Params, prefix: str, cache: _LSTMCache,
                  dh: np.ndarray, dc_next: np.ndarray):
    """Accumulate parameter gradients into ``grads``; return ``(dx, dh_prev, dc_prev)``."""
    do = dh * cache.tanh_c
    dc = dc_next + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    return _gate_backward(p, grads, prefix, cache, dc, do)


# ------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    """Running statistics for the cell-state normalisation of the binary layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    training: bool = False

    @classmethod
    def fresh(cls, size: int) -> "BatchNormState":
        return cls(np.zeros(size), np.ones(size))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy(),
                              self.momentum, self.eps, self.training)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.running_mean = m * self.running_mean + (1.0 - m) * batch_mean
        self.running_var = m * self.running_var + (1.0 - m) * batch_var


class _BNCache(NamedTuple):
    xhat: np.ndarray
    inv_std: np.ndarray
    training: bool
    mean: np.ndarray
    var: np.ndarray


def batchnorm_forward(c: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                      bn: BatchNormState, training: bool):
    if training:
        mean = c.mean(axis=0)
        var = c.var(axis=0)
    else:
        mean, var = bn.running_mean, bn.running_var
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (c - mean) * inv_std
    return gamma * xhat + beta, _BNCache(xhat, inv_std, training, mean, var)


def batchnorm_backward(grads: Params, prefix: str, gamma: np.ndarray, cache: _BNCache,
                       dout: np.ndarray) -> np.ndarray:
    grads[f"{prefix}.gamma"] += (dout * cache.xhat).sum(axis=0)
    grads[f"{prefix}.beta"] += dout.sum(axis=0)
    dxhat = dout * gamma
    if not cache.training:
        return dxhat * cache.inv_std
    B = dout.shape[0]
    return cache.inv_std / B * (B * dxhat - dxhat.sum(axis=0)
                                - cache.xhat * (dxhat * cache.xhat).sum(axis=0))


# ------------------------------------------------------------- binary LSTM

class _BinaryCache(NamedTuple):
    lstm: _LSTMCache
    bn: _BNCache
    tanh_n: np.ndarray
    pre: np.ndarray


def binary_lstm_forward(params: Params, prefix: str, bn: BatchNormState, x: np.ndarray,
                        h_prev: np.ndarray, c_prev: np.ndarray, training: bool = False,
                        relaxed: bool = False):
    """Batched binary LSTM step returning ``(h, c, pre, cache)``.

    The raw cell state ``c`` is carried to the next step; its batch-normalised
    copy drives the output.  ``pre`` is the real-valued activation whose sign
    is the emitted code.  ``relaxed`` replaces ``sign`` by its clipped identity
    surrogate, which makes the forward pass differentiable for gradient checks.
    """
    p = lstm_view(params, prefix)
    _check_shapes(p, x, h_prev, c_prev)
    i, f, o, g = _gates(p, x, h_prev)
    c = f * c_prev + i * g
    gamma, beta = params[f"{prefix}.gamma"], params[f"{prefix}.beta"]
    normed, bn_cache = batchnorm_forward(c, gamma, beta, bn, training)
    tanh_n = np.tanh(normed)
    pre = o * tanh_n
    h = np.clip(pre, -STE_CLIP, STE_CLIP) if relaxed else sign(pre)
    cache = _BinaryCache(_LSTMCache(x, h_prev, c_prev, i, f, o, g, tanh_n), bn_cache, tanh_n, pre)
    return h, c, pre, cache


def binary_lstm_step(params: Params, prefix: str, bn: BatchNormState, x: np.ndarray,
                     h_prev: np.ndarray, c_prev: np.ndarray):
    """Inference-mode binary LSTM step; returns ``(h, c, pre)`` with ``h = sign(pre)``."""
    if np.any(np.abs(h_prev) != 1.0):
        raise ConfigurationError("binary hidden state must contain only -1/+1 entries")
    single, (x, h_prev, c_prev) = _as_batch(x, h_prev, c_prev)
    h, c, pre, _ = binary_lstm_forward(params, prefix, bn, x, h_prev, c_prev, training=False)
    if single:
        return h[0], c[0], pre[0]
    return h, c, pre


def binary_lstm_backward(params: Params, grads: Params, prefix: str, cache: _BinaryCache,
                         dh: np.ndarray, dpre: np.ndarray, dc_next: np.ndarray):
    """Backward through one binary step.

    ``dh`` is the gradient w.r.t. the emitted code (routed through the
    straight-through estimator), ``dpre`` any direct gradient on the
    pre-activation.  Returns ``(dx, dh_prev, dc_prev)``.
    """
    p = lstm_view(params, prefix)
    dpre = dpre + ste_backward(cache.pre, dh)
    lc = cache.lstm
    do = dpre * cache.tanh_n
    dnormed = dpre * lc.o * (1.0 - cache.tanh_n ** 2)
    dc = dc_next + batchnorm_backward(grads, prefix, params[f"{prefix}.gamma"], cache.bn, dnormed)
    return _gate_backward(p, grads, prefix, lc, dc, do)


# ------------------------------------------------------------------ dense

def dense_forward(params: Params, prefix: str, x: np.ndarray) -> np.ndarray:
    return x @ params[f"{prefix}.W"] + params[f"{prefix}.b"]


def dense_backward(params: Params, grads: Params, prefix: str, x: np.ndarray,
                   dy: np.ndarray) -> np.ndarray:
    grads[f"{prefix}.W"] += x.T @ dy
    grads[f"{prefix}.b"] += dy.sum(axis=0)
    return dy @ params[f"{prefix}.W"].T


# ----------------------------------------------------------------- losses

def l2_norm_rows(residual: np.ndarray):
    """Row-wise Euclidean norms and their gradient w.r.t. ``residual``.

    The gradient at an exactly zero residual is taken as zero.
    """
    norms = np.sqrt((residual ** 2).sum(axis=-1))
    safe = np.where(norms > 0, norms, 1.0)
    grad = np.where(norms[..., None] > 0, residual / safe[..., None], 0.0)
    return norms, grad


# -------------------------------------------------------------- optimiser

def zeros_like(params: Params) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float((g ** 2).sum()) for g in grads.values())))


def clip_grad_norm(grads: Params, max_norm: float = GRAD_CLIP_NORM) -> Params:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """Return new parameters ``p - lr * g``; names missing from ``grads`` are kept."""
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        out[k] = p.copy() if g is None else p - lr * g
    return out


@dataclass
class GradCheckResult:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def abs_error(self) -> float:
        return abs(self.analytic - self.numeric)


@dataclass
class GradCheckReport:
    checked: int = 0
    failures: list[GradCheckResult] = field(default_factory=list)
    max_rel_error: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.failures


def check_gradients(loss_fn, params: Params, grads: Params, step: float = 1e-4,
                    rtol: float = 1e-3, atol: float = 1e-5,
                    names: list[str] | None = None) -> GradCheckReport:
    """Compare analytic ``grads`` against central finite differences of ``loss_fn``.

    ``loss_fn`` is called with no arguments after ``params`` has been perturbed
    in place; every entry of every listed array is checked.  An entry passes
    when ``|a - n| <= atol`` or ``|a - n| <= rtol * max(|a|, |n|)``.
    """
    report = GradCheckReport()
    for name in names or sorted(params):
        p = params[name]
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = loss_fn()
            flat[j] = orig - step
            down = loss_fn()
            flat[j] = orig
            num = (up - down) / (2 * step)
            a = float(g[j])
            err = abs(a - num)
            scale = max(abs(a), abs(num))
            if scale > 0:
                report.max_rel_error = max(report.max_rel_error, err / max(scale, atol))
            report.checked += 1
            if err > atol and err > rtol * scale:
                report.failures.append(GradCheckResult(name, np.unravel_index(j, p.shape), a, num))
    return report
