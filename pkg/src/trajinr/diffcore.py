"""Small reverse-mode differentiation engine.

Only the operations needed by the spatiotemporal INR and the row-wise
parameter encoder are provided. Every op takes an optional ``tape``; when it
is ``None`` the op runs forward only and records nothing, which is the path
used for inference.

Batched inputs are row-major: a batch of ``N`` vectors of width ``F`` is an
``N x F`` array.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class BatchSizeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """Array value with an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        if self.value.dtype.kind not in "fc":
            self.value = self.value.astype(np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitive ops for one forward pass."""

    def __init__(self):
        self.records: list[_Record] = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self.records)

    def record(self, name, inputs, output, backward) -> None:
        self.records.append(_Record(name, tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(.) to every tensor on the tape.

        ``loss`` must hold a single value. Records are visited once each, in
        reverse order of recording.
        """
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss._accumulate(np.ones_like(loss.value))
        for rec in reversed(self.records):
            self.visits += 1
            g = rec.output.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, grads):
                if gi is not None and inp.requires_grad:
                    inp._accumulate(gi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(tape, name, inputs, out_value, backward) -> Tensor:
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_value, requires_grad=needs)
    if needs:
        tape.record(name, inputs, out, backward)
    return out


# --------------------------------------------------------------------------
# linear maps


def affine(W, b, x, tape: Tape | None = None) -> Tensor:
    """``y = W x + b`` for ``W`` of shape (out, in); ``x`` is (in,) or (N, in)."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    if W.value.ndim != 2 or b.value.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"affine: W {W.shape}, b {b.shape} and x {x.shape} do not agree"
        )
    Wv, xv = W.value, x.value
    y = xv @ Wv.T + b.value

    def backward(g):
        if xv.ndim == 1:
            return np.outer(g, xv), g, Wv.T @ g
        return g.T @ xv, g.sum(axis=0), g @ Wv

    return _emit(tape, "affine", (W, b, x), y, backward)


def linear(P, x, tape: Tape | None = None) -> Tensor:
    """Affine map with a stacked ``(in + 1) x out`` parameter matrix.

    The first ``in`` rows hold the transposed weights, the last row the bias,
    so ``y = x @ P[:-1] + P[-1]``.
    """
    P, x = as_tensor(P), as_tensor(x)
    if P.value.ndim != 2 or x.value.ndim != 2 or x.shape[1] + 1 != P.shape[0]:
        raise DimensionError(f"linear: P {P.shape} cannot act on x {x.shape}")
    Pv, xv = P.value, x.value
    Wt = Pv[:-1]
    y = xv @ Wt + Pv[-1]

    def backward(g):
        gP = np.empty_like(Pv)
        gP[:-1] = xv.T @ g
        gP[-1] = g.sum(axis=0)
        return gP, g @ Wt.T

    return _emit(tape, "linear", (P, x), y, backward)


def complex_linear(P_re, P_im, x, tape: Tape | None = None) -> Tensor:
    """Complex-weighted stacked linear map on real-packed activations.

    ``x`` is either real ``(N, in)`` or complex packed as ``(N, 2*in)`` with
    the real block first. The output is packed ``(N, 2*out)``.
    """
    P_re, P_im, x = as_tensor(P_re), as_tensor(P_im), as_tensor(x)
    if P_re.shape != P_im.shape or P_re.value.ndim != 2:
        raise DimensionError(f"complex_linear: P_re {P_re.shape} vs P_im {P_im.shape}")
    n_in = P_re.shape[0] - 1
    xv = x.value
    if xv.ndim != 2 or xv.shape[1] not in (n_in, 2 * n_in):
        raise DimensionError(f"complex_linear: P {P_re.shape} cannot act on x {x.shape}")
    is_complex = xv.shape[1] == 2 * n_in
    Wr, Wi = P_re.value[:-1], P_im.value[:-1]
    xr = xv[:, :n_in]
    xi = xv[:, n_in:] if is_complex else None
    yr = xr @ Wr + P_re.value[-1]
    yi = xr @ Wi + P_im.value[-1]
    if is_complex:
        yr = yr - xi @ Wi
        yi = yi + xi @ Wr
    y = np.concatenate([yr, yi], axis=1)
    n_out = Wr.shape[1]

    def backward(g):
        gr, gi = g[:, :n_out], g[:, n_out:]
        gPr = np.empty_like(P_re.value)
        gPi = np.empty_like(P_im.value)
        gPr[:-1] = xr.T @ gr
        gPi[:-1] = xr.T @ gi
        gPr[-1] = gr.sum(axis=0)
        gPi[-1] = gi.sum(axis=0)
        gxr = gr @ Wr.T + gi @ Wi.T
        if not is_complex:
            return gPr, gPi, gxr
        gPr[:-1] += xi.T @ gi
        gPi[:-1] -= xi.T @ gr
        gxi = gi @ Wr.T - gr @ Wi.T
        return gPr, gPi, np.concatenate([gxr, gxi], axis=1)

    return _emit(tape, "complex_linear", (P_re, P_im, x), y, backward)


# --------------------------------------------------------------------------
# elementwise


def add(a, b, tape: Tape | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit(tape, "add", (a, b), a.value + b.value, lambda g: (g, g))


def relu(u, tape: Tape | None = None) -> Tensor:
    u = as_tensor(u)
    mask = u.value > 0
    return _emit(tape, "relu", (u,), np.where(mask, u.value, 0).astype(u.dtype), lambda g: (g * mask,))


_ENVELOPE_CAP = 60.0


def _check_gabor(omega0, s0):
    if not omega0 > 0 or not s0 > 0:
        raise ConfigurationError(f"gabor needs omega0 > 0 and s0 > 0, got {omega0}, {s0}")


def gabor(u, omega0: float = 20.0, s0: float = 10.0, tape: Tape | None = None) -> Tensor:
    """Real Gabor wavelet ``cos(omega0 u) exp(-(s0 u)^2)``."""
    _check_gabor(omega0, s0)
    u = as_tensor(u)
    uv = u.value
    wu = omega0 * uv
    # envelopes below exp(-cap) are flushed to zero so float32 never goes denormal
    e2 = (s0 * uv) ** 2
    env = np.where(e2 > _ENVELOPE_CAP, 0.0, np.exp(-np.minimum(e2, _ENVELOPE_CAP))).astype(uv.dtype, copy=False)
    c = np.cos(wu)
    y = c * env

    def backward(g):
        return (g * env * (-omega0 * np.sin(wu) - 2.0 * s0 * s0 * uv * c),)

    return _emit(tape, "gabor", (u,), y, backward)


def complex_gabor(u, omega0: float = 20.0, s0: float = 10.0, tape: Tape | None = None) -> Tensor:
    """Complex Gabor wavelet ``exp(i omega0 u - |s0 u|^2)`` on packed ``[re | im]``."""
    _check_gabor(omega0, s0)
    u = as_tensor(u)
    h = u.shape[-1] // 2
    if u.value.ndim != 2 or u.shape[-1] != 2 * h:
        raise DimensionError(f"complex_gabor expects packed (N, 2H) input, got {u.shape}")
    ur, ui = u.value[:, :h], u.value[:, h:]
    amp = np.exp(np.clip(-omega0 * ui - s0 * s0 * (ur * ur + ui * ui), -_ENVELOPE_CAP, _ENVELOPE_CAP))
    phase = omega0 * ur
    c, s = np.cos(phase), np.sin(phase)
    vr, vi = amp * c, amp * s
    y = np.concatenate([vr, vi], axis=1)

    def backward(g):
        gr, gi = g[:, :h], g[:, h:]
        # d amp / d ur = -2 s0^2 ur amp ; d amp / d ui = (-omega0 - 2 s0^2 ui) amp
        da_r = -2.0 * s0 * s0 * ur
        da_i = -omega0 - 2.0 * s0 * s0 * ui
        dur = gr * (vr * da_r - omega0 * vi) + gi * (vi * da_r + omega0 * vr)
        dui = gr * vr * da_i + gi * vi * da_i
        return (np.concatenate([dur, dui], axis=1),)

    return _emit(tape, "complex_gabor", (u,), y, backward)


def activate(u, kind: str, omega0: float = 20.0, s0: float = 10.0, tape: Tape | None = None) -> Tensor:
    if kind == "relu":
        return relu(u, tape)
    if kind == "gabor":
        return gabor(u, omega0, s0, tape)
    if kind == "complex-gabor":
        return complex_gabor(u, omega0, s0, tape)
    raise ConfigurationError(f"unknown activation {kind!r}")


def residual_layer(W, b, y_prev, activation: str = "relu", omega0: float = 20.0,
                   s0: float = 10.0, tape: Tape | None = None) -> Tensor:
    """``activation(W y_prev + b) + y_prev`` for a square ``W``."""
    W = as_tensor(W)
    if W.value.ndim != 2 or W.shape[0] != W.shape[1]:
        raise DimensionError(f"residual_layer needs a square W, got {W.shape}")
    u = affine(W, b, y_prev, tape)
    return add(activate(u, activation, omega0, s0, tape), y_prev, tape)


def concat_columns(a, b, tape: Tape | None = None) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat_columns: {a.shape} and {b.shape}")
    k = a.shape[1]
    return _emit(tape, "concat", (a, b), np.concatenate([a.value, b.value], axis=1),
                 lambda g: (g[:, :k], g[:, k:]))


def take_columns(x, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    x = as_tensor(x)
    xv = x.value

    def backward(g):
        out = np.zeros_like(xv)
        out[:, start:stop] = g
        return (out,)

    return _emit(tape, "take_columns", (x,), xv[:, start:stop], backward)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool,
            tape: Tape | None = None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is zero."""
    x = as_tensor(x)
    if not train or rate <= 0:
        return x
    if not 0 <= rate < 1:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _emit(tape, "dropout", (x,), x.value * mask, lambda g: (g * mask,))


# --------------------------------------------------------------------------
# row-set operations


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, width: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        return cls(
            gamma=Tensor(np.ones(width, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(width, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(width, dtype=dtype),
            running_var=np.ones(width, dtype=dtype),
            momentum=momentum,
            eps=eps,
        )


def batchnorm_rows(M, state: BatchNormState, train: bool, tape: Tape | None = None) -> Tensor:
    """Per-column standardisation over the rows of ``M``, then scale and shift.

    In train mode the batch statistics are used and the running statistics
    are updated in place; in infer mode the running statistics are used.
    """
    M = as_tensor(M)
    gamma, beta = state.gamma, state.beta
    Mv = M.value
    if Mv.ndim != 2 or Mv.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batchnorm_rows: M {M.shape} vs gamma {gamma.shape}")
    if not train:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (Mv - state.running_mean) * inv
        y = xhat * gamma.value + beta.value

        def backward_infer(g):
            return g * gamma.value * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return _emit(tape, "batchnorm_infer", (M, gamma, beta), y, backward_infer)

    R = Mv.shape[0]
    if R < 2:
        raise BatchSizeError(f"batchnorm_rows in train mode needs >= 2 rows, got {R}")
    mean = Mv.mean(axis=0)
    centered = Mv - mean
    var = (centered * centered).mean(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv
    y = xhat * gamma.value + beta.value
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mean
    state.running_var = (1 - m) * state.running_var + m * var * (R / (R - 1))

    def backward(g):
        gx = g * gamma.value
        gM = inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
        return gM, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit(tape, "batchnorm_train", (M, gamma, beta), y, backward)


def maxpool_columns(M, segments: Sequence[int] | None = None, tape: Tape | None = None) -> Tensor:
    """Column-wise maximum over rows.

    With ``segments`` (row counts summing to ``R``) the pooling runs per
    consecutive block of rows and the result has one row per block; without
    it a single vector is returned. Ties go to the lowest row index.
    """
    M = as_tensor(M)
    Mv = M.value
    if Mv.ndim != 2 or Mv.shape[0] == 0 or Mv.shape[1] == 0:
        raise DimensionError(f"maxpool_columns needs a non-empty matrix, got {M.shape}")
    single = segments is None
    counts = [Mv.shape[0]] if single else [int(c) for c in segments]
    if sum(counts) != Mv.shape[0] or min(counts) < 1:
        raise DimensionError(f"segments {counts} do not partition {Mv.shape[0]} rows")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(int)
    out = np.empty((len(counts), Mv.shape[1]), dtype=Mv.dtype)
    arg = np.empty((len(counts), Mv.shape[1]), dtype=np.intp)
    for k, (s, c) in enumerate(zip(starts, counts)):
        block = Mv[s:s + c]
        idx = block.argmax(axis=0)
        arg[k] = idx + s
        out[k] = block[idx, np.arange(Mv.shape[1])]
    cols = np.arange(Mv.shape[1])

    def backward(g):
        g2 = g.reshape(len(counts), -1)
        gM = np.zeros_like(Mv)
        for k in range(len(counts)):
            gM[arg[k], cols] += g2[k]
        return (gM,)

    return _emit(tape, "maxpool", (M,), out[0] if single else out, backward)


# --------------------------------------------------------------------------
# losses


def mse_loss(pred, target, tape: Tape | None = None) -> Tensor:
    pred = as_tensor(pred)
    tv = np.asarray(target.value if isinstance(target, Tensor) else target)
    if pred.shape != tv.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {tv.shape}")
    diff = pred.value - tv
    n = diff.size
    loss = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)
    return _emit(tape, "mse", (pred,), loss, lambda g: (g * (2.0 / n) * diff,))


def bce_with_logit(z, labels, tape: Tape | None = None) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    z = as_tensor(z)
    y = np.asarray(labels, dtype=z.dtype).reshape(z.shape)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("bce_with_logit labels must be 0 or 1")
    zv = z.value
    per = np.maximum(zv, 0) - zv * y + np.log1p(np.exp(-np.abs(zv)))
    n = max(per.size, 1)
    loss = np.asarray((per / n).sum(), dtype=z.dtype)
    return _emit(tape, "bce", (z,), loss, lambda g: (g * (sigmoid(zv) - y) / n,))


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z.dtype, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``.

    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        # float64 moments: squared float32 gradients would otherwise go denormal
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    if len(state.m) != len(params):
        raise DimensionError("adam_step: optimizer state does not match parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise DimensionError(f"adam_step: param {p.shape} vs grad {g.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def grad_check(f: Callable[..., Tensor], point: Sequence[np.ndarray], delta: float = 1e-5,
               floor: float = 1e-3) -> float:
    """Worst disagreement between reverse-mode and central-difference gradients.

    ``f(tape, *tensors)`` must build its graph on ``tape`` and return a scalar
    tensor. The error per coordinate is ``|a - n| / max(|a|, |n|, floor)``,
    which is relative for large gradients and absolute near zero.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    arrays = [np.array(p, dtype=np.float64) for p in point]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    tape = Tape()
    out = f(tape, *tensors)
    if not np.all(np.isfinite(out.value)):
        raise NumericError("function value is not finite")
    tape.backward(out)
    worst = 0.0

    def value(args):
        v = float(np.asarray(f(None, *[Tensor(a) for a in args]).value))
        if not np.isfinite(v):
            raise NumericError("function value is not finite")
        return v

    for k, (a, t) in enumerate(zip(arrays, tensors)):
        analytic = t.grad if t.grad is not None else np.zeros_like(a)
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + delta
            fp = value(arrays)
            flat[i] = orig - delta
            fm = value(arrays)
            flat[i] = orig
            num = (fp - fm) / (2 * delta)
            ana = float(analytic.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst
