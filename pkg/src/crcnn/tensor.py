"""Dense 4-D tensor numerics for the CRCNN layer set.

Tensors are plain ``numpy`` arrays laid out as (batch, channel, height, width).
Every operation keeps the dtype of its inputs, so float32 is used for training
and inference while float64 inputs give the gradient-check mode.

Convolutions are always 3x3, stride 1, zero padding 1 (spatial size is
preserved). They are lowered to one GEMM per small batch chunk via im2col.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateBatchError, InvalidMaskError, ShapeError

KERNEL = 3
BCE_CLAMP = 1e-7

# im2col is built per chunk of the batch; small chunks stay in cache.
_COLS_BUDGET = 4 * 1024 * 1024


def _check4(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (n, c, h, w), got shape {x.shape}")


@dataclass
class ConvParams:
    kernel: np.ndarray  # (out_ch, in_ch, 3, 3)
    bias: np.ndarray  # (out_ch,)

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (KERNEL, KERNEL):
            raise ShapeError(f"kernel must have shape (out, in, 3, 3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match kernel shape {self.kernel.shape}"
            )

    @property
    def in_ch(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_ch(self) -> int:
        return self.kernel.shape[0]

    @property
    def trainable_count(self) -> int:
        return self.kernel.size + self.bias.size

    @classmethod
    def zeros(cls, in_ch: int, out_ch: int, dtype=np.float32) -> "ConvParams":
        return cls(np.zeros((out_ch, in_ch, KERNEL, KERNEL), dtype), np.zeros(out_ch, dtype))


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def trainable_count(self) -> int:
        # running statistics are buffers, not trainables
        return self.gamma.size + self.beta.size

    @classmethod
    def identity(cls, channels: int, dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )


# ---------------------------------------------------------------------------
# convolution


class _Im2Col:
    """Reusable im2col workspace for one (chunk, c, h, w) geometry.

    Columns are laid out as (n*h*w, 9*c) with rows in (n, y, x) order and
    columns in (dy, dx, c) order. Buffers are sized to stay cache resident;
    reusing them avoids page-faulting fresh memory on every chunk.
    """

    def __init__(self, chunk: int, c: int, h: int, w: int, dtype):
        self.h, self.w = h, w
        self.padded = np.zeros((chunk, h + 2, w + 2, c), dtype=dtype)
        self.cols = np.empty((chunk, h, w, KERNEL, KERNEL, c), dtype=dtype)
        self.matrix = self.cols.reshape(chunk * h * w, KERNEL * KERNEL * c)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        k, h, w = x.shape[0], self.h, self.w
        self.padded[:k, 1:-1, 1:-1] = x.transpose(0, 2, 3, 1)
        for dy in range(KERNEL):
            for dx in range(KERNEL):
                self.cols[:k, :, :, dy, dx] = self.padded[:k, dy:dy + h, dx:dx + w]
        return self.matrix[:k * h * w]


def _kernel_matrix(kernel: np.ndarray) -> np.ndarray:
    """(o, c, 3, 3) -> (9*c, o) matching the im2col column order."""
    o, c = kernel.shape[:2]
    return np.ascontiguousarray(kernel.transpose(2, 3, 1, 0).reshape(KERNEL * KERNEL * c, o))


def _chunk_size(n: int, c: int, h: int, w: int, itemsize: int) -> int:
    per_item = c * KERNEL * KERNEL * h * w * itemsize
    return int(min(n, max(1, _COLS_BUDGET // max(per_item, 1))))


def _correlate(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None) -> np.ndarray:
    n, c, h, w = x.shape
    o = kernel.shape[0]
    dtype = np.result_type(x, kernel)
    kmat = _kernel_matrix(kernel).astype(dtype, copy=False)
    step = _chunk_size(n, c, h, w, x.itemsize)
    im2col = _Im2Col(step, c, h, w, dtype)
    out = np.empty((n * h * w, o), dtype=dtype)
    for a in range(0, n, step):
        b = min(n, a + step)
        np.matmul(im2col(x[a:b]), kmat, out=out[a * h * w:b * h * w])
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(n, h, w, o).transpose(0, 3, 1, 2))


def conv2d_forward(x: np.ndarray, params: ConvParams) -> np.ndarray:
    """3x3 cross-correlation with zero padding 1; output keeps (h, w)."""
    _check4(x)
    if x.shape[1] != params.in_ch:
        raise ShapeError(
            f"input shape {x.shape} has {x.shape[1]} channels but kernel shape "
            f"{params.kernel.shape} expects {params.in_ch}"
        )
    return _correlate(x, params.kernel, params.bias)


def conv2d_backward(x: np.ndarray, params: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, grad_kernel, grad_bias)`` for :func:`conv2d_forward`."""
    _check4(x)
    n, c, h, w = x.shape
    o = params.out_ch
    if c != params.in_ch:
        raise ShapeError(f"input shape {x.shape} incompatible with kernel {params.kernel.shape}")
    if grad_out.shape != (n, o, h, w):
        raise ShapeError(f"grad_out shape {grad_out.shape}, expected {(n, o, h, w)}")

    grad_kmat = np.zeros((KERNEL * KERNEL * c, o), dtype=params.kernel.dtype)
    step = _chunk_size(n, c, h, w, x.itemsize)
    im2col = _Im2Col(step, c, h, w, x.dtype)
    go_all = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(n * h * w, o)
    for a in range(0, n, step):
        b = min(n, a + step)
        grad_kmat += im2col(x[a:b]).T @ go_all[a * h * w:b * h * w]
    grad_kernel = grad_kmat.reshape(KERNEL, KERNEL, c, o).transpose(3, 2, 0, 1)
    grad_bias = grad_out.sum(axis=(0, 2, 3)).astype(params.bias.dtype, copy=False)

    # d/dx of a padded correlation is a padded correlation with the flipped,
    # channel-transposed kernel
    flipped = np.ascontiguousarray(params.kernel.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    grad_input = _correlate(grad_out, flipped, None)
    return grad_input, np.ascontiguousarray(grad_kernel), grad_bias


# ---------------------------------------------------------------------------
# batch normalization


def _bn_batch_stats(x: np.ndarray, params: BatchNormParams):
    _check4(x)
    if x.shape[1] != params.channels:
        raise ShapeError(f"input shape {x.shape} does not match {params.channels} BN channels")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise DegenerateBatchError(
            f"train-mode batch norm needs n*h*w >= 2 per channel, got shape {x.shape}"
        )
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return mean, var, count


def batchnorm_forward(x: np.ndarray, params: BatchNormParams, mode: str = "train") -> np.ndarray:
    """Per-channel normalization.

    In ``"train"`` mode the batch statistics over (n, h, w) are used and the
    running statistics are updated in place by an exponential moving average
    (unbiased variance). ``"infer"`` mode uses the running statistics only.
    """
    if mode == "train":
        mean, var, count = _bn_batch_stats(x, params)
        m = params.momentum
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * var * (count / (count - 1))
    elif mode == "infer":
        _check4(x)
        if x.shape[1] != params.channels:
            raise ShapeError(f"input shape {x.shape} does not match {params.channels} BN channels")
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    scale = (params.gamma * inv_std).astype(x.dtype, copy=False)
    shift = (params.beta - mean * params.gamma * inv_std).astype(x.dtype, copy=False)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def batchnorm_backward(x: np.ndarray, params: BatchNormParams, grad_out: np.ndarray,
                       mode: str = "train"):
    """Return ``(grad_input, grad_gamma, grad_beta)``.

    Batch statistics are recomputed from ``x``; running statistics are not touched.
    """
    if grad_out.shape != x.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} != input shape {x.shape}")
    if mode == "train":
        mean, var, count = _bn_batch_stats(x, params)
    elif mode == "infer":
        mean, var = params.running_mean, params.running_var
    else:
        raise ValueError(f"unknown mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype, copy=False)
    xhat = (x - mean.astype(x.dtype, copy=False)[None, :, None, None]) * inv_std[None, :, None, None]
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    g = params.gamma.astype(x.dtype, copy=False)
    if mode == "infer":
        grad_input = grad_out * (g * inv_std)[None, :, None, None]
    else:
        k = (g * inv_std / count)[None, :, None, None]
        grad_input = k * (count * grad_out - grad_beta[None, :, None, None]
                          - xhat * grad_gamma[None, :, None, None])
    return grad_input, grad_gamma.astype(params.gamma.dtype), grad_beta.astype(params.beta.dtype)


# ---------------------------------------------------------------------------
# activations


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp(-|x|) never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Takes the sigmoid *output* ``y``."""
    return grad_out * y * (1 - y)


def identity(x: np.ndarray) -> np.ndarray:
    return x


def identity_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out


# ---------------------------------------------------------------------------
# losses


def frobenius_loss(target: np.ndarray, pred: np.ndarray):
    """``(1 / 2m) * sum ||b_i - a_i||_F^2`` over the m patches of the batch."""
    if target.shape != pred.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {pred.shape}")
    _check4(pred, "prediction")
    m = pred.shape[0]
    diff = pred - target
    loss = float(np.sum(diff.astype(np.float64) ** 2) / (2 * m))
    return loss, diff / m


def bce_loss(target: np.ndarray, pred: np.ndarray):
    """Mean binary cross-entropy over every pixel of every patch.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the gradient is evaluated
    at the clamped value so saturated outputs still receive a signal.
    """
    if target.shape != pred.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {pred.shape}")
    if not np.all((target == 0) | (target == 1)):
        bad = np.unique(target[(target != 0) & (target != 1)])[:5]
        raise InvalidMaskError(f"mask values must be 0 or 1, found {bad.tolist()}")
    total = pred.size
    p = np.clip(pred, BCE_CLAMP, 1 - BCE_CLAMP)
    p64 = p.astype(np.float64)
    t64 = target.astype(np.float64)
    loss = float(-np.sum(t64 * np.log(p64) + (1 - t64) * np.log1p(-p64)) / total)
    grad = ((p - target) / (p * (1 - p)) / total).astype(pred.dtype, copy=False)
    return max(loss, 0.0), grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> dict:
    """Bias-corrected Adam update applied in place to every array in ``params``."""
    if params.keys() != grads.keys():
        raise ShapeError("parameter and gradient names differ")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(f"{name}: gradient shape {grads[name].shape} != parameter {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)).astype(p.dtype)
    return params
