"""BCNN and SCNN layer stacks and their cascade.

Both networks are plain chains of 3x3 convolution blocks::

    BCNN: orange(1->64) . 15 x blue(64->64)   . green(64->1)
    SCNN: orange(2->64) . 15 x orange(64->64) . yellow(64->1)

Orange blocks are conv + ReLU, blue blocks conv + batch norm + ReLU, green is
a linear conv and yellow a conv followed by a sigmoid. With biases on every
convolution this comes to 557,057 + 555,713 = 1,112,770 trainable parameters.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    BatchNormParams,
    ConvParams,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    relu,
    sigmoid,
    sigmoid_backward,
)

WIDTH = 64
MIDDLE_DEPTH = 15

# color tag -> (activation, batch norm) as in the architecture table
COLOR_CLASSES = {
    "orange": ("relu", False),
    "blue": ("relu", True),
    "green": ("identity", False),
    "yellow": ("sigmoid", False),
}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | batchnorm | relu | sigmoid
    color_tag: str
    in_channels: int | None = None
    out_channels: int | None = None


@dataclass
class Block:
    """One convolution with its optional batch norm and activation."""

    color: str
    conv: ConvParams
    bn: BatchNormParams | None
    activation: str  # relu | identity | sigmoid

    def layer_specs(self) -> list[LayerSpec]:
        specs = [LayerSpec("conv", self.color, self.conv.in_ch, self.conv.out_ch)]
        if self.bn is not None:
            specs.append(LayerSpec("batchnorm", self.color, self.bn.channels, self.bn.channels))
        if self.activation != "identity":
            specs.append(LayerSpec(self.activation, self.color))
        return specs


class NetworkSpec:
    """A named chain of :class:`Block` objects owning their parameters."""

    def __init__(self, name: str, input_channels: int, blocks: list[Block], canonical: bool = True):
        self.name = name
        self.input_channels = input_channels
        self.blocks = blocks
        # False for reduced width/depth variants and the symmetric-BN SCNN
        self.canonical = canonical

    def __repr__(self):
        return (f"NetworkSpec({self.name!r}, input_channels={self.input_channels}, "
                f"blocks={len(self.blocks)}, params={count_parameters(self)})")

    @property
    def dtype(self):
        return self.blocks[0].conv.kernel.dtype

    def layer_specs(self) -> list[LayerSpec]:
        return [spec for block in self.blocks for spec in block.layer_specs()]

    def named_parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed ``"<block>.<field>"`` (views, not copies)."""
        out = {}
        for i, block in enumerate(self.blocks):
            out[f"{i}.kernel"] = block.conv.kernel
            out[f"{i}.bias"] = block.conv.bias
            if block.bn is not None:
                out[f"{i}.gamma"] = block.bn.gamma
                out[f"{i}.beta"] = block.bn.beta
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, block in enumerate(self.blocks):
            if block.bn is not None:
                out[f"{i}.running_mean"] = block.bn.running_mean
                out[f"{i}.running_var"] = block.bn.running_var
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {**self.named_parameters(), **self.named_buffers()}

    def layout(self) -> list[dict]:
        """JSON-friendly block table used by checkpoints."""
        return [
            {
                "color": b.color,
                "in": b.conv.in_ch,
                "out": b.conv.out_ch,
                "batchnorm": b.bn is not None,
                "activation": b.activation,
            }
            for b in self.blocks
        ]

    def copy(self) -> "NetworkSpec":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "NetworkSpec":
        net = self.copy()
        for block in net.blocks:
            block.conv = ConvParams(block.conv.kernel.astype(dtype), block.conv.bias.astype(dtype))
            if block.bn is not None:
                bn = block.bn
                block.bn = BatchNormParams(
                    bn.gamma.astype(dtype), bn.beta.astype(dtype),
                    bn.running_mean.astype(dtype), bn.running_var.astype(dtype),
                    bn.epsilon, bn.momentum,
                )
        return net

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, mode: str = "infer", keep: bool = False):
        """Run the chain. Returns the output, plus a backward cache if ``keep``."""
        if x.ndim != 4 or x.shape[1] != self.input_channels:
            raise ShapeError(
                f"{self.name} expects (n, {self.input_channels}, h, w) input, got {x.shape}"
            )
        inputs, pre_bn = [], []
        for block in self.blocks:
            if keep:
                inputs.append(x)
            z = conv2d_forward(x, block.conv)
            if block.bn is not None:
                if keep:
                    pre_bn.append(z)
                z = batchnorm_forward(z, block.bn, mode)
            elif keep:
                pre_bn.append(None)
            if block.activation == "relu":
                x = relu(z)
            elif block.activation == "sigmoid":
                x = sigmoid(z)
            else:
                x = z
        if keep:
            return x, {"inputs": inputs, "pre_bn": pre_bn, "output": x, "mode": mode}
        return x

    def backward(self, cache: dict, grad_out: np.ndarray):
        """Back-propagate ``grad_out``; returns ``(grad_input, grads)``."""
        inputs, pre_bn, mode = cache["inputs"], cache["pre_bn"], cache["mode"]
        grads = {}
        g = grad_out
        for i in range(len(self.blocks) - 1, -1, -1):
            block = self.blocks[i]
            out = inputs[i + 1] if i + 1 < len(self.blocks) else cache["output"]
            if block.activation == "relu":
                g = g * (out > 0)
            elif block.activation == "sigmoid":
                g = sigmoid_backward(out, g)
            if block.bn is not None:
                g, grads[f"{i}.gamma"], grads[f"{i}.beta"] = batchnorm_backward(
                    pre_bn[i], block.bn, g, mode)
            g, grads[f"{i}.kernel"], grads[f"{i}.bias"] = conv2d_backward(inputs[i], block.conv, g)
        return g, grads


# ---------------------------------------------------------------------------
# construction


def _he_conv(rng: np.random.Generator, in_ch: int, out_ch: int, dtype) -> ConvParams:
    std = np.sqrt(2.0 / (in_ch * 9))
    kernel = (rng.standard_normal((out_ch, in_ch, 3, 3)) * std).astype(dtype)
    return ConvParams(kernel, np.zeros(out_ch, dtype))


def _build(name, input_channels, last_color, middle_bn, seed, width, depth, dtype, canonical):
    rng = np.random.default_rng(seed)
    blocks = [Block("orange", _he_conv(rng, input_channels, width, dtype), None, "relu")]
    for _ in range(depth):
        bn = BatchNormParams.identity(width, dtype) if middle_bn else None
        # conv + ReLU without batch norm is the orange class
        color = "blue" if middle_bn else "orange"
        blocks.append(Block(color, _he_conv(rng, width, width, dtype), bn, "relu"))
    blocks.append(Block(last_color, _he_conv(rng, width, 1, dtype), None,
                        COLOR_CLASSES[last_color][0]))
    return NetworkSpec(name, input_channels, blocks, canonical)


def build_bcnn(seed: int = 0, *, width: int = WIDTH, depth: int = MIDDLE_DEPTH,
               dtype=np.float32) -> NetworkSpec:
    """Background network: 1-channel frame in, 1-channel residual map out."""
    canonical = (width, depth) == (WIDTH, MIDDLE_DEPTH)
    return _build("bcnn", 1, "green", True, seed, width, depth, dtype, canonical)


def build_scnn(seed: int = 0, *, width: int = WIDTH, depth: int = MIDDLE_DEPTH,
               batchnorm: bool = False, dtype=np.float32) -> NetworkSpec:
    """Segmentation network: (frame, residual) in, foreground probability out.

    ``batchnorm=True`` gives the symmetric variant with batch norm in the
    middle layers. It does not match the canonical parameter total and is
    never used by default.
    """
    canonical = (width, depth) == (WIDTH, MIDDLE_DEPTH) and not batchnorm
    return _build("scnn", 2, "yellow", batchnorm, seed, width, depth, dtype, canonical)


def count_parameters(net: NetworkSpec) -> int:
    return sum(a.size for a in net.named_parameters().values())


# ---------------------------------------------------------------------------
# cascade


def bcnn_forward(f: np.ndarray, bcnn: NetworkSpec, mode: str = "infer") -> np.ndarray:
    """Residual map ``BCNN(f)``: the raw, pre-sigmoid network output."""
    if f.ndim != 4 or f.shape[1] != 1:
        raise ShapeError(f"BCNN input must be single-channel (n, 1, h, w), got {f.shape}")
    return bcnn.forward(f, mode)


def approximated_background(f: np.ndarray, bcnn: NetworkSpec, mode: str = "infer") -> np.ndarray:
    """``a = sigmoid(f - BCNN(f))``."""
    return sigmoid(f - bcnn_forward(f, bcnn, mode))


def cascade_input(f: np.ndarray, residual: np.ndarray) -> np.ndarray:
    """Depth-concatenate frame (channel 0) and residual map (channel 1)."""
    if f.ndim != 4 or residual.ndim != 4 or f.shape[1] != 1 or residual.shape[1] != 1:
        raise ShapeError(f"expected two single-channel tensors, got {f.shape} and {residual.shape}")
    if f.shape != residual.shape:
        raise ShapeError(f"frame shape {f.shape} != residual shape {residual.shape}")
    return np.concatenate([f, residual.astype(f.dtype, copy=False)], axis=1)


def segment_probabilities(f: np.ndarray, bcnn: NetworkSpec, scnn: NetworkSpec,
                          mode: str = "infer") -> np.ndarray:
    """Foreground probabilities ``SCNN(cascade_input(f, BCNN(f)))``."""
    residual = bcnn_forward(f, bcnn, mode)
    return scnn.forward(cascade_input(f, residual), mode)
