"""Central finite-difference checks of every analytic gradient (float64).

Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``
with step ``h = 1e-5``.

Two cases are handled explicitly for whole networks:

* An entry whose +-h perturbation flips any ReLU on or off straddles a kink,
  where the central difference does not estimate the derivative. Such
  entries are skipped and another entry of the same tensor is drawn.
* With batch norm in train mode, a convolution bias feeding the batch norm
  has an identically zero gradient (the batch mean absorbs it). Its numeric
  estimate is pure rounding noise, so these entries are checked in absolute
  terms instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import build_bcnn, build_scnn, cascade_input
from .training import bcnn_objective, scnn_objective

STEP = 1e-5
FLOOR = 1e-8
TOLERANCE = 1e-4
ZERO_GRAD_ATOL = 1e-6


def relative_error(analytic, numeric) -> float:
    return float(abs(analytic - numeric) / max(abs(analytic), abs(numeric), FLOOR))


def central_difference(fn, arr: np.ndarray, index, h: float = STEP) -> float:
    old = arr[index]
    arr[index] = old + h
    plus = fn()
    arr[index] = old - h
    minus = fn()
    arr[index] = old
    return (plus - minus) / (2 * h)


@dataclass
class CheckResult:
    name: str
    max_error: float
    checked: int
    skipped_kinks: int = 0
    worst: str = ""
    zero_grad_max: float | None = None

    @property
    def passed(self) -> bool:
        ok = self.max_error < TOLERANCE
        if self.zero_grad_max is not None:
            ok = ok and self.zero_grad_max < ZERO_GRAD_ATOL
        return ok


@dataclass
class Suite:
    results: list = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(r.max_error for r in self.results)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def _check_all(name, fn, arrays_and_grads, rng, samples=None):
    worst, where, count = 0.0, "", 0
    for label, arr, grad in arrays_and_grads:
        indices = list(np.ndindex(arr.shape))
        if samples is not None and len(indices) > samples:
            indices = [indices[i] for i in rng.choice(len(indices), samples, replace=False)]
        for idx in indices:
            err = relative_error(grad[idx], central_difference(fn, arr, idx))
            count += 1
            if err > worst:
                worst, where = err, f"{label}{list(idx)}"
    return CheckResult(name, worst, count, worst=where)


# ---------------------------------------------------------------------------
# single operations


def check_operations(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []

    x = rng.standard_normal((2, 3, 5, 4))
    conv = T.ConvParams(rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2))
    w = rng.standard_normal((2, 2, 5, 4))
    gx, gk, gb = T.conv2d_backward(x, conv, w)
    fn = lambda: float(np.sum(T.conv2d_forward(x, conv) * w))
    out.append(_check_all("conv2d", fn, [("input", x, gx), ("kernel", conv.kernel, gk),
                                         ("bias", conv.bias, gb)], rng))

    for mode in ("train", "infer"):
        x = rng.standard_normal((2, 4, 3, 3))
        bn = T.BatchNormParams(rng.uniform(0.5, 1.5, 4), rng.normal(0, 0.2, 4),
                               rng.normal(0, 0.2, 4), rng.uniform(0.5, 2.0, 4))
        w = rng.standard_normal(x.shape)
        frozen = (bn.running_mean.copy(), bn.running_var.copy())

        def fn(bn=bn, x=x, w=w, mode=mode, frozen=frozen):
            y = T.batchnorm_forward(x, bn, mode)
            bn.running_mean[...], bn.running_var[...] = frozen
            return float(np.sum(y * w))

        gx, gg, gbeta = T.batchnorm_backward(x, bn, w, mode)
        out.append(_check_all(f"batchnorm[{mode}]", fn, [("input", x, gx), ("gamma", bn.gamma, gg),
                                                         ("beta", bn.beta, gbeta)], rng))

    # keep ReLU inputs away from the kink
    x = rng.uniform(0.1, 2.0, (1, 2, 3, 3)) * rng.choice([-1.0, 1.0], (1, 2, 3, 3))
    w = rng.standard_normal(x.shape)
    out.append(_check_all("relu", lambda: float(np.sum(T.relu(x) * w)),
                          [("input", x, T.relu_backward(x, w))], rng))
    x = rng.standard_normal((1, 2, 3, 3)) * 3
    out.append(_check_all("sigmoid", lambda: float(np.sum(T.sigmoid(x) * w)),
                          [("input", x, T.sigmoid_backward(T.sigmoid(x), w))], rng))
    out.append(_check_all("identity", lambda: float(np.sum(T.identity(x) * w)),
                          [("input", x, T.identity_backward(x, w))], rng))

    b = rng.uniform(0, 1, (3, 1, 4, 4))
    a = rng.uniform(0, 1, b.shape)
    out.append(_check_all("frobenius_loss", lambda: T.frobenius_loss(b, a)[0],
                          [("pred", a, T.frobenius_loss(b, a)[1])], rng))
    g = (rng.uniform(0, 1, b.shape) > 0.5).astype(np.float64)
    p = rng.uniform(0.05, 0.95, b.shape)
    out.append(_check_all("bce_loss", lambda: T.bce_loss(g, p)[0],
                          [("pred", p, T.bce_loss(g, p)[1])], rng))
    return out


# ---------------------------------------------------------------------------
# whole networks


def _relu_pattern(net, x, mode):
    _, cache = net.forward(x, mode, keep=True)
    return [inp > 0 for inp in cache["inputs"][1:]]


def _restore(buffers, snapshot):
    for k, v in buffers.items():
        v[...] = snapshot[k]


def _randomize(net, rng):
    for block in net.blocks:
        block.conv.bias[...] = rng.normal(0, 0.1, block.conv.bias.shape)
        if block.bn is not None:
            c = block.bn.channels
            block.bn.gamma[...] = rng.uniform(0.5, 1.5, c)
            block.bn.beta[...] = rng.normal(0, 0.1, c)
            block.bn.running_mean[...] = rng.normal(0, 0.1, c)
            block.bn.running_var[...] = rng.uniform(0.5, 2.0, c)


def check_network(net, inputs, loss_and_grads, mode, rng, samples=3, max_tries=50,
                  name=None) -> CheckResult:
    """Check sampled entries of every parameter tensor plus the network input."""
    buffers = net.named_buffers()
    snapshot = {k: v.copy() for k, v in buffers.items()}
    net_input = inputs()

    def loss():
        value = loss_and_grads(net, mode)[0]
        _restore(buffers, snapshot)
        return value

    def pattern():
        p = _relu_pattern(net, inputs(), mode)
        _restore(buffers, snapshot)
        return p

    _, grads, grad_in = loss_and_grads(net, mode)
    _restore(buffers, snapshot)
    base = pattern()

    tensors = [(k, v, grads[k]) for k, v in net.named_parameters().items()]
    tensors.append(("input", net_input, grad_in))
    zero_grad = set()
    if mode == "train":
        zero_grad = {f"{i}.bias" for i, b in enumerate(net.blocks) if b.bn is not None}

    result = CheckResult(name or f"{net.name}[{mode}]", 0.0, 0, zero_grad_max=None)
    for label, arr, grad in tensors:
        if label in zero_grad:
            worst = float(np.max(np.abs(grad)))
            for idx in [tuple(rng.integers(0, s) for s in arr.shape) for _ in range(samples)]:
                worst = max(worst, abs(central_difference(loss, arr, idx)))
            result.zero_grad_max = max(result.zero_grad_max or 0.0, worst)
            continue
        done = tries = 0
        while done < samples and tries < max_tries:
            tries += 1
            idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
            old = arr[idx]
            kink = False
            for h in (STEP, -STEP):
                arr[idx] = old + h
                kink = kink or any((a != b).any() for a, b in zip(pattern(), base))
            arr[idx] = old
            if kink:
                result.skipped_kinks += 1
                continue
            err = relative_error(grad[idx], central_difference(loss, arr, idx))
            done += 1
            result.checked += 1
            if err > result.max_error:
                result.max_error, result.worst = err, f"{label}{list(idx)}"
    return result


def check_networks(seed: int = 0, size: int = 6, samples: int = 3, width: int = 64,
                   depth: int = 15) -> list[CheckResult]:
    """Full-width BCNN and SCNN objectives on small float64 inputs."""
    rng = np.random.default_rng(seed)
    out = []
    f = rng.uniform(-0.5, 0.5, (2, 1, size, size))
    b = rng.uniform(0.05, 0.95, f.shape)
    for mode in ("train", "infer"):
        bcnn = build_bcnn(seed, width=width, depth=depth, dtype=np.float64)
        _randomize(bcnn, rng)

        def bcnn_loss(net, mode):
            return bcnn_objective(net, f, b, mode)

        out.append(check_network(bcnn, lambda: f, bcnn_loss, mode, rng, samples))

    residual = rng.normal(0, 0.5, f.shape)
    c = cascade_input(f, residual)
    g = (rng.uniform(0, 1, f.shape) > 0.7).astype(np.float64)
    scnn = build_scnn(seed + 1, width=width, depth=depth, dtype=np.float64)
    _randomize(scnn, rng)

    def scnn_loss(net, mode):
        return scnn_objective(net, c, g, mode)

    out.append(check_network(scnn, lambda: c, scnn_loss, "train", rng, samples))
    return out


def run_suite(seed: int = 0, size: int = 6, samples: int = 3) -> Suite:
    return Suite(check_operations(seed) + check_networks(seed, size, samples))
