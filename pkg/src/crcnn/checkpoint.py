"""Binary checkpoint files.

Layout::

    8 bytes   magic b"CRCNN\\0\\0" followed by the format version byte (1)
    4 bytes   little-endian uint32 length of the JSON header
    N bytes   UTF-8 JSON header: network layout, tensor table, optimizer
              scalars and training metadata
    ...       raw little-endian tensor blobs in header order

Parameters round-trip bit for bit.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError
from .model import Block, NetworkSpec
from .tensor import AdamState, BatchNormParams, ConvParams

MAGIC = b"CRCNN\0\0"
FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<I")


def _tensor_entries(net: NetworkSpec, optimizer: AdamState | None):
    entries = list(net.state_arrays().items())
    if optimizer is not None:
        for name in net.named_parameters():
            if name in optimizer.m:
                entries.append((f"adam.m.{name}", optimizer.m[name]))
                entries.append((f"adam.v.{name}", optimizer.v[name]))
    return entries


def save_checkpoint(path, net: NetworkSpec, optimizer: AdamState | None = None,
                    metadata: dict | None = None) -> Path:
    """Write ``net`` (and optionally its optimizer state) atomically to ``path``."""
    path = Path(path)
    entries = _tensor_entries(net, optimizer)
    header = {
        "format_version": FORMAT_VERSION,
        "network": {
            "name": net.name,
            "input_channels": net.input_channels,
            "canonical": net.canonical,
            "blocks": net.layout(),
            "batchnorm": {"epsilon": _bn_eps(net), "momentum": _bn_momentum(net)},
        },
        "tensors": [
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str}
            for name, arr in entries
        ],
        "optimizer": None if optimizer is None else {
            "step": optimizer.step,
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "epsilon": optimizer.epsilon,
        },
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC + bytes([FORMAT_VERSION]))
            fh.write(_HEADER_LEN.pack(len(blob)))
            fh.write(blob)
            for _, arr in entries:
                fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _bn_eps(net):
    return next((b.bn.epsilon for b in net.blocks if b.bn is not None), 1e-5)


def _bn_momentum(net):
    return next((b.bn.momentum for b in net.blocks if b.bn is not None), 0.1)


def read_header(path) -> dict:
    return _read(path)[0]


def _read(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < len(MAGIC) + 1 + _HEADER_LEN.size:
        raise CheckpointFormatError(f"{path}: truncated checkpoint")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes, not a CRCNN checkpoint")
    version = data[len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = len(MAGIC) + 1
    (hlen,) = _HEADER_LEN.unpack_from(data, pos)
    pos += _HEADER_LEN.size
    if pos + hlen > len(data):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list) \
            or not isinstance(header.get("network"), dict):
        raise CheckpointFormatError(f"{path}: header lacks the network or tensor table")
    pos += hlen
    tensors = {}
    for entry in header["tensors"]:
        try:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(int(s) for s in entry["shape"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointFormatError(f"{path}: malformed tensor entry {entry!r}") from None
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(data):
            raise CheckpointFormatError(f"{path}: truncated tensor data at {entry['name']}")
        arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
        tensors[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    return header, tensors


def load_checkpoint(path, expected: NetworkSpec | None = None):
    """Return ``(network, optimizer_state_or_None, metadata)``.

    If ``expected`` is given, the stored block layout must match it.
    """
    header, tensors = _read(path)
    net_info = header["network"]
    if expected is not None and (net_info["blocks"] != expected.layout()
                                 or net_info["input_channels"] != expected.input_channels):
        raise CheckpointFormatError(
            f"{path}: stored {net_info['name']} layout does not match the declared {expected.name}"
        )
    bn_cfg = net_info.get("batchnorm", {})
    blocks = []
    try:
        for i, spec in enumerate(net_info["blocks"]):
            conv = ConvParams(tensors[f"{i}.kernel"], tensors[f"{i}.bias"])
            if (conv.in_ch, conv.out_ch) != (spec["in"], spec["out"]):
                raise CheckpointFormatError(
                    f"{path}: block {i} kernel shape {conv.kernel.shape} disagrees with layout"
                )
            bn = None
            if spec["batchnorm"]:
                bn = BatchNormParams(
                    tensors[f"{i}.gamma"], tensors[f"{i}.beta"],
                    tensors[f"{i}.running_mean"], tensors[f"{i}.running_var"],
                    bn_cfg.get("epsilon", 1e-5), bn_cfg.get("momentum", 0.1),
                )
                if bn.gamma.shape != (spec["out"],):
                    raise CheckpointFormatError(f"{path}: block {i} batch norm shape mismatch")
            blocks.append(Block(spec["color"], conv, bn, spec["activation"]))
        net = NetworkSpec(net_info["name"], net_info["input_channels"], blocks,
                          net_info.get("canonical", True))
    except KeyError as exc:
        raise CheckpointFormatError(f"{path}: missing entry {exc}") from None
    except TypeError as exc:
        raise CheckpointFormatError(f"{path}: malformed layout ({exc})") from None
    except ValueError as exc:  # ShapeError from ConvParams
        raise CheckpointFormatError(f"{path}: {exc}") from None
    if not blocks:
        raise CheckpointFormatError(f"{path}: network has no blocks")

    optimizer = None
    if header.get("optimizer"):
        o = header["optimizer"]
        optimizer = AdamState(o["learning_rate"], o["beta1"], o["beta2"], o["epsilon"], o["step"])
        for name in net.named_parameters():
            if f"adam.m.{name}" in tensors:
                optimizer.m[name] = tensors[f"adam.m.{name}"]
                optimizer.v[name] = tensors[f"adam.v.{name}"]
    return net, optimizer, header.get("metadata", {})
