"""Checkpoint files: a text manifest followed by concatenated tensors.

Layout::

    voxelgeo-checkpoint 1
    config <key> <json value>        (one line per NetConfig field)
    param <name> <ndim> <e0> <e1> ...
    ...
    end
    <tensor> <tensor> ...            (tensor-core binary format, manifest order)
"""
from __future__ import annotations

import io
import json
import os

import numpy as np

from .errors import ConfigError, ValidationError
from .model import GeometryAwareNet, NetConfig
from .tensor import read_tensor, write_tensor

MAGIC = "voxelgeo-checkpoint 1"


def dumps_checkpoint(net: GeometryAwareNet) -> bytes:
    buf = io.BytesIO()
    lines = [MAGIC]
    for key, value in net.config.to_dict().items():
        lines.append(f"config {key} {json.dumps(value)}")
    named = net.named_parameters()
    for name, t in named:
        lines.append(f"param {name} {t.data.ndim} " + " ".join(str(n) for n in t.shape))
    lines.append("end")
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    for _, t in named:
        write_tensor(buf, t.data)
    return buf.getvalue()


def loads_checkpoint(blob: bytes, path=None) -> GeometryAwareNet:
    buf = io.BytesIO(blob)
    if buf.readline().decode("ascii", "replace").strip() != MAGIC:
        raise ValidationError("not a checkpoint file", path=path)
    config, manifest = {}, []
    while True:
        line = buf.readline().decode("ascii", "replace")
        if not line:
            raise ValidationError("checkpoint manifest has no end marker", path=path)
        parts = line.split()
        if parts == ["end"]:
            break
        if parts[0] == "config" and len(parts) >= 3:
            config[parts[1]] = json.loads(line.split(None, 2)[2])
        elif parts[0] == "param":
            manifest.append((parts[1], tuple(int(v) for v in parts[3:])))
        else:
            raise ValidationError(f"unexpected manifest line {line.strip()!r}", path=path)
    net = GeometryAwareNet(NetConfig.from_dict(config))
    named = net.named_parameters()
    if [(n, t.shape) for n, t in named] != manifest:
        raise ConfigError("checkpoint layer manifest does not match the network config")
    for _, t in named:
        t.data[...] = read_tensor(buf)
    return net


def atomic_write(path, data: bytes | str):
    """Write via a temporary sibling and rename, so failures leave no partial file."""
    mode = "wb" if isinstance(data, bytes) else "w"
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        with open(tmp, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def save_checkpoint(path, net):
    atomic_write(path, dumps_checkpoint(net))


def load_checkpoint(path) -> GeometryAwareNet:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read(), path=path)


def parameters_equal(a: GeometryAwareNet, b: GeometryAwareNet) -> bool:
    pa, pb = a.named_parameters(), b.named_parameters()
    return len(pa) == len(pb) and all(
        na == nb and np.array_equal(ta.data, tb.data) for (na, ta), (nb, tb) in zip(pa, pb))
