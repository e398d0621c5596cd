"""Dense float64 tensor container and its on-disk format.

The binary format is a text header line ``"ndim e0 e1 ...\\n"`` followed by
``prod(shape)`` little-endian float64 values in row-major order. Several
tensors may be concatenated in one stream.
"""
from __future__ import annotations

import io
import math
from typing import BinaryIO, Iterable

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64
_WIRE = np.dtype("<f8")


class Tensor:
    """A value array with an optional gradient of identical shape.

    Activations flow through the layers as plain ndarrays; ``Tensor`` is used
    for learnable parameters and anything that needs serializing.
    """

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, grad=None, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        if grad is not None:
            grad = np.ascontiguousarray(grad, dtype=DTYPE)
            if grad.shape != self.data.shape:
                raise ShapeError(
                    f"grad shape {grad.shape} != data shape {self.data.shape}"
                )
        self.grad = grad
        self.name = name

    @classmethod
    def zeros(cls, shape, name=None):
        return cls(np.zeros(shape, dtype=DTYPE), name=name)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def accumulate_grad(self, g):
        g = np.asarray(g, dtype=DTYPE)
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def check_finite(x, what: str = "tensor"):
    """Raise ``NumericError`` if ``x`` (array or Tensor) holds NaN/Inf."""
    arrays = [x.data, x.grad] if isinstance(x, Tensor) else [x]
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NumericError(f"non-finite values in {what}")
    return x


def write_tensor(stream: BinaryIO, array) -> None:
    a = np.asarray(array.data if isinstance(array, Tensor) else array, dtype=DTYPE)
    header = " ".join(str(v) for v in (a.ndim, *a.shape)) + "\n"
    stream.write(header.encode("ascii"))
    stream.write(np.ascontiguousarray(a, dtype=_WIRE).tobytes(order="C"))


def read_tensor(stream: BinaryIO) -> np.ndarray:
    line = stream.readline()
    if not line:
        raise EOFError("no tensor header")
    try:
        fields = [int(v) for v in line.decode("ascii").split()]
    except (UnicodeDecodeError, ValueError) as exc:
        raise ShapeError(f"malformed tensor header {line[:64]!r}") from exc
    if not fields or fields[0] != len(fields) - 1 or any(v < 0 for v in fields):
        raise ShapeError(f"malformed tensor header {line[:64]!r}")
    shape = tuple(fields[1:])
    count = math.prod(shape)
    payload = stream.read(count * 8)
    if len(payload) != count * 8:
        raise ShapeError(
            f"tensor payload holds {len(payload) // 8} values, header promises {count}"
        )
    return np.frombuffer(payload, dtype=_WIRE).astype(DTYPE).reshape(shape)


def dumps(arrays: Iterable) -> bytes:
    buf = io.BytesIO()
    for a in arrays:
        write_tensor(buf, a)
    return buf.getvalue()


def loads(blob: bytes) -> list[np.ndarray]:
    buf = io.BytesIO(blob)
    out = []
    while buf.tell() < len(blob):
        out.append(read_tensor(buf))
    return out


def save(path, array) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, array)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        a = read_tensor(fh)
        if fh.read(1):
            raise ShapeError(f"trailing bytes after tensor in {path}")
    return a
