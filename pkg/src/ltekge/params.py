"""Named parameter tensors with gradient buffers, and the binary checkpoint format."""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict

import numpy as np

from .exceptions import CheckpointError, ParameterError, ShapeError

MAGIC = b"LTEK"
VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class ParameterStore:
    """Trainable tensors (each with one gradient buffer) plus non-trainable buffers.

    Buffers hold state such as batchnorm running statistics; they are saved
    in checkpoints but never touched by the optimizer.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.values: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: OrderedDict[str, np.ndarray] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self.frozen: set[str] = set()

    def add(self, name: str, value, frozen: bool = False) -> np.ndarray:
        if name in self.values or name in self.buffers:
            raise ParameterError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=self.dtype)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        if frozen:
            self.frozen.add(name)
        return value

    def add_buffer(self, name: str, value) -> np.ndarray:
        if name in self.values or name in self.buffers:
            raise ParameterError(f"duplicate parameter name {name!r}")
        self.buffers[name] = np.array(value, dtype=self.dtype)
        return self.buffers[name]

    def __contains__(self, name):
        return name in self.values or name in self.buffers

    def __getitem__(self, name) -> np.ndarray:
        try:
            return self.values[name]
        except KeyError:
            try:
                return self.buffers[name]
            except KeyError:
                raise ParameterError(f"missing parameter {name!r}") from None

    def grad(self, name) -> np.ndarray:
        try:
            return self.grads[name]
        except KeyError:
            raise ParameterError(f"missing parameter {name!r}") from None

    def names(self):
        return list(self.values)

    def trainable(self):
        return [n for n in self.values if n not in self.frozen]

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def variable(self, name):
        """Autograd leaf sharing storage with the value and its gradient buffer."""
        from .autograd import Variable
        return Variable(self[name], grad=self.grad(name), name=name)

    def copy(self) -> "ParameterStore":
        other = ParameterStore(self.dtype)
        for k, v in self.values.items():
            other.values[k] = v.copy()
            other.grads[k] = self.grads[k].copy()
        for k, v in self.buffers.items():
            other.buffers[k] = v.copy()
        other.frozen = set(self.frozen)
        return other

    def astype(self, dtype) -> "ParameterStore":
        other = ParameterStore(dtype)
        for k, v in self.values.items():
            other.add(k, v, frozen=k in self.frozen)
        for k, v in self.buffers.items():
            other.add_buffer(k, v)
        return other

    def state(self) -> OrderedDict:
        out = OrderedDict(self.values)
        out.update(self.buffers)
        return out

    def load_state(self, state: dict):
        expected = set(self.values) | set(self.buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise CheckpointError(f"checkpoint tensors do not match model: missing={missing} extra={extra}")
        for name, value in state.items():
            target = self[name]
            if target.shape != value.shape:
                raise CheckpointError(
                    f"{name}: checkpoint shape {value.shape} != model shape {target.shape}")
            target[...] = value

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, value in self.state().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"ParameterStore({len(self.values)} params, {len(self.buffers)} buffers, {self.dtype})"


def check_shape(name, array, shape):
    if tuple(array.shape) != tuple(shape):
        raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {tuple(array.shape)}")


def save_checkpoint(path, tensors) -> None:
    """Write tensors in the ``LTEK`` format.

    Layout: magic, version (u32), tensor count (u32), then per tensor
    name length (u32), UTF-8 name, dtype tag (u8), rank (u32), extents
    (u64 each) and the row-major little-endian payload.  All integers are
    little-endian.
    """
    if isinstance(tensors, ParameterStore):
        tensors = tensors.state()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        value = np.asarray(value)
        dtype = value.dtype.newbyteorder("<")
        if dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"{name}: unsupported dtype {value.dtype}")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BI", _DTYPE_TAGS[dtype], value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype=dtype).tobytes())
    with open(path, "wb") as handle:
        handle.write(b"".join(chunks))


def load_checkpoint(path) -> OrderedDict:
    """Read an ``LTEK`` file; nothing is returned unless the whole file parses."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = blob[pos:pos + n]
        pos += n
        return out

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return tensors
