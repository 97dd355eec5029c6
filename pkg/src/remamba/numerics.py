"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every op takes and returns :class:`Tensor`.  When a :class:`Tape` is active
and at least one input requires a gradient, the op appends a node holding its
vector-Jacobian product to the tape.  ``Tape.backward`` replays the nodes in
reverse recording order, which is a valid reverse topological order because
inputs always exist before the op that consumes them.

Broadcasting follows numpy rules for the elementwise ops; gradients are summed
back to the operand shape.  Slices and gathers copy.
"""

from __future__ import annotations

import contextlib
import contextvars
import json
import struct
import tracemalloc
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import CheckpointError, ContractError, DimensionError

__all__ = [
    "Tensor", "Tape", "backward", "no_tape",
    "add", "sub", "mul", "neg", "scale", "matmul", "outer", "exp", "log",
    "softplus", "relu", "sigmoid", "tensor_sum", "sum_axis", "transpose", "mean", "reshape",
    "concat", "slice_axis", "take_rows", "gather", "rmsnorm",
    "cosine_similarity", "softmax", "cross_entropy", "scale_grad",
    "stop_gradient", "save_tensors", "load_tensors", "finite_difference_grad",
    "relative_error", "AllocationProbe", "allocation_probe",
]


class Tensor:
    """A float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr if arr.dtype == np.float64 else arr.astype(np.float64)
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f"{self.name}: " if self.name else ""
        return f"Tensor({label}shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar, all routed through the tracked ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("remamba_tape", default=None)


@dataclass
class Tape:
    """Ordered record of tracked primitive applications.

    Use as a context manager; ops executed inside the ``with`` block are
    recorded.  A tape is single-owner and is meant to be rebuilt per forward.
    """

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.reset(self._token)
        self._token = None

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp) -> None:
        self.nodes.append(_Node(out, tuple(inputs), vjp))

    def backward(self, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
        return backward(self, loss, params)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] = ()) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every tracked leaf reachable from ``loss``.

    Leaves listed in ``params`` that the loss does not reach get a zero
    gradient.  Returns the full ``id(tensor) -> gradient`` map, which includes
    intermediate nodes.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        produced.add(id(node.out))
        g = grads.get(id(node.out))
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise DimensionError(f"vjp produced {gi.shape} for input of shape {t.shape}")
            prev = grads.get(id(t))
            grads[id(t)] = gi if prev is None else prev + gi
            leaves[id(t)] = t
    for key, t in leaves.items():
        if key not in produced:
            t.grad = grads[key]
    for p in params:
        if id(p) not in grads:
            p.grad = np.zeros_like(p.data)
    return grads


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording for the enclosed block."""
    token = _ACTIVE.set(None)
    try:
        yield
    finally:
        _ACTIVE.reset(token)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    tape = _ACTIVE.get()
    track = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=track)
    if track:
        tape.record(result, inputs, vjp)
    return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    """Multiply by a Python scalar constant."""
    a = _as_tensor(a)
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x: np.ndarray) -> np.ndarray:
    # x + log1p(exp(-x)) for x > 0 keeps exp from overflowing
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    return _make(_softplus(a.data), (a,), lambda g: (g * _sigmoid(a.data),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def scale_grad(a, factor) -> Tensor:
    """Identity forward; the incoming gradient is multiplied by ``factor``.

    ``factor`` is a constant (array or float) broadcastable to ``a``.
    """
    a = _as_tensor(a)
    f = np.asarray(factor.data if isinstance(factor, Tensor) else factor, dtype=np.float64)
    return _make(a.data, (a,), lambda g: (_unbroadcast(g * f, a.shape),))


def stop_gradient(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._wrap(a.data)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_axis(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.ndim
    return _make(a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat needs at least one tensor")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(f"concat along axis {axis}: {ts[0].shape} vs {t.shape}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _make(out, ts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice_axis(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Copying slice ``a[start:stop]`` along ``axis``."""
    a = _as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis of length {a.shape[ax]}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make(a.data[index].copy(), (a,), vjp)


def take_rows(table, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows expects a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"token id out of range for table of {table.shape[0]} rows")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), vjp)


def gather(a, idx) -> Tensor:
    """Per-row gather along axis 1: ``out[b, k] = a[b, idx[b, k]]``.

    ``a`` is ``[B, L]`` or ``[B, L, H]`` and ``idx`` is an integer ``[B, K]``.
    """
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim not in (2, 3) or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"gather: data {a.shape} with index {idx.shape}")
    rows = np.arange(a.shape[0])[:, None]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return _make(a.data[rows, idx], (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` 2-D; ``a`` may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def outer(a, b) -> Tensor:
    """Batched outer product ``out[..., i, j] = a[..., i] * b[..., j]``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"outer: leading shapes differ, {a.shape} vs {b.shape}")
    out = a.data[..., :, None] * b.data[..., None, :]
    return _make(out, (a, b),
                 lambda g: ((g * b.data[..., None, :]).sum(-1), (g * a.data[..., :, None]).sum(-2)))


def rmsnorm(a, eps: float = 1e-6) -> Tensor:
    """Parameter-free RMS normalization over the last axis."""
    a = _as_tensor(a)
    x = a.data
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    n = x.shape[-1]

    def vjp(g):
        gx = (g * x).sum(axis=-1, keepdims=True)
        return (r * g - (r ** 3) * x * gx / n,)

    return _make(x * r, (a,), vjp)


def cosine_similarity(a, b, eps: float = 1e-8) -> Tensor:
    """``a.b / max(|a| |b|, eps)`` over the last axis, broadcasting the rest."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_similarity: vector lengths {a.shape[-1]} and {b.shape[-1]}")
    if eps <= 0:
        raise ContractError("cosine_similarity: eps must be positive")
    x, y = a.data, b.data
    dot = (x * y).sum(-1)
    na = np.sqrt((x * x).sum(-1))
    nb = np.sqrt((y * y).sum(-1))
    prod = na * nb
    clamped = prod <= eps
    denom = np.where(clamped, eps, prod)
    out = dot / denom

    def vjp(g):
        # unclamped: dc/dx = y/denom - c x/|x|^2; clamped: dc/dx = y/eps
        safe_na2 = np.where(clamped, 1.0, na * na)
        safe_nb2 = np.where(clamped, 1.0, nb * nb)
        c_x = np.where(clamped, 0.0, out / safe_na2)
        c_y = np.where(clamped, 0.0, out / safe_nb2)
        gg = g[..., None]
        gx = gg * (y / denom[..., None] - c_x[..., None] * x)
        gy = gg * (x / denom[..., None] - c_y[..., None] * y)
        return _unbroadcast(gx, a.shape), _unbroadcast(gy, b.shape)

    return _make(out, (a, b), vjp)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax on a plain array (untracked)."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean token cross-entropy of ``logits[..., V]`` against integer ``targets``.

    ``weights`` (same shape as ``targets``) masks or reweights positions; the
    mean is taken over the weight total.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    w = np.ones(targets.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ContractError("cross_entropy: no positions carry weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * w).sum() / total

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (float(g) * p * (w / total)[..., None],)

    return _make(np.asarray(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_difference_grad(fn: Callable[[], float], tensor: Tensor, step: float = 1e-6,
                           indices: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``tensor``.

    Perturbs ``tensor.data`` in place and restores it.  With ``indices`` only
    those entries are evaluated and a flat array in the same order is returned.
    """
    data = tensor.data
    todo = list(np.ndindex(data.shape)) if indices is None else [tuple(i) for i in indices]
    out = np.empty(len(todo))
    for n, ix in enumerate(todo):
        orig = data[ix]
        data[ix] = orig + step
        fp = fn()
        data[ix] = orig - step
        fm = fn()
        data[ix] = orig
        out[n] = (fp - fm) / (2.0 * step)
    return out.reshape(data.shape) if indices is None else out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``|a - b| / max(|a|, |b|)`` in the 2-norm; exact zeros compare as 0."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    diff = np.linalg.norm(a - b)
    if denom < floor:
        return float(diff)
    return float(diff / denom)


# ---------------------------------------------------------------------------
# allocation accounting
# ---------------------------------------------------------------------------

@dataclass
class AllocationProbe:
    peak_bytes: int = 0
    baseline_bytes: int = 0


@contextlib.contextmanager
def allocation_probe() -> Iterator[AllocationProbe]:
    """Record peak bytes allocated (numpy buffers included) inside the block.

    Backed by :mod:`tracemalloc`, which numpy reports its data buffers to.
    The figure is relative to allocations live when the block starts.
    """
    probe = AllocationProbe()
    started = not tracemalloc.is_tracing()
    if started:
        tracemalloc.start()
    tracemalloc.reset_peak()
    probe.baseline_bytes = tracemalloc.get_traced_memory()[0]
    try:
        yield probe
    finally:
        _, peak = tracemalloc.get_traced_memory()
        probe.peak_bytes = max(0, peak - probe.baseline_bytes)
        if started:
            tracemalloc.stop()


# ---------------------------------------------------------------------------
# named-tensor container
# ---------------------------------------------------------------------------

_PREFIX = struct.Struct("<Q")


def save_tensors(path, tensors: Mapping[str, "Tensor | np.ndarray"], metadata: dict | None = None) -> None:
    """Write ``tensors`` as an 8-byte header length, a JSON header, then payloads.

    Header entries are ``name -> {shape, dtype: "f64", byte_offset, crc32}``;
    offsets are relative to the start of the payload block.  ``metadata`` is
    stored under the reserved ``"__metadata__"`` key.
    """
    header: dict = {}
    blobs = []
    offset = 0
    for name, value in tensors.items():
        if name == "__metadata__":
            raise ContractError("'__metadata__' is a reserved tensor name")
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = arr.tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": "f64", "byte_offset": offset,
                        "crc32": zlib.crc32(raw)}
        blobs.append(raw)
        offset += len(raw)
    if metadata is not None:
        header["__metadata__"] = metadata
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict | None]:
    """Inverse of :func:`save_tensors`; validates offsets, lengths and checksums."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read tensor container {path}: {exc}") from exc
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated before header length")
    (head_len,) = _PREFIX.unpack_from(blob)
    if head_len > len(blob) - _PREFIX.size:
        raise CheckpointError(f"{path}: header length {head_len} exceeds file size")
    try:
        header = json.loads(blob[_PREFIX.size:_PREFIX.size + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not an object")
    metadata = header.pop("__metadata__", None)
    payload = memoryview(blob)[_PREFIX.size + head_len:]
    out: dict[str, np.ndarray] = {}
    expected = 0
    for name, entry in sorted(header.items(), key=lambda kv: _offset_of(kv, path)):
        try:
            shape = tuple(int(s) for s in entry["shape"])
            start = int(entry["byte_offset"])
            crc = int(entry["crc32"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed header entry for tensor '{name}'") from exc
        if dtype != "f64" or any(s < 0 for s in shape):
            raise CheckpointError(f"{path}: unsupported dtype/shape for tensor '{name}'")
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if start != expected or start + nbytes > len(payload):
            raise CheckpointError(f"{path}: byte range of tensor '{name}' does not match payload")
        raw = payload[start:start + nbytes]
        if zlib.crc32(raw) != crc:
            raise CheckpointError(f"{path}: checksum mismatch in tensor '{name}'")
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        expected = start + nbytes
    if expected != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expected} trailing payload bytes")
    return out, metadata


def _offset_of(item, path) -> int:
    name, entry = item
    try:
        return int(entry["byte_offset"])
    except (KeyError, TypeError, ValueError):
        raise CheckpointError(f"{path}: malformed header entry for tensor '{name}'") from None
