"""Reverse-mode automatic differentiation over dense float64 arrays.

A small define-by-run engine. While a :class:`Tape` is active, every
operation appends a backward rule; :func:`backward` then runs one reverse
sweep and fills the ``grad`` buffer of every tensor that requires a
gradient. Without an active tape the same functions are plain numpy
computations, so inference code pays no bookkeeping cost.

Scope, deliberately narrow:

* float64 only; models here are small and log-space math wants headroom.
* broadcasting is limited to trailing shapes: the smaller operand's shape
  must equal a suffix of the larger one's, and its gradient is summed over
  the leading axes.
* first-order gradients; the tape is rebuilt on every forward pass.

A tape and the tensors recorded on it are confined to one logical thread.
Parameter tensors may be shared read-only between passes.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

__all__ = [
    "OpError",
    "Tensor",
    "Tape",
    "backward",
    "paused",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "transpose",
    "relu",
    "softmax",
    "log_softmax",
    "logsumexp",
    "log_normalize",
    "layer_norm",
    "l2_normalize_rows",
    "gather_rows",
    "mean",
    "max_along",
    "save_arrays",
    "load_arrays",
]


class OpError(ValueError):
    """Shape or argument mismatch, tagged with the offending operation."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._index: int = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("op", "inputs", "out", "grad_fn")

    def __init__(self, op, inputs, out, grad_fn):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.grad_fn = grad_fn


_ACTIVE: Tape | None = None


class Tape:
    """Ordered log of recorded operations.

    Inputs of every record were produced earlier on the tape (or are
    leaves), so one reversed pass propagates adjoints in valid order.
    Use as a context manager around the forward computation.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def __enter__(self) -> "Tape":
        global _ACTIVE
        if _ACTIVE is not None:
            raise RuntimeError("a tape is already active on this thread")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def record(self, op: str, inputs: tuple[Tensor, ...], out: Tensor, grad_fn) -> None:
        out.requires_grad = True
        out._tape = self
        out._index = len(self._records)
        self._records.append(_Record(op, inputs, out, grad_fn))


@contextmanager
def paused() -> Iterator[None]:
    """Temporarily stop recording, e.g. for evaluation inside a training step."""
    global _ACTIVE
    saved, _ACTIVE = _ACTIVE, None
    try:
        yield
    finally:
        _ACTIVE = saved


def backward(loss: Tensor) -> None:
    """Fill ``t.grad`` with d(loss)/dt for every requires-grad tensor reachable
    from ``loss``.

    Gradients accumulate additively, both across fan-out within one sweep and
    across repeated calls: running backward twice without resetting grads
    doubles them exactly.
    """
    if loss.data.shape != ():
        raise OpError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise OpError("backward", "loss was not produced on an active tape")
    acc: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape._records[: loss._index + 1]):
        g = acc.get(id(rec.out))
        if g is None:
            continue
        grads = rec.grad_fn(g)
        for t, gt in zip(rec.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            key = id(t)
            prev = acc.get(key)
            acc[key] = gt if prev is None else prev + gt
            holders[key] = t
    for key, g in acc.items():
        t = holders[key]
        if t.requires_grad:
            t.grad = g.copy() if t.grad is None else t.grad + g


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _apply(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, inputs, out, grad_fn)
    return out


def _trailing_broadcast_shape(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    if a == b:
        return a
    big, small = (a, b) if len(a) >= len(b) else (b, a)
    if small != big[len(big) - len(small):]:
        raise OpError(op, f"shapes {a} and {b} do not trailing-broadcast")
    return big


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _lse(data: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    """log(sum(exp(x))) along one axis; an all -inf slice yields -inf."""
    m = np.max(data, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.exp(data - safe).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _trailing_broadcast_shape("add", a.shape, b.shape)
    out = a.data + b.data

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _apply("add", out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _trailing_broadcast_shape("sub", a.shape, b.shape)
    out = a.data - b.data

    def grad_fn(g):
        return _reduce_to(g, a.shape), -_reduce_to(g, b.shape)

    return _apply("sub", out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _trailing_broadcast_shape("mul", a.shape, b.shape)
    out = a.data * b.data

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _apply("mul", out, (a, b), grad_fn)


def scalar_mul(x, c: float) -> Tensor:
    x = _lift(x)
    c = float(c)
    out = x.data * c

    def grad_fn(g):
        return (g * c,)

    return _apply("scalar_mul", out, (x,), grad_fn)


def matmul(a, b) -> Tensor:
    """Matrix product for the (2d,2d), (2d,1d) and (1d,2d) cases."""
    a, b = _lift(a), _lift(b)
    ash, bsh = a.shape, b.shape
    if len(ash) == 2 and len(bsh) == 2:
        if ash[1] != bsh[0]:
            raise OpError("matmul", f"inner dimensions differ: {ash} x {bsh}")

        def grad_fn(g):
            return g @ b.data.T, a.data.T @ g

    elif len(ash) == 2 and len(bsh) == 1:
        if ash[1] != bsh[0]:
            raise OpError("matmul", f"inner dimensions differ: {ash} x {bsh}")

        def grad_fn(g):
            return np.outer(g, b.data), a.data.T @ g

    elif len(ash) == 1 and len(bsh) == 2:
        if ash[0] != bsh[0]:
            raise OpError("matmul", f"inner dimensions differ: {ash} x {bsh}")

        def grad_fn(g):
            return b.data @ g, np.outer(a.data, g)

    else:
        raise OpError("matmul", f"unsupported ranks: {ash} x {bsh}")
    return _apply("matmul", a.data @ b.data, (a, b), grad_fn)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _lift(x)
    nd = x.data.ndim
    if axes is None:
        perm = tuple(range(nd))[::-1]
    else:
        perm = tuple(int(i) for i in axes)
        if sorted(perm) != list(range(nd)):
            raise OpError("transpose", f"axes {axes} is not a permutation for shape {x.shape}")
    inv = np.argsort(perm)

    def grad_fn(g):
        return (np.transpose(g, inv),)

    return _apply("transpose", np.transpose(x.data, perm), (x,), grad_fn)


def relu(x) -> Tensor:
    x = _lift(x)
    out = np.maximum(x.data, 0.0)

    def grad_fn(g):
        return (g * (x.data > 0.0),)

    return _apply("relu", out, (x,), grad_fn)


def softmax(x) -> Tensor:
    """Softmax along the last axis."""
    x = _lift(x)
    if x.data.ndim < 1:
        raise OpError("softmax", "input must have at least one axis")
    m = np.max(x.data, axis=-1, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x.data - safe)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _apply("softmax", out, (x,), grad_fn)


def log_softmax(x) -> Tensor:
    """Log-softmax along the last axis."""
    x = _lift(x)
    if x.data.ndim < 1:
        raise OpError("log_softmax", "input must have at least one axis")
    out = x.data - _lse(x.data, axis=-1, keepdims=True)

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _apply("log_softmax", out, (x,), grad_fn)


def logsumexp(x) -> Tensor:
    """log(sum(exp(x))) along the last axis; the axis is removed."""
    x = _lift(x)
    if x.data.ndim < 1:
        raise OpError("logsumexp", "input must have at least one axis")
    keep = _lse(x.data, axis=-1, keepdims=True)
    out = np.squeeze(keep, axis=-1)

    def grad_fn(g):
        with np.errstate(invalid="ignore"):
            w = np.exp(x.data - keep)
        w = np.where(np.isfinite(keep), w, 0.0)
        return (w * np.expand_dims(g, -1),)

    return _apply("logsumexp", out, (x,), grad_fn)


def log_normalize(x, axis: int) -> Tensor:
    """Shift log-scores so exp sums to one along ``axis``.

    A slice whose total mass is zero (all entries -inf) is replaced by the
    uniform log-distribution instead of NaN, and contributes no gradient.
    """
    x = _lift(x)
    nd = x.data.ndim
    if not -nd <= axis < nd:
        raise OpError("log_normalize", f"axis {axis} out of range for shape {x.shape}")
    axis = axis % nd
    n = x.data.shape[axis]
    m = _lse(x.data, axis=axis, keepdims=True)
    empty = np.isneginf(m)
    with np.errstate(invalid="ignore"):
        out = x.data - m
    if empty.any():
        out = np.where(np.broadcast_to(empty, out.shape), -np.log(n), out)

    def grad_fn(g):
        with np.errstate(invalid="ignore"):
            p = np.exp(out)
        dx = g - p * g.sum(axis=axis, keepdims=True)
        if empty.any():
            dx = np.where(np.broadcast_to(empty, dx.shape), 0.0, dx)
        return (dx,)

    return _apply("log_normalize", out, (x,), grad_fn)


_LN_EPS = 1e-5


def layer_norm(x) -> Tensor:
    """Normalize each last-axis slice to zero mean, unit variance."""
    x = _lift(x)
    if x.data.ndim < 1:
        raise OpError("layer_norm", "input must have at least one axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    out = xc * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gy),)

    return _apply("layer_norm", out, (x,), grad_fn)


_NORM_GUARD = 1e-12


def l2_normalize_rows(x) -> Tensor:
    """Scale each last-axis row to unit Euclidean norm.

    The norm is padded by 1e-12 so zero rows map to zero instead of
    dividing by zero.
    """
    x = _lift(x)
    if x.data.ndim < 1:
        raise OpError("l2_normalize_rows", "input must have at least one axis")
    r = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    n = r + _NORM_GUARD
    out = x.data / n

    def grad_fn(g):
        dot = (g * x.data).sum(axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            corr = np.where(r > 0.0, dot / (n * n * r), 0.0)
        return (g / n - x.data * corr,)

    return _apply("l2_normalize_rows", out, (x,), grad_fn)


def gather_rows(x, indices) -> Tensor:
    """Select slices along axis 0; duplicate indices accumulate gradient."""
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise OpError("gather_rows", f"indices must be 1-d, got shape {idx.shape}")
    if x.data.ndim < 1:
        raise OpError("gather_rows", "input must have at least one axis")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise OpError("gather_rows", f"index out of range for {x.data.shape[0]} rows")
    out = x.data[idx]

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _apply("gather_rows", out, (x,), grad_fn)


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    nd = x.data.ndim
    if nd == 0 or not -nd <= axis < nd:
        raise OpError(op, f"axis {axis} out of range for shape {x.shape}")
    return axis % nd


def mean(x, axis: int) -> Tensor:
    x = _lift(x)
    axis = _check_axis("mean", x, axis)
    n = x.data.shape[axis]
    out = x.data.mean(axis=axis)

    def grad_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.data.shape),)

    return _apply("mean", out, (x,), grad_fn)


def max_along(x, axis: int) -> Tensor:
    """Maximum along an axis; the gradient routes to the first maximizer."""
    x = _lift(x)
    axis = _check_axis("max", x, axis)
    idx = np.argmax(x.data, axis=axis)
    out = np.max(x.data, axis=axis)

    def grad_fn(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (dx,)

    return _apply("max", out, (x,), grad_fn)


# --------------------------------------------------------------------------
# Checkpoint format, shared by every module that persists parameters:
# a directory holding manifest.json plus raw little-endian float64 blobs.
# Round trips are bit exact.


def save_arrays(
    directory: str | Path,
    arrays: Mapping[str, np.ndarray] | Sequence[tuple[str, np.ndarray]],
    meta: dict | None = None,
) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
    entries = []
    blob = bytearray()
    for name, arr in items:
        a = np.asarray(arr, dtype="<f8")
        entries.append(
            {
                "name": str(name),
                "shape": [int(s) for s in a.shape],
                "dtype": "f64",
                "offset": len(blob),
                "file": "arrays.bin",
            }
        )
        blob += a.tobytes()
    (directory / "arrays.bin").write_bytes(bytes(blob))
    manifest = {"schema_version": 1, "meta": meta or {}, "arrays": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_arrays(directory: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{manifest_path}: invalid manifest: {e}") from e
    if manifest.get("schema_version") != 1:
        raise ValueError(f"{manifest_path}: unsupported schema_version {manifest.get('schema_version')!r}")
    blobs: dict[str, bytes] = {}
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        if entry["dtype"] != "f64":
            raise ValueError(f"{manifest_path}: array {entry['name']!r} has unsupported dtype {entry['dtype']!r}")
        fname = entry["file"]
        if fname not in blobs:
            blobs[fname] = (directory / fname).read_bytes()
        shape = tuple(int(s) for s in entry["shape"])
        size = int(np.prod(shape, dtype=np.int64)) * 8
        off = int(entry["offset"])
        buf = blobs[fname]
        if off + size > len(buf):
            raise ValueError(f"{manifest_path}: array {entry['name']!r} overruns {fname}")
        arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
    return arrays, manifest.get("meta", {})
