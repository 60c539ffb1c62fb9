"""Reverse-mode automatic differentiation on numpy arrays.

Define-by-run: primitive ops record onto the active Tape as they execute, and
backward walks the recorded list in reverse. All differentiable state is float64.
Also home to the Adam optimizer step and the counter-based random stream used
everywhere else in the package.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""

    def __init__(self, op_name: str, detail: str):
        self.op_name = op_name
        super().__init__(f"{op_name}: {detail}")


class NonFiniteError(RuntimeError):
    """Raised when an op produces NaN or infinity."""

    def __init__(self, op_name: str, op_index: int | None = None):
        self.op_name = op_name
        self.op_index = op_index
        where = f" (tape index {op_index})" if op_index is not None else ""
        super().__init__(f"non-finite output from op '{op_name}'{where}")


class Tensor:
    """A float64 array plus grad bookkeeping. data is treated as read-only by
    ops; only the optimizer mutates it in place."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "grad_fn")

    def __init__(self, name, inputs, output, grad_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.grad_fn = grad_fn


_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive op applications for one forward pass."""

    def __init__(self):
        self.ops: list[_OpRecord] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False

    def gradients(self, outputs, wrt, output_grads=None):
        """Walk the tape in reverse, accumulating adjoints.

        outputs/output_grads may be a single Tensor/array or aligned lists.
        Returns one float64 array per entry of wrt (zeros where no gradient
        flows). Each op is visited exactly once.
        """
        if isinstance(outputs, Tensor):
            outputs = [outputs]
        if output_grads is None:
            output_grads = [np.ones_like(o.data) for o in outputs]
        elif isinstance(output_grads, (np.ndarray, float, int)):
            output_grads = [np.asarray(output_grads, dtype=np.float64)]
        if len(outputs) != len(output_grads):
            raise ShapeError("backward", "outputs and output_grads length mismatch")
        accum: dict[int, np.ndarray] = {}
        for out, og in zip(outputs, output_grads):
            og = np.asarray(og, dtype=np.float64)
            if og.shape != out.data.shape:
                raise ShapeError(
                    "backward",
                    f"output_grad shape {og.shape} != output shape {out.data.shape}",
                )
            key = id(out)
            accum[key] = accum[key] + og if key in accum else og
        wrt_ids = {id(t) for t in wrt}
        saved: dict[int, np.ndarray] = {}
        for op in reversed(self.ops):
            g = accum.pop(id(op.output), None)
            if g is None:
                continue
            if id(op.output) in wrt_ids:
                saved[id(op.output)] = g
            for inp, gi in zip(op.inputs, op.grad_fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                accum[key] = accum[key] + gi if key in accum else gi
        out = []
        for t in wrt:
            g = saved.get(id(t), accum.get(id(t)))
            out.append(np.zeros_like(t.data) if g is None else g)
        return out


def _record(name: str, out_data: np.ndarray, inputs: tuple, grad_fn) -> Tensor:
    if not np.isfinite(out_data).all():
        tape = _active_tape()
        raise NonFiniteError(name, len(tape.ops) if tape is not None else None)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape.ops.append(_OpRecord(name, inputs, out, grad_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    # Reduce a broadcasted gradient back to the operand's shape.
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", f"cannot broadcast {a.shape} with {b.shape}")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", f"cannot broadcast {a.shape} with {b.shape}")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _record("sub", out, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", f"cannot broadcast {a.shape} with {b.shape}")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", out, (a, b), grad_fn)


def scalar_mul(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _record("scalar_mul", a.data * c, (a,), grad_fn)


def scalar_add(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g,)

    return _record("scalar_add", a.data + c, (a,), grad_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands must be >= 2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), grad_fn)


def transpose(a, axes: tuple | None = None) -> Tensor:
    """Permute axes; default swaps the last two (batched matrix transpose)."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", f"need >= 2-d for default transpose, got {a.shape}")
        perm = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    else:
        perm = tuple(axes)
        if sorted(perm) != list(range(a.ndim)):
            raise ShapeError("transpose", f"bad permutation {perm} for {a.shape}")
    inv = np.argsort(perm)

    def grad_fn(g):
        return (g.transpose(inv),)

    return _record("transpose", a.data.transpose(perm), (a,), grad_fn)


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}")
    src = a.shape

    def grad_fn(g):
        return (g.reshape(src),)

    return _record("reshape", out, (a,), grad_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat", "empty input list")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", f"incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tensors, grad_fn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeError("slice_axis", f"bounds [{start}:{stop}] outside axis of size {n}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    src = a.shape

    def grad_fn(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _record("slice_axis", a.data[index], (a,), grad_fn)


def gather_rows(a, indices) -> Tensor:
    """Select rows along axis 0. Backward scatter-adds, so repeated indices
    accumulate."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError("gather_rows", f"index out of range for {a.shape[0]} rows")
    src = a.shape

    def grad_fn(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _record("gather_rows", a.data[idx], (a,), grad_fn)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    src = a.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, src).copy(),)

    return _record("reduce_sum", out, (a,), grad_fn)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    src = a.shape
    count = a.data.size if axis is None else src[axis]

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g / count, src).copy(),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 / count, src).copy(),)

    return _record("reduce_mean", out, (a,), grad_fn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def grad_fn(g):
        return (g * mask,)

    return _record("relu", a.data * mask, (a,), grad_fn)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU in the tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _record("gelu", out, (a,), grad_fn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (a,), grad_fn)


def softmax(a) -> Tensor:
    """Softmax over the last axis, computed with the max-shift trick."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), grad_fn)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no affine)."""
    a = _as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv

    def grad_fn(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _record("layer_norm", xhat, (a,), grad_fn)


def l1_distance(a, b) -> Tensor:
    """Mean absolute difference over all elements (scalar output)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("l1_distance", f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.abs(diff).mean()
    n = diff.size

    def grad_fn(g):
        ga = g * np.sign(diff) / n
        return ga, -ga

    return _record("l1_distance", np.asarray(out), (a, b), grad_fn)


def squared_l2(a, b) -> Tensor:
    """Squared L2 distance summed over the last axis, averaged over the rest
    (scalar output)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("squared_l2", f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    lead = max(1, int(np.prod(a.shape[:-1]))) if a.ndim > 0 else 1
    out = (diff * diff).sum() / lead

    def grad_fn(g):
        ga = g * 2.0 * diff / lead
        return ga, -ga

    return _record("squared_l2", np.asarray(out), (a, b), grad_fn)


def stop_gradient(a) -> Tensor:
    """Identity forward; exactly zero gradient (nothing is recorded)."""
    a = _as_tensor(a)
    return Tensor(a.data, requires_grad=False)


def straight_through(a, target) -> Tensor:
    """a + stop_gradient(target - a), stored so the forward value is exactly
    target (no float residue) while the backward is the identity onto a."""
    a = _as_tensor(a)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != a.shape:
        raise ShapeError("straight_through", f"target shape {target.shape} != input {a.shape}")

    def grad_fn(g):
        return (g,)

    return _record("straight_through", target.copy(), (a,), grad_fn)


# ---------------------------------------------------------- recorded graphs


class ComputationRecord:
    """A callable traced define-by-run: evaluate runs the function under a
    fresh tape, backward replays it in reverse.

    fn takes len(input_shapes) Tensors and returns a Tensor or list of them.
    """

    def __init__(self, fn, input_shapes: list[tuple]):
        self.fn = fn
        self.input_shapes = [tuple(s) for s in input_shapes]
        self.tape: Tape | None = None
        self.inputs: list[Tensor] | None = None
        self.outputs: list[Tensor] | None = None

    def evaluate(self, inputs: list[Tensor]) -> list[Tensor]:
        if len(inputs) != len(self.input_shapes):
            raise ShapeError("evaluate", f"expected {len(self.input_shapes)} inputs, got {len(inputs)}")
        for i, (t, s) in enumerate(zip(inputs, self.input_shapes)):
            if t.shape != s:
                raise ShapeError("evaluate", f"input {i} shape {t.shape} != declared {s}")
        with Tape() as tape:
            out = self.fn(*inputs)
        self.tape = tape
        self.inputs = list(inputs)
        self.outputs = list(out) if isinstance(out, (list, tuple)) else [out]
        return self.outputs

    def backward(self, output_grads=None) -> list[np.ndarray]:
        """Gradients for each requires_grad input, in input order."""
        if self.tape is None:
            raise RuntimeError("backward called before evaluate")
        wrt = [t for t in self.inputs if t.requires_grad]
        return self.tape.gradients(self.outputs, wrt, output_grads)


def grad_check(record: ComputationRecord, inputs: list[Tensor], eps: float = 1e-5) -> float:
    """Compare analytic gradients against central finite differences.

    Returns max over all input coordinates of
    |analytic - numeric| / max(1, |numeric|). The record must produce a single
    scalar output.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    outs = record.evaluate(inputs)
    if len(outs) != 1 or outs[0].data.shape != ():
        raise ShapeError("grad_check", "record must produce a single scalar output")
    analytic = record.backward()
    checked = [t for t in inputs if t.requires_grad]

    def f_at() -> float:
        return float(record.evaluate(inputs)[0].data)

    worst = 0.0
    for t, ga in zip(checked, analytic):
        flat = t.data.reshape(-1)
        gflat = np.asarray(ga).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f_at()
            flat[i] = orig - eps
            fm = f_at()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = abs(gflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    record.evaluate(inputs)  # leave the record in forward-evaluated state
    return worst


# ------------------------------------------------------------------- adam


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter list."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]


def init_adam(params: list[Tensor]) -> AdamState:
    return AdamState(
        step=0,
        m=[np.zeros_like(p.data) for p in params],
        v=[np.zeros_like(p.data) for p in params],
    )


def adam_step(
    params: list[Tensor],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One Adam update, mutating params in place. lr = 0 leaves parameters
    bit-identical (moments still advance)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step", "params/grads/state length mismatch")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ShapeError("adam_step", f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return state


# ---------------------------------------------------------------- rng


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1
_SH30, _SH27, _SH31, _SH11 = (np.uint64(s) for s in (30, 27, 31, 11))
_INV_2_53 = float(2.0 ** -53)


def _finalize(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; wraparound uint64 arithmetic throughout.
    x = x.copy()
    x ^= x >> _SH30
    x *= _MIX_A
    x ^= x >> _SH27
    x *= _MIX_B
    x ^= x >> _SH31
    return x


@dataclass
class RngStream:
    """Counter-based random stream: word i is splitmix64-finalized
    seed + (counter + i + 1) * 0x9E3779B97F4A7C15 (mod 2^64), so any
    (seed, counter) pair replays identically and supports O(1) skipping."""

    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
            x = _finalize(np.uint64(self.seed) + idx * _GOLDEN)
        self.counter = (self.counter + n) & _MASK64
        return x

    def uniform(self, shape=()) -> np.ndarray:
        """Uniform float64 in [0, 1) from the top 53 bits of each word."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> _SH11).astype(np.float64) * _INV_2_53
        return u.reshape(shape) if shape else u[0]

    def normal(self, shape=()) -> np.ndarray:
        """Standard normals via Box-Muller: consumes 2 words per pair, with the
        first block of words feeding the radius and the second the angle."""
        n = int(np.prod(shape)) if shape else 1
        pairs = (n + 1) // 2
        w = self._raw(2 * pairs)
        u1 = ((w[:pairs] >> _SH11).astype(np.float64) + 1.0) * _INV_2_53  # (0, 1]
        u2 = (w[pairs:] >> _SH11).astype(np.float64) * _INV_2_53  # [0, 1)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [low, high) via floor(u * range); the bias is
        negligible for ranges far below 2^53."""
        if high <= low:
            raise ValueError(f"empty range [{low}, {high})")
        u = self.uniform(shape if shape else (1,))
        out = (low + np.floor(u * (high - low))).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def derive_child(self, worker_id: int) -> "RngStream":
        """Independent stream for a worker: the child seed mixes worker_id into
        this stream's seed through the same finalizer."""
        with np.errstate(over="ignore"):
            salt = (np.uint64(int(worker_id) & _MASK64) + np.uint64(1)) * _GOLDEN
            child = _finalize(np.atleast_1d(np.uint64(self.seed) ^ salt))[0]
        return RngStream(seed=int(child), counter=0)
