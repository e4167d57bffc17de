"""Dense N-D tensors with a reverse-mode differentiation tape.

The tape is define-by-run and single-use: enter a ``Tape`` context, run the
forward computation, call :meth:`Tape.backward` once on a scalar loss, then
discard the tape. Values are float32 by default; float64 is supported for
gradient-check builds. Every operation validates that its output is finite
and raises :class:`NumericsError` otherwise.
"""

from __future__ import annotations

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Tape misuse: nested tapes, double backward, loss not on tape."""


def _as_array(data, dtype=None) -> np.ndarray:
    """float32 by default; ndarray and numpy-scalar float inputs keep their
    own precision (numpy returns bare scalars for 0-d arithmetic, and those
    must not silently drop from f64 to f32)."""
    if dtype is not None:
        arr = np.asarray(data).astype(dtype, copy=False)
    elif isinstance(data, (np.ndarray, np.generic)) and np.asarray(data).dtype in _FLOAT_DTYPES:
        arr = np.asarray(data)
    else:
        arr = np.asarray(data, dtype=np.float32)
    # ascontiguousarray would promote 0-d scalars to shape (1,)
    return arr if arr.ndim == 0 else np.ascontiguousarray(arr)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    """A dense row-major float array, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "tensor construction")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; scalars are the only broadcast partners
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return scale(sub(self, other), -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, *axes)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def abs(self) -> "Tensor":
        return tabs(self)


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros_like(t.data))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones_like(t.data))


class _Node:
    """One recorded op: output tensor, inputs, and per-input vjp closures."""

    __slots__ = ("out", "inputs", "vjps")

    def __init__(self, out: Tensor, inputs: tuple, vjps: tuple):
        self.out = out
        self.inputs = inputs
        self.vjps = vjps  # aligned with inputs; None for untracked inputs


_ACTIVE_TAPE: "Tape | None" = None


class Tape:
    """Ordered record of ops for one forward pass; single-owner, single-use.

    Nodes are appended in execution order, so a node's inputs always precede
    it and the backward sweep is a strict reverse walk of the append order.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._watched: dict[int, Tensor] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def watch(self, t: Tensor) -> None:
        """Register a leaf so backward reports a gradient for it (zero if unreached)."""
        if not isinstance(t, Tensor) or not t.requires_grad:
            raise TapeError("watch() requires a requires_grad=True leaf tensor")
        self._watched[id(t)] = t

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def _add(self, node: _Node) -> None:
        self._nodes.append(node)
        self._produced.add(id(node.out))
        for inp in node.inputs:
            if isinstance(inp, Tensor) and inp.requires_grad:
                self._watched[id(inp)] = inp

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar loss.

        Returns a map from every watched leaf to its gradient (zeros when the
        leaf does not reach the loss) and mirrors each gradient into
        ``leaf.grad``. A second call without a new forward pass is an error.
        """
        if self._consumed:
            raise TapeError("backward already ran on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss is not a result recorded on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, vjp in zip(node.inputs, node.vjps):
                if vjp is None:
                    continue
                contrib = vjp(g)
                key = id(inp)
                if key in grads:
                    grads[key] += contrib
                else:
                    grads[key] = contrib

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in self._watched.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(leaf.data)
            leaf.grad = g
            result[leaf] = g
        self._nodes.clear()
        return result


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE


def record(out: Tensor, inputs: tuple, vjps: tuple) -> Tensor:
    """Append an op to the active tape if any input is tracked.

    ``vjps`` must align with ``inputs``; pass None for entries whose gradient
    is not needed (untracked inputs). Ops call :func:`tracked` at forward time
    to decide which closures to build.
    """
    tape = _ACTIVE_TAPE
    if tape is not None and any(v is not None for v in vjps):
        tape._add(_Node(out, inputs, vjps))
    return out


def tracked(t) -> bool:
    """True when gradients must flow to ``t`` under the active tape."""
    tape = _ACTIVE_TAPE
    if tape is None or not isinstance(t, Tensor):
        return False
    return t.requires_grad or tape.produced(t)


# ---------------------------------------------------------------------------
# elementwise ops


def _ew(a: Tensor, b, kind: str) -> Tensor:
    if not isinstance(a, Tensor):
        raise TypeError("first operand must be a Tensor")
    scalar_b = not isinstance(b, Tensor)
    if scalar_b:
        b_val = float(b)
    else:
        if a.shape != b.shape:
            raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
        if a.dtype != b.dtype:
            raise ValueError(f"{kind}: dtype mismatch {a.dtype} vs {b.dtype}")
        b_val = b.data

    if kind == "add":
        out_data = a.data + b_val
    elif kind == "sub":
        out_data = a.data - b_val
    elif kind == "mul":
        out_data = a.data * b_val
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    _check_finite(out_data, kind)
    out = Tensor(out_data.astype(a.dtype, copy=False))

    need_a = tracked(a)
    need_b = (not scalar_b) and tracked(b)
    if not (need_a or need_b):
        return out

    if kind == "add":
        vjp_a = (lambda g: g) if need_a else None
        vjp_b = (lambda g: g) if need_b else None
    elif kind == "sub":
        vjp_a = (lambda g: g) if need_a else None
        vjp_b = (lambda g: -g) if need_b else None
    else:  # mul
        a_data = a.data
        vjp_a = (lambda g: g * b_val) if need_a else None
        vjp_b = (lambda g: g * a_data) if need_b else None
    inputs = (a,) if scalar_b else (a, b)
    vjps = (vjp_a,) if scalar_b else (vjp_a, vjp_b)
    return record(out, inputs, vjps)


def add(a: Tensor, b) -> Tensor:
    return _ew(a, b, "add")


def sub(a: Tensor, b) -> Tensor:
    return _ew(a, b, "sub")


def mul(a: Tensor, b) -> Tensor:
    return _ew(a, b, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    return _ew(a, float(s), "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"matmul dtype mismatch {a.dtype} vs {b.dtype}")
    out_data = a.data @ b.data
    _check_finite(out_data, "matmul")
    out = Tensor(out_data)

    need_a, need_b = tracked(a), tracked(b)
    if not (need_a or need_b):
        return out
    a_data, b_data = a.data, b.data
    vjp_a = (lambda g: g @ b_data.T) if need_a else None
    vjp_b = (lambda g: a_data.T @ g) if need_b else None
    return record(out, (a, b), (vjp_a, vjp_b))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def tsum(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    _check_finite(out.data, "sum")
    if not tracked(a):
        return out
    shape, dtype = a.shape, a.dtype
    return record(out, (a,), (lambda g: np.full(shape, g, dtype=dtype),))


def tmean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))
    _check_finite(out.data, "mean")
    if not tracked(a):
        return out
    shape, dtype = a.shape, a.dtype
    return record(out, (a,), (lambda g: np.full(shape, g / n, dtype=dtype),))


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at 0."""
    out = Tensor(np.abs(a.data))
    if not tracked(a):
        return out
    sign = np.sign(a.data)
    return record(out, (a,), (lambda g: g * sign,))


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape))
    if not tracked(a):
        return out
    old = a.shape
    return record(out, (a,), (lambda g: g.reshape(old),))


def transpose(a: Tensor, *axes) -> Tensor:
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    if not tracked(a):
        return out
    inv = tuple(np.argsort(axes))
    return record(out, (a,), (lambda g: np.ascontiguousarray(g.transpose(inv)),))


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack of no tensors")
    shape0, dtype0 = tensors[0].shape, tensors[0].dtype
    for t in tensors[1:]:
        if t.shape != shape0 or t.dtype != dtype0:
            raise ValueError("stack inputs must share shape and dtype")
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))

    needs = [tracked(t) for t in tensors]
    if not any(needs):
        return out

    def make_vjp(i):
        return lambda g: np.ascontiguousarray(np.take(g, i, axis=axis))

    vjps = tuple(make_vjp(i) if needs[i] else None for i in range(len(tensors)))
    return record(out, tuple(tensors), vjps)
