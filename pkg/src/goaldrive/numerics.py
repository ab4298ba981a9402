"""Dense 2-D tensors with a reverse-mode gradient tape.

Every tensor is a matrix. There is no implicit broadcasting: bias rows,
tiled tables and scalar scaling each have their own op so that shapes stay
explicit. Gradients are only recorded while a :class:`Tape` is active.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    pass


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A rows x cols matrix that may take part in a recorded graph."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Tensor must be 2-D, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def grad_or_zero(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}({self.rows}x{self.cols}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
        tape.record(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def custom_op(data: np.ndarray, parents: Sequence[Tensor],
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]], op: str = "custom") -> Tensor:
    """Wrap an externally computed value. ``backward(g)`` returns one adjoint per parent."""
    data = np.asarray(data, dtype=DTYPE)
    if data.ndim != 2:
        raise ShapeError(f"custom op output must be 2-D, got {data.shape}")

    def bw(g):
        for p, gp in zip(parents, backward(g)):
            if gp is not None:
                if gp.shape != p.shape:
                    raise ShapeError(f"custom adjoint shape {gp.shape} != parent shape {p.shape}")
                _accum(p, gp)

    return _make(data, parents, op, bw)


class Tape:
    """Ordered record of forward ops; ``backward`` replays them in reverse.

    Use as a context manager. Tapes are thread-local and never shared.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> list[Tensor]:
        """Accumulate d(out)/d(leaf) into ``leaf.grad``; returns nodes in visit order."""
        if seed is None:
            if out.data.size != 1:
                raise ShapeError("backward without a seed needs a 1x1 output")
            seed = np.ones_like(out.data)
        out.grad = np.array(seed, dtype=DTYPE)
        visited = []
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            node.backward_fn(node.grad)
            visited.append(node)
        # interior adjoints are not needed after the sweep
        for node in self.nodes:
            node.grad = None
        return visited


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.cols == b.rows, f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"add shape mismatch: {a.shape} + {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make(a.data + b.data, (a, b), "add", bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"sub shape mismatch: {a.shape} - {b.shape}")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make(a.data - b.data, (a, b), "sub", bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check(a.shape == b.shape, f"mul shape mismatch: {a.shape} * {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), "mul", bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), "scale", lambda g: _accum(a, g * c))


_scale = scale


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """a + row, where row is 1 x cols and is added to every row of a."""
    _check(row.rows == 1 and row.cols == a.cols, f"add_row needs 1x{a.cols}, got {row.shape}")

    def bw(g):
        _accum(a, g)
        if row.requires_grad:
            _accum(row, g.sum(axis=0, keepdims=True))

    return _make(a.data + row.data, (a, row), "add_row", bw)


def mul_row(a: Tensor, row: Tensor) -> Tensor:
    _check(row.rows == 1 and row.cols == a.cols, f"mul_row needs 1x{a.cols}, got {row.shape}")

    def bw(g):
        if a.requires_grad:
            _accum(a, g * row.data)
        if row.requires_grad:
            _accum(row, (g * a.data).sum(axis=0, keepdims=True))

    return _make(a.data * row.data, (a, row), "mul_row", bw)


def tile_rows(a: Tensor, reps: int) -> Tensor:
    """Stack ``reps`` copies of a vertically."""
    n = a.rows

    def bw(g):
        _accum(a, g.reshape(reps, n, a.cols).sum(axis=0))

    return _make(np.tile(a.data, (reps, 1)), (a,), "tile_rows", bw)


def transpose(a: Tensor) -> Tensor:
    return _make(a.data.T.copy(), (a,), "transpose", lambda g: _accum(a, g.T))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    _check(rows * cols == a.data.size, f"cannot reshape {a.shape} to {(rows, cols)}")
    return _make(a.data.reshape(rows, cols), (a,), "reshape",
                 lambda g: _accum(a, g.reshape(a.shape)))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].cols
    _check(all(p.cols == cols for p in parts),
           f"concat_rows needs equal cols, got {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), tuple(parts), "concat_rows", bw)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].rows
    _check(all(p.rows == rows for p in parts),
           f"concat_cols needs equal rows, got {[p.shape for p in parts]}")
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[:, lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat_cols", bw)


def take_rows(a: Tensor, index) -> Tensor:
    """Gather rows by integer index (repeats allowed)."""
    idx = np.asarray(index, dtype=np.intp)

    def bw(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            if len(idx) == a.rows and np.array_equal(np.sort(idx), np.arange(a.rows)):
                acc[idx] = g  # permutation: plain scatter
            else:
                np.add.at(acc, idx, g)
            _accum(a, acc)

    return _make(a.data[idx], (a,), "take_rows", bw)


def group_mean_rows(a: Tensor, groups: int) -> Tensor:
    """Mean over consecutive equal-size row blocks: (G*n) x c -> G x c."""
    _check(a.rows % groups == 0, f"{a.rows} rows do not split into {groups} groups")
    n = a.rows // groups

    def bw(g):
        _accum(a, np.repeat(g / n, n, axis=0))

    return _make(a.data.reshape(groups, n, a.cols).mean(axis=1), (a,), "group_mean_rows", bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), "tanh", lambda g: _accum(a, g * (1.0 - y * y)))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(y, (a,), "sigmoid", lambda g: _accum(a, g * y * (1.0 - y)))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences stay accurate."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        _accum(a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du))

    return _make(y, (a,), "gelu", bw)


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), "square", lambda g: _accum(a, 2.0 * g * a.data))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array([[a.data.sum()]]), (a,), "sum_all",
                 lambda g: _accum(a, np.full_like(a.data, g[0, 0])))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array([[a.data.mean()]]), (a,), "mean_all",
                 lambda g: _accum(a, np.full_like(a.data, g[0, 0] / n)))


def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    return _make(y, (x,), "softmax_rows", bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    n = x.cols
    _check(gain.shape == (1, n) and bias.shape == (1, n),
           f"layer_norm params must be 1x{n}, got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0, keepdims=True))
        if x.requires_grad:
            gx = g * gain.data
            _accum(x, inv * (gx - gx.mean(axis=1, keepdims=True)
                             - xhat * (gx * xhat).mean(axis=1, keepdims=True)))

    return _make(xhat * gain.data + bias.data, (x, gain, bias), "layer_norm", bw)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None) -> Tensor:
    """softmax(q k^T * scale) v, composed from primitive ops."""
    _check(q.cols == k.cols, f"attention: q {q.shape} and k {k.shape} need equal cols")
    _check(k.rows == v.rows, f"attention: k {k.shape} and v {v.shape} need equal rows")
    if scale is None:
        scale = 1.0 / np.sqrt(q.cols)
    weights = softmax_rows(_scale(matmul(q, transpose(k)), scale))
    return matmul(weights, v)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, groups: int = 1):
    """Block-diagonal multi-head attention over ``groups`` stacked samples.

    q is (G*Nq) x D, k and v are (G*Nk) x D. Each sample attends only to its
    own keys. Head h uses columns [h*D/H, (h+1)*D/H). Returns the output
    tensor and the attention weights as an array of shape (G, H, Nq, Nk).
    """
    D = q.cols
    _check(k.cols == D and v.cols == D, f"mha: q {q.shape}, k {k.shape}, v {v.shape} need equal cols")
    _check(D % heads == 0, f"mha: dim {D} not divisible by {heads} heads")
    _check(q.rows % groups == 0 and k.rows % groups == 0 and k.rows == v.rows,
           f"mha: rows q={q.rows} k={k.rows} v={v.rows} do not split into {groups} groups")
    nq, nk, dh = q.rows // groups, k.rows // groups, D // heads
    s = 1.0 / np.sqrt(dh)
    Q = q.data.reshape(groups, nq, heads, dh).transpose(0, 2, 1, 3)
    K = k.data.reshape(groups, nk, heads, dh).transpose(0, 2, 1, 3)
    V = v.data.reshape(groups, nk, heads, dh).transpose(0, 2, 1, 3)
    S = (Q @ K.transpose(0, 1, 3, 2)) * s
    S -= S.max(axis=-1, keepdims=True)
    P = np.exp(S)
    P /= P.sum(axis=-1, keepdims=True)
    O = P @ V
    out = O.transpose(0, 2, 1, 3).reshape(groups * nq, D)

    def bw(g):
        G = g.reshape(groups, nq, heads, dh).transpose(0, 2, 1, 3)
        dV = P.transpose(0, 1, 3, 2) @ G
        dP = G @ V.transpose(0, 1, 3, 2)
        dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * s
        dQ = dS @ K
        dK = dS.transpose(0, 1, 3, 2) @ Q
        _accum(q, dQ.transpose(0, 2, 1, 3).reshape(q.shape))
        _accum(k, dK.transpose(0, 2, 1, 3).reshape(k.shape))
        _accum(v, dV.transpose(0, 2, 1, 3).reshape(v.shape))

    return _make(out, (q, k, v), "mha", bw), P


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-6,
               max_entries: int | None = None, seed: int = 0, floor: float = 1e-6) -> float:
    """Max relative error between tape adjoints and central differences.

    ``f`` rebuilds the scalar from the current parameter values. The relative
    error of one entry is |a - n| / max(|a|, |n|, floor). Parameters with
    ``requires_grad=False`` are skipped after asserting their adjoint is zero.
    With ``max_entries`` only that many randomly chosen entries per parameter
    are probed.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got {out.shape}")
        if not np.isfinite(out.data).all():
            raise FloatingPointError("grad_check: function value is not finite")
        tape.backward(out)

    def value() -> float:
        v = f().item()
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: function value is not finite")
        return v

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        if not p.requires_grad:
            if p.grad is not None and np.any(p.grad != 0):
                raise AssertionError(f"frozen parameter {p.name!r} received a gradient")
            continue
        analytic = p.grad_or_zero().copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst


class Params:
    """Named parameter tensors split into frozen and trainable sets."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=not frozen, name=name)
        self.tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def frozen(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if not t.requires_grad]

    def count(self, trainable: bool | None = None) -> int:
        ts = self.tensors.values() if trainable is None else (self.trainable() if trainable else self.frozen())
        return int(sum(t.data.size for t in ts))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def restore(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            self.tensors[k].data[...] = v

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None
