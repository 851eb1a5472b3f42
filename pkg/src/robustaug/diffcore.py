"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` is a Wengert list: every primitive appends a record holding
its input node ids, its output node id and a closure that maps the output
adjoint to input adjoints.  :func:`backprop` walks the records in reverse.

Only the primitives needed by the MLP / LeNet models and the training
objectives are provided.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class GraphShapeError(ValueError):
    """Raised when a layer receives an input of the wrong shape."""

    def __init__(self, layer: str, message: str):
        super().__init__(f"layer {layer!r}: {message}")
        self.layer = layer


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive operations.

    With ``grad_enabled=False`` nothing is recorded, which is the cheap path
    used for inference.  With ``track_margins``, ``min_margin`` tracks the
    smallest relu input magnitude and ``decisions`` keeps every discrete
    choice (relu masks, max-pool winners, caller supplied selections); the
    finite-difference checker uses both to reject probe points near a kink.
    """

    def __init__(self, grad_enabled: bool = True, track_margins: bool = False):
        self.grad_enabled = grad_enabled
        self.track_margins = track_margins
        self.records: list[Record] = []
        self.n_nodes = 0
        self.params: dict[str, Tensor] = {}
        self.min_margin = math.inf
        self.decisions: list[np.ndarray] = []

    def _new_node(self) -> int:
        self.n_nodes += 1
        return self.n_nodes - 1

    def constant(self, array, name: str | None = None) -> Tensor:
        return Tensor(np.asarray(array, dtype=DTYPE), self, None, name)

    def param(self, name: str, array: np.ndarray) -> Tensor:
        """Register a trainable leaf.  Registering the same name twice returns
        the existing leaf so several forward passes can share parameters."""
        if name in self.params:
            return self.params[name]
        node = self._new_node() if self.grad_enabled else None
        t = Tensor(np.asarray(array, dtype=DTYPE), self, node, name)
        self.params[name] = t
        return t

    def note_margin(self, margin: float) -> None:
        if self.track_margins:
            self.min_margin = min(self.min_margin, float(margin))

    def note_decision(self, choice: np.ndarray) -> None:
        if self.track_margins:
            self.decisions.append(np.array(choice, copy=True))

    def record(self, op: str, out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        tracked = [t for t in inputs if t.node is not None]
        if not self.grad_enabled or not tracked:
            return Tensor(out, self, None)
        node = self._new_node()
        self.records.append(
            Record(op, tuple(-1 if t.node is None else t.node for t in inputs), node, backward)
        )
        return Tensor(out, self, node)


class Tensor:
    """Dense float64 array bound to a tape.  ``node`` is None for constants."""

    __slots__ = ("data", "tape", "node", "name")

    def __init__(self, data: np.ndarray, tape: Tape, node: int | None = None, name: str | None = None):
        self.data = data
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def requires_grad(self) -> bool:
        return self.node is not None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.node})"

    def __add__(self, other):
        return add(self, _lift(other, self.tape))

    def __radd__(self, other):
        return add(_lift(other, self.tape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.tape))

    def __rsub__(self, other):
        return sub(_lift(other, self.tape), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.tape))

    def __rmul__(self, other):
        return mul(_lift(other, self.tape), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self.tape))


def _lift(x, tape: Tape) -> Tensor:
    return x if isinstance(x, Tensor) else tape.constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return a.tape.record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return a.tape.record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return a.tape.record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data @ b.data
    return a.tape.record("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor, layer: str = "affine") -> Tensor:
    """x @ w + b for x of shape [n, d_in]."""
    if x.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise GraphShapeError(layer, f"expected input [n, {w.shape[0]}], got {list(x.shape)}")
    out = x.data @ w.data + b.data
    return x.tape.record(
        "affine", out, (x, w, b),
        lambda g: (g @ w.data.T if x.requires_grad else None, x.data.T @ g, g.sum(axis=0)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if x.tape.track_margins and x.data.size:
        x.tape.note_margin(np.abs(x.data).min())
        x.tape.note_decision(mask)
    return x.tape.record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def flatten(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape.record("flatten", x.data.reshape(shape[0], -1), (x,), lambda g: (g.reshape(shape),))


def conv2d(x: Tensor, w: Tensor, b: Tensor, layer: str = "conv") -> Tensor:
    """Valid (no padding), stride-1 convolution.

    x: [n, H, W, C_in]; w: [kh, kw, C_in, C_out]; b: [C_out].
    """
    kh, kw, cin, cout = w.shape
    if x.data.ndim != 4 or x.shape[3] != cin:
        raise GraphShapeError(layer, f"expected input [n, H, W, {cin}], got {list(x.shape)}")
    n, h, wd, _ = x.shape
    oh, ow = h - kh + 1, wd - kw + 1
    if oh < 1 or ow < 1:
        raise GraphShapeError(layer, f"input {h}x{wd} smaller than kernel {kh}x{kw}")
    # [n, oh, ow, C, kh, kw] -> [n*oh*ow, kh*kw*C]
    windows = sliding_window_view(x.data, (kh, kw), axis=(1, 2))
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(n, oh, ow, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, oh, ow, kh, kw, cin)
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + oh, j:j + ow, :] += dcols[:, :, :, i, j, :]
        return gx, gw, gb

    return x.tape.record("conv2d", out, (x, w, b), backward)


def maxpool2(x: Tensor, layer: str = "maxpool") -> Tensor:
    """2x2 max-pool, stride 2.  Gradient goes to the first maximal element."""
    n, h, wd, c = x.shape
    if h % 2 or wd % 2:
        raise GraphShapeError(layer, f"spatial size {h}x{wd} must be even")
    blocks = x.data.reshape(n, h // 2, 2, wd // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, wd // 2, c, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    x.tape.note_decision(idx)

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, h // 2, wd // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, wd, c)
        return (gx,)

    return x.tape.record("maxpool2", out, (x,), backward)


def softmax(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return x.tape.record("softmax", s, (x,), backward)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where clamped."""
    clamped = np.maximum(x.data, floor) if floor > 0 else x.data
    live = x.data >= floor if floor > 0 else np.ones(x.shape, dtype=bool)
    return x.tape.record("log", np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record("sum", out, (x,), backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return sum(x, axis) * (1.0 / count)


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-row sum of |a - b|; shape [n].  Subgradient sign(0) = 0."""
    diff = a.data - b.data
    sign = np.sign(diff)
    out = np.abs(diff).sum(axis=-1)

    def backward(g):
        gd = g[..., None] * sign
        return gd, -gd

    return a.tape.record("l1_distance", out, (a, b), backward)


def sq_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Per-row sum of (a - b)^2; shape [n]."""
    diff = a.data - b.data
    out = (diff * diff).sum(axis=-1)

    def backward(g):
        gd = 2.0 * g[..., None] * diff
        return gd, -gd

    return a.tape.record("sq_l2_distance", out, (a, b), backward)


def kl_rows(p: Tensor, q: Tensor, floor: float = 1e-30) -> Tensor:
    """Per-row KL(p || q) = sum_j p_j ln(p_j / q_j); entries clamped at ``floor``."""
    pc = np.maximum(p.data, floor)
    qc = np.maximum(q.data, floor)
    out = (p.data * (np.log(pc) - np.log(qc))).sum(axis=-1)

    def backward(g):
        gg = g[..., None]
        gp = gg * (np.log(pc) - np.log(qc) + np.where(p.data >= floor, 1.0, 0.0))
        gq = gg * np.where(q.data >= floor, -p.data / qc, 0.0)
        return gp, gq

    return p.tape.record("kl_rows", out, (p, q), backward)


# ------------------------------------------------------------------- graphs

# A model description is a sequence of layer tuples:
#   ("conv", name) ("affine", name) ("relu",) ("maxpool2",) ("flatten",)
# where ``name`` prefixes the parameters ``name.w`` and ``name.b``.
Graph = Sequence[tuple]


def evaluate_graph(graph: Graph, params: dict[str, np.ndarray], inputs, tape: Tape | None = None):
    """Run ``graph`` on ``inputs`` and return ``(logits, tape)``.

    Passing an existing ``tape`` appends to it and reuses its parameter
    leaves, so several batches can contribute to one loss.
    """
    tape = Tape() if tape is None else tape
    h = inputs if isinstance(inputs, Tensor) else tape.constant(inputs)
    for pos, layer in enumerate(graph):
        kind = layer[0]
        label = f"{pos}:{layer[1] if len(layer) > 1 else kind}"
        if kind in ("conv", "affine"):
            name = layer[1]
            w = tape.param(f"{name}.w", params[f"{name}.w"])
            b = tape.param(f"{name}.b", params[f"{name}.b"])
            h = conv2d(h, w, b, label) if kind == "conv" else affine(h, w, b, label)
        elif kind == "relu":
            h = relu(h)
        elif kind == "maxpool2":
            if h.data.ndim != 4:
                raise GraphShapeError(label, f"expected [n, H, W, C], got {list(h.shape)}")
            h = maxpool2(h, label)
        elif kind == "flatten":
            h = flatten(h)
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return h, tape


def backprop(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of scalar ``loss`` with respect to every registered parameter."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {list(loss.shape)}")
    grads: dict[int, np.ndarray] = {}
    if loss.node is not None:
        grads[loss.node] = np.ones_like(loss.data)
        for rec in reversed(tape.records):
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            for node, gi in zip(rec.inputs, rec.backward(g)):
                if node < 0 or gi is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + gi
                else:
                    grads[node] = gi
    out = {}
    for name, t in tape.params.items():
        g = grads.get(t.node)
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(t.shape)
    return out


# --------------------------------------------------------------- optimizer


@dataclass
class ParamSet:
    """Named parameters with SGD momentum buffers of matching shape."""

    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.momentum.setdefault(name, np.zeros_like(p))
            if self.momentum[name].shape != p.shape:
                raise ValueError(f"momentum buffer for {name!r} has wrong shape")

    def copy(self) -> ParamSet:
        return ParamSet({k: v.copy() for k, v in self.params.items()},
                        {k: v.copy() for k, v in self.momentum.items()})

    def count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))


def sgd_update(ps: ParamSet, grads: dict[str, np.ndarray], lr: float, momentum: float = 0.0) -> ParamSet:
    """In place: ``v <- momentum * v + g``, ``theta <- theta - lr * v``.  Returns ``ps``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must be in [0, 1)")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        v = ps.momentum[name]
        v *= momentum
        v += g
        ps.params[name] -= lr * v
    return ps


# ---------------------------------------------------------- gradient check


def _same_decisions(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(
    loss_fn: Callable[[Tape, dict[str, np.ndarray], np.random.Generator], Tensor],
    params: dict[str, np.ndarray],
    seed: int,
    n_probe: int = 100,
    h: float = 1e-5,
    kink_tol: float = 1e-4,
    max_attempts: int = 10,
) -> float:
    """Max relative error between backprop and central differences.

    ``loss_fn(tape, params, rng)`` builds a scalar loss; it must draw any
    random inputs from ``rng`` so a rejected probe point can be resampled.
    A point is rejected when some relu input lies within ``kink_tol`` of zero,
    or when a perturbed evaluation changes any discrete decision (relu mask,
    max-pool winner, worst-case selection) recorded at the unperturbed point.
    At most ``n_probe`` parameter coordinates are compared (all of them when
    there are fewer).  The error is ``max|g_bp - g_fd| / max(|g_bp|, |g_fd|)``
    taken over the probed coordinates, so it is insensitive to tiny entries.
    """
    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    pick = sorted(np.random.default_rng(seed).choice(len(coords), size=min(n_probe, len(coords)), replace=False))

    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        state = rng.bit_generator.state
        tape = Tape(track_margins=True)
        loss = loss_fn(tape, params, rng)
        if tape.min_margin < kink_tol:
            continue
        grads = backprop(tape, loss)
        base = tape.decisions

        def value(p):
            r = np.random.default_rng()
            r.bit_generator.state = state
            t = Tape(grad_enabled=False, track_margins=True)
            v = float(loss_fn(t, p, r).data)
            return v, _same_decisions(t.decisions, base)

        bp, fd = [], []
        crossed = False
        for c in pick:
            name, i = coords[c]
            probe = dict(params)
            arr = params[name].copy()
            flat = arr.reshape(-1)
            orig = flat[i]
            probe[name] = arr
            flat[i] = orig + h
            up, same_up = value(probe)
            flat[i] = orig - h
            down, same_down = value(probe)
            if not (same_up and same_down):
                crossed = True
                break
            fd.append((up - down) / (2 * h))
            bp.append(grads[name].reshape(-1)[i])
        if crossed:
            continue
        bp, fd = np.array(bp), np.array(fd)
        scale = max(np.abs(bp).max(), np.abs(fd).max())
        if scale == 0:
            return 0.0
        return float(np.abs(bp - fd).max() / scale)
    raise RuntimeError(f"no kink-free probe point found in {max_attempts} attempts")
