"""Dense float64 primitives with a reverse-mode tape.

Every primitive takes :class:`Var` inputs and returns a :class:`Var`.  When any
input lives on a :class:`Tape`, the primitive appends a record holding a
closure that maps the output gradient to input gradients.  Replaying the tape
backwards yields exact gradients for every leaf.

Primitives also report their arithmetic cost to an optional operation counter
(see :func:`flop_counter`), which is how complexity accounting is instrumented.
"""
from __future__ import annotations

import contextlib
import contextvars
import itertools
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float64

_ids = itertools.count()


class TapeError(RuntimeError):
    """Backward requested on a tape that has not recorded a forward pass."""


class ShapeError(ValueError):
    pass


class EmptyAxisError(ValueError):
    pass


class Var:
    """A value participating in a (possibly recorded) computation."""

    __slots__ = ("value", "tape", "uid")

    def __init__(self, value, tape: Tape | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.tape = tape
        self.uid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, taped={self.tape is not None})"


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


@dataclass
class _Record:
    out: int
    parents: tuple[Var, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitive applications.

    Leaves are registered by name with :meth:`leaf`; after a forward pass the
    final result is marked with :meth:`set_output` and :meth:`backward` returns a
    gradient for every named leaf (zeros for leaves the output never touched).
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.leaves: dict[str, Var] = {}
        self.output: Var | None = None

    def leaf(self, name: str, value) -> Var:
        if name in self.leaves:
            raise KeyError(f"duplicate leaf name {name!r}")
        v = Var(value, self)
        self.leaves[name] = v
        return v

    def set_output(self, out: Var) -> None:
        self.output = out

    def record(self, value: np.ndarray, parents: Sequence[Var], backward) -> Var:
        out = Var(value, self)
        self.records.append(_Record(out.uid, tuple(parents), backward))
        return out

    def gradients(self, out: Var, d_out) -> dict[int, np.ndarray]:
        d_out = np.asarray(d_out, dtype=DTYPE)
        if d_out.shape != out.shape:
            raise ShapeError(f"upstream gradient shape {d_out.shape} != output shape {out.shape}")
        grads: dict[int, np.ndarray] = {out.uid: d_out}
        for rec in reversed(self.records):
            g = grads.pop(rec.out, None)
            if g is None:
                continue
            for parent, pg in zip(rec.parents, rec.backward(g)):
                if pg is None or parent.tape is not self:
                    continue
                if parent.uid in grads:
                    grads[parent.uid] = grads[parent.uid] + pg
                else:
                    grads[parent.uid] = pg
        return grads

    def backward(self, d_out, out: Var | None = None) -> dict[str, np.ndarray]:
        out = out if out is not None else self.output
        if out is None or not self.records:
            raise TapeError("backward called before any forward pass was recorded")
        if out.tape is not self:
            raise TapeError("output was not produced on this tape")
        grads = self.gradients(out, d_out)
        return {name: grads.get(v.uid, np.zeros_like(v.value)) for name, v in self.leaves.items()}

    def clear(self) -> None:
        """Drop recorded records and leaves. Vars point back at their tape, so a used
        tape otherwise lives (with every activation) until the cyclic GC runs."""
        self.records.clear()
        self.leaves.clear()
        self.output = None


def _tape_of(*xs: Var) -> Tape | None:
    for x in xs:
        if x.tape is not None:
            return x.tape
    return None


def _emit(value, parents: Sequence[Var], backward) -> Var:
    tape = _tape_of(*parents)
    if tape is None:
        return Var(value)
    return tape.record(value, parents, backward)


# ---------------------------------------------------------------------------
# operation counting

_counter: contextvars.ContextVar[dict | None] = contextvars.ContextVar("pnp3d_counter", default=None)
_stage: contextvars.ContextVar[str] = contextvars.ContextVar("pnp3d_stage", default="other")


@contextlib.contextmanager
def flop_counter() -> Iterator[dict[str, dict[str, int]]]:
    """Collect ``{stage: {"mac": n, "elementwise": m}}`` over the enclosed code."""
    counts: dict[str, dict[str, int]] = defaultdict(lambda: {"mac": 0, "elementwise": 0})
    token = _counter.set(counts)
    try:
        yield counts
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def flop_stage(name: str) -> Iterator[None]:
    token = _stage.set(name)
    try:
        yield
    finally:
        _stage.reset(token)


def tally(n: int, kind: str = "elementwise") -> None:
    counts = _counter.get()
    if counts is not None:
        counts[_stage.get()][kind] += int(n)


# ---------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a: Var, b: Var) -> Var:
    """``a[..., M, K] @ b[K, P]``; leading axes of ``a`` are batch axes."""
    a, b = const(a), const(b)
    if b.value.ndim != 2 or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv
    tally(av.size * bv.shape[1], "mac")

    def backward(g):
        da = g @ bv.T
        db = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return da, db

    return _emit(out, (a, b), backward)


def add(a: Var, b: Var) -> Var:
    a, b = const(a), const(b)
    out = a.value + b.value
    tally(out.size)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Var, b: Var) -> Var:
    a, b = const(a), const(b)
    out = a.value - b.value
    tally(out.size)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Var, b: Var) -> Var:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av * bv
    tally(out.size)
    return _emit(out, (a, b), lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def relu(x: Var) -> Var:
    x = const(x)
    xv = x.value
    tally(xv.size)
    return _emit(np.maximum(xv, 0.0), (x,), lambda g: (g * (xv > 0),))


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + e^x) without overflow: identity above 20, e^x below -20."""
    x = np.asarray(x, dtype=DTYPE)
    mid = np.log1p(np.exp(np.clip(x, -20.0, 20.0)))
    return np.where(x > 20.0, x, np.where(x < -20.0, np.exp(np.minimum(x, 0.0)), mid))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mish(x: Var) -> Var:
    x = const(x)
    xv = x.value
    t = np.tanh(softplus(xv))
    tally(xv.size)

    def backward(g):
        # d/dx x*tanh(sp(x)) = tanh(sp) + x * sech^2(sp) * sigmoid(x)
        return (g * (t + xv * (1.0 - t * t) * _sigmoid(xv)),)

    return _emit(xv * t, (x,), backward)


def mish_value(x) -> np.ndarray:
    return mish(Var(x)).value


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    xs = [const(x) for x in xs]
    out = np.concatenate([x.value for x in xs], axis=axis)
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _emit(out, xs, lambda g: tuple(np.split(g, sizes, axis=axis)))


def reshape(x: Var, shape: Sequence[int]) -> Var:
    x = const(x)
    orig = x.shape
    return _emit(x.value.reshape(shape), (x,), lambda g: (g.reshape(orig),))


_SMALL_AXIS = 32


def pool(x: Var, axis: int, mode: str = "max") -> Var:
    """Reduce one axis by max or mean.

    Max routes the gradient to the first (lowest-index) maximiser.
    """
    x = const(x)
    xv = x.value
    axis = axis % xv.ndim
    n = xv.shape[axis]
    if n == 0:
        raise EmptyAxisError(f"cannot pool over empty axis {axis} of shape {xv.shape}")
    tally(xv.size)
    if mode == "avg":
        out = xv.mean(axis=axis)

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / n, xv.shape).copy(),)

    elif mode == "max" and n <= _SMALL_AXIS:
        # short axes: a running comparison beats strided argmax; strict > keeps the first maximiser
        moved = np.moveaxis(xv, axis, 0)
        out = np.array(moved[0])
        arg = np.zeros(out.shape, dtype=np.intp)
        for j in range(1, n):
            better = moved[j] > out
            np.copyto(out, moved[j], where=better)
            arg[better] = j

        def backward(g):
            dx = np.empty_like(xv)
            dmoved = np.moveaxis(dx, axis, 0)
            for j in range(n):
                dmoved[j] = g * (arg == j)
            return (dx,)

    elif mode == "max":
        arg = np.expand_dims(np.argmax(xv, axis=axis), axis)
        out = np.take_along_axis(xv, arg, axis=axis).squeeze(axis)

        def backward(g):
            dx = np.zeros_like(xv)
            np.put_along_axis(dx, arg, np.expand_dims(g, axis), axis=axis)
            return (dx,)

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return _emit(out, (x,), backward)


# ---------------------------------------------------------------------------
# batch normalisation


def _colsum(a: np.ndarray) -> np.ndarray:
    """Column sums of a tall 2-D array (a BLAS product is far faster than axis-0 reduction)."""
    return np.ones(a.shape[0]) @ a


@dataclass
class BatchNormState:
    """Per-channel affine parameters plus running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    training: bool = True

    @classmethod
    def create(cls, channels: int, **kw) -> BatchNormState:
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    @property
    def mode(self) -> str:
        return "training" if self.training else "eval"

    def copy(self) -> BatchNormState:
        return BatchNormState(
            self.gamma.copy(), self.beta.copy(), self.running_mean.copy(), self.running_var.copy(),
            self.momentum, self.eps, self.training,
        )


def batch_norm(x: Var, state: BatchNormState, gamma: Var | None = None, beta: Var | None = None) -> Var:
    """Normalise ``x[M, C]`` per channel.

    Training mode uses biased batch statistics and folds them into the running
    estimates as ``running = momentum * running + (1 - momentum) * batch``
    (unbiased variance for the running estimate when M > 1).
    """
    x = const(x)
    gamma = const(state.gamma) if gamma is None else gamma
    beta = const(state.beta) if beta is None else beta
    xv = x.value
    if xv.ndim != 2 or xv.shape[1] != state.channels:
        raise ShapeError(f"batch_norm expects [M, {state.channels}], got {xv.shape}")
    m = xv.shape[0]
    if m < 1:
        raise EmptyAxisError("batch_norm over an empty batch")
    gv, bv = gamma.value, beta.value
    tally(xv.size)

    if not state.training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xv - state.running_mean) * inv
        out = gv * xhat + bv

        def backward(g):
            return g * (gv * inv), _colsum(g * xhat), _colsum(g)

        return _emit(out, (x, gamma, beta), backward)

    mean = _colsum(xv) / m
    centred = xv - mean
    var = _colsum(centred * centred) / m
    denom = np.sqrt(var + state.eps)
    # a constant channel with eps == 0 normalises to zero instead of faulting
    inv = np.divide(1.0, denom, out=np.zeros_like(denom), where=denom > 0)
    xhat = centred * inv
    out = gv * xhat + bv

    unbiased = var * m / (m - 1) if m > 1 else var
    state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
    state.running_var = state.momentum * state.running_var + (1 - state.momentum) * unbiased

    def backward(g):
        dxhat = g * gv
        dgamma = _colsum(g * xhat)
        dx = inv * (dxhat - _colsum(dxhat) / m - xhat * (gv * dgamma / m))
        return dx, dgamma, _colsum(g)

    return _emit(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# shared MLP


@dataclass
class MLPParams:
    """A shared MLP layer: bias-free linear map followed by batch norm."""

    weight: np.ndarray
    bn: BatchNormState
    activation: str = "relu"

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, activation: str = "relu") -> MLPParams:
        w = rng.normal(0.0, np.sqrt(2.0 / d_in), size=(d_in, d_out))
        return cls(w, BatchNormState.create(d_out), activation)

    def n_params(self) -> int:
        return self.weight.size + self.bn.gamma.size + self.bn.beta.size


@dataclass
class MLPVars:
    weight: Var
    gamma: Var
    beta: Var


def shared_mlp(
    x: Var,
    weights: Var | np.ndarray,
    bn: BatchNormState,
    activation: str = "relu",
    gamma: Var | None = None,
    beta: Var | None = None,
) -> Var:
    """Position-wise linear map, batch norm over all positions, optional ReLU."""
    x, weights = const(x), const(weights)
    if x.shape[-1] != weights.shape[0]:
        raise ShapeError(f"shared_mlp: input last axis {x.shape} does not match weights {weights.shape}")
    lead = x.shape[:-1]
    h = matmul(reshape(x, (-1, x.shape[-1])), weights)
    h = batch_norm(h, bn, gamma, beta)
    if activation == "relu":
        h = relu(h)
    elif activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return reshape(h, (*lead, weights.shape[1]))


def apply_mlp(x: Var, p: MLPParams, v: MLPVars | None = None) -> Var:
    if v is None:
        return shared_mlp(x, p.weight, p.bn, p.activation)
    return shared_mlp(x, v.weight, p.bn, p.activation, v.gamma, v.beta)


def mlp_leaves(tape: Tape, prefix: str, p: MLPParams) -> MLPVars:
    return MLPVars(
        tape.leaf(f"{prefix}.weight", p.weight),
        tape.leaf(f"{prefix}.gamma", p.bn.gamma),
        tape.leaf(f"{prefix}.beta", p.bn.beta),
    )


def mlp_consts(p: MLPParams) -> MLPVars:
    return MLPVars(Var(p.weight), Var(p.bn.gamma), Var(p.bn.beta))
