# -*- coding: utf-8 -*-
"""Dense float tensors with a reverse-mode differentiation tape.

A Tensor wraps a contiguous numpy array. Differentiable primitives are
subclasses of :class:`Function`; applying one inside an active :class:`Tape`
records it, and :meth:`Tape.backward` replays the record in reverse to
accumulate gradients into the leaf tensors (usually :class:`Parameter`).

Outside a tape nothing is recorded, which is how inference runs.

Example::

    w = Parameter('w', [3.0])
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss, [w])
    w.grad  # array([6.])
"""
from __future__ import absolute_import

import contextlib
import threading

import numpy as np

from .core import ContractError, DimensionError, NumericError

PRECISIONS = {
    'single': np.float32,
    'double': np.float64,
}

_default = [np.float32]
_local = threading.local()


def get_dtype():
    """Float type for new tensors: this thread's precision block, else the process default."""
    return getattr(_local, 'dtype', None) or _default[0]


def get_precision():
    dtype = get_dtype()
    return next(name for name, dt in PRECISIONS.items() if dt == dtype)


def _lookup(name):
    try:
        return PRECISIONS[name]
    except KeyError:
        raise ContractError('unknown precision %r' % (name,))


def set_precision(name):
    """Select the process-wide default float type for new tensors ('single' or 'double')."""
    _default[0] = _lookup(name)


@contextlib.contextmanager
def precision(name):
    """Use the named float type in this thread only; other threads keep theirs."""
    dtype = _lookup(name)
    saved = getattr(_local, 'dtype', None)
    _local.dtype = dtype
    try:
        yield
    finally:
        _local.dtype = saved


def _tapes():
    stack = getattr(_local, 'tapes', None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape():
    """Return the innermost active tape of this thread, or None."""
    stack = _tapes()
    return stack[-1] if stack else None


class Tensor(object):
    """Dense float array plus the bookkeeping needed by the tape."""

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.ascontiguousarray(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return 'Tensor(shape=%s, dtype=%s%s)' % (
            self.shape, self.dtype.name, ', requires_grad=True' if self.requires_grad else '')

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise ContractError('item() needs a single element, got shape %s' % (self.shape,))
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        if g.shape != self.shape:
            raise DimensionError('gradient shape %s does not match %s' % (g.shape, self.shape))
        if self.grad is None:
            self.grad = np.array(g, dtype=self.dtype)
        else:
            self.grad += g

    def __add__(self, other):
        return Add.apply(self, _like(other, self))

    def __radd__(self, other):
        return Add.apply(_like(other, self), self)

    def __sub__(self, other):
        return Sub.apply(self, _like(other, self))

    def __rsub__(self, other):
        return Sub.apply(_like(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return Scale.apply(self, factor=float(other))
        return Mul.apply(self, _like(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return Scale.apply(self, factor=1.0 / float(other))
        return Div.apply(self, _like(other, self))

    def __neg__(self):
        return Scale.apply(self, factor=-1.0)

    def square(self):
        return Square.apply(self)

    def sqrt(self):
        return Sqrt.apply(self)

    def sum(self, axis=None):
        return Sum.apply(self, axis=axis)

    def mean(self, axis=None):
        return Mean.apply(self, axis=axis)

    def max(self, axis=None):
        return Max.apply(self, axis=axis)

    def min(self, axis=None):
        return Min.apply(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)


class Parameter(Tensor):
    """Trainable leaf tensor with a stable identifier; grad always matches value shape."""

    def __init__(self, name, data, dtype=None):
        Tensor.__init__(self, data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return 'Parameter(%r, shape=%s)' % (self.name, self.shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _like(x, ref):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=ref.dtype)


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError('%s contains non-finite values' % what)


class Function(object):
    """Base class of differentiable primitives.

    Subclasses implement forward(*arrays, **kwargs) -> ndarray and
    backward(grad) -> tuple with one ndarray (or None) per input.
    """

    def __init__(self, *inputs):
        self.inputs = inputs
        self.output = None

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs):
        inputs = tuple(as_tensor(x) for x in inputs)
        name = cls.__name__
        for t in inputs:
            if t._node is None:
                _check_finite(t.data, '%s input' % name)
        fn = cls(*inputs)
        out = fn.forward(*[t.data for t in inputs], **kwargs)
        _check_finite(out, '%s output' % name)
        requires_grad = any(t.requires_grad for t in inputs)
        result = Tensor(out, requires_grad=requires_grad, dtype=out.dtype)
        tape = current_tape()
        if requires_grad and tape is not None:
            fn.output = result
            result._node = fn
            result._tape = tape
            tape.record(fn)
        return result


def unbroadcast(grad, shape):
    """Sum out broadcast dimensions so grad matches shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for dim, n in enumerate(shape):
        if n == 1 and grad.shape[dim] != 1:
            grad = grad.sum(axis=dim, keepdims=True)
    return grad


class Tape(object):
    """Ordered record of executed primitives for one forward/backward pass.

    Recording order is a topological order, so replaying it backwards visits
    every node after all of its consumers.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        _tapes().remove(self)

    def __len__(self):
        return len(self.records)

    def record(self, fn):
        self.records.append(fn)

    def backward(self, loss, params=()):
        """Accumulate d(loss)/d(leaf) into every reachable leaf's grad.

        Parameters listed in params have their grads zeroed first, so values
        not on the path to loss end up with a zero gradient.
        """
        if loss.size != 1:
            raise ContractError('backward needs a scalar loss, got shape %s' % (loss.shape,))
        for p in params:
            p.zero_grad()
        seed = np.ones_like(loss.data)
        if loss._node is None:
            if loss.requires_grad:
                loss._accumulate(seed)
            return
        grads = {id(loss): seed}
        for fn in reversed(self.records):
            g = grads.pop(id(fn.output), None)
            if g is None:
                continue
            for t, gi in zip(fn.inputs, fn.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    t._accumulate(gi)
                elif id(t) in grads:
                    grads[id(t)] = grads[id(t)] + gi
                else:
                    grads[id(t)] = gi


def backward(loss, params=()):
    """Run the backward pass of loss on the tape that recorded it."""
    tape = getattr(loss, '_tape', None)
    if tape is None:
        tape = Tape()
    tape.backward(loss, params)


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a, b):
        return a / b

    def backward(self, grad):
        a, b = self.inputs
        ga = grad / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)


class Scale(Function):
    def forward(self, x, factor=1.0):
        self.factor = factor
        return x * x.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class Square(Function):
    def forward(self, x):
        return x * x

    def backward(self, grad):
        return (2 * grad * self.inputs[0].data,)


class Sqrt(Function):
    def forward(self, x):
        self.y = np.sqrt(x)
        return self.y

    def backward(self, grad):
        return (grad / (2 * self.y),)


class Sum(Function):
    def forward(self, x, axis=None):
        self.axis = axis
        return np.asarray(x.sum(axis=axis, keepdims=True) if axis is not None else x.sum())

    def backward(self, grad):
        x = self.inputs[0]
        return (np.broadcast_to(grad, x.shape).copy(),)


class Mean(Function):
    def forward(self, x, axis=None):
        self.axis = axis
        self.count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
        return np.asarray(x.mean(axis=axis, keepdims=True) if axis is not None else x.mean())

    def backward(self, grad):
        x = self.inputs[0]
        return (np.broadcast_to(grad / x.dtype.type(self.count), x.shape).copy(),)


class Max(Function):
    """Max reduction; tied maxima share the gradient equally."""
    reduce = staticmethod(np.max)

    def forward(self, x, axis=None):
        self.axis = axis
        self.y = np.asarray(self.reduce(x, axis=axis, keepdims=True))
        return self.y if axis is not None else self.y.reshape(())

    def backward(self, grad):
        x = self.inputs[0].data
        mask = (x == self.y).astype(x.dtype)
        mask /= mask.sum(axis=self.axis, keepdims=True)
        return (mask * grad.reshape(self.y.shape),)


class Min(Max):
    reduce = staticmethod(np.min)


class Reshape(Function):
    def forward(self, x, shape=()):
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


################################################################################
#                                    TESTS                                     #
################################################################################

def _fd_check(make_loss, leaves, eps=1e-6):
    with Tape() as tape:
        loss = make_loss()
    tape.backward(loss, leaves)
    for leaf in leaves:
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp = make_loss().item()
            flat[i] = orig - eps
            lm = make_loss().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            assert abs(leaf.grad.reshape(-1)[i] - fd) / max(1.0, abs(fd)) < 1e-7


def test_power_rule():
    with precision('double'):
        w = Parameter('w', [3.0])
        with Tape() as tape:
            loss = (w * w).sum()
        tape.backward(loss, [w])
        assert w.grad[0] == 6.0


def test_constant_loss_zero_grads():
    with precision('double'):
        w = Parameter('w', np.ones((2, 2)))
        loss = Tensor(5.0)
        backward(loss, [w])
        assert np.all(w.grad == 0)


def test_unreached_parameter_gets_zero_grad():
    with precision('double'):
        a = Parameter('a', [2.0])
        b = Parameter('b', [7.0])
        b.grad[:] = 99.0
        with Tape() as tape:
            loss = (a * 3.0).sum()
            _ = (b * 2.0).sum()
        tape.backward(loss, [a, b])
        assert a.grad[0] == 3.0
        assert b.grad[0] == 0.0


def test_non_scalar_loss():
    import pytest
    w = Parameter('w', np.ones(3))
    with Tape() as tape:
        y = w * 2.0
    with pytest.raises(ContractError):
        tape.backward(y, [w])


def test_accumulation_over_consumers():
    with precision('double'):
        x = Parameter('x', [1.5])
        with Tape() as tape:
            loss = (x * x + x * 4.0 + x).sum()
        tape.backward(loss, [x])
        assert x.grad[0] == 2 * 1.5 + 4.0 + 1.0


def test_elementwise_finite_differences():
    with precision('double'):
        rng = np.random.default_rng(3)
        a = Parameter('a', rng.uniform(0.5, 2.0, (3, 4)))
        b = Parameter('b', rng.uniform(0.5, 2.0, (1, 4)))
        _fd_check(lambda: ((a - b) * a / b + a.sqrt() - b.square() * 0.5).mean(), [a, b])
        _fd_check(lambda: a.max() + a.min() * 2.0 + (a - 1.0).sum(), [a])


def test_reductions_with_axis():
    with precision('double'):
        x = Parameter('x', np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            loss = (x.max(axis=1) * 3.0 + x.mean(axis=0)).sum()
        tape.backward(loss, [x])
        # each row max feeds 3 cells, each column mean feeds 2 cells
        expected = np.ones((2, 3))
        expected[:, 2] += 9.0
        assert np.allclose(x.grad, expected)


def test_non_finite_input_is_an_error():
    import pytest
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan]) + 1.0


def test_no_recording_outside_tape():
    w = Parameter('w', [1.0])
    y = w * 2.0
    assert y.requires_grad and y._node is None


def test_precision_context():
    assert get_dtype() == np.float32
    with precision('double'):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_precision_is_per_thread():
    seen = []
    entered, release = threading.Event(), threading.Event()

    def hold_double():
        with precision('double'):
            entered.set()
            release.wait(5)

    t = threading.Thread(target=hold_double)
    t.start()
    entered.wait(5)
    seen.append(get_dtype())
    release.set()
    t.join()
    assert seen == [np.float32]
    assert get_precision() == 'single'


def test_replay_is_deterministic():
    with precision('double'):
        rng = np.random.default_rng(0)
        w = Parameter('w', rng.normal(size=(5, 5)))
        grads = []
        for _ in range(2):
            with Tape() as tape:
                loss = ((w * w).sqrt() * w).mean()
            tape.backward(loss, [w])
            grads.append(w.grad.copy())
        assert np.array_equal(grads[0], grads[1])
