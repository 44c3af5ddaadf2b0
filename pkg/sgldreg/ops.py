# -*- coding: utf-8 -*-
"""Network primitives: convolution, activation, resampling and channel plumbing.

All image tensors use the batch x channels x height x width layout.
"""
from __future__ import absolute_import

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .core import ConfigError, DimensionError
from .tensor import Function

LEAKY_SLOPE = 0.2

# names of backward rules to corrupt, used by the self test's fault injection
FAULTS = set()


@contextlib.contextmanager
def inject_faults(names):
    saved = set(FAULTS)
    FAULTS.update(names)
    try:
        yield
    finally:
        FAULTS.clear()
        FAULTS.update(saved)


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


class Conv2d(Function):
    """Cross-correlation with zero padding plus a per-channel bias."""

    def forward(self, x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError('conv2d needs 4-d input and kernel, got %s and %s' % (x.shape, w.shape))
        if x.shape[1] != w.shape[1]:
            raise DimensionError('input has %d channels, kernel expects %d' % (x.shape[1], w.shape[1]))
        if b.shape != (w.shape[0],):
            raise DimensionError('bias shape %s does not match %d output channels' % (b.shape, w.shape[0]))
        if stride < 1 or padding < 0:
            raise ConfigError('invalid stride %d / padding %d' % (stride, padding))
        kh, kw = w.shape[2:]
        ho = conv_output_size(x.shape[2], kh, stride, padding)
        wo = conv_output_size(x.shape[3], kw, stride, padding)
        if ho < 1 or wo < 1:
            raise DimensionError('kernel %dx%d does not fit input %s' % (kh, kw, x.shape))
        self.stride, self.padding = stride, padding
        if padding:
            x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        self.padded_shape = x.shape
        # (N, Cin, Ho, Wo, kh, kw)
        self.cols = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(self.cols, w, axes=([1, 4, 5], [1, 2, 3]))
        return out.transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(self, grad):
        x, w, _ = self.inputs
        s, p = self.stride, self.padding
        kh, kw = w.shape[2:]
        ho, wo = grad.shape[2:]
        gw = np.tensordot(grad, self.cols, axes=([0, 2, 3], [0, 2, 3]))
        gb = grad.sum(axis=(0, 2, 3))
        gcols = np.tensordot(grad, w.data, axes=([1], [0]))
        gx = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        h, wd = x.shape[2:]
        return gx[:, :, p:p + h, p:p + wd], gw, gb


def conv2d(x, kernel, bias, stride=1, padding=0):
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


class LeakyRelu(Function):
    def forward(self, x, slope=LEAKY_SLOPE):
        if not 0 < slope < 1:
            raise ConfigError('leaky slope must be in (0, 1), got %r' % slope)
        self.slope = slope
        return np.where(x >= 0, x, x * x.dtype.type(slope))

    def backward(self, grad):
        x = self.inputs[0].data
        g = np.where(x >= 0, grad, grad * grad.dtype.type(self.slope))
        if 'leaky_relu' in FAULTS:
            g = g * 1.5
        return (g,)


def leaky_relu(x, slope=LEAKY_SLOPE):
    return LeakyRelu.apply(x, slope=slope)


class Upsample2x(Function):
    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError('upsample needs a 4-d tensor, got %s' % (x.shape,))
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        n, c, h, w = self.inputs[0].shape
        return (grad.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)


def upsample2x_nearest(x):
    return Upsample2x.apply(x)


class ConcatChannels(Function):
    def forward(self, a, b):
        if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise DimensionError('cannot concatenate %s and %s along channels' % (a.shape, b.shape))
        self.split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad):
        return grad[:, :self.split], grad[:, self.split:]


def concat_channels(a, b):
    return ConcatChannels.apply(a, b)


class NarrowChannels(Function):
    def forward(self, x, start=0, stop=None):
        self.index = slice(start, stop)
        return x[:, self.index]

    def backward(self, grad):
        g = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        g[:, self.index] = grad
        return (g,)


def narrow_channels(x, start, stop):
    """Channels start:stop of x; the inverse of concat_channels."""
    return NarrowChannels.apply(x, start=start, stop=stop)


class BoxSum(Function):
    """Sum over a square odd window centred on each pixel, zero padded."""

    def forward(self, x, window=9):
        if window < 1 or window % 2 == 0:
            raise ConfigError('window must be a positive odd size, got %d' % window)
        self.window = window
        return _box_sum(x, window)

    def backward(self, grad):
        # a centred odd window with zero padding is self-adjoint
        return (_box_sum(grad, self.window),)


def _box_sum(x, window):
    size = (1,) * (x.ndim - 2) + (window, window)
    return ndimage.uniform_filter(x, size=size, mode='constant', cval=0.0) * x.dtype.type(window * window)


def box_sum(x, window):
    return BoxSum.apply(x, window=window)


def box_count(shape, window, dtype=np.float64):
    """Number of in-image pixels covered by the window at each position."""
    ones = np.ones(shape, dtype=np.float64)
    return np.rint(_box_sum(ones, window)).astype(dtype)


################################################################################
#                                    TESTS                                     #
################################################################################

def _grad_err(make_loss, leaves, eps=1e-6):
    from .gradcheck import grad_check
    return grad_check(make_loss, leaves, eps=eps)


def test_conv2d_identity_kernel():
    from .tensor import Tensor
    out = conv2d(Tensor([[[[5.0]]]]), Tensor([[[[1.0]]]]), Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 5.0


def test_conv2d_strided_shape():
    from .tensor import Tensor
    out = conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), stride=2, padding=1)
    assert out.shape == (1, 1, 2, 2)


def test_conv2d_hand_summed():
    from .tensor import Tensor
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]), padding=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == 6.0


def test_conv2d_centre_kernel_is_identity():
    from .tensor import Tensor, precision
    with precision('double'):
        x = np.random.default_rng(1).normal(size=(2, 3, 5, 6))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)), padding=1)
        assert np.array_equal(out.data, x)


def test_conv2d_channel_mismatch():
    import pytest
    from .tensor import Tensor
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor([0.0]))


def test_conv2d_gradients():
    from .tensor import Parameter, precision
    with precision('double'):
        rng = np.random.default_rng(2)
        for stride in (1, 2):
            x = Parameter('x', rng.normal(size=(2, 3, 6, 6)))
            w = Parameter('w', rng.normal(size=(4, 3, 3, 3)))
            b = Parameter('b', rng.normal(size=4))
            err = _grad_err(lambda: (conv2d(x, w, b, stride=stride, padding=1).square()).mean(), [x, w, b])
            assert err < 1e-7


def test_leaky_relu_values_and_grad():
    from .tensor import Parameter, Tape, Tensor, precision
    assert leaky_relu(Tensor([2.0]), 0.2).data[0] == 2.0
    assert np.isclose(leaky_relu(Tensor([-1.0]), 0.2).data[0], -0.2)
    with precision('double'):
        x = Parameter('x', [-3.0])
        with Tape() as tape:
            loss = leaky_relu(x, 0.2).sum()
        tape.backward(loss, [x])
        eps = 1e-6
        fd = (0.2 * (-3.0 + eps) - 0.2 * (-3.0 - eps)) / (2 * eps)
        assert abs(x.grad[0] - 0.2) < 1e-12
        assert abs(x.grad[0] - fd) < 1e-8


def test_leaky_relu_fault_injection():
    from .tensor import Parameter, precision
    with precision('double'):
        x = Parameter('x', np.random.default_rng(0).uniform(0.5, 1.0, 8) * np.array([1, -1] * 4))
        with inject_faults(['leaky_relu']):
            assert _grad_err(lambda: leaky_relu(x).square().sum(), [x]) > 1e-2
        assert _grad_err(lambda: leaky_relu(x).square().sum(), [x]) < 1e-7


def test_upsample():
    from .tensor import Parameter, Tape, Tensor
    out = upsample2x_nearest(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data[0, 0]
    assert np.array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    assert np.all(upsample2x_nearest(Tensor(np.full((1, 2, 3, 3), 0.7))).data == np.float32(0.7))
    x = Parameter('x', np.zeros((1, 1, 2, 2)))
    with Tape() as tape:
        loss = upsample2x_nearest(x).sum()
    tape.backward(loss, [x])
    assert np.all(x.grad == 4.0)


def test_concat_channels():
    import pytest
    from .tensor import Parameter, Tape, Tensor, precision
    assert concat_channels(Tensor(np.zeros((1, 32, 8, 8))), Tensor(np.zeros((1, 32, 8, 8)))).shape == (1, 64, 8, 8)
    x = Tensor(np.arange(12.0).reshape(1, 3, 2, 2))
    assert np.array_equal(concat_channels(x, Tensor(np.zeros((1, 0, 2, 2)))).data, x.data)
    with pytest.raises(DimensionError):
        concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5))))
    with precision('double'):
        rng = np.random.default_rng(4)
        a = Parameter('a', rng.normal(size=(1, 2, 3, 3)))
        b = Parameter('b', rng.normal(size=(1, 3, 3, 3)))
        up = rng.normal(size=(1, 5, 3, 3))
        with Tape() as tape:
            loss = (concat_channels(a, b) * up).sum()
        tape.backward(loss, [a, b])
        assert np.array_equal(a.grad, up[:, :2])
        assert np.array_equal(b.grad, up[:, 2:])


def test_concat_then_narrow_round_trip():
    from .tensor import Parameter, Tape, precision
    with precision('double'):
        rng = np.random.default_rng(5)
        a = Parameter('a', rng.normal(size=(2, 2, 3, 3)))
        b = Parameter('b', rng.normal(size=(2, 1, 3, 3)))
        wa, wb = rng.normal(size=a.shape), rng.normal(size=b.shape)
        with Tape() as tape:
            c = concat_channels(a, b)
            loss = (narrow_channels(c, 0, 2) * wa).sum() + (narrow_channels(c, 2, 3) * wb).sum()
        tape.backward(loss, [a, b])
        assert np.array_equal(a.grad, wa)
        assert np.array_equal(b.grad, wb)


def test_box_sum_and_count():
    from .tensor import Parameter, Tensor, precision
    counts = box_count((1, 1, 4, 4), 3)
    assert counts[0, 0, 0, 0] == 4 and counts[0, 0, 1, 1] == 9 and counts[0, 0, 0, 1] == 6
    with precision('double'):
        assert np.allclose(box_sum(Tensor(np.ones((1, 1, 4, 4))), 3).data, counts)
        x = Parameter('x', np.random.default_rng(6).normal(size=(1, 1, 5, 5)))
        assert _grad_err(lambda: (box_sum(x, 3).square()).mean(), [x]) < 1e-7
