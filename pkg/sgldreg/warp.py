# -*- coding: utf-8 -*-
"""Spatial transformer: resample a moving image through a displacement field.

A deformation field has two channels, (dx, dy), in pixels. Output pixel p
samples the input at p + field(p): dx moves along columns (width), dy along
rows (height). Sample locations outside the image are clamped to the border.
"""
from __future__ import absolute_import

import numpy as np

from .core import DimensionError
from .tensor import Function, as_tensor


def _grid(h, w, dtype):
    gy, gx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing='ij')
    return gx, gy


def _corners(coord, n):
    """Lower corner index, upper corner index, weight and in-range mask along one axis."""
    inside = (coord >= 0) & (coord <= n - 1)
    coord = np.clip(coord, 0, n - 1)
    lo = np.minimum(np.floor(coord), max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    return lo.astype(np.intp), hi.astype(np.intp), coord - lo, inside


class WarpBilinear(Function):
    """Bilinear resampling of image (N, C, H, W) at positions displaced by field (N, 2, H, W)."""

    def forward(self, image, field):
        if image.ndim != 4 or field.ndim != 4 or field.shape[1] != 2:
            raise DimensionError('warp needs image (N,C,H,W) and field (N,2,H,W), got %s and %s'
                                 % (image.shape, field.shape))
        if image.shape[0] != field.shape[0] or image.shape[2:] != field.shape[2:]:
            raise DimensionError('field %s does not match image %s' % (field.shape, image.shape))
        n, c, h, w = image.shape
        dtype = image.dtype
        gx, gy = _grid(h, w, dtype)
        x0, x1, wx, self.inside_x = _corners(gx + field[:, 0].astype(dtype), w)
        y0, y1, wy, self.inside_y = _corners(gy + field[:, 1].astype(dtype), h)
        nn = np.arange(n)[:, None, None]
        # gathered corners, each (N, C, H, W)
        ia = image[nn, :, y0, x0].transpose(0, 3, 1, 2)
        ib = image[nn, :, y0, x1].transpose(0, 3, 1, 2)
        ic = image[nn, :, y1, x0].transpose(0, 3, 1, 2)
        id_ = image[nn, :, y1, x1].transpose(0, 3, 1, 2)
        wx, wy = wx[:, None], wy[:, None]
        self.x0, self.x1, self.y0, self.y1 = x0, x1, y0, y1
        self.wx, self.wy = wx, wy
        self.ia, self.ib, self.ic, self.id = ia, ib, ic, id_
        one = dtype.type(1)
        return (one - wy) * ((one - wx) * ia + wx * ib) + wy * ((one - wx) * ic + wx * id_)

    def backward(self, grad):
        image, field = self.inputs
        n, c, h, w = image.shape
        one = grad.dtype.type(1)
        wx, wy = self.wx, self.wy

        gimg = np.zeros(n * c * h * w, dtype=np.float64)
        base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * h
        for yy, xx, weight in ((self.y0, self.x0, (one - wy) * (one - wx)),
                               (self.y0, self.x1, (one - wy) * wx),
                               (self.y1, self.x0, wy * (one - wx)),
                               (self.y1, self.x1, wy * wx)):
            idx = (base + yy[:, None]) * w + xx[:, None]
            gimg += np.bincount(idx.ravel(), weights=(grad * weight).ravel(), minlength=gimg.size)
        gimg = gimg.reshape(image.shape).astype(grad.dtype)

        # right-continuous derivative in x and y; zero where the sample was clamped
        dx = (one - wy) * (self.ib - self.ia) + wy * (self.id - self.ic)
        dy = (one - wx) * (self.ic - self.ia) + wx * (self.id - self.ib)
        gfield = np.empty(field.shape, dtype=grad.dtype)
        gfield[:, 0] = (grad * dx).sum(axis=1) * self.inside_x
        gfield[:, 1] = (grad * dy).sum(axis=1) * self.inside_y
        return gimg, gfield


def _batched_field(field):
    field = as_tensor(field)
    if field.ndim == 3:
        field = field.reshape((1,) + field.shape)
    return field


def warp_bilinear(image, field):
    """Warp image (N,C,H,W) by field (N,2,H,W), or a single (2,H,W) field for N == 1."""
    image = as_tensor(image)
    return WarpBilinear.apply(image, _batched_field(field))


def warp_nearest(labels, field):
    """Warp an integer label map (H,W) or batch (N,H,W) with nearest-neighbour lookup.

    Each output pixel takes the label at round(p + field(p)) clamped to the image,
    so no label absent from the input can appear.
    """
    labels = np.asarray(labels)
    field = np.asarray(field, dtype=np.float64)
    single = labels.ndim == 2
    if single:
        labels = labels[None]
    if field.ndim == 3:
        field = field[None]
    if field.shape[0] != labels.shape[0] or field.shape[2:] != labels.shape[1:]:
        raise DimensionError('field %s does not match labels %s' % (field.shape, labels.shape))
    n, h, w = labels.shape
    gx, gy = _grid(h, w, np.float64)
    xi = np.clip(np.floor(gx + field[:, 0] + 0.5), 0, w - 1).astype(np.intp)
    yi = np.clip(np.floor(gy + field[:, 1] + 0.5), 0, h - 1).astype(np.intp)
    out = labels[np.arange(n)[:, None, None], yi, xi]
    return out[0] if single else out


class FieldGradient(Function):
    """Forward differences of each field component along x and y.

    Input (N, 2, H, W); output (N, 2, 2, H, W) indexed [n, component, axis]
    with axis 0 = d/dx (columns) and axis 1 = d/dy (rows). The difference at
    the last column / row is zero.
    """

    def forward(self, field):
        if field.ndim != 4:
            raise DimensionError('field_gradient needs (N,C,H,W), got %s' % (field.shape,))
        out = np.zeros(field.shape[:2] + (2,) + field.shape[2:], dtype=field.dtype)
        out[:, :, 0, :, :-1] = field[:, :, :, 1:] - field[:, :, :, :-1]
        out[:, :, 1, :-1, :] = field[:, :, 1:, :] - field[:, :, :-1, :]
        return out

    def backward(self, grad):
        g = np.zeros(self.inputs[0].shape, dtype=grad.dtype)
        gx = grad[:, :, 0, :, :-1]
        gy = grad[:, :, 1, :-1, :]
        g[:, :, :, 1:] += gx
        g[:, :, :, :-1] -= gx
        g[:, :, 1:, :] += gy
        g[:, :, :-1, :] -= gy
        return (g,)


def field_gradient(field):
    """Finite-difference gradient of a field: (2,H,W) -> (2,2,H,W), (N,2,H,W) -> (N,2,2,H,W)."""
    field = as_tensor(field)
    if field.ndim == 3:
        out = FieldGradient.apply(field.reshape((1,) + field.shape))
        return out.reshape(out.shape[1:])
    return FieldGradient.apply(field)


################################################################################
#                                    TESTS                                     #
################################################################################

def _ramp(h, w):
    return np.tile(np.arange(w, dtype=np.float64), (h, 1))


def test_zero_field_is_identity():
    from .tensor import Tensor
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(2, 1, 7, 9)).astype(np.float32)
    out = warp_bilinear(Tensor(image), np.zeros((2, 2, 7, 9)))
    assert np.array_equal(out.data, image)


def test_half_pixel_shift_on_ramp():
    from .tensor import precision
    with precision('double'):
        image = _ramp(5, 8)[None, None]
        field = np.zeros((2, 5, 8))
        field[0] = 0.5
        out = warp_bilinear(image, field).data[0, 0]
        assert np.allclose(out[:, :-1], _ramp(5, 8)[:, :-1] + 0.5)
        assert np.all(out[:, -1] == 7.0)


def test_integer_shift():
    from .tensor import precision
    with precision('double'):
        image = np.random.default_rng(1).uniform(size=(1, 1, 6, 6))
        field = np.zeros((2, 6, 6))
        field[0] = 1.0
        out = warp_bilinear(image, field).data[0, 0]
        assert np.array_equal(out[:, :-1], image[0, 0, :, 1:])
        assert np.array_equal(out[:, -1], image[0, 0, :, -1])


def test_output_range_is_convex():
    from .tensor import precision
    rng = np.random.default_rng(2)
    with precision('double'):
        for _ in range(1000):
            image = rng.uniform(-1, 3, size=(1, 1, 5, 5))
            field = rng.normal(scale=3.0, size=(2, 5, 5))
            out = warp_bilinear(image, field).data
            assert out.min() >= image.min() - 1e-12
            assert out.max() <= image.max() + 1e-12


def test_warp_gradients_off_kinks():
    from .gradcheck import grad_check
    from .tensor import Parameter, precision
    with precision('double'):
        rng = np.random.default_rng(3)
        image = Parameter('image', rng.uniform(size=(1, 1, 6, 6)))
        # quarter-pixel offsets keep every sample off the integer grid and inside the image
        field = Parameter('field', 0.25 + rng.integers(-1, 1, size=(1, 2, 6, 6)) * 0.5)
        field.data[:, 0, :, 0] = 0.25
        field.data[:, 0, :, -1] = -0.25
        field.data[:, 1, 0, :] = 0.25
        field.data[:, 1, -1, :] = -0.25
        weights = rng.normal(size=(1, 1, 6, 6))
        err = grad_check(lambda: (warp_bilinear(image, field) * weights).sum(), [image, field])
        assert err < 1e-5


def test_non_finite_field():
    import pytest
    from .core import NumericError
    field = np.zeros((2, 3, 3))
    field[0, 1, 1] = np.inf
    with pytest.raises(NumericError):
        warp_bilinear(np.zeros((1, 1, 3, 3)), field)


def test_warp_nearest():
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 4, size=(6, 7))
    assert np.array_equal(warp_nearest(labels, np.zeros((2, 6, 7))), labels)
    field = np.zeros((2, 6, 7))
    field[0] = 1.0
    out = warp_nearest(labels, field)
    assert np.array_equal(out[:, :-1], labels[:, 1:])
    assert np.array_equal(out[:, -1], labels[:, -1])
    for _ in range(50):
        out = warp_nearest(labels, rng.normal(scale=4.0, size=(2, 6, 7)))
        assert set(np.unique(out)) <= set(np.unique(labels))


def test_warp_nearest_preserves_area_under_translation():
    labels = np.zeros((12, 12), dtype=np.int64)
    labels[3:6, 4:8] = 1
    labels[7:9, 2:5] = 2
    field = np.zeros((2, 12, 12))
    field[0], field[1] = -2.0, 1.0
    out = warp_nearest(labels, field)
    for k in (1, 2):
        assert (out == k).sum() == (labels == k).sum()


def test_field_gradient():
    from .tensor import Parameter, precision
    assert np.all(field_gradient(np.full((2, 4, 5), 3.0)).data == 0)
    field = np.zeros((2, 4, 5))
    field[0] = _ramp(4, 5)
    g = field_gradient(field).data
    assert g.shape == (2, 2, 4, 5)
    assert np.all(g[0, 0, :, :-1] == 1.0)
    assert np.all(g[0, 0, :, -1] == 0.0)

    rng = np.random.default_rng(5)
    field = rng.normal(size=(2, 4, 5))
    with precision('double'):
        g = field_gradient(field).data
    expected = np.zeros((2, 2, 4, 5))
    for c in range(2):
        for y in range(4):
            for x in range(5):
                if x + 1 < 5:
                    expected[c, 0, y, x] = field[c, y, x + 1] - field[c, y, x]
                if y + 1 < 4:
                    expected[c, 1, y, x] = field[c, y + 1, x] - field[c, y, x]
    assert np.array_equal(g, expected)

    from .gradcheck import grad_check
    with precision('double'):
        f = Parameter('f', rng.normal(size=(1, 2, 4, 5)))
        weights = rng.normal(size=(1, 2, 2, 4, 5))
        assert grad_check(lambda: (field_gradient(f) * weights).sum(), [f]) < 1e-8
