# -*- coding: utf-8 -*-
"""Binary PGM (P5) rasters and raw float dumps."""
from __future__ import absolute_import

import re

import numpy as np

from .core import FormatError, NeedData, PackError

_TOKEN = re.compile(br'\s*(?:#[^\n]*\n\s*)*(\S+)')


def to_bytes(image, lo=0.0, hi=1.0):
    """Map [lo, hi] linearly onto 0..255, clipping outside values."""
    image = np.asarray(image, dtype=np.float64)
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.uint8)
    scaled = (image - lo) / (hi - lo)
    return np.rint(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)


def symmetric_range(values):
    """(lo, hi) centred on zero that covers values; (-1, 1) when all are zero."""
    m = float(np.abs(values).max()) if np.size(values) else 0.0
    return (-m, m) if m > 0 else (-1.0, 1.0)


def save_pgm(path, image, lo=0.0, hi=1.0):
    """Write a 2-d array as an 8-bit P5 raster, mapping [lo, hi] to [0, 255]."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise PackError('PGM needs a 2-d image, got shape %s' % (image.shape,))
    h, w = image.shape
    with open(path, 'wb') as f:
        f.write(b'P5\n%d %d\n255\n' % (w, h))
        f.write(to_bytes(image, lo, hi).tobytes())


def load_pgm(path):
    """Read a P5 raster into float64 intensities in [0, 1]."""
    with open(path, 'rb') as f:
        raw = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise NeedData('truncated PGM header', pos)
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b'P5':
        raise FormatError('%s: not a binary PGM (magic %r)' % (path, tokens[0]), 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError('%s: bad PGM header' % path, pos)
    if not 0 < maxval <= 255 or w < 1 or h < 1:
        raise FormatError('%s: unsupported PGM geometry %dx%d maxval %d' % (path, w, h, maxval), pos)
    pos += 1  # single whitespace byte ends the header
    data = raw[pos:pos + w * h]
    if len(data) != w * h:
        raise NeedData('got %d, %d needed' % (len(data), w * h), pos)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


def save_raw(path, array):
    """Dump an array as little-endian float64, row-major, no header."""
    with open(path, 'wb') as f:
        f.write(np.ascontiguousarray(array, dtype='<f8').tobytes())


def load_raw(path, shape):
    data = np.fromfile(path, dtype='<f8')
    if data.size != int(np.prod(shape)):
        raise FormatError('%s: %d values, %d expected for shape %s' % (path, data.size, int(np.prod(shape)), shape))
    return data.reshape(shape).astype(np.float64)


def test_pgm_round_trip(tmp_path):
    path = str(tmp_path / 'a.pgm')
    img = np.arange(12, dtype=np.float64).reshape(3, 4) / 11.0
    save_pgm(path, img)
    with open(path, 'rb') as f:
        assert f.read(11) == b'P5\n4 3\n255\n'
    back = load_pgm(path)
    assert back.shape == (3, 4)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_pgm_comments_and_maxval(tmp_path):
    path = tmp_path / 'c.pgm'
    path.write_bytes(b'P5\n# made by hand\n2 1\n# max\n15\n\x00\x0f')
    assert list(load_pgm(str(path))[0]) == [0.0, 1.0]


def test_pgm_errors(tmp_path):
    import pytest
    path = tmp_path / 'e.pgm'
    path.write_bytes(b'P2\n2 1\n255\n01')
    with pytest.raises(FormatError):
        load_pgm(str(path))
    path.write_bytes(b'P5\n2 2\n255\n\x00')
    with pytest.raises(NeedData):
        load_pgm(str(path))
    path.write_bytes(b'P5\n2 2\n65535\n' + b'\x00' * 8)
    with pytest.raises(FormatError):
        load_pgm(str(path))
    with pytest.raises(PackError):
        save_pgm(str(path), np.zeros(3))


def test_scaling():
    assert list(to_bytes([-1.0, 0.0, 0.5, 1.0, 2.0])) == [0, 0, 128, 255, 255]
    assert list(to_bytes([-2.0, 0.0, 2.0], *symmetric_range([-2.0, 1.0]))) == [0, 128, 255]
    assert symmetric_range(np.zeros(3)) == (-1.0, 1.0)
    assert list(to_bytes([3.0, 3.0], 0.0, 0.0)) == [0, 0]


def test_raw_round_trip(tmp_path):
    path = str(tmp_path / 'f.bin')
    a = np.random.default_rng(0).normal(size=(2, 3, 4))
    save_raw(path, a)
    assert np.array_equal(load_raw(path, (2, 3, 4)), a)
    import pytest
    with pytest.raises(FormatError):
        load_raw(path, (2, 3, 5))
