# -*- coding: utf-8 -*-
"""IDX array files (the MNIST distribution format).

Layout, all big-endian::

    u16  zero
    u8   element type (see IDX_TYPES)
    u8   number of dimensions
    u32  size of each dimension
    ...  elements, row-major
"""
from __future__ import absolute_import

import functools
import operator
import os
import struct

import numpy as np

from .core import FormatError, Header, NeedData, PackError, read_exact, remaining_bytes

IDX_UBYTE = 0x08
IDX_BYTE = 0x09
IDX_SHORT = 0x0B
IDX_INT = 0x0C
IDX_FLOAT = 0x0D
IDX_DOUBLE = 0x0E

IDX_TYPES = {
    IDX_UBYTE: np.dtype('>u1'),
    IDX_BYTE: np.dtype('>i1'),
    IDX_SHORT: np.dtype('>i2'),
    IDX_INT: np.dtype('>i4'),
    IDX_FLOAT: np.dtype('>f4'),
    IDX_DOUBLE: np.dtype('>f8'),
}

_TYPE_CODES = dict((dt.newbyteorder('=').str[1:], code) for code, dt in IDX_TYPES.items())

# canonical MNIST magics
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxHdr(Header):
    """IDX magic: two zero bytes, element type and rank."""
    __hdr__ = (
        ('zero', 'H', 0),
        ('type', 'B', IDX_UBYTE),
        ('ndim', 'B', 1),
    )

    @property
    def magic(self):
        return (self.zero << 16) | (self.type << 8) | self.ndim


class Reader(object):
    """IDX reader over a binary file object.

    Attributes:
        shape: dimension sizes from the header.
        dtype: element type (big-endian numpy dtype).
    """

    def __init__(self, fileobj):
        self.name = getattr(fileobj, 'name', '<%s>' % fileobj.__class__.__name__)
        self.__f = fileobj
        hdr = IdxHdr(read_exact(fileobj, IdxHdr.__hdr_len__, 0))
        if hdr.zero != 0 or hdr.type not in IDX_TYPES:
            raise FormatError('%s: bad IDX magic 0x%08x' % (self.name, hdr.magic), 0)
        if hdr.ndim == 0:
            raise FormatError('%s: IDX rank must be at least 1' % self.name, 3)
        self.magic = hdr.magic
        self.dtype = IDX_TYPES[hdr.type]
        self._offset = len(hdr)
        dims = read_exact(fileobj, 4 * hdr.ndim, self._offset)
        self.shape = struct.unpack('>%dI' % hdr.ndim, dims)
        self._offset += len(dims)

    def read(self):
        """Return the elements as a native-endian array of self.shape."""
        nbytes = functools.reduce(operator.mul, self.shape, 1) * self.dtype.itemsize
        left = remaining_bytes(self.__f)
        if left is not None and nbytes > left:
            raise NeedData('%s: IDX payload %s needs %d bytes, %d left in file' % (self.name, self.shape, nbytes, left),
                           self._offset)
        buf = read_exact(self.__f, nbytes, self._offset)
        end = self._offset + len(buf)
        if self.__f.read(1):
            raise FormatError('%s: trailing bytes after IDX payload' % self.name, end)
        arr = np.frombuffer(buf, dtype=self.dtype).reshape(self.shape)
        return arr.astype(self.dtype.newbyteorder('='))


class Writer(object):
    """IDX writer; the element type follows the array dtype."""

    def __init__(self, fileobj):
        self.__f = fileobj

    def write(self, array):
        array = np.asarray(array)
        try:
            code = _TYPE_CODES[array.dtype.newbyteorder('=').str[1:]]
        except KeyError:
            raise PackError('no IDX element type for dtype %s' % array.dtype)
        if array.ndim == 0 or array.ndim > 255:
            raise PackError('IDX rank must be in 1..255, got %d' % array.ndim)
        self.__f.write(bytes(IdxHdr(type=code, ndim=array.ndim)))
        try:
            self.__f.write(struct.pack('>%dI' % array.ndim, *array.shape))
        except struct.error as e:
            raise PackError('IDX dimensions %s: %s' % (array.shape, e))
        self.__f.write(np.ascontiguousarray(array, dtype=IDX_TYPES[code]).tobytes())


def load_idx(path, scale=True):
    """Read an IDX file.

    With scale, unsigned-byte arrays of rank >= 3 (image stacks) are returned
    as float64 intensities in [0, 1]; everything else keeps its element type.
    """
    with open(path, 'rb') as f:
        arr = Reader(f).read()
    if scale and arr.dtype == np.uint8 and arr.ndim >= 3:
        return arr.astype(np.float64) / 255.0
    return arr


def save_idx(path, array):
    with open(path, 'wb') as f:
        Writer(f).write(array)


def companion_labels_path(path):
    """The label file shipped next to an MNIST image file, or None."""
    head, tail = os.path.split(path)
    for a, b in (('images-idx3', 'labels-idx1'), ('images.idx3', 'labels.idx1'), ('images', 'labels')):
        if a in tail:
            candidate = os.path.join(head, tail.replace(a, b))
            if os.path.exists(candidate):
                return candidate
    return None


def load_mnist(path):
    """Load an MNIST image file and, when present, its companion label file.

    Returns:
        (images, labels): float images (n, H, W) in [0, 1]; labels (n,) or None.
    """
    images = load_idx(path)
    if images.ndim != 3:
        raise FormatError('%s: expected an image stack of rank 3, got rank %d' % (path, images.ndim))
    labels = None
    lpath = companion_labels_path(path)
    if lpath:
        labels = load_idx(lpath)
        if labels.shape != images.shape[:1]:
            raise FormatError('%s: %d labels for %d images' % (lpath, labels.shape[0], images.shape[0]))
    return images, labels


################################################################################
#                                    TESTS                                     #
################################################################################

def test_image_fixture(tmp_path):
    pixels = bytes(range(256)) * 3 + bytes(range(16))
    path = tmp_path / 'one-image'
    path.write_bytes(b'\x00\x00\x08\x03' + b'\x00\x00\x00\x01' + b'\x00\x00\x00\x1c' * 2 + pixels)
    with open(str(path), 'rb') as f:
        r = Reader(f)
        assert r.magic == IMAGES_MAGIC
        assert r.shape == (1, 28, 28)
    images = load_idx(str(path))
    assert images.shape == (1, 28, 28)
    assert images[0, 0, 1] == 1 / 255.0
    assert images[0, 9, 3] == 1.0
    assert load_idx(str(path), scale=False)[0, 0, 5] == 5


def test_label_fixture(tmp_path):
    path = tmp_path / 'labels'
    path.write_bytes(b'\x00\x00\x08\x01\x00\x00\x00\x03\x05\x00\x05')
    labels = load_idx(str(path))
    assert labels.dtype == np.uint8
    assert list(labels) == [5, 0, 5]


def test_bad_magic_and_truncation(tmp_path):
    import pytest
    bad = tmp_path / 'bad'
    bad.write_bytes(b'\x01\x00\x08\x01\x00\x00\x00\x01\x05')
    with pytest.raises(FormatError, match='offset 0'):
        load_idx(str(bad))
    bad.write_bytes(b'\x00\x00\x07\x01\x00\x00\x00\x01\x05')
    with pytest.raises(FormatError):
        load_idx(str(bad))
    short = tmp_path / 'short'
    short.write_bytes(b'\x00\x00\x08\x01\x00\x00\x00\x04\x05')
    with pytest.raises(NeedData, match='offset 8'):
        load_idx(str(short))
    short.write_bytes(b'\x00\x00')
    with pytest.raises(NeedData):
        load_idx(str(short))


def test_all_element_types(tmp_path):
    rng = np.random.default_rng(0)
    for dt in ('u1', 'i1', 'i2', 'i4', 'f4', 'f8'):
        a = (rng.normal(size=(2, 3)) * 50).astype(dt)
        path = str(tmp_path / dt)
        save_idx(path, a)
        b = load_idx(path)
        assert b.dtype == a.dtype and np.array_equal(a, b)


def test_writer_rejects_unsupported(tmp_path):
    import io
    import pytest
    with pytest.raises(PackError):
        Writer(io.BytesIO()).write(np.zeros(3, dtype=np.complex128))
    with pytest.raises(PackError):
        Writer(io.BytesIO()).write(np.float64(1.0))


def test_mnist_companion_labels(tmp_path):
    images = (np.arange(2 * 4 * 4) % 256).astype(np.uint8).reshape(2, 4, 4)
    save_idx(str(tmp_path / 'train-images-idx3-ubyte'), images)
    save_idx(str(tmp_path / 'train-labels-idx1-ubyte'), np.array([5, 3], dtype=np.uint8))
    imgs, labels = load_mnist(str(tmp_path / 'train-images-idx3-ubyte'))
    assert np.array_equal(imgs, images / 255.0)
    assert list(labels) == [5, 3]
    save_idx(str(tmp_path / 'other-images'), images)
    assert load_mnist(str(tmp_path / 'other-images'))[1] is None


def test_huge_dimensions_rejected_before_reading(tmp_path):
    import pytest
    bad = tmp_path / 'huge'
    # three dims of 0xffffffff uint8 elements, one payload byte
    bad.write_bytes(b'\x00\x00\x08\x03' + b'\xff\xff\xff\xff' * 3 + b'\x05')
    with pytest.raises(FormatError, match='offset 16'):
        load_idx(str(bad))
    bad.write_bytes(b'\x00\x00\x0e\x01\x40\x00\x00\x00' + b'\x00' * 8)
    with pytest.raises(FormatError, match='8589934592 bytes'):
        load_idx(str(bad))
