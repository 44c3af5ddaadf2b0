# -*- coding: utf-8 -*-
"""Errors and fixed-layout binary headers.

Every on-disk format in sgldreg (IDX, checkpoints) is a sequence of small
fixed-layout headers followed by payload bytes. A header is declared once as
a list of (name, structfmt, default) tuples and gets its packing, unpacking
and repr for free.
"""
from __future__ import absolute_import

import copy
import struct
from functools import partial


class Error(Exception):
    pass


class FormatError(Error):
    """Malformed on-disk data; `offset` is the byte offset (or text line) where parsing failed."""
    def __init__(self, msg, offset=None):
        self.offset = offset
        if offset is not None:
            msg = '%s (at offset %d)' % (msg, offset)
        Error.__init__(self, msg)


class NeedData(FormatError):
    pass


class PackError(Error):
    pass


class DimensionError(Error):
    pass


class NumericError(Error):
    pass


class ContractError(Error):
    pass


class ConfigError(Error):
    pass


class TrainingError(NumericError):
    def __init__(self, msg, iteration):
        self.iteration = iteration
        NumericError.__init__(self, 'iteration %d: %s' % (iteration, msg))


class IntegrityError(Error):
    pass


class _MetaHeader(type):
    def __new__(cls, clsname, clsbases, clsdict):
        t = type.__new__(cls, clsname, clsbases, clsdict)
        byte_order = getattr(t, '__byte_order__', '>')
        st = getattr(t, '__hdr__', None)
        if st is not None:
            clsdict['__slots__'] = [x[0] for x in st]
            t = type.__new__(cls, clsname, clsbases, clsdict)
            t.__hdr_fields__ = [x[0] for x in st]
            t.__hdr_fmt__ = byte_order + ''.join(x[1] for x in st)
            t.__hdr_len__ = struct.calcsize(t.__hdr_fmt__)
            t.__hdr_defaults__ = dict(zip(t.__hdr_fields__, (x[2] for x in st)))
        return t


class Header(_MetaHeader('Temp', (object,), {})):
    r"""Fixed-layout header, with metaclass magic to generate members from self.__hdr__.

    Attributes:
        __hdr__: Header fields as a list of (name, structfmt, default) tuples.
        __byte_order__: Byte order, can be set to override the default ('>')

    Example:
    >>> class Foo(Header):
    ...   __hdr__ = (('magic', '4s', b'FOO!'), ('count', 'I', 0))
    ...   __byte_order__ = '<'
    ...
    >>> bytes(Foo(count=2))
    b'FOO!\x02\x00\x00\x00'
    >>> Foo(b'FOO!\x03\x00\x00\x00').count
    3
    """
    def __init__(self, *args, **kwargs):
        """Header constructor with ([buf], [field=val,...]) prototype.

        buf is unpacked when given (extra trailing bytes are ignored); otherwise
        fields take their defaults, overridden by the keyword arguments.
        """
        if args:
            buf = args[0]
            if len(buf) < self.__hdr_len__:
                raise NeedData('got %d, %d needed for %s' % (len(buf), self.__hdr_len__, self.__class__.__name__))
            self.unpack(buf)
        else:
            for k in self.__hdr_fields__:
                setattr(self, k, copy.copy(self.__hdr_defaults__[k]))
            for k, v in kwargs.items():
                setattr(self, k, v)
        self._pack_hdr = partial(struct.pack, self.__hdr_fmt__)

    def __len__(self):
        return self.__hdr_len__

    def __iter__(self):
        return iter((fld, getattr(self, fld)) for fld in self.__hdr_fields__)

    def __repr__(self):
        l_ = ['%s=%r' % (k, v) for k, v in self
              if not k.startswith('_') and v != self.__hdr_defaults__[k]]
        return '%s(%s)' % (self.__class__.__name__, ', '.join(l_))

    def __bytes__(self):
        try:
            return self._pack_hdr(*[getattr(self, k) for k in self.__hdr_fields__])
        except struct.error as e:
            raise PackError('%s: %s' % (self.__class__.__name__, e))

    def pack(self):
        return bytes(self)

    def unpack(self, buf):
        for k, v in zip(self.__hdr_fields__, struct.unpack(self.__hdr_fmt__, buf[:self.__hdr_len__])):
            setattr(self, k, v)


def read_exact(fileobj, n, offset):
    """Read exactly n bytes from fileobj, raising NeedData naming the offset otherwise."""
    buf = fileobj.read(n)
    if len(buf) != n:
        raise NeedData('got %d, %d needed' % (len(buf), n), offset)
    return buf


def remaining_bytes(fileobj):
    """Bytes between the current position and the end of fileobj, or None if it cannot seek."""
    try:
        pos = fileobj.tell()
        end = fileobj.seek(0, 2)
        fileobj.seek(pos)
    except (AttributeError, OSError, ValueError):
        return None
    return end - pos


################################################################################
#                                    TESTS                                     #
################################################################################

def test_header_defaults_and_kwargs():
    class Foo(Header):
        __hdr__ = (('magic', '4s', b'FOO!'), ('count', 'I', 0), ('big', 'Q', 7))
        __byte_order__ = '<'

    foo = Foo(count=3)
    assert bytes(foo) == b'FOO!\x03\x00\x00\x00\x07\x00\x00\x00\x00\x00\x00\x00'
    assert len(foo) == 16
    assert repr(foo) == 'Foo(count=3)'
    assert Foo(bytes(foo) + b'trailing').big == 7


def test_header_big_endian_default():
    class Bar(Header):
        __hdr__ = (('n', 'I', 0),)

    assert bytes(Bar(n=0x803)) == b'\x00\x00\x08\x03'


def test_header_need_data():
    import pytest

    class Foo(Header):
        __hdr__ = (('n', 'Q', 0),)

    with pytest.raises(NeedData, match='got 3, 8 needed'):
        Foo(b'\x00\x00\x00')


def test_header_pack_overflow():
    import pytest

    class Foo(Header):
        __hdr__ = (('n', 'I', 0),)

    with pytest.raises(PackError):
        bytes(Foo(n=2**32))


def test_format_error_offset():
    e = FormatError('bad magic', 12)
    assert e.offset == 12
    assert str(e) == 'bad magic (at offset 12)'
    assert isinstance(NeedData('short'), Error)


def test_read_exact():
    import io
    import pytest

    f = io.BytesIO(b'abc')
    assert read_exact(f, 2, 0) == b'ab'
    with pytest.raises(NeedData, match='offset 2'):
        read_exact(f, 4, 2)


def test_training_error_iteration():
    e = TrainingError('loss is nan', 17)
    assert e.iteration == 17
    assert 'iteration 17' in str(e)
    assert isinstance(e, NumericError)
