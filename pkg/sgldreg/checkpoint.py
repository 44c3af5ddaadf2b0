# -*- coding: utf-8 -*-
"""Weight snapshot checkpoints.

Layout, all little-endian::

    FileHdr      'ASGL', u32 version, u32 snapshot count
    per snapshot:
      SnapshotHdr  u64 iteration, u32 parameter count
      per parameter:
        ParamHdr   u32 id length
        id         utf-8 bytes
        u32 rank (at most MAX_RANK), rank x u64 extents
        float64 data, row-major
    u32 CRC-32 of everything above
"""
from __future__ import absolute_import

import functools
import io
import logging
import operator
import os
import struct
import zlib
from collections import OrderedDict

import numpy as np

from .core import FormatError, Header, NeedData, PackError, read_exact, remaining_bytes
from .unet import WeightSnapshot

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'ASGL'
CHECKPOINT_VERSION = 1
MAX_RANK = 8


class FileHdr(Header):
    __byte_order__ = '<'
    __hdr__ = (
        ('magic', '4s', CHECKPOINT_MAGIC),
        ('version', 'I', CHECKPOINT_VERSION),
        ('count', 'I', 0),
    )


class SnapshotHdr(Header):
    __byte_order__ = '<'
    __hdr__ = (
        ('iteration', 'Q', 0),
        ('nparams', 'I', 0),
    )


class ParamHdr(Header):
    __byte_order__ = '<'
    __hdr__ = (
        ('idlen', 'I', 0),
    )


class _Crc(object):
    """File object wrapper keeping a running CRC-32 and byte offset."""

    def __init__(self, fileobj):
        self.f = fileobj
        self.crc = 0
        self.offset = 0

    def write(self, buf):
        self.crc = zlib.crc32(buf, self.crc)
        self.offset += len(buf)
        self.f.write(buf)

    def read(self, n):
        buf = read_exact(self.f, n, self.offset)
        self.crc = zlib.crc32(buf, self.crc)
        self.offset += n
        return buf


class Writer(object):
    """Checkpoint writer; the snapshot count is fixed up front."""

    def __init__(self, fileobj, count):
        self.__f = _Crc(fileobj)
        self._remaining = count
        self.__f.write(bytes(FileHdr(count=count)))

    def write(self, snap):
        if self._remaining <= 0:
            raise FormatError('more snapshots written than declared')
        self._remaining -= 1
        f = self.__f
        f.write(bytes(SnapshotHdr(iteration=snap.iteration, nparams=len(snap.parameters))))
        for name, value in snap.parameters.items():
            ident = name.encode('utf-8')
            value = np.asarray(value)
            if value.ndim > MAX_RANK:
                raise PackError('parameter %r has rank %d, at most %d supported' % (name, value.ndim, MAX_RANK))
            f.write(bytes(ParamHdr(idlen=len(ident))) + ident)
            f.write(struct.pack('<I%dQ' % value.ndim, value.ndim, *value.shape))
            f.write(np.ascontiguousarray(value, dtype='<f8').tobytes())

    def close(self):
        if self._remaining:
            raise FormatError('%d declared snapshots were not written' % self._remaining)
        self.__f.f.write(struct.pack('<I', self.__f.crc & 0xffffffff))


class Reader(object):
    """Checkpoint reader; iterating yields WeightSnapshot objects and checks the trailer."""

    def __init__(self, fileobj):
        self.name = getattr(fileobj, 'name', '<%s>' % fileobj.__class__.__name__)
        self.__f = _Crc(fileobj)
        hdr = FileHdr(self.__f.read(FileHdr.__hdr_len__))
        if hdr.magic != CHECKPOINT_MAGIC:
            raise FormatError('%s: not a checkpoint (magic %r)' % (self.name, hdr.magic), 0)
        if hdr.version != CHECKPOINT_VERSION:
            raise FormatError('%s: unsupported checkpoint version %d' % (self.name, hdr.version), 4)
        self.count = hdr.count

    def _check_size(self, nbytes, what, offset):
        left = remaining_bytes(self.__f.f)
        if left is not None and nbytes > left:
            raise NeedData('%s: %s needs %d bytes, %d left in file' % (self.name, what, nbytes, left), offset)

    def _read_snapshot(self):
        f = self.__f
        sh = SnapshotHdr(f.read(SnapshotHdr.__hdr_len__))
        params = OrderedDict()
        for _ in range(sh.nparams):
            offset = f.offset
            ph = ParamHdr(f.read(ParamHdr.__hdr_len__))
            self._check_size(ph.idlen, 'parameter id', offset)
            try:
                name = f.read(ph.idlen).decode('utf-8')
            except UnicodeDecodeError:
                raise FormatError('%s: parameter id is not utf-8' % self.name, offset)
            if name in params:
                raise FormatError('%s: duplicate parameter id %r' % (self.name, name), offset)
            offset = f.offset
            rank, = struct.unpack('<I', f.read(4))
            if rank > MAX_RANK:
                raise FormatError('%s: parameter %r has rank %d, at most %d supported' % (self.name, name, rank, MAX_RANK),
                                  offset)
            self._check_size(8 * rank, 'extents of %r' % name, offset)
            shape = struct.unpack('<%dQ' % rank, f.read(8 * rank))
            count = functools.reduce(operator.mul, shape, 1)
            self._check_size(8 * count, 'data of %r %s' % (name, shape), f.offset)
            data = np.frombuffer(f.read(8 * count), dtype='<f8').reshape(shape)
            params[name] = data.astype(np.float64)
        return WeightSnapshot(sh.iteration, params)

    def __iter__(self):
        for _ in range(self.count):
            yield self._read_snapshot()
        offset = self.__f.offset
        expected = self.__f.crc & 0xffffffff
        stored, = struct.unpack('<I', read_exact(self.__f.f, 4, offset))
        if stored != expected:
            raise FormatError('%s: checksum mismatch (stored 0x%08x, computed 0x%08x)' % (self.name, stored, expected),
                              offset)
        if self.__f.f.read(1):
            raise FormatError('%s: trailing bytes after checkpoint' % self.name, offset + 4)


def checkpoint_save(snapshots, path):
    """Write snapshots to path atomically (temporary file then rename)."""
    buf = io.BytesIO()
    w = Writer(buf, len(snapshots))
    for snap in snapshots:
        w.write(snap)
    w.close()
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)
    logger.debug('wrote %d snapshots to %s', len(snapshots), path)


def checkpoint_load(path):
    with open(path, 'rb') as f:
        return list(Reader(f))


################################################################################
#                                    TESTS                                     #
################################################################################

def _snaps():
    rng = np.random.default_rng(0)
    out = []
    for t in (8, 9, 10):
        params = OrderedDict([('enc1.weight', rng.normal(size=(2, 2, 3, 3))), ('enc1.bias', rng.normal(size=2)),
                              ('scalar', np.array(rng.normal()))])
        out.append(WeightSnapshot(t, params))
    return out


def test_round_trip_is_bitwise(tmp_path):
    path = str(tmp_path / 'ckpt')
    snaps = _snaps()
    checkpoint_save(snaps, path)
    loaded = checkpoint_load(path)
    assert [s.iteration for s in loaded] == [8, 9, 10]
    for a, b in zip(snaps, loaded):
        assert list(a.parameters) == list(b.parameters)
        for k in a.parameters:
            assert a.parameters[k].shape == b.parameters[k].shape
            assert a.parameters[k].tobytes() == b.parameters[k].tobytes()
    assert not os.path.exists(path + '.tmp')


def test_empty_round_trip(tmp_path):
    path = str(tmp_path / 'empty')
    checkpoint_save([], path)
    assert checkpoint_load(path) == []
    with open(path, 'rb') as f:
        assert f.read(4) == b'ASGL'


def test_layout(tmp_path):
    path = str(tmp_path / 'one')
    checkpoint_save([WeightSnapshot(3, OrderedDict([('w', np.array([1.5]))]))], path)
    with open(path, 'rb') as f:
        raw = f.read()
    body = (b'ASGL' + struct.pack('<II', 1, 1) + struct.pack('<QI', 3, 1) + struct.pack('<I', 1) + b'w' +
            struct.pack('<IQ', 1, 1) + struct.pack('<d', 1.5))
    assert raw == body + struct.pack('<I', zlib.crc32(body))


def test_truncated_and_corrupt(tmp_path):
    import pytest
    path = str(tmp_path / 'ckpt')
    checkpoint_save(_snaps(), path)
    with open(path, 'rb') as f:
        raw = f.read()
    bad = str(tmp_path / 'bad')
    with open(bad, 'wb') as f:
        f.write(raw[:100])
    with pytest.raises(NeedData, match='offset'):
        checkpoint_load(bad)
    flipped = bytearray(raw)
    # inside the float data of the first parameter
    flipped[200] ^= 0x01
    with open(bad, 'wb') as f:
        f.write(bytes(flipped))
    with pytest.raises(FormatError, match='checksum'):
        checkpoint_load(bad)
    with open(bad, 'wb') as f:
        f.write(raw[:4] + struct.pack('<I', 2) + raw[8:])
    with pytest.raises(FormatError, match='version'):
        checkpoint_load(bad)
    with open(bad, 'wb') as f:
        f.write(b'XXXX' + raw[4:])
    with pytest.raises(FormatError, match='offset 0'):
        checkpoint_load(bad)


def test_corrupt_rank_and_extent(tmp_path):
    import pytest
    path = str(tmp_path / 'one')
    checkpoint_save([WeightSnapshot(1, OrderedDict([('w', np.zeros((2, 3)))]))], path)
    with open(path, 'rb') as f:
        raw = f.read()
    # FileHdr 12 + SnapshotHdr 12 + ParamHdr 4 + 'w'
    rank_at = 12 + 12 + 4 + 1
    assert struct.unpack('<I', raw[rank_at:rank_at + 4]) == (2,)
    bad = str(tmp_path / 'bad')
    cases = [
        (rank_at, struct.pack('<I', 0x7fffffff), 'rank'),
        (rank_at + 4, struct.pack('<Q', 2 ** 62), 'data'),
        (rank_at + 4, struct.pack('<Q', 2 ** 64 - 1), 'data'),
        (12 + 12, struct.pack('<I', 2 ** 31), 'parameter id'),
    ]
    for at, patch, match in cases:
        with open(bad, 'wb') as f:
            f.write(raw[:at] + patch + raw[at + len(patch):])
        with pytest.raises(FormatError, match=match) as exc:
            checkpoint_load(bad)
        assert exc.value.offset is not None
    # extents cut off by the end of the file
    with open(bad, 'wb') as f:
        f.write(raw[:rank_at + 8])
    with pytest.raises(FormatError, match='extents'):
        checkpoint_load(bad)


def test_writer_rejects_high_rank(tmp_path):
    import pytest
    with pytest.raises(PackError):
        checkpoint_save([WeightSnapshot(1, OrderedDict([('w', np.zeros((1,) * 9))]))], str(tmp_path / 'deep'))
