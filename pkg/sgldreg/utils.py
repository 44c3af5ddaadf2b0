# -*- coding: utf-8 -*-
"""Various helper functions."""
from __future__ import absolute_import

import os
from concurrent.futures import ThreadPoolExecutor

from .core import ConfigError
from .tensor import get_precision, precision

THREADS_ENV = 'SGLDREG_THREADS'


def worker_count():
    """Size of the worker pool: $SGLDREG_THREADS if set, otherwise the CPU count."""
    value = os.environ.get(THREADS_ENV)
    if value is None or not value.strip():
        return max(1, os.cpu_count() or 1)
    try:
        n = int(value)
    except ValueError:
        raise ConfigError('%s must be an integer, got %r' % (THREADS_ENV, value))
    return max(1, n)


def parallel_map(fn, items, workers=None):
    """Ordered map of fn over items on a thread pool.

    Results come back in input order whatever the completion order, so any
    reduction over them is deterministic. Workers run under the caller's
    tensor precision.
    """
    items = list(items)
    workers = min(workers or worker_count(), max(1, len(items)))
    if workers == 1:
        return [fn(x) for x in items]
    name = get_precision()

    def run(x):
        with precision(name):
            return fn(x)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, items))


def format_floats(values, fmt='%.6g'):
    return ','.join(fmt % v for v in values)


def parse_floats(text):
    """Parse a comma separated list of floats such as '0,0.05,0.1'."""
    try:
        return [float(s) for s in text.split(',') if s.strip()]
    except ValueError:
        raise ConfigError('cannot parse float list %r' % (text,))


def test_worker_count(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, '3')
    assert worker_count() == 3
    monkeypatch.setenv(THREADS_ENV, '0')
    assert worker_count() == 1
    monkeypatch.delenv(THREADS_ENV)
    assert worker_count() >= 1


def test_worker_count_invalid(monkeypatch):
    import pytest
    monkeypatch.setenv(THREADS_ENV, 'many')
    with pytest.raises(ConfigError):
        worker_count()


def test_parallel_map_keeps_order():
    import time

    def slow_square(x):
        time.sleep(0.001 * (5 - x))
        return x * x

    assert parallel_map(slow_square, range(5), workers=4) == [0, 1, 4, 9, 16]
    assert parallel_map(slow_square, [], workers=4) == []


def test_float_lists():
    import pytest
    assert parse_floats('0,0.05, 0.1,0.18') == [0.0, 0.05, 0.1, 0.18]
    assert format_floats([0.5, 1e-5]) == '0.5,1e-05'
    with pytest.raises(ConfigError):
        parse_floats('0,x')


def test_parallel_map_inherits_precision():
    import numpy as np
    from .tensor import get_dtype
    with precision('double'):
        assert parallel_map(lambda _: get_dtype(), range(4), workers=4) == [np.float64] * 4
    assert parallel_map(lambda _: get_dtype(), range(4), workers=4) == [np.float32] * 4
