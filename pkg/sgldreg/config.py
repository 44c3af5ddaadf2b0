# -*- coding: utf-8 -*-
"""Run configuration: every hyper-parameter of a run, as a flat key = value file.

Example::

    # desk-scale run
    channel_scale = 1/4
    iterations = 300
    burn_in = 250
    alpha = inf        # plain Adam, no noise

Unknown keys, unparsable values and invalid settings raise ConfigError
naming the line. dump_config writes every field and load_config reads it
back to an equal RunConfig.
"""
from __future__ import absolute_import

import dataclasses
import re
from dataclasses import dataclass
from fractions import Fraction

from .asgld import OptimConfig, SnapshotSchedule
from .core import ConfigError
from .dataset import SplitSpec, SynthSpec
from .losses import LossConfig
from .tensor import PRECISIONS
from .unet import UNetConfig

CONFIG_NAME = 'run.cfg'

# '#' starts a comment at the beginning of a line or after whitespace only
_COMMENT = re.compile(r'(?:^|\s)#.*')


@dataclass
class RunConfig:
    # optimizer
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    alpha: float = 100.0
    batch_size: int = 64
    # objective
    similarity: str = 'mse'
    lam: float = 0.05
    lcc_window: int = 9
    weight_decay: float = 1e-5
    # snapshot schedule
    iterations: int = 800
    burn_in: int = 720
    thinning: int = 1
    # network
    channel_scale: Fraction = Fraction(1)
    leaky_slope: float = 0.2
    flow_init_std: float = 1e-5
    precision: str = 'single'
    # data
    data_path: str = ''
    image_size: int = 32
    digit: int = 5
    train_images: int = 200
    val_images: int = 11
    test_images: int = 33
    train_pairs: int = 0
    val_pairs: int = 100
    test_pairs: int = 1000
    synth_count: int = 300
    synth_val: int = 20
    synth_test: int = 50
    max_disp: float = 3.0
    # randomness
    data_seed: int = 0
    seed: int = 0
    # reporting
    val_interval: int = 10
    log_interval: int = 50

    def unet(self):
        return UNetConfig(leaky_slope=self.leaky_slope, channel_scale=self.channel_scale,
                          flow_init_std=self.flow_init_std)

    def loss(self):
        return LossConfig(self.similarity, self.lam, self.lcc_window, self.weight_decay)

    def optim(self):
        return OptimConfig(self.eta, self.beta1, self.beta2, self.epsilon, self.alpha, self.batch_size,
                           self.val_interval, self.log_interval)

    def schedule(self):
        return SnapshotSchedule(self.iterations, self.burn_in, self.thinning)

    def split(self):
        return SplitSpec(self.digit, self.train_images, self.val_images, self.test_images,
                         self.train_pairs, self.val_pairs, self.test_pairs, self.image_size)

    def synth(self):
        return SynthSpec(size=self.image_size)

    def validate(self):
        """Build every derived view so that invalid settings fail early."""
        for view in (self.unet, self.loss, self.optim, self.schedule):
            view()
        _format('data_path', self.data_path)
        if self.precision not in PRECISIONS:
            raise ConfigError('precision must be one of %s, got %r' % (', '.join(sorted(PRECISIONS)), self.precision))
        if self.image_size % self.unet().min_extent:
            raise ConfigError('image_size must be a multiple of %d, got %d' % (self.unet().min_extent, self.image_size))
        for name in ('train_images', 'val_images', 'test_images', 'train_pairs', 'val_pairs', 'test_pairs',
                     'synth_count', 'synth_val', 'synth_test'):
            if getattr(self, name) < 0:
                raise ConfigError('%s must be >= 0' % name)
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


_FIELDS = dict((f.name, f) for f in dataclasses.fields(RunConfig))


def _convert(name, text):
    kind = _FIELDS[name].type
    if kind in (int, 'int'):
        return int(text)
    if kind in (float, 'float'):
        return float(text)
    if kind in (Fraction, 'Fraction'):
        value = Fraction(text)
        if value <= 0:
            raise ValueError('must be positive')
        return value
    return text


def parse_config(text, name='<config>', base=None):
    """Parse key = value lines over base (default: RunConfig())."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = _COMMENT.sub('', line).strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError('%s:%d: expected key = value' % (name, lineno))
        key, value = (s.strip() for s in line.split('=', 1))
        if key not in _FIELDS:
            raise ConfigError('%s:%d: unknown key %r' % (name, lineno, key))
        if key in values:
            raise ConfigError('%s:%d: duplicate key %r' % (name, lineno, key))
        try:
            values[key] = _convert(key, value)
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError('%s:%d: bad value for %s: %r (%s)' % (name, lineno, key, value, e))
    config = dataclasses.replace(base or RunConfig(), **values)
    try:
        return config.validate()
    except ConfigError as e:
        raise ConfigError('%s: %s' % (name, e))


def load_config(path, base=None):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError('cannot read config %s: %s' % (path, e.strerror))
    return parse_config(text, path, base)


def _format(name, value):
    if isinstance(value, float):
        return repr(value)
    text = str(value)
    if _COMMENT.search(text) or text != text.strip() or '\n' in text:
        raise ConfigError('%s = %r cannot be written to a config file' % (name, text))
    return text


def dump_config(config):
    """Every field as key = value, in field order."""
    return ''.join('%s = %s\n' % (f.name, _format(f.name, getattr(config, f.name))) for f in dataclasses.fields(config))


def save_config(config, path):
    with open(path, 'w') as f:
        f.write(dump_config(config))


################################################################################
#                                    TESTS                                     #
################################################################################

def test_defaults_follow_the_reference_setup():
    c = RunConfig().validate()
    assert (c.eta, c.batch_size, c.alpha, c.lam, c.weight_decay) == (1e-3, 64, 100.0, 0.05, 1e-5)
    assert len(c.schedule()) == 80
    assert c.unet() == UNetConfig()


def test_parse_and_views():
    c = parse_config('# tiny\nchannel_scale = 1/4\niterations = 50  # short\nburn_in = 40\nalpha = inf\n'
                     'similarity = neg_lcc\n')
    assert c.channel_scale == Fraction(1, 4)
    assert c.unet().width(32) == 8
    assert len(c.schedule()) == 10
    assert not c.optim().noisy
    assert c.loss().similarity == 'neg_lcc'


def test_dump_is_inverse_of_load(tmp_path):
    c = RunConfig(channel_scale=Fraction(1, 4), alpha=float('inf'), eta=1.0 / 3.0, data_path='/data/x',
                  iterations=50, burn_in=40)
    path = str(tmp_path / CONFIG_NAME)
    save_config(c, path)
    assert load_config(path) == c
    assert dump_config(load_config(path)) == dump_config(c)


def test_errors_name_the_line():
    import pytest
    with pytest.raises(ConfigError, match=':2: unknown key'):
        parse_config('eta = 0.1\nlearning_rate = 3\n')
    with pytest.raises(ConfigError, match=':1: bad value'):
        parse_config('iterations = many\n')
    with pytest.raises(ConfigError, match=':1: expected'):
        parse_config('iterations\n')
    with pytest.raises(ConfigError, match='duplicate'):
        parse_config('seed = 1\nseed = 2\n')
    with pytest.raises(ConfigError):
        parse_config('channel_scale = 0\n')
    with pytest.raises(ConfigError):
        parse_config('alpha = 0\n')
    with pytest.raises(ConfigError):
        parse_config('burn_in = 900\n')
    with pytest.raises(ConfigError):
        parse_config('image_size = 20\n')
    with pytest.raises(ConfigError, match='cannot read'):
        load_config('/nonexistent/run.cfg')


def test_hash_inside_a_value(tmp_path):
    import pytest
    c = parse_config('data_path = /data/run#3   # trailing comment\n')
    assert c.data_path == '/data/run#3'
    path = str(tmp_path / CONFIG_NAME)
    save_config(c, path)
    assert load_config(path) == c
    with pytest.raises(ConfigError, match='data_path'):
        dump_config(c.replace(data_path='/data/x #y'))
    with pytest.raises(ConfigError, match='data_path'):
        dump_config(c.replace(data_path='/data/x '))
    with pytest.raises(ConfigError, match='data_path'):
        RunConfig(data_path='/data/x #y').validate()
