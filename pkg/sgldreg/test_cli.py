# -*- coding: utf-8 -*-
"""Unit tests for sgldreg.cli: the synth / train / register / sweep / eval pipeline and exit codes."""
import os
import struct

import numpy as np
import pytest

from sgldreg.cli import CHECKPOINT_NAME, EXIT_FAILED, EXIT_OK, EXIT_USAGE, LOSS_NAME, PAIRS_NAME, TABLE_NAME, main
from sgldreg.checkpoint import checkpoint_load
from sgldreg.config import CONFIG_NAME, load_config
from sgldreg.dataset import load_synth
from sgldreg.evaluate import read_table_csv
from sgldreg.pgm import load_raw, save_pgm

# ── shared setup ──────────────────────────────────────────────────────────────

TINY = """\
# desk-scale pipeline
image_size = 16
channel_scale = 1/4
iterations = 6
burn_in = 3
batch_size = 4
synth_count = 12
synth_val = 2
synth_test = 4
val_interval = 2
log_interval = 2
"""

REGISTER_FILES = ('moving.pgm', 'fixed.pgm', 'registered.pgm', 'mean_dx.pgm', 'mean_dy.pgm', 'var_dx.pgm',
                  'var_dy.pgm', 'field.bin', 'std.bin', 'estimate.txt', CONFIG_NAME)


def _read(path):
    with open(path, 'rb') as f:
        return f.read()


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    """Synthetic data plus a noisy and a noise-free training run, shared by the tests below."""
    root = tmp_path_factory.mktemp('pipeline')
    cfg = root / 'tiny.cfg'
    cfg.write_text(TINY)
    plain = root / 'plain.cfg'
    plain.write_text(TINY + 'alpha = inf\n')
    data = str(root / 'data')
    assert main(['-q', 'synth', '--config', str(cfg), '--out', data]) == EXIT_OK
    run = str(root / 'run')
    assert main(['-q', 'train', '--config', str(cfg), '--data', data, '--out', run]) == EXIT_OK
    base = str(root / 'base')
    assert main(['-q', 'train', '--config', str(plain), '--data', data, '--out', base]) == EXIT_OK
    return {'root': root, 'cfg': str(cfg), 'data': data, 'run': run, 'base': base,
            'checkpoint': os.path.join(run, CHECKPOINT_NAME), 'baseline': os.path.join(base, CHECKPOINT_NAME)}


@pytest.fixture(scope='module')
def images(workspace):
    pair = load_synth(workspace['data'])[0]
    moving, fixed = str(workspace['root'] / 'moving.pgm'), str(workspace['root'] / 'fixed.pgm')
    save_pgm(moving, pair.moving[0, 0])
    save_pgm(fixed, pair.fixed[0, 0])
    return moving, fixed


# ── synth and train ───────────────────────────────────────────────────────────

def test_synth_writes_dataset_and_config(workspace):
    pairs = load_synth(workspace['data'])
    assert len(pairs) == 12
    assert pairs[0].moving.shape == (1, 1, 16, 16)
    assert load_config(os.path.join(workspace['data'], CONFIG_NAME)).synth_count == 12


def test_train_outputs(workspace):
    snaps = checkpoint_load(workspace['checkpoint'])
    assert [s.iteration for s in snaps] == [4, 5, 6]
    with open(os.path.join(workspace['run'], LOSS_NAME)) as f:
        assert len(f.read().splitlines()) == 1 + 6
    config = load_config(os.path.join(workspace['run'], CONFIG_NAME))
    assert config.data_path == workspace['data']
    assert config.iterations == 6


def test_train_prints_snapshot_count(workspace, tmp_path, capsys):
    out = str(tmp_path / 'again')
    assert main(['-q', 'train', '--config', workspace['cfg'], '--data', workspace['data'], '--out', out]) == EXIT_OK
    text = capsys.readouterr().out
    assert 'kept 3 snapshots' in text
    assert 'train mean' in text
    # identical config and seed give identical bytes
    assert _read(os.path.join(out, CHECKPOINT_NAME)) == _read(workspace['checkpoint'])
    assert _read(os.path.join(out, LOSS_NAME)) == _read(os.path.join(workspace['run'], LOSS_NAME))


def test_seed_flag_overrides_config(workspace, tmp_path):
    out = str(tmp_path / 'seeded')
    assert main(['-q', 'train', '--config', workspace['cfg'], '--data', workspace['data'], '--out', out,
                 '--seed', '9']) == EXIT_OK
    assert load_config(os.path.join(out, CONFIG_NAME)).seed == 9
    assert _read(os.path.join(out, CHECKPOINT_NAME)) != _read(workspace['checkpoint'])


def test_missing_data_leaves_no_output(workspace, tmp_path):
    out = tmp_path / 'nothing'
    assert main(['-q', 'train', '--config', workspace['cfg'], '--data', str(tmp_path / 'absent'),
                 '--out', str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_bad_config_is_a_usage_error(tmp_path):
    cfg = tmp_path / 'bad.cfg'
    cfg.write_text('iterations = 5\nlearning_rate = 1\n')
    out = tmp_path / 'out'
    assert main(['-q', 'synth', '--config', str(cfg), '--out', str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_argument_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(['train'])
    assert exc.value.code == EXIT_USAGE


# ── register ──────────────────────────────────────────────────────────────────

def test_register_writes_documented_files(workspace, images, tmp_path):
    moving, fixed = images
    out = str(tmp_path / 'reg')
    assert main(['-q', 'register', '--checkpoint', workspace['checkpoint'], '--moving', moving, '--fixed', fixed,
                 '--out', out]) == EXIT_OK
    for name in REGISTER_FILES:
        assert os.path.exists(os.path.join(out, name)), name
    field = load_raw(os.path.join(out, 'field.bin'), (2, 16, 16))
    assert np.all(np.isfinite(field))
    # settings come from the run.cfg beside the checkpoint
    assert load_config(os.path.join(out, CONFIG_NAME)) == load_config(os.path.join(workspace['run'], CONFIG_NAME))
    with open(os.path.join(out, 'estimate.txt')) as f:
        assert f.readline() == 'samples = 3\n'

    again = str(tmp_path / 'reg2')
    assert main(['-q', 'register', '--checkpoint', workspace['checkpoint'], '--moving', moving, '--fixed', fixed,
                 '--out', again]) == EXIT_OK
    for name in REGISTER_FILES:
        assert _read(os.path.join(out, name)) == _read(os.path.join(again, name))


def test_register_single_snapshot_has_zero_variance(workspace, images, tmp_path):
    moving, fixed = images
    out = str(tmp_path / 'last')
    assert main(['-q', 'register', '--checkpoint', workspace['checkpoint'], '--moving', moving, '--fixed', fixed,
                 '--out', out, '--mode', 'last']) == EXIT_OK
    assert np.all(load_raw(os.path.join(out, 'std.bin'), (2, 16, 16)) == 0)
    with open(os.path.join(out, 'var_dx.pgm'), 'rb') as f:
        assert set(f.read()[len(b'P5\n16 16\n255\n'):]) == {0}


def test_register_rejects_wrong_resolution(workspace, tmp_path):
    small = str(tmp_path / 'small.pgm')
    save_pgm(small, np.zeros((8, 8)))
    out = tmp_path / 'reg'
    assert main(['-q', 'register', '--checkpoint', workspace['checkpoint'], '--moving', small, '--fixed', small,
                 '--out', str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_register_single_needs_baseline(workspace, images, tmp_path):
    moving, fixed = images
    assert main(['-q', 'register', '--checkpoint', workspace['checkpoint'], '--moving', moving, '--fixed', fixed,
                 '--out', str(tmp_path / 'x'), '--mode', 'single']) == EXIT_USAGE


def test_register_rejects_corrupt_checkpoint(workspace, images, tmp_path):
    moving, fixed = images
    raw = bytearray(_read(workspace['checkpoint']))
    raw[-1] ^= 0xff
    bad = tmp_path / CHECKPOINT_NAME
    bad.write_bytes(bytes(raw))
    (tmp_path / CONFIG_NAME).write_text(open(os.path.join(workspace['run'], CONFIG_NAME)).read())
    assert main(['-q', 'register', '--checkpoint', str(bad), '--moving', moving, '--fixed', fixed,
                 '--out', str(tmp_path / 'x')]) == EXIT_USAGE


@pytest.mark.parametrize('field, value', [('rank', struct.pack('<I', 0x7fffffff)), ('extent', struct.pack('<Q', 2 ** 62))])
def test_register_rejects_corrupt_checkpoint_header(workspace, images, tmp_path, field, value):
    moving, fixed = images
    raw = _read(workspace['checkpoint'])
    # file header 12, snapshot header 12, then the first parameter id
    idlen, = struct.unpack('<I', raw[24:28])
    at = 28 + idlen + (0 if field == 'rank' else 4)
    bad = tmp_path / CHECKPOINT_NAME
    bad.write_bytes(raw[:at] + value + raw[at + len(value):])
    (tmp_path / CONFIG_NAME).write_text(open(os.path.join(workspace['run'], CONFIG_NAME)).read())
    out = tmp_path / 'x'
    assert main(['-q', 'register', '--checkpoint', str(bad), '--moving', moving, '--fixed', fixed,
                 '--out', str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_register_rejects_mismatched_network(workspace, images, tmp_path):
    moving, fixed = images
    cfg = tmp_path / 'half.cfg'
    cfg.write_text(TINY.replace('1/4', '1/2'))
    assert main(['-q', 'register', '--config', str(cfg), '--checkpoint', workspace['checkpoint'], '--moving', moving,
                 '--fixed', fixed, '--out', str(tmp_path / 'x')]) == EXIT_USAGE


# ── sweep and eval ────────────────────────────────────────────────────────────

def test_sweep_table_matches_printout(workspace, tmp_path, capsys):
    out = str(tmp_path / 'sweep')
    assert main(['-q', 'sweep', '--checkpoint', workspace['checkpoint'], '--baseline', workspace['baseline'],
                 '--data', workspace['data'], '--out', out, '--sigma', '0,0.1']) == EXIT_OK
    printed = capsys.readouterr().out
    table = read_table_csv(os.path.join(out, TABLE_NAME))
    methods = set(k[0] for k in table)
    assert methods == {'Averaged', 'Noisy', 'Baseline'}
    assert set(k[2] for k in table) == {0.0, 0.1}
    for (method, metric, sigma), (mean, std) in table.items():
        assert '%r (%r)' % (mean, std) in printed
    with open(os.path.join(out, PAIRS_NAME)) as f:
        # 4 test pairs x 2 sigmas x 3 methods
        assert len(f.read().splitlines()) == 1 + 24


def test_sweep_single_sigma(workspace, tmp_path):
    out = str(tmp_path / 'sweep0')
    assert main(['-q', 'sweep', '--checkpoint', workspace['checkpoint'], '--baseline', workspace['baseline'],
                 '--data', workspace['data'], '--out', out, '--sigma', '0']) == EXIT_OK
    table = read_table_csv(os.path.join(out, TABLE_NAME))
    assert set((k[0], k[2]) for k in table) == {('Averaged', 0.0), ('Noisy', 0.0), ('Baseline', 0.0)}


def test_sweep_without_zero_sigma_fails(workspace, tmp_path):
    assert main(['-q', 'sweep', '--checkpoint', workspace['checkpoint'], '--baseline', workspace['baseline'],
                 '--data', workspace['data'], '--out', str(tmp_path / 's'), '--sigma', '0.1']) == EXIT_USAGE


def test_eval_reports_t_test(workspace, tmp_path, capsys):
    out = str(tmp_path / 'eval')
    assert main(['-q', 'eval', '--checkpoint', workspace['checkpoint'], '--baseline', workspace['baseline'],
                 '--data', workspace['data'], '--out', out, '--sigma', '0.1']) == EXIT_OK
    printed = capsys.readouterr().out
    assert 'pairs = 4' in printed
    assert 'p<0.05' in printed or 'p>=0.05' in printed
    with open(os.path.join(out, 'ttest.txt')) as f:
        assert f.read() == printed
    assert main(['-q', 'eval', '--checkpoint', workspace['checkpoint'], '--baseline', workspace['baseline'],
                 '--data', workspace['data'], '--out', str(tmp_path / 'e'), '--mode', 'single']) == EXIT_USAGE


# ── selftest ──────────────────────────────────────────────────────────────────

def test_selftest_fault_injection_exits_1(capsys):
    assert main(['-q', 'selftest', '--inject-fault', 'leaky_relu']) == EXIT_FAILED
    printed = capsys.readouterr().out
    assert 'FAIL gradient/leaky_relu' in printed
    assert 'PASS adam/trajectory' in printed
