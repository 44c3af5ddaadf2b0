# -*- coding: utf-8 -*-
"""Command-line entry point.

    sgldreg synth    --out DIR
    sgldreg train    --data PATH --out DIR
    sgldreg register --checkpoint CKPT --moving IMG --fixed IMG --out DIR
    sgldreg sweep    --checkpoint CKPT --baseline CKPT --data PATH --out DIR [--sigma LIST]
    sgldreg eval     --checkpoint CKPT --baseline CKPT --data PATH --out DIR [--sigma S] [--mode MODE]
    sgldreg selftest [--inject-fault NAME]

Settings come from --config, else from the run.cfg next to --checkpoint,
else from the defaults; --seed and --data-seed override them. Every output
directory gets the resolved run.cfg. Exit status is 0 on success, 1 when a
verification or numeric check fails and 2 on usage, configuration or input
errors. Inputs are validated before the output directory is created.
"""
from __future__ import absolute_import

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .asgld import train, window_stats, write_loss_csv
from .checkpoint import checkpoint_load, checkpoint_save
from .config import CONFIG_NAME, RunConfig, load_config, save_config
from .core import ConfigError, ContractError, DimensionError, Error, FormatError, IntegrityError, NumericError
from .dataset import load_dataset, save_synth, synth_pairs
from .evaluate import METHODS, MODES, format_table, noise_sweep, paired_t_test, write_pairs_csv, write_table_csv
from .idx import load_idx
from .pgm import load_pgm, save_pgm, save_raw, symmetric_range
from .posterior import register
from .selftest import run_selftest
from .tensor import precision
from .unet import check_extents, check_snapshots
from .utils import parse_floats

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = 'snapshots.ckpt'
LOSS_NAME = 'loss.csv'
TABLE_NAME = 'table.csv'
PAIRS_NAME = 'pairs.csv'
DEFAULT_SIGMAS = '0,0.05,0.1,0.18'

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

# report label of each evaluation mode
_LABELS = dict((mode, label) for label, mode in METHODS.items())


class UsageError(Error):
    pass


def _require_file(path, what):
    if not path or not os.path.exists(path):
        raise UsageError('%s not found: %s' % (what, path))


def _resolve_config(args):
    if args.config:
        config = load_config(args.config)
    else:
        checkpoint = getattr(args, 'checkpoint', None)
        beside = os.path.join(os.path.dirname(os.path.abspath(checkpoint)), CONFIG_NAME) if checkpoint else None
        config = load_config(beside) if beside and os.path.exists(beside) else RunConfig()
    changes = {}
    if args.seed is not None:
        changes['seed'] = args.seed
    if args.data_seed is not None:
        changes['data_seed'] = args.data_seed
    if getattr(args, 'data', None):
        changes['data_path'] = args.data
    return config.replace(**changes).validate()


def _make_out(path):
    os.makedirs(path, exist_ok=True)
    return path


def _load_dataset(config):
    _require_file(config.data_path, 'data')
    return load_dataset(config.data_path, config.split(), config.data_seed, config.synth_val, config.synth_test)


def _load_image(path, config):
    _require_file(path, 'image')
    image = load_pgm(path) if path.lower().endswith('.pgm') else load_idx(path).astype(np.float64)
    image = np.squeeze(image)
    if image.ndim != 2:
        raise DimensionError('%s: expected a single 2-d image, got shape %s' % (path, image.shape))
    if image.shape != (config.image_size, config.image_size):
        raise DimensionError('%s: image is %dx%d, the network was trained at %dx%d'
                             % ((path,) + image.shape + (config.image_size, config.image_size)))
    return image[None, None]


def _load_snapshots(path, config, what='checkpoint'):
    _require_file(path, what)
    snaps = checkpoint_load(path)
    if not snaps:
        raise IntegrityError('%s %s holds no snapshots' % (what, path))
    check_snapshots(snaps, config.unet())
    return snaps


def cmd_synth(args):
    config = _resolve_config(args)
    n = config.synth_count
    if n <= config.synth_val + config.synth_test:
        raise ConfigError('synth_count %d cannot hold %d validation and %d test pairs'
                          % (n, config.synth_val, config.synth_test))
    pairs = synth_pairs(n, config.synth(), config.max_disp, config.data_seed)
    save_synth(_make_out(args.out), pairs)
    save_config(config, os.path.join(args.out, CONFIG_NAME))
    print('wrote %d synthetic pairs to %s' % (n, args.out))
    return EXIT_OK


def cmd_train(args):
    config = _resolve_config(args)
    data = _load_dataset(config)
    if not data.train:
        raise UsageError('%s has no training pairs' % config.data_path)
    shape = tuple(data.train[0].shape)
    if shape != (config.image_size, config.image_size):
        raise DimensionError('%s holds %dx%d images, image_size is %d'
                             % ((config.data_path,) + shape + (config.image_size,)))
    check_extents(config.unet(), shape)
    with precision(config.precision):
        result = train(data, config.unet(), config.loss(), config.optim(), config.schedule(), config.seed)
    out = _make_out(args.out)
    save_config(config, os.path.join(out, CONFIG_NAME))
    checkpoint_save(result.snapshots, os.path.join(out, CHECKPOINT_NAME))
    write_loss_csv(result.history, os.path.join(out, LOSS_NAME))
    print('kept %d snapshots (iterations %d-%d)' % (len(result.snapshots), result.snapshots[0].iteration,
                                                     result.snapshots[-1].iteration))
    print('window         train mean    train var     val mean')
    for w in window_stats(result.history, max(1, config.iterations // 10)):
        print('%5d-%-6d  %-12.6g  %-12.4g  %s' % (w.start, w.end, w.train_mean, w.train_var,
                                                  '-' if w.val_mean is None else '%.6g' % w.val_mean))
    return EXIT_OK


def _mode_snapshots(mode, args, config):
    if mode == 'single':
        if not args.baseline:
            raise UsageError('--mode single needs --baseline')
        return _load_snapshots(args.baseline, config, 'baseline')[-1:]
    snaps = _load_snapshots(args.checkpoint, config)
    return snaps if mode == 'averaged' else snaps[-1:]


def cmd_register(args):
    config = _resolve_config(args)
    moving = _load_image(args.moving, config)
    fixed = _load_image(args.fixed, config)
    snaps = _mode_snapshots(args.mode, args, config)
    with precision(config.precision):
        registered, est = register(moving, fixed, snaps, config.unet())
    out = _make_out(args.out)
    save_config(config, os.path.join(out, CONFIG_NAME))
    save_pgm(os.path.join(out, 'moving.pgm'), moving[0, 0])
    save_pgm(os.path.join(out, 'fixed.pgm'), fixed[0, 0])
    save_pgm(os.path.join(out, 'registered.pgm'), registered[0, 0])
    lo, hi = symmetric_range(est.mean_field)
    save_pgm(os.path.join(out, 'mean_dx.pgm'), est.mean_field[0], lo, hi)
    save_pgm(os.path.join(out, 'mean_dy.pgm'), est.mean_field[1], lo, hi)
    var = est.var_field
    top = float(var.max())
    save_pgm(os.path.join(out, 'var_dx.pgm'), var[0], 0.0, top)
    save_pgm(os.path.join(out, 'var_dy.pgm'), var[1], 0.0, top)
    save_raw(os.path.join(out, 'field.bin'), est.mean_field)
    save_raw(os.path.join(out, 'std.bin'), est.std_field)
    magnitude = np.hypot(est.mean_field[0].astype(np.float64), est.mean_field[1].astype(np.float64))
    with open(os.path.join(out, 'estimate.txt'), 'w') as f:
        f.write('samples = %d\nshape = 2x%dx%d\nmean_abs_field = %r\nmax_std = %r\n'
                % ((est.sample_count,) + est.mean_field.shape[1:] + (float(magnitude.mean()),
                                                                     float(est.std_field.max()))))
    print('registered with %d snapshots, mean |field| %.4g px, max std %.4g px'
          % (est.sample_count, magnitude.mean(), est.std_field.max()))
    return EXIT_OK


def _test_setup(args):
    config = _resolve_config(args)
    snaps = _load_snapshots(args.checkpoint, config)
    baseline = _load_snapshots(args.baseline, config, 'baseline')[-1]
    data = _load_dataset(config)
    if not data.test:
        raise UsageError('%s has no test pairs' % config.data_path)
    return config, snaps, baseline, data.test


def _write_report(report, config, out):
    save_config(config, os.path.join(out, CONFIG_NAME))
    write_table_csv(report, os.path.join(out, TABLE_NAME))
    write_pairs_csv(report, os.path.join(out, PAIRS_NAME))


def cmd_sweep(args):
    sigmas = parse_floats(args.sigma or DEFAULT_SIGMAS)
    config, snaps, baseline, test = _test_setup(args)
    with precision(config.precision):
        report = noise_sweep(test, snaps, baseline, sigmas, config.data_seed, config.unet())
    _write_report(report, config, _make_out(args.out))
    print(format_table(report))
    return EXIT_OK


def cmd_eval(args):
    sigmas = parse_floats(args.sigma or '0')
    if len(sigmas) != 1:
        raise UsageError('eval takes a single --sigma, got %d values' % len(sigmas))
    sigma = sigmas[0]
    if args.mode == 'single':
        raise UsageError('--mode single would compare the baseline with itself')
    config, snaps, baseline, test = _test_setup(args)
    if len(test) < 2:
        raise UsageError('the paired t-test needs at least 2 test pairs')
    label, base = _LABELS[args.mode], _LABELS['single']
    with precision(config.precision):
        report = noise_sweep(test, snaps, baseline, sorted(set([0.0, sigma])), config.data_seed, config.unet(),
                             methods=[label, base])
    res = paired_t_test(report.scores(label, sigma), report.scores(base, sigma))
    out = _make_out(args.out)
    _write_report(report, config, out)
    a, b = report.cell(label, sigma), report.cell(base, sigma)
    lines = ['sigma = %r' % sigma, 'pairs = %d' % res.n,
             '%s mse = %.6g (%.6g)' % (label, a.mse_mean, a.mse_std),
             '%s mse = %.6g (%.6g)' % (base, b.mse_mean, b.mse_std),
             't = %.6g' % res.t, 'p = %.6g' % res.p,
             '%s' % ('p<0.05' if res.significant else 'p>=0.05')]
    if a.dice_mean is not None:
        lines[4:4] = ['%s dice = %.6g (%.6g)' % (label, a.dice_mean, a.dice_std),
                      '%s dice = %.6g (%.6g)' % (base, b.dice_mean, b.dice_std)]
    with open(os.path.join(out, 'ttest.txt'), 'w') as f:
        f.write('\n'.join(lines) + '\n')
    print('\n'.join(lines))
    return EXIT_OK


def cmd_selftest(args):
    report = run_selftest(faults=args.inject_fault or ())
    for check in report.checks:
        print(check)
    failures = report.failures()
    print('%d checks, %d failed, %.1fs' % (len(report.checks), len(failures), report.seconds))
    return EXIT_FAILED if failures else EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog='sgldreg', description='Deformable registration with Langevin-sampled UNets.')
    p.add_argument('--version', action='version', version='%(prog)s ' + __version__)
    verbosity = p.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true', help='log debug messages')
    verbosity.add_argument('-q', '--quiet', action='store_true', help='log warnings and errors only')
    sub = p.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    def command(name, fn, help, out=True):
        c = sub.add_parser(name, help=help)
        c.set_defaults(func=fn)
        c.add_argument('--config', help='run configuration (key = value file)')
        c.add_argument('--seed', type=int, help='training seed')
        c.add_argument('--data-seed', type=int, help='seed of splits, synthetic data and test noise')
        if out:
            c.add_argument('--out', required=True, help='output directory')
        return c

    command('synth', cmd_synth, 'write a synthetic labelled dataset')
    c = command('train', cmd_train, 'train and keep posterior weight snapshots')
    c.add_argument('--data', required=True, help='MNIST IDX image file or synthetic dataset directory')
    c = command('register', cmd_register, 'register one image pair')
    c.add_argument('--checkpoint', required=True)
    c.add_argument('--baseline', help='baseline checkpoint (for --mode single)')
    c.add_argument('--moving', required=True, help='PGM or IDX image')
    c.add_argument('--fixed', required=True, help='PGM or IDX image')
    c.add_argument('--mode', choices=MODES, default='averaged')
    for name, fn, help, sigma_help in (
            ('sweep', cmd_sweep, 'noise sweep table over test pairs', 'comma separated noise levels'),
            ('eval', cmd_eval, 'single noise level evaluation with a paired t-test', 'noise level')):
        c = command(name, fn, help)
        c.add_argument('--checkpoint', required=True)
        c.add_argument('--baseline', required=True, help='checkpoint trained without noise')
        c.add_argument('--data', required=True, help='MNIST IDX image file or synthetic dataset directory')
        c.add_argument('--sigma', help=sigma_help)
        if name == 'eval':
            c.add_argument('--mode', choices=MODES, default='averaged')
    c = sub.add_parser('selftest', help='run the built-in verification suites')
    c.set_defaults(func=cmd_selftest)
    c.add_argument('--inject-fault', action='append', metavar='NAME',
                   help='corrupt a backward rule (e.g. leaky_relu) to see the suites fail')
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args)
    except (UsageError, ConfigError, ContractError, FormatError, IntegrityError, DimensionError) as e:
        logger.error('%s', e)
        return EXIT_USAGE
    except OSError as e:
        logger.error('%s', e)
        return EXIT_USAGE
    except NumericError as e:
        logger.error('numeric failure: %s', e)
        return EXIT_FAILED


if __name__ == '__main__':
    sys.exit(main())
