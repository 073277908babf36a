import argparse
import copy
import os
import random
import sys

import numpy as np
import torch
import torch.backends.cudnn as cudnn

from config import ConfigError, get_config
from configs.presets import expand_presets
from planner import EXIT_CONFIG, EXIT_OK, run_oracle, run_scenario
from utils.misc import content_hash


def build_parser():
    parser = argparse.ArgumentParser(description='M1 transport dose planning')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p):
        p.add_argument('--output_dir', type=str, help='root of the run directories')
        p.add_argument('--tag', type=str, help='run directory name')
        p.add_argument(
            "--opts",
            help="Modify config options by adding 'KEY VALUE' pairs. ",
            default=None,
            nargs='+',
        )

    p = sub.add_parser('run', help='optimize the scenario described by a config file')
    p.add_argument('cfg', type=str, metavar='FILE', help='path to config file')
    p.add_argument('--resume', type=str, help='control checkpoint to restart from')
    common(p)

    p = sub.add_parser('preset', help="run named presets sequentially ('all' for every preset)")
    p.add_argument('names', nargs='+', help="e.g. basic-tracking-baseline")
    p.add_argument('--cfg', type=str, metavar='FILE', help='optional config merged before the preset')
    common(p)

    p = sub.add_parser('validate', help='resolve and check a config without solving')
    p.add_argument('cfg', type=str, metavar='FILE', help='path to config file')
    common(p)

    p = sub.add_parser('oracle', help='compare M1 against the discrete-ordinates solver')
    p.add_argument('cfg', type=str, metavar='FILE', help='path to config file')
    common(p)
    return parser


def set_determinism(config):
    if config.GRID.DEVICE.startswith('cuda'):
        torch.cuda.set_device(torch.device(config.GRID.DEVICE))
    cudnn.benchmark = False
    cudnn.deterministic = True
    random.seed(config.SEED)
    np.random.seed(config.SEED)
    torch.manual_seed(config.SEED)


def _load(args):
    try:
        return get_config(args)
    except ConfigError as e:
        print(f'config error: {e}', file=sys.stderr)
        return None


def main(argv=None):
    args = build_parser().parse_args(argv)

    if args.command == 'preset':
        code = EXIT_OK
        for name in expand_presets(args.names):
            run_args = copy.copy(args)
            run_args.preset = name
            run_args.tag = f'{args.tag}-{name}' if args.tag else name
            config = _load(run_args)
            if config is None:
                code = max(code, EXIT_CONFIG)
                continue
            set_determinism(config)
            status, run_dir = run_scenario(config)
            print(f'{name}: exit {status}, results in {run_dir}')
            code = max(code, status)
        return code

    config = _load(args)
    if config is None:
        return EXIT_CONFIG
    if args.command == 'validate':
        print(config.dump())
        print(f'# content-hash: {content_hash(config.dump())}')
        return EXIT_OK
    set_determinism(config)
    if args.command == 'oracle':
        status, run_dir, discrepancy = run_oracle(config)
        print(f'relative L1 discrepancy {discrepancy:.4f}, results in {run_dir}')
        return status
    status, run_dir = run_scenario(config)
    print(f'exit {status}, results in {os.path.abspath(run_dir)}')
    return status


if __name__ == "__main__":
    sys.exit(main())
