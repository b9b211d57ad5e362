# Copyright Amazon.com, Inc. or its affiliates. All Rights Reserved.
# SPDX-License-Identifier: MIT-0

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from aws_lambda_powertools import Logger
from pydantic import BaseModel, ValidationError

from point_ln import __version__, commands
from point_ln.config import RunConfig, load_corpus_config, load_run_config, preset_names
from point_ln.exceptions import ConfigurationError, NumericalError, PointLNError

logger = Logger(service='point-ln', stream=sys.stderr, log_uncaught_exceptions=True)


class UsageError(ConfigurationError):
    pass


class _Parser(argparse.ArgumentParser):

    def error(self, message: str) -> None:
        raise UsageError(message)


def _report(report: BaseModel) -> None:
    sys.stdout.write(report.model_dump_json(indent=2) + '\n')


def _run_config(args: argparse.Namespace, default_source: Optional[str] = None) -> RunConfig:
    config = load_run_config(args.config or default_source)
    return config.with_overrides(seed=args.seed, output_dir=args.out, threads=args.threads)


def _train(args: argparse.Namespace) -> int:
    result = commands.cmd_train(_run_config(args), resume=args.resume)
    last = result.metrics[-1].model_dump() if result.metrics else {}
    sys.stdout.write('{}\n'.format(result.checkpoint_path))
    logger.info('Train command finished', checkpoint=str(result.checkpoint_path), **last)
    return 0


def _eval(args: argparse.Namespace) -> int:
    report = commands.cmd_eval(_run_config(args), args.checkpoint, manifest=args.manifest, split=args.split,
                               permute=args.permute)
    _report(report)
    return 0


def _featurize(args: argparse.Namespace) -> int:
    report = commands.cmd_featurize(_run_config(args), inputs=args.inputs, manifest=args.manifest,
                                    checkpoint_path=args.checkpoint, weights=args.weights)
    _report(report)
    return 0


def _bench(args: argparse.Namespace) -> int:
    report = commands.cmd_bench(_run_config(args), classes=args.classes, points=args.points, iterations=args.iterations)
    _report(report)
    return 0


def _gen_synthetic(args: argparse.Namespace) -> int:
    corpus = load_corpus_config(args.config)
    seed = args.seed if args.seed is not None else 0
    out_dir = Path(args.out) if args.out is not None else RunConfig().output_dir
    report = commands.cmd_gen_synthetic(corpus, seed, out_dir)
    _report(report)
    return 0


def _grad_check(args: argparse.Namespace) -> int:
    report = commands.cmd_grad_check(_run_config(args, default_source='grad-check'))
    _report(report)
    if not report.complete:
        unchecked = sorted(name for name, group in report.groups.items() if not group.checked)
        raise NumericalError('gradient check incomplete: no comparable coordinates in {}'.format(', '.join(unchecked)))
    if not report.passed:
        raise NumericalError('gradient check failed: max relative error {:.3g} at {}[{}]'.format(
            report.max_relative_error, report.worst_parameter, report.worst_coordinate))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument('--config', help='run config JSON file or preset name ({})'.format(', '.join(preset_names())))
    common.add_argument('--seed', type=int, help='overrides the config seed')
    common.add_argument('--out', type=Path, help='output directory')
    common.add_argument('--threads', type=int, help='worker threads')

    parser = _Parser(prog='point-ln', description='Hybrid non-parametric / learnable point-cloud classifier.')
    parser.add_argument('--version', action='version', version='%(prog)s {}'.format(__version__))
    verbs = parser.add_subparsers(dest='command', required=True)

    train = verbs.add_parser('train', parents=[common], help='train a classifier')
    train.add_argument('--resume', type=Path, help='checkpoint to continue from')
    train.set_defaults(handler=_train)

    evaluate = verbs.add_parser('eval', parents=[common], help='evaluate a checkpoint')
    evaluate.add_argument('checkpoint', type=Path)
    evaluate.add_argument('--manifest', type=Path)
    evaluate.add_argument('--split', choices=('train', 'test'), default='test')
    evaluate.add_argument('--permute', action='store_true', help='shuffle the point order of every cloud')
    evaluate.set_defaults(handler=_eval)

    featurize = verbs.add_parser('featurize', parents=[common], help='write global features as CSV')
    featurize.add_argument('inputs', nargs='*', type=Path, help='.xyz or .off files')
    featurize.add_argument('--manifest', type=Path)
    featurize.add_argument('--checkpoint', type=Path)
    featurize.add_argument('--weights', choices=('init', 'identity'), default='init')
    featurize.set_defaults(handler=_featurize)

    bench = verbs.add_parser('bench', parents=[common], help='time single-cloud inference')
    bench.add_argument('--classes', type=int, default=40)
    bench.add_argument('--points', type=int, default=1024)
    bench.add_argument('--iterations', type=int, default=commands.MIN_BENCH_ITERATIONS)
    bench.set_defaults(handler=_bench)

    gen = verbs.add_parser('gen-synthetic', parents=[common], help='write the synthetic shape corpus')
    gen.set_defaults(handler=_gen_synthetic)

    grad = verbs.add_parser('grad-check', parents=[common], help='verify gradients by finite differences')
    grad.set_defaults(handler=_grad_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.handler(args)
    except ValidationError as e:
        logger.error('Command failed', error='ValidationError', detail=str(e).replace('\n', ' '), exit_code=1)
        return 1
    except PointLNError as e:
        logger.error('Command failed', error=type(e).__name__, detail=str(e), exit_code=e.exit_code)
        return e.exit_code
    except Exception as e:
        logger.exception(e)
        raise


if __name__ == '__main__':
    sys.exit(main())
