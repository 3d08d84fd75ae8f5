"""Command-line entry point: ``python cli.py {mesh,run,sweep,order,rate} ...``."""
import logging
import os
import sys

from args import parse_args
from discretize import build_fd_cube, build_fd_interval, build_fem_interval, validate_properties
from errors import BlowupError, DiscretizationError
from pipeline import ExperimentConfig, ExperimentPipeline, rate_from_run, write_rate
from utils import dump_json, setup_logger

logger = logging.getLogger('main')


def cmd_mesh(args) -> int:
    if args.fd_interval is not None:
        system = build_fd_interval(args.fd_interval)
    elif args.fd_cube is not None:
        system = build_fd_cube(*args.fd_cube)
    else:
        system = build_fem_interval(args.fem_interval)
    report = validate_properties(system)
    if not report.passed:
        raise DiscretizationError('; '.join(report.messages))
    parent = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(parent, exist_ok=True)
    dump_json(system.to_dict(), args.output)
    logger.info('wrote %s (%d nodes) to %s', system.label, system.n, args.output)
    return 0


def _experiment(args) -> ExperimentConfig:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    return config.with_overrides(p=args.p, lam=args.lam, scheme=args.scheme, w_stop=args.w_stop,
                                 max_steps=args.max_steps, output_dir=args.output_dir,
                                 workers=args.workers)


def cmd_run(args) -> int:
    config = _experiment(args)
    setup_logger(config.output_dir, args.verbose)
    _, report = ExperimentPipeline(config).run(output_dir=config.output_dir)
    logger.info('detected=%s termination=%s T=%s rate=%s', report.detected, report.termination,
                report.T_estimate, report.rate_constant)
    return 0


def cmd_sweep(args) -> int:
    config = _experiment(args)
    setup_logger(config.output_dir, args.verbose)
    rows = ExperimentPipeline(config).sweep(output_dir=config.output_dir)
    failed = sum(1 for row in rows if row['error'])
    if failed:
        logger.warning('%d of %d sweep points failed; see the error column of summary.csv', failed, len(rows))
    return 0


def cmd_order(args) -> int:
    config = _experiment(args)
    setup_logger(config.output_dir, args.verbose)
    ExperimentPipeline(config).order(output_dir=config.output_dir)
    return 0


def cmd_rate(args) -> int:
    output_dir = args.output_dir or os.path.join(args.run_dir, 'rate')
    setup_logger(output_dir, args.verbose)
    traj, report = rate_from_run(args.run_dir, window=tuple(args.window) if args.window else None)
    write_rate(args.run_dir, output_dir, traj, report)
    return 0


COMMANDS = {'mesh': cmd_mesh, 'run': cmd_run, 'sweep': cmd_sweep, 'order': cmd_order, 'rate': cmd_rate}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if args.command == 'mesh':
        setup_logger(None, args.verbose)
    try:
        return COMMANDS[args.command](args)
    except BlowupError as exc:
        logger.error('%s failed: %s: %s', args.command, type(exc).__name__, exc)
        return exc.exit_code


if __name__ == '__main__':
    sys.exit(main())
