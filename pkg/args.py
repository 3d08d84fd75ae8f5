import argparse
from argparse import Namespace


def _add_experiment_flags(p):
    p.add_argument('--config', type=str, default=None,
                   help='Experiment config file (YAML or JSON) with schema_version: 1.')
    p.add_argument('--output-dir', dest='output_dir', type=str, default=None,
                   help='Where to write the outputs; overrides output_dir in the config.')
    p.add_argument('--p', type=float, default=None, help='Reaction exponent, p > 1.')
    p.add_argument('--lambda', dest='lam', type=float, default=None, help='Step-law parameter lambda > 0.')
    p.add_argument('--scheme', choices=['explicit', 'implicit'], default=None)
    p.add_argument('--w-stop', dest='w_stop', type=float, default=None,
                   help='Stop once the weighted L1 norm reaches this value.')
    p.add_argument('--max-steps', dest='max_steps', type=int, default=None)
    p.add_argument('--workers', type=int, default=None,
                   help='Worker pool size for sweeps (default: number of cores, capped by BLOWUP_THREADS).')
    p.add_argument('--verbose', action='store_true')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='blowup', description='Adaptive-step solver and diagnostics for discrete semilinear heat equations')
    sub = parser.add_subparsers(dest='command', required=True)

    mesh = sub.add_parser('mesh', help='Build a discretization and write it as JSON.')
    group = mesh.add_mutually_exclusive_group(required=True)
    group.add_argument('--fd-interval', dest='fd_interval', type=int, metavar='N',
                       help='Finite differences on (0,1) with N interior nodes.')
    group.add_argument('--fd-cube', dest='fd_cube', type=int, nargs=2, metavar=('D', 'N'),
                       help='Finite differences on (0,1)^D with N interior nodes per side.')
    group.add_argument('--fem-interval', dest='fem_interval', type=float, nargs='+', metavar='X',
                       help='Lumped-mass P1 elements on the partition 0 = x_0 < ... < x_{N+1} = 1.')
    mesh.add_argument('-o', '--output', type=str, required=True)
    mesh.add_argument('--verbose', action='store_true')

    for name, text in (('run', 'Run one experiment and diagnose it.'),
                       ('sweep', 'Run the sweep axes of a config concurrently and write summary.csv.'),
                       ('order', 'Convergence-order table against the reference integrator.')):
        _add_experiment_flags(sub.add_parser(name, help=text))

    rate = sub.add_parser('rate', help='Rescale, rate constant and blow-up set of an existing run directory.')
    rate.add_argument('--run-dir', dest='run_dir', type=str, required=True)
    rate.add_argument('--output-dir', dest='output_dir', type=str, default=None,
                      help='Defaults to <run-dir>/rate.')
    rate.add_argument('--window', type=float, nargs=2, default=None, metavar=('LO', 'HI'),
                      help='Range of T - t used for the exponent fits.')
    rate.add_argument('--verbose', action='store_true')
    return parser


def parse_args(argv=None) -> Namespace:
    return build_parser().parse_args(argv)
