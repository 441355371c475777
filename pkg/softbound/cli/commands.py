"""Command-line front end: bounds, gradcheck, synth, gen-net, verify, attack.

Exit codes: 0 success, 1 a checked invariant failed, 2 usage or I/O error.
"""

import argparse
import contextlib
import logging
import re
import sys
from typing import Iterator, List, Optional, Sequence, TextIO

import numpy as np

from softbound.config import (
    APP_NAME,
    ATTACK_RESTARTS,
    ATTACK_STEPS,
    DEFAULT_DRAWS,
    DEFAULT_EPSILON,
    DEFAULT_GRID_HI,
    DEFAULT_GRID_LO,
    DEFAULT_GRID_POINTS,
    DEFAULT_K,
    DEFAULT_LAYER_SIZES,
    DEFAULT_MEMBERS,
    DEFAULT_REGIONS,
    DEFAULT_SEED,
    GRAD_REL_TOL,
    GRADCHECK_K_VALUES,
    GRADCHECK_POINTS,
    VERSION,
)
from softbound.exceptions import SoftboundError
from softbound.services.bounds_service import BoundEvaluator, BoundKind, Box, applicable_kinds
from softbound.services.linearized_service import gradient_check
from softbound.services.network_service import Ensemble
from softbound.services.synth_service import (
    HIGH_PROBABILITY,
    LOW_PROBABILITY,
    SOUND_GAP_TOL,
    run_grid,
)
from softbound.services.verify_service import (
    BoundFamily,
    ScoreRule,
    ScoreSpec,
    attack_sweep,
    clean_score,
    verify_families,
)
from softbound.utils import report_writer
from softbound.utils.log_formatter import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2

CI_REGIONS = 5
CI_DRAWS = 50


class CliUsageError(SoftboundError):
    """Flag combination rejected after parsing."""


def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}')


def _ints(text: str) -> List[int]:
    # '4-8-3' or '4,8,3'
    try:
        values = [int(v) for v in re.split(r'[,-]', text.strip())]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected positive integers like 4-8-3, got {text!r}')
    if any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError(f'expected positive integers, got {text!r}')
    return values


def _kinds(text: str) -> List[BoundKind]:
    try:
        return [BoundKind(v.strip()) for v in text.split(',') if v.strip()]
    except ValueError:
        choices = ', '.join(k.value for k in BoundKind)
        raise argparse.ArgumentTypeError(f'unknown bound kind in {text!r}; choose from {choices}')


def _families(text: str) -> List[BoundFamily]:
    try:
        return [BoundFamily(v.strip()) for v in text.split(',') if v.strip()]
    except ValueError:
        choices = ', '.join(f.value for f in BoundFamily)
        raise argparse.ArgumentTypeError(f'unknown family in {text!r}; choose from {choices}')


@contextlib.contextmanager
def _output(path: Optional[str]) -> Iterator[TextIO]:
    if path is None or path == '-':
        yield sys.stdout
        return
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        yield handle


# ---------------------------------------------------------------------------
# commands

def cmd_bounds(args: argparse.Namespace) -> int:
    """Bound values on a K=2 grid (x1 = 0, x2 swept) or at one point."""
    if args.at is not None:
        x = np.array(args.at)
        if args.k is not None and x.size != args.k:
            raise CliUsageError(f'--at has {x.size} values but --k is {args.k}')
        box = Box(np.full(x.size, args.lo), np.full(x.size, args.hi))
        kinds = args.kinds or applicable_kinds(box.K)
        ev = BoundEvaluator(box, args.index)
        rows = [(float(x[1]), kind.label, ev.evaluate(kind, x)) for kind in kinds]
        rows.append((float(x[1]), 'softmax', ev.exact(x)))
    else:
        if args.k not in (None, 2):
            raise CliUsageError('grid mode needs --k 2; use --at for other K')
        if args.grid < 2:
            raise CliUsageError('--grid needs at least two points')
        box = Box([0.0, args.lo], [0.0, args.hi])
        kinds = args.kinds or applicable_kinds(2)
        ev = BoundEvaluator(box, args.index)
        x2 = np.linspace(args.lo, args.hi, args.grid)
        points = np.column_stack([np.zeros_like(x2), x2])
        rows = []
        for kind in kinds:
            values = np.atleast_1d(ev.evaluate(kind, points))
            rows.extend((a, kind.label, v) for a, v in zip(x2, values))
        rows.extend((a, 'softmax', v) for a, v in zip(x2, np.atleast_1d(ev.exact(points))))
    with _output(args.out) as handle:
        report_writer.write_bounds_csv(handle, rows)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    errors = gradient_check(args.kinds, args.k_values, args.points, args.seed)
    payload = {
        'max_relative_error': {kind.value: err for kind, err in errors.items()},
        'tolerance': GRAD_REL_TOL,
        'passed': all(err < GRAD_REL_TOL for err in errors.values()),
    }
    with _output(args.out) as handle:
        report_writer.write_json(handle, payload)
    return EXIT_OK if payload['passed'] else EXIT_VIOLATION


def cmd_synth(args: argparse.Namespace) -> int:
    if args.ci and args.seed is None:
        raise CliUsageError('--ci requires an explicit --seed')
    regions = args.regions if args.regions is not None else (CI_REGIONS if args.ci else DEFAULT_REGIONS)
    draws = args.draws if args.draws is not None else (CI_DRAWS if args.ci else DEFAULT_DRAWS)
    if regions <= 0 or draws <= 0:
        raise CliUsageError('--regions and --draws must be positive')
    seed = DEFAULT_SEED if args.seed is None else args.seed
    kinds = args.kinds or applicable_kinds(args.k)
    results = run_grid(
        args.k, args.epsilon, regions, draws, kinds, seed,
        case=args.case, linearized=args.linearized,
    )
    with _output(args.out) as handle:
        report_writer.write_synth_csv(handle, results, args.k, seed)
    if args.per_region:
        with _output(args.per_region) as handle:
            report_writer.write_per_region_csv(handle, results)
    unsound = [
        (r.mu_max, s.label) for r in results for s in r.stats.values() if s.min_gap < -SOUND_GAP_TOL
    ]
    if unsound:
        logger.error('Negative gaps (unsound bounds) at %s', unsound)
        return EXIT_VIOLATION
    return EXIT_OK


def cmd_gen_net(args: argparse.Namespace) -> int:
    ensemble = Ensemble.random(args.layers, args.members, args.seed)
    with _output(args.out) as handle:
        report_writer.write_json(handle, ensemble.to_dict())
    return EXIT_OK


def _score_spec(args: argparse.Namespace, ensemble: Ensemble, epsilon: float) -> ScoreSpec:
    x_star = np.zeros(ensemble.inputs) if args.x is None else np.array(args.x)
    if x_star.size != ensemble.inputs:
        raise CliUsageError(f'--x has {x_star.size} entries, network takes {ensemble.inputs}')
    if not 0 <= args.y < ensemble.outputs:
        raise CliUsageError(f'--y must be below {ensemble.outputs}')
    return ScoreSpec(ScoreRule(args.rule), args.y, x_star, epsilon)


def cmd_verify(args: argparse.Namespace) -> int:
    ensemble = Ensemble.load(args.net)
    spec = _score_spec(args, ensemble, args.eps)
    families = args.families or list(BoundFamily)
    results = verify_families(
        ensemble, spec, families, separate=args.separate, seed=args.seed, timing=args.timing
    )
    with _output(args.out) as handle:
        report_writer.write_json(handle, report_writer.verify_report(spec, results, args.separate))
    return EXIT_OK if all(r.sound for r in results) else EXIT_VIOLATION


def cmd_attack(args: argparse.Namespace) -> int:
    ensemble = Ensemble.load(args.net)
    epsilons = args.eps
    if not epsilons:
        raise CliUsageError('--eps needs at least one radius')
    spec = _score_spec(args, ensemble, epsilons[-1])
    values = attack_sweep(ensemble, spec, epsilons, args.steps, args.restarts, args.seed)
    payload = {
        'spec': report_writer.spec_echo(spec),
        'clean_score': clean_score(ensemble, spec),
        'attack_lower_bound': values[-1],
        'sweep': [{'epsilon': e, 'attack_lower_bound': v} for e, v in zip(epsilons, values)],
    }
    with _output(args.out) as handle:
        report_writer.write_json(handle, payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _add_network_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('--net', required=True, help='network JSON file')
    parser.add_argument('--x', type=_floats, default=None, help='center x* (default: zeros)')
    parser.add_argument('--y', type=int, default=0, help='label y* (default: 0)')
    parser.add_argument('--rule', choices=[r.value for r in ScoreRule], default='nll',
                        help='score rule (default: nll)')
    parser.add_argument('--seed', type=int, default=DEFAULT_SEED, help='attack seed')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=APP_NAME, description='Convex bounds on the softmax function.')
    parser.add_argument('--version', action='version', version=f'{APP_NAME} {VERSION}')
    parser.add_argument('-v', '--verbose', action='count', default=0,
                        help='log INFO (-v) or DEBUG (-vv) to stderr')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('bounds', help='evaluate bounds on a grid or at a point')
    p.add_argument('--k', type=int, default=None, help='number of logits (grid mode: 2; --at: point length)')
    p.add_argument('--lo', type=float, default=DEFAULT_GRID_LO, help='box lower end')
    p.add_argument('--hi', type=float, default=DEFAULT_GRID_HI, help='box upper end')
    p.add_argument('--grid', type=int, default=DEFAULT_GRID_POINTS, help='grid points')
    p.add_argument('--at', type=_floats, default=None, help='single point x1,...,xK')
    p.add_argument('--kinds', type=_kinds, default=None, help='comma-separated bound kinds')
    p.add_argument('--index', type=int, default=0, help='softmax output bounded')
    p.add_argument('--out', default=None, help='output file (default: stdout)')
    p.set_defaults(handler=cmd_bounds)

    p = sub.add_parser('gradcheck', help='compare analytic and numeric gradients')
    p.add_argument('--kinds', type=_kinds, default=None)
    p.add_argument('--k-values', type=_ints, default=list(GRADCHECK_K_VALUES))
    p.add_argument('--points', type=int, default=GRADCHECK_POINTS)
    p.add_argument('--seed', type=int, default=DEFAULT_SEED)
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('synth', help='synthetic tightness experiment')
    p.add_argument('--k', type=int, default=DEFAULT_K)
    p.add_argument('--epsilon', type=float, default=DEFAULT_EPSILON)
    p.add_argument('--regions', type=int, default=None, help=f'default {DEFAULT_REGIONS} ({CI_REGIONS} with --ci)')
    p.add_argument('--draws', type=int, default=None, help=f'default {DEFAULT_DRAWS} ({CI_DRAWS} with --ci)')
    p.add_argument('--seed', type=int, default=None, help=f'default {DEFAULT_SEED}; required with --ci')
    p.add_argument('--case', choices=[HIGH_PROBABILITY, LOW_PROBABILITY], default=HIGH_PROBABILITY)
    p.add_argument('--kinds', type=_kinds, default=None)
    p.add_argument('--linearized', action='store_true', help='add midpoint tangent-plane series')
    p.add_argument('--per-region', default=None, help='per-region CSV path')
    p.add_argument('--ci', action='store_true', help='reduced sizes for quick checks')
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser('gen-net', help='write a random ensemble as JSON')
    p.add_argument('--layers', type=_ints, default=list(DEFAULT_LAYER_SIZES), help='e.g. 4-8-3')
    p.add_argument('--members', type=int, default=DEFAULT_MEMBERS)
    p.add_argument('--seed', type=int, required=True)
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_gen_net)

    p = sub.add_parser('verify', help='LP upper bound on the worst-case score')
    _add_network_flags(p)
    p.add_argument('--eps', type=float, required=True, help='l-inf radius')
    p.add_argument('--families', type=_families, default=None)
    p.add_argument('--separate', action='store_true', help='relax each member separately')
    p.add_argument('--timing', action='store_true', help='include wall time')
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_verify)

    p = sub.add_parser('attack', help='PGD lower bound on the worst-case score')
    _add_network_flags(p)
    p.add_argument('--eps', type=_floats, required=True, help='radius, or non-decreasing radii')
    p.add_argument('--steps', type=int, default=ATTACK_STEPS)
    p.add_argument('--restarts', type=int, default=ATTACK_RESTARTS)
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_attack)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except (SoftboundError, ValueError, OSError) as exc:
        print(f'{APP_NAME}: error: {exc}', file=sys.stderr)
        return EXIT_USAGE
