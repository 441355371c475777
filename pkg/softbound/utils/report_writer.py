"""CSV and JSON report emission with deterministic formatting."""

import csv
import json
import math
from typing import Dict, Iterable, List, Sequence, TextIO

from softbound.services.synth_service import ExperimentResult, pairwise_ratios
from softbound.services.verify_service import ScoreSpec, VerifyResult

SYNTH_COLUMNS = [
    'mu_max', 'kind', 'side', 'mean_gap', 'mean_ratio', 'stderr_ratio',
    'regions', 'draws', 'epsilon', 'K', 'seed',
]
PER_REGION_COLUMNS = ['mu_max', 'region', 'kind', 'side', 'mean_gap', 'ratio']
BOUNDS_COLUMNS = ['x2', 'kind', 'value']


def format_float(value: float) -> str:
    """Shortest round-tripping text for a float; inf/nan spelled out."""
    value = float(value)
    if math.isnan(value):
        return 'nan'
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return repr(value)


def _writer(handle: TextIO) -> csv.writer:
    return csv.writer(handle, lineterminator='\n')


def write_bounds_csv(handle: TextIO, rows: Iterable[Sequence]) -> None:
    """
    Write `x2,kind,value` rows.

    Args:
        handle: Output stream
        rows: (x2, kind label, value) triples
    """
    writer = _writer(handle)
    writer.writerow(BOUNDS_COLUMNS)
    for x2, kind, value in rows:
        writer.writerow([format_float(x2), kind, format_float(value)])


def write_synth_csv(handle: TextIO, results: Iterable[ExperimentResult], K: int, seed: int) -> None:
    """One row per (mu_max, series)."""
    writer = _writer(handle)
    writer.writerow(SYNTH_COLUMNS)
    for result in results:
        for label, stats in result.stats.items():
            writer.writerow([
                format_float(result.mu_max), label, stats.side.value,
                format_float(stats.mean_gap), format_float(stats.mean_ratio),
                format_float(stats.stderr_ratio), stats.regions, result.draws,
                format_float(result.epsilon), K, seed,
            ])


def write_per_region_csv(handle: TextIO, results: Iterable[ExperimentResult]) -> None:
    """Per-region gaps and ratios, plus ER-over-LSE pairwise ratio series."""
    writer = _writer(handle)
    writer.writerow(PER_REGION_COLUMNS)
    for result in results:
        mu = format_float(result.mu_max)
        for label, stats in result.stats.items():
            for region, (gap, ratio) in enumerate(zip(stats.region_gaps, stats.region_ratios)):
                writer.writerow([mu, region, label, stats.side.value, format_float(gap), format_float(ratio)])
        for label, ratios in pairwise_ratios(result).items():
            side = 'upper' if label.startswith('er_hi') else 'lower'
            for region, ratio in enumerate(ratios):
                writer.writerow([mu, region, label, side, '', format_float(ratio)])


def _json_number(value: float):
    value = float(value)
    return value if math.isfinite(value) else format_float(value)


def spec_echo(spec: ScoreSpec) -> Dict:
    return {
        'rule': spec.rule.value,
        'y_star': spec.y_star,
        'x_star': [float(v) for v in spec.x_star],
        'epsilon': spec.epsilon,
    }


def verify_report(spec: ScoreSpec, results: List[VerifyResult], separate: bool = False) -> Dict:
    """
    Verification report: spec echo, per-family bounds and the attack value.

    Wall time appears only for results that recorded it.
    """
    families = {}
    for result in results:
        entry = {
            'score_upper_bound': _json_number(result.score_upper_bound),
            'lp_status': result.lp_status.value,
            'lp_objective': _json_number(result.lp_objective),
            'lp_variables': result.lp_variables,
            'lp_rows': result.lp_rows,
            'sound': result.sound,
        }
        if result.seconds is not None:
            entry['seconds'] = result.seconds
        families[result.bound_family.value] = entry
    attack = results[0].attack_lower_bound if results else float('nan')
    clean = results[0].clean_score if results else float('nan')
    return {
        'spec': spec_echo(spec),
        'separate': separate,
        'clean_score': _json_number(clean),
        'attack_lower_bound': _json_number(attack),
        'families': families,
    }


def write_json(handle: TextIO, payload: Dict) -> None:
    json.dump(payload, handle, indent=2, sort_keys=True)
    handle.write('\n')
