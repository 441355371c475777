"""Service package initialization."""

from softbound.services.bounds_service import BoundEvaluator, BoundKind, Box, Side
from softbound.services.linearized_service import AffineBound, TangentSpec
from softbound.services.lp_service import LinearProgram, LpSolution, LpStatus
from softbound.services.network_service import Ensemble, Mlp
from softbound.services.synth_service import DirichletSpec
from softbound.services.verify_service import BoundFamily, ScoreRule, ScoreSpec, VerifyResult

__all__ = [
    'AffineBound',
    'BoundEvaluator',
    'BoundFamily',
    'BoundKind',
    'Box',
    'DirichletSpec',
    'Ensemble',
    'LinearProgram',
    'LpSolution',
    'LpStatus',
    'Mlp',
    'ScoreRule',
    'ScoreSpec',
    'Side',
    'TangentSpec',
    'VerifyResult',
]
