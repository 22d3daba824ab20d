"""Doped Kronecker-product compression for LSTM language models.

A weight matrix is expressed as alpha * (B kron C) + beta * M_sp, where the
factor pair is small and M_sp is an extremely sparse trainable overlay that
restores the degrees of freedom the structure removes.  The package ships
the full training machinery (gradual magnitude pruning, scaled variants with
norm regularizers, block coordinate descent, co-matrix row dropout) and a
desk-scale LSTM language-model pipeline that exercises it end to end.
"""

from .baselines import LowRankPair, PrunedDense, budget_match
from .config import PRESETS, ConfigError, TrainConfig, parse_config
from .doped import BcdPhase, CmrMaskDraw, DopedLayer, DopedMode
from .kron import KronFactorPair, kron_materialize, kron_matvec
from .nn import LmModel, LstmCell, NumericError, Optimizer, grad_check
from .overlay import PruneSchedule, SparseOverlay, prune_to_sparsity, schedule_sparsity
from .report import CompressionReport, CurvePoint, compression_factor

__all__ = [
    "BcdPhase", "CmrMaskDraw", "CompressionReport", "ConfigError", "CurvePoint",
    "DopedLayer", "DopedMode", "KronFactorPair", "LmModel", "LowRankPair",
    "LstmCell", "NumericError", "Optimizer", "PRESETS", "PruneSchedule",
    "PrunedDense", "SparseOverlay", "TrainConfig", "budget_match",
    "compression_factor", "grad_check", "kron_materialize", "kron_matvec",
    "parse_config", "prune_to_sparsity", "schedule_sparsity",
]

__version__ = "0.1.0"
