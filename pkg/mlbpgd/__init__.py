"""多段階 Bregman 近接勾配法 (ML-BPGD) ツールキット"""
from .geometry import Box, GeometryKind, GeometrySpec, TranslatedSimplex, bpgd_update, divergence, ref_eval
from .hierarchy import LevelSpec, TriggerParams, assemble_levels
from .objectives import CoarseModel, DDesign, KLAxb, KLbAx, LeastSquares
from .solver import ArmijoParams, SolverTrace, bpgd_run, ml_bpgd_run

__version__ = "0.3.0"
