"""Block-cyclic distributed linear algebra and a resistive-wall response solver."""

from .comm import RankCtx, spawn, world
from .grid import BlockCyclicDesc, ProcessGrid
from .dmat import BlockCyclicMatrix, StripedMatrix
from .pipeline import ResponseSet, SolverConfig, solve_wall_response

__all__ = [
    "BlockCyclicDesc",
    "BlockCyclicMatrix",
    "ProcessGrid",
    "RankCtx",
    "ResponseSet",
    "SolverConfig",
    "StripedMatrix",
    "solve_wall_response",
    "spawn",
    "world",
]

__version__ = "0.1.0"
