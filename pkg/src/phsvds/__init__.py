"""Hybrid two-stage sparse SVD: normal-equations stage followed by an
augmented-matrix refinement stage."""

from .analysis import summarize_spectrum
from .errors import (ContractError, FactorizationError, MatrixMarketError,
                     NotConvergedError, RankDeficiencyError, RefusedError)
from .solver import SingularTriplet, SvdConfig, SvdResult, phsvds_solve
from .sparse import SparseMatrix, read_matrix_market, write_matrix_market

__version__ = "0.1.0"

__all__ = [
    "ContractError", "FactorizationError", "MatrixMarketError", "NotConvergedError",
    "RankDeficiencyError", "RefusedError", "SingularTriplet", "SparseMatrix", "SvdConfig",
    "SvdResult", "phsvds_solve", "read_matrix_market", "summarize_spectrum",
    "write_matrix_market",
]
