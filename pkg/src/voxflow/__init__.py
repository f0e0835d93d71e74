"""voxflow: volumetric normalizing flows for longitudinal aging forecasts.

Set ``VOXFLOW_THREADS`` before import to pin the BLAS thread count.
"""

import os as _os

if _os.environ.get("VOXFLOW_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["VOXFLOW_THREADS"])

__version__ = "0.1.0"

from .errors import (ContractError, FormatError, NonFiniteError, TrainingDiverged,  # noqa: E402
                     VerificationFailed, VoxflowError)
from .flow import FlowConfig, FlowModel, load_flow, save_flow  # noqa: E402
from .forecast import forecast_n, step  # noqa: E402
from .temporal import NormalizationParams, TemporalConfig, TemporalModel  # noqa: E402

__all__ = [
    "ContractError", "FormatError", "NonFiniteError", "TrainingDiverged", "VerificationFailed",
    "VoxflowError", "FlowConfig", "FlowModel", "load_flow", "save_flow", "forecast_n", "step",
    "NormalizationParams", "TemporalConfig", "TemporalModel",
]
