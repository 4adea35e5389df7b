"""Robust recurrent mixture-density models for multivariate time-series anomaly detection."""

__version__ = "0.1.0"

from .density import ComponentParams, ContaminationSpec, Family, MixtureParams  # noqa: E402
from .errors import CorruptFile, InvalidArgument, InvalidState, NumericalError, ParseError, RSMMError  # noqa: E402
from .network import VARIANTS, ModelConfig, ModelWeights  # noqa: E402

__all__ = [
    "ComponentParams",
    "ContaminationSpec",
    "CorruptFile",
    "Family",
    "InvalidArgument",
    "InvalidState",
    "MixtureParams",
    "ModelConfig",
    "ModelWeights",
    "NumericalError",
    "ParseError",
    "RSMMError",
    "VARIANTS",
]
