"""Few-shot organ segmentation by meta-learning a U-Net initialisation."""
from .errors import (ConfigurationError, DataError, MetaSegError, NumericError, ProtocolError,
                     TrainingDivergedError)
from .segnet import ArchDescriptor, ParamVector

__version__ = "0.1.0"

__all__ = ["ArchDescriptor", "ParamVector", "MetaSegError", "ConfigurationError", "DataError",
           "NumericError", "ProtocolError", "TrainingDivergedError", "__version__"]
