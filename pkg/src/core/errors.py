"""
Exception hierarchy shared by the AttrEx core and CLI
"""

from typing import Optional


class AttrExError(Exception):
    """Base class for every AttrEx failure"""


class ShapeMismatchError(AttrExError, ValueError):
    """Tensor shapes disagree with an operation's contract"""


class InvalidClassIndexError(AttrExError, IndexError):
    """Class index outside [0, num_classes)"""


class DivergenceError(AttrExError):
    """Training loss became non-finite"""


class ModelFileError(AttrExError):
    """Model file could not be parsed"""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class UnsupportedLayerError(AttrExError):
    """Layer kind not handled by a propagation rule"""


class LayerNotConvError(AttrExError):
    """GradCAM target layer is not a convolution"""


class SingularFitError(AttrExError):
    """Surrogate regression could not be solved"""


class NonFiniteAttributionError(AttrExError, ValueError):
    """Attribution method returned NaN or infinite relevance"""


class BaselineSpecError(AttrExError, ValueError):
    """Invalid perturbation baseline specification"""


class CorruptManifestError(AttrExError):
    """Archive manifest is missing, malformed or references missing files"""


class ChecksumMismatchError(AttrExError):
    """Stored blob does not match its recorded checksum"""


class CalibrationFailedError(AttrExError):
    """No noise level satisfied the perturbation mode's label condition"""


class CoverageError(AttrExError):
    """Too many samples skipped during meta-evaluation"""


class PreconditionError(AttrExError):
    """Inputs do not satisfy what a command requires"""


class ConfigError(AttrExError, ValueError):
    """Unknown configuration key, profile or id"""


class MetricComputationError(AttrExError):
    """A score could not be computed; `status` is written in place of the score"""

    status = "error"


class UndefinedCorrelationError(MetricComputationError):
    status = "undefined_correlation"


class InsufficientSampleError(MetricComputationError):
    status = "insufficient_sample"

    def __init__(self, message: str, nonzero: int = 0):
        super().__init__(message)
        self.nonzero = nonzero


class AllZeroAttributionError(MetricComputationError):
    status = "all_zero_attribution"


class ZeroPredictionError(MetricComputationError):
    status = "zero_prediction"


class ZeroNormError(MetricComputationError):
    status = "zero_norm"


class DegenerateNeighbourhoodError(MetricComputationError):
    status = "degenerate_neighbourhood"


class EmptyMaskError(MetricComputationError):
    status = "empty_mask"


class ZeroComplexityError(MetricComputationError):
    status = "zero_complexity"


class MissingMaskError(MetricComputationError):
    status = "missing_mask"
