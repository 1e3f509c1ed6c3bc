"""Exception types shared across the package.

Most are thin ValueError/RuntimeError subclasses so callers can catch either
the specific condition or the broad builtin category.
"""


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested operation."""


class UnsupportedKind(ValueError):
    """Unknown primitive kind passed to the op dispatcher."""


class NotScalar(ValueError):
    """Backward was started from a non-scalar tensor."""


class NonFiniteFunction(ValueError):
    """Function under gradient check produced NaN or Inf."""


class InvalidRange(ValueError):
    """Noise schedule parameters outside their legal range."""


class TimestepOutOfRange(ValueError):
    """Diffusion timestep outside [1, T]."""


class OddDim(ValueError):
    """Sinusoidal embedding dimension must be even."""


class EmptyLabeledBatch(ValueError):
    """Classification loss called with no labeled samples."""


class ConfigInvalid(ValueError):
    """Experiment configuration failed validation."""


class BadClassIndex(ValueError):
    """Guidance target class outside [0, K)."""


class BadSubsequence(ValueError):
    """DDIM timestep subsequence violates its invariants."""


class EmptySelection(ValueError):
    """Counterfactual batch selection matched no items."""


class GeometryInfeasible(ValueError):
    """Requested phantom lesion cannot fit inside its region."""


class InvalidPrior(ValueError):
    """Class prior outside [0, 1]."""


class DegenerateLabels(ValueError):
    """AUC needs at least one positive and one negative label."""


class EmptyResults(ValueError):
    """Evaluation table requested over an empty result list."""


class MissingBbox(ValueError):
    """Localization scoring needs a bounding box for the target class."""


class TooFewSamples(ValueError):
    """Feature-distance estimate needs more samples."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""


class CheckpointMismatch(RuntimeError):
    """Checkpoint tensors do not match the model being loaded."""


class OracleMissing(RuntimeError):
    """Evaluation step requires a trained oracle checkpoint."""


class IoError(RuntimeError):
    """Filesystem problem while reading or writing run artifacts."""


class UntrainedModelWarning(UserWarning):
    """Counterfactual generation invoked on an apparently untrained model."""
