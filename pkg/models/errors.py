class SpeNetError(Exception):
    """Base error. `code` is the machine-readable tag printed by the CLI."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class InvalidInputError(SpeNetError):
    code = "invalid_input"


class ShapeMismatchError(SpeNetError):
    code = "shape_mismatch"


class ConfigError(SpeNetError):
    code = "config_invalid"


class UnknownShapeClassError(SpeNetError):
    code = "unknown_shape"


class EmptyDatasetError(SpeNetError):
    code = "empty_dataset"


class StageOutOfRangeError(SpeNetError):
    code = "stage_out_of_range"


# --- Checkpoint errors ---
class CheckpointError(SpeNetError):
    code = "checkpoint"


class CheckpointVersionError(CheckpointError):
    code = "checkpoint_version"


class CheckpointTruncatedError(CheckpointError):
    code = "checkpoint_truncated"


class CheckpointUnknownTensorError(CheckpointError):
    code = "checkpoint_unknown_tensor"


class CheckpointShapeError(CheckpointError):
    code = "checkpoint_shape"


class TrainingDivergedError(SpeNetError):
    code = "training_diverged"

    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(message)
        # -1 when the very first epoch already diverged
        self.last_finite_epoch = last_finite_epoch


class GradientCheckError(SpeNetError):
    code = "gradcheck_failed"
