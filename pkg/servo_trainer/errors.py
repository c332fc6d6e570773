"""Exception hierarchy shared by the servo pipeline and the CLI exit-code mapping."""


class ServoError(RuntimeError):
    """Base class for domain failures raised by the servo pipeline."""


class UnservoableFrameError(ServoError):
    """Raised when an observation has no matched keypoints to build a graph from."""


class ObservationError(ServoError):
    """Raised when a camera sees no usable keypoints."""


class DatasetError(ServoError):
    """Raised for unreadable model files, datasets or checkpoints."""


class NumericalError(ServoError):
    """Raised when training diverges (non-finite loss or parameters)."""
