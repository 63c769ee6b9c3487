"""Exception hierarchy shared by every simulator module."""


class SimulatorError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SimulatorError):
    """Invalid configuration file, override, or hyperparameter combination."""


class NumericError(SimulatorError):
    """Non-finite values or numerically impossible inputs."""


class InvalidLabelError(SimulatorError):
    """A class label outside [0, num_classes)."""


class DegenerateInputError(SimulatorError):
    """Input on which the requested quantity is undefined (e.g. zero vector for cosine)."""


class ShapeError(SimulatorError):
    """Matrix dimensions do not chain."""


class ProtocolError(SimulatorError):
    """Protocol misuse: calls out of order or inconsistent round state."""


class DataFormatError(SimulatorError):
    """A dataset or embedding file violates its schema."""


class EmptyClientError(SimulatorError):
    """Dirichlet partition left a client with zero samples after the retry budget."""


class InvalidGeometryError(SimulatorError):
    """Synthetic benchmark spreads do not produce a separable hierarchy."""


class PromptTooShortError(SimulatorError):
    """A prompt has fewer embedded tokens than the trainable prefix length."""


class InsufficientClassesError(SimulatorError):
    """Server-side prompt training needs at least two present classes."""


class MetricError(SimulatorError):
    """Evaluation requested on an empty or unsupported input."""


class ExportError(SimulatorError):
    """Embedding/description export failed (secondary tooling surface)."""
