"""Exception types shared across onedatum."""


class OneDatumError(Exception):
    """Base class for library errors."""


class ConfigError(OneDatumError, ValueError):
    """Invalid configuration or argument value."""


class PreconditionError(OneDatumError, ValueError):
    """An input violates an operation's precondition."""


class LoadError(OneDatumError, OSError):
    """A source file could not be read or decoded."""


class UnsupportedMixError(OneDatumError, ValueError):
    """A mix augmentation was requested for inputs it cannot handle."""


class TrainingDivergedError(OneDatumError, RuntimeError):
    """The training loss became non-finite."""


class MissingPrerequisiteError(OneDatumError, RuntimeError):
    """A run needs a checkpoint, dataset or source file that does not exist."""


class ChecksumError(OneDatumError, RuntimeError):
    """A downloaded or cached dataset failed integrity verification."""
