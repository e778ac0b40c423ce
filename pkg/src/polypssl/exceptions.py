"""Exception hierarchy shared by every stage of the pipeline."""


class PolypSSLError(Exception):
    """Base class for all errors raised by this package."""


class CorpusError(PolypSSLError):
    """A corpus directory is empty, inconsistent or unreadable."""


class MissingMaskError(CorpusError):
    def __init__(self, stem):
        super().__init__(f"no mask found for image '{stem}'")
        self.stem = stem


class UnreadableFileError(CorpusError):
    def __init__(self, path, reason=""):
        msg = f"cannot read '{path}'"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)
        self.path = path


class EmptyCorpusError(CorpusError):
    pass


class TooFewSamplesError(PolypSSLError, ValueError):
    pass


class ShapeMismatchError(PolypSSLError, ValueError):
    pass


class InvalidConfigError(PolypSSLError, ValueError):
    """A configuration value violates its section's invariants."""

    def __init__(self, message, section=None, field=None):
        where = ".".join(p for p in (section, field) if p)
        super().__init__(f"{where}: {message}" if where else message)
        self.message = message
        self.section = section
        self.field = field


class IndivisibleSizeError(PolypSSLError, ValueError):
    pass


class ArchitectureMismatchError(PolypSSLError):
    pass


class LeakageError(PolypSSLError):
    """A training pool contains identifiers reserved for the test set."""


class DivergenceError(PolypSSLError, FloatingPointError):
    pass


class ManifestMismatchError(PolypSSLError):
    pass


class EmptySplitError(PolypSSLError, ValueError):
    pass


class InsufficientFoldsError(PolypSSLError, ValueError):
    pass
