"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array extents disagree with what an operation requires."""

    def __init__(self, op, dim, expected, got):
        self.op = op
        self.dim = dim
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: {dim} mismatch (expected {expected}, got {got})")


class UsageError(RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class FormatError(ValueError):
    """A binary file failed validation.

    ``kind`` is one of ``bad_magic``, ``bad_version``, ``truncated``,
    ``size_mismatch``, ``non_finite``, ``trailing_bytes``.
    """

    def __init__(self, kind, path, detail=""):
        self.kind = kind
        self.path = str(path)
        self.detail = detail
        msg = f"{self.path}: {kind}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class DataError(ValueError):
    """Dataset on disk is missing pieces or has invalid labels."""


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss) or was given no data."""
