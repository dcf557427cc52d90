"""Exception hierarchy shared by all cvsalign modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
SchemaError (and subclasses) -> 3, NumericError (and subclasses) -> 4.
"""


class CvsAlignError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(CvsAlignError):
    """Invalid configuration value or flag combination."""


class SchemaError(CvsAlignError):
    """An input file violates its declared schema."""


class ParseError(SchemaError):
    """A line of an input file is not valid JSON. Message carries the line number."""


class CoverageError(SchemaError):
    """A score file does not cover exactly the records of the evaluated split."""


class NumericError(CvsAlignError):
    """A numeric contract was violated (non-finite values, shape mismatch, ...)."""


class ShapeError(NumericError):
    """Operand dimensions are incompatible."""


class DegenerateInputError(NumericError):
    """An input is in the measure-zero set where an operation is undefined."""


class DegenerateBatchError(NumericError):
    """A contrastive batch has an image with no matching prompt for some criterion."""


class DeterminismError(NumericError):
    """A function required to be deterministic returned differing values."""
