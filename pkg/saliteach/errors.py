"""Exception hierarchy shared by every saliteach module."""

import doctest


class SaliteachError(Exception):
    """Base class for all errors raised on purpose by this package."""


class InvalidSpecError(SaliteachError, ValueError):
    """A planted-task or architecture specification violates its invariants.

    >>> issubclass(InvalidSpecError, ValueError)
    True
    """


class ManifestFormatError(SaliteachError, ValueError):
    """A manifest line or a referenced file has the wrong shape or content."""


class ConfigurationError(SaliteachError, ValueError):
    """A config file, a CLI override or a training request is inconsistent."""


class InputShapeError(SaliteachError, ValueError):
    """A batch does not match the input shape a classifier was built for."""


class UnsupportedArchitectureError(SaliteachError, TypeError):
    """The classifier lacks the GAP + linear head CAM requires."""


class UndefinedAUCError(SaliteachError, ValueError):
    """AUC requested on an empty or single-class scored set."""


class NumericError(SaliteachError, ArithmeticError):
    """NaN or infinity where a finite number is required.

    >>> str(NumericError("score is nan", index=3))
    'score is nan (mask 3)'
    """

    def __init__(self, message: str, index: int | None = None) -> None:
        super().__init__(message)
        self.index = index

    def __str__(self) -> str:
        msg = super().__str__()
        return msg if self.index is None else f"{msg} (mask {self.index})"


def load_tests(loader, tests, ignore):
    tests.addTests(doctest.DocTestSuite())
    return tests


if __name__ == "__main__":
    doctest.testmod()
