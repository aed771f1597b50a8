"""Exception types shared across the package.

The CLI maps these onto exit codes: contract violations exit 1, I/O
failures exit 2, numeric divergence exits 3.
"""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class InvalidConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class ContractViolationError(ValueError):
    """A documented runtime contract was broken (e.g. mask outside [0,1])."""


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or otherwise invalid value."""


class SynthesisError(NumericError):
    """Overlap-add synthesis cannot normalize (zero window sum)."""


class TapeReuseError(RuntimeError):
    """backward() was invoked twice on the same recorded forward."""


class EmptyGradientError(RuntimeError):
    """An optimizer step was requested before any backward pass."""
