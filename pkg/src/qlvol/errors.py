"""Exception hierarchy shared by all modules."""


class QLVolError(Exception):
    """Base class for all package errors."""


class BadConfig(QLVolError, ValueError):
    """A configuration violates its documented invariants."""


class NotPSD(QLVolError, ValueError):
    """A matrix expected to be positive semi-definite has a negative eigenvalue."""


class Singular(QLVolError, ValueError):
    """A matrix expected to be strictly positive definite is (numerically) singular."""


class NotPD(QLVolError, ValueError):
    """A covariance matrix failed its Cholesky factorization.

    Parameters
    ----------
    message : str
    block : int, optional
        Index of the offending block, when known.
    """

    def __init__(self, message, block=None):
        super().__init__(message if block is None else f"{message} (block {block})")
        self.block = block


class BadArity(QLVolError, ValueError):
    """Wrong number of arguments for a closed-form integral."""


class EmptyBlock(QLVolError, ValueError):
    """A block holds no usable increment for some component."""

    def __init__(self, block, component):
        super().__init__(f"block {block} has no increments for component {component}")
        self.block = block
        self.component = component


class EmptyExplanatoryBlock(QLVolError, ValueError):
    """A block holds no observation of some explanatory component."""

    def __init__(self, block):
        super().__init__(f"block {block} has no explanatory observation")
        self.block = block


class BlockTooSmall(QLVolError, ValueError):
    """A block has fewer than two increments for pre-averaging."""


class ContractionViolated(QLVolError, ValueError):
    """The off-diagonal contraction needed for a series expansion does not hold."""


class NonFinite(QLVolError, FloatingPointError):
    """An objective returned a non-finite value."""


class SimplificationMismatch(QLVolError, AssertionError):
    """Two algebraically equal forms of an objective disagree numerically."""


class ShapeMismatch(QLVolError, ValueError):
    """Array shapes are inconsistent with the model architecture."""
