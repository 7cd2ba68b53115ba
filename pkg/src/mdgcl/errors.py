"""Exception types shared across the package."""


class MdgclError(Exception):
    pass


class ValidationError(MdgclError, ValueError):
    """Input violates a documented contract (bad graph, bad config, bad split)."""


class FormatError(MdgclError):
    """An on-disk file does not follow its documented layout."""


class NumericError(MdgclError, ArithmeticError):
    """A loss or gradient became non-finite."""
