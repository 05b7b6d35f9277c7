"""Shared exception types, mapped onto CLI exit codes in `cli`."""


class ShapeError(ValueError):
    """Tensor or layer dimensions do not line up."""


class NumericError(ValueError):
    """Non-finite values or an invalid probability distribution."""


class StateError(RuntimeError):
    """Stale cache, disabled component, or other contract violation."""


class EmptySlideError(ValueError):
    """No tissue patch survived the mask; the slide is unusable."""


class ProvenanceError(ValueError):
    """Bag lacks the grid coordinates needed to map values onto a slide."""
