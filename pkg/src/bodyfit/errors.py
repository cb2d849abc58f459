"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """Raised when an input violates a documented precondition."""


class BehindCameraError(InvalidArgument):
    """A point handed to the camera has non-positive depth."""

    def __init__(self, index, depth):
        super().__init__(f"point {index} is behind the camera (z={depth:.6g})")
        self.index = index
        self.depth = depth


class EmptyMaskError(InvalidArgument):
    """Distance transform requested for a mask with no foreground."""


class DegenerateMaskError(InvalidArgument):
    """Mask is all foreground or all background."""


class DegenerateInputError(InvalidArgument):
    """Point set is too small or collapses to a single location."""


class NumericalFailure(RuntimeError):
    """Objective or gradient became non-finite."""
