"""Exception types shared across the library."""


class DegenerateCloudError(ValueError):
    """Raised when a point cloud has no interior points at the requested spacing."""


class IncompleteStencilError(RuntimeError):
    """A quadrant of a directional stencil is empty.

    Signals a mismatch between the search radius and the boundary
    resolution; carries enough context to locate the offending stencil.
    """

    def __init__(self, point_id: int, direction, quadrant: int):
        self.point_id = point_id
        self.direction = tuple(float(c) for c in direction)
        self.quadrant = quadrant
        super().__init__(
            f"incomplete stencil: point {point_id}, direction "
            f"({self.direction[0]:+.6f}, {self.direction[1]:+.6f}), "
            f"empty quadrant {quadrant}"
        )


class DegenerateStencilError(ValueError):
    """Coefficient denominator vanished for a quadrant-valid configuration."""


class DivergenceError(RuntimeError):
    """The explicit iteration produced non-finite values."""


class StalledStepError(RuntimeError):
    """The step-size bound fell below the configured floor."""
