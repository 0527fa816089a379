"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its allowed range."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible for an operation."""


class ContractError(RuntimeError):
    """A caller-side precondition was violated (e.g. backward on a non-scalar)."""


class StateError(RuntimeError):
    """An object is in a state that cannot serve the request."""


class DegenerateInputError(ValueError):
    """A point cloud is too small or collapsed for the requested stage."""


class DegenerateGeometryError(ValueError):
    """Correspondences do not determine a unique rigid transform."""
