class ContractError(ValueError):
    """An operation was called with arguments violating its contract."""


class ShapeError(ContractError):
    pass


class DegenerateError(ContractError):
    """Singular geometry: points at infinity, collinear points, non-invertible maps."""


class FormatError(ValueError):
    """Malformed file or manifest on disk."""
