class SacekitError(Exception):
    pass


class UndefinedEstimateError(SacekitError, ArithmeticError):
    """The requested quantity does not exist for these inputs (empty LL, 0/0, empty cell)."""


class InfeasibleError(SacekitError):
    """The inputs contradict the assumptions or imply a negative stratum proportion."""


class IdentificationError(SacekitError):
    """Mixture components could not be matched across arms."""
