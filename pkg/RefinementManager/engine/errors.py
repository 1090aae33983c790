class RefinementError(ValueError):
    """Base class for every input or capability problem raised by the engine."""


class ModelError(RefinementError):
    pass


class DensityError(RefinementError):
    pass


class DegreeCapExceeded(DensityError):
    """Exact piecewise-polynomial arithmetic would exceed the degree cap."""


class SpecError(RefinementError):
    pass


class CapabilityError(RefinementError):
    """The requested engine cannot handle this refinement spec."""


class ControlError(RefinementError):
    pass
