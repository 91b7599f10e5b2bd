"""Exception types raised across the package."""


class DensPlanError(Exception):
    pass


class NonFiniteState(DensPlanError):
    """Integration produced NaN/inf, usually from unstable gains or inputs."""


class HorizonExceeded(DensPlanError):
    """A learned predictor was queried beyond its training horizon."""


class EmptySupport(DensPlanError):
    """No query point landed inside the inflated reach-set approximation."""


class DivergedTraining(DensPlanError):
    """Training loss became non-finite."""


class Infeasible(DensPlanError):
    """The trajectory optimizer missed its terminal or clearance tolerance."""

    def __init__(self, message, plan=None, report=None):
        super().__init__(message)
        self.plan = plan
        self.report = report


class RepairFailed(DensPlanError):
    """No perturbation candidate passed the safety check."""


class PlanFailed(DensPlanError):
    def __init__(self, segment, message=""):
        super().__init__(message or f"segment {segment} could not be repaired")
        self.segment = segment


class GenerationExhausted(DensPlanError):
    """Environment generation hit its attempt budget."""


class ConfigError(DensPlanError):
    pass
