"""Exception types raised across the package."""


class VPError(Exception):
    """Base class for all estimation errors."""


class DegenerateSegment(VPError):
    pass


class SingularInput(VPError):
    pass


class EmptyInput(VPError):
    pass


class SolverError(VPError):
    """A minimal solver could not produce a frame from its sample."""


class ParallelLines(SolverError):
    pass


class GravitySingularity(SolverError):
    pass


class DenominatorSingularity(SolverError):
    pass


class NoPositiveFocal(SolverError):
    pass


class NegativeFocalSquared(SolverError):
    pass


class VPsAtInfinity(SolverError):
    pass


class NoRealRoot(SolverError):
    pass


class NoCommonRoot(SolverError):
    pass


class NoRootInBracket(SolverError):
    pass


class ConfigMismatch(VPError):
    pass


class InsufficientLines(VPError):
    pass


class DegenerateBundle(VPError):
    pass


class RankDeficient(VPError):
    pass


class NonPositiveFocalSquared(VPError):
    pass


class NoModelFound(VPError):
    pass


class AllZeroWeights(VPError):
    pass
