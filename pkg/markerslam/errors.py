from typing import Optional


class MarkerSlamError(Exception):
    def __init__(self, message: Optional[str] = None):
        self.message = message or self.__class__.__name__
        super().__init__(self.message)


class InputError(MarkerSlamError):
    pass


class SolverError(MarkerSlamError):
    pass


# geometry
class PointBehindCamera(SolverError):
    pass


class LevelOutOfRange(InputError):
    pass


# map store
class DeadId(InputError):
    pass


class EmptyInput(InputError):
    pass


class DegenerateDirections(SolverError):
    pass


class NonPositiveSide(InputError):
    pass


class DuplicateObservation(InputError):
    pass


class BadMagic(InputError):
    pass


class UnsupportedVersion(InputError):
    pass


class TruncatedStream(InputError):
    pass


# marker solver
class DegenerateCorners(SolverError):
    pass


class NoConvergence(SolverError):
    pass


class InsufficientBaseline(SolverError):
    pass


class AllCandidatesInconsistent(SolverError):
    pass


class NoCommonMarkers(SolverError):
    pass


class InsufficientParallax(SolverError):
    pass


# optimizer
class InsufficientConstraints(SolverError):
    pass


class DivergedSolve(SolverError):
    pass


class SingularSystem(SolverError):
    pass


class EmptyChain(InputError):
    pass


# pipeline
class InitFailed(SolverError):
    pass


class InvalidConfig(InputError):
    pass


# simulation
class UnknownScenario(InputError):
    pass


# evaluation
class DegenerateConfiguration(SolverError):
    pass


class EmptySubset(InputError):
    pass


class NonMonotonicTimestamps(InputError):
    pass
