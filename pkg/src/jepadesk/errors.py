"""Exception types shared across the package.

All domain errors derive from :class:`JepaError` so callers can catch one
base class at CLI boundaries while tests assert on the specific subtypes.
"""


class JepaError(Exception):
    """Base class for all domain errors."""


class ShapeMismatch(JepaError):
    pass


class ZeroRow(JepaError):
    pass


class NonFiniteLoss(JepaError):
    pass


class QueryTooLong(JepaError):
    pass


class EmptyTarget(JepaError):
    pass


class EmptyBank(JepaError):
    pass


class EmptyCandidates(JepaError):
    pass


class BatchTooSmall(JepaError):
    pass


class NotNormalized(JepaError):
    pass


class BadSegmentCount(JepaError):
    pass


class EmptyVideo(JepaError):
    pass


class EmptyPlan(JepaError):
    pass


class EmptyReferences(JepaError):
    pass
