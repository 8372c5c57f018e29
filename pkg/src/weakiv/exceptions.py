"""Exception hierarchy.

Everything raised on purpose by this package derives from :class:`WeakIVError`
so callers can catch one base class at API boundaries.  The concrete classes
map onto failure categories that carry different exit codes in the CLI.
"""

from __future__ import annotations


class WeakIVError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(WeakIVError):
    """Array shapes are inconsistent with the declared dimensions."""


class ConfigError(WeakIVError):
    """A configuration file or option set is malformed or contradictory."""


class RankDeficient(WeakIVError):
    """A matrix that must be invertible is singular or too ill-conditioned.

    Raised only on user-facing single-shot paths.  Monte Carlo loops never
    raise this; they record the extreme draw and continue.
    """


class NonPSD(WeakIVError):
    """A matrix that must be positive semidefinite is not, beyond tolerance."""


class Degenerate(WeakIVError):
    """A cell has too few observations to estimate its error covariance."""
