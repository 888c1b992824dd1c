"""Exception hierarchy for the archslim pipeline.

Everything raised on bad data derives from ArchslimError so callers (and the
CLI) can distinguish data problems from genuine bugs with one except clause.
"""


class ArchslimError(Exception):
    """Base class for all archslim data errors."""


# --- weight container ---------------------------------------------------


class BadMagic(ArchslimError):
    """File does not start with the NWF magic bytes."""


class VersionUnsupported(ArchslimError):
    """NWF container version is not understood by this build."""


class CorruptHeader(ArchslimError):
    """Header is unparseable or inconsistent with the payload."""


class NonFiniteWeight(ArchslimError):
    """A stored weight is NaN or infinite."""


class IoFailure(ArchslimError):
    """Underlying filesystem operation failed."""


class InvalidNetwork(ArchslimError):
    """In-memory network violates a container invariant."""


# --- spectral analysis --------------------------------------------------


class WrongRank(ArchslimError):
    """Tensor rank does not match the expected layer kind."""


class ZeroSamples(ArchslimError):
    """Too few flattened parameters per filter to form a covariance."""


class NotSymmetric(ArchslimError):
    """Matrix handed to the eigen solver is not symmetric."""


class NotPSD(ArchslimError):
    """Covariance has a negative eigenvalue beyond round-off tolerance."""


class NoConvergence(ArchslimError):
    """Eigen solver failed to converge."""


class ZeroVariance(ArchslimError):
    """All eigenvalues are zero: the layer carries no parameter diversity."""


class DeltaOutOfRange(ArchslimError):
    """Variance threshold outside [0, 1]."""


# --- planning -----------------------------------------------------------


class EmptyNetwork(ArchslimError):
    """Network contains no convolution layers to plan over."""


class FingerprintMismatch(ArchslimError):
    """Plan was generated from a different weight file."""


class InvalidPlan(ArchslimError):
    """Plan JSON is unparseable or violates a plan invariant."""


# --- pruning ------------------------------------------------------------


class MissingBnGamma(ArchslimError):
    """BN-scale criterion requested without batch-norm parameters."""


class LengthMismatch(ArchslimError):
    """Per-filter vector length disagrees with the filter count."""


class KeepOutOfRange(ArchslimError):
    """Requested survivor count is not in [1, filter count]."""


class DanglingFollows(ArchslimError):
    """A follows edge points at a missing or incompatible layer."""


class CouplingConflict(ArchslimError):
    """Members of one coupling group disagree on filter count."""


# --- statistics ---------------------------------------------------------


class ShapeMismatch(ArchslimError):
    """Architecture is channel- or spatially-inconsistent."""


class LayerSetMismatch(ArchslimError):
    """Two stat reports cover different layer sets."""
