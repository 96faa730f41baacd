"""Exception taxonomy shared across the package.

Every error the library raises deliberately derives from LungSwapError so
the CLI can map failures to a machine-readable class name plus a human
message on stderr.
"""


class LungSwapError(Exception):
    """Base class for all deliberate failures."""


# corpus
class MalformedManifest(LungSwapError):
    """Manifest file is missing columns, has bad rows, or an unknown label."""


class MissingFile(LungSwapError):
    """A referenced image or mask is absent or fails validation."""


class DuplicateId(LungSwapError):
    """Two manifest records share an id."""


class EmptyImage(LungSwapError):
    """An image with zero pixels was passed to preprocessing."""


class InsufficientRecords(LungSwapError):
    """Not enough records to build the requested number of swap pairs."""


class IoFailure(LungSwapError):
    """Writing corpus artifacts failed."""


# masking
class NoValidRegion(LungSwapError):
    """Patch rejection sampling exhausted its attempt cap."""


class InsufficientPositions(LungSwapError):
    """Fewer qualifying feature-grid cells than requested positions."""


# network / objectives
class ShapeMismatch(LungSwapError):
    """Tensor shape differs from the configured contract."""


class DimensionMismatch(LungSwapError):
    """Vectors of unequal dimension fed to a similarity computation."""


class EmptyReferenceSet(LungSwapError):
    """Patch co-occurrence judgement requested with zero reference patches."""


class NonFiniteComponent(LungSwapError):
    """A loss component is NaN or infinite."""


# training
class NonFiniteLoss(LungSwapError):
    """Training aborted because a logged loss went non-finite."""


class MissingComponent(LungSwapError):
    """A checkpoint lacks a required component (e.g. the texture encoder)."""


class EmptySubsample(LungSwapError):
    """Semi-supervised subsampling produced no records."""


# metrics
class InsufficientCells(LungSwapError):
    """Masked feature statistics need at least two in-region grid cells."""


class NonPsdCovariance(LungSwapError):
    """Covariance has eigenvalues below the tolerated negative floor."""


class SingleClassLabels(LungSwapError):
    """Balanced error rate needs both positive and negative labels."""


class NoValidClass(LungSwapError):
    """No class has both positives and negatives for AUC averaging."""


# augmentation
class InsufficientSources(LungSwapError):
    """Source pool smaller than the requested structures per target image."""
