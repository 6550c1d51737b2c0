"""Exception types raised by the gaitreid library.

Everything derives from :class:`GaitError` so callers (and the CLI) can
distinguish library data errors from genuine bugs.
"""


class GaitError(Exception):
    """Base class for all gaitreid errors."""


# --- silhouette pipeline ---------------------------------------------------

class DimensionMismatch(GaitError):
    """Two grids that must share a shape do not."""


class EmptySilhouette(GaitError):
    """A silhouette has no foreground pixels where at least one is required."""


class AllFramesDropped(GaitError):
    """Every frame of a tracklet failed the quality filter."""


# --- embedder / trainer ----------------------------------------------------

class InvalidConfig(GaitError):
    """A configuration value is out of its documented range."""


class EmptySet(GaitError):
    """Set pooling was asked to aggregate zero frames."""


class IndivisibleHeight(GaitError):
    """A pyramid scale does not divide the feature map height."""


class ShapeMismatch(GaitError):
    """A gradient or tensor does not match the expected shape."""


class InsufficientIdentities(GaitError):
    """The dataset has fewer identities than a batch requires."""


class NoValidTriplets(GaitError):
    """The batch labels admit no (anchor, positive, negative) triplet."""


# --- retrieval ---------------------------------------------------------------

class ZeroVector(GaitError):
    """A zero vector cannot be l2-normalized."""


class NoPositives(GaitError):
    """A ranking contains no positive match."""


class NoValidQueries(GaitError):
    """Every query was excluded (no cross-camera positives anywhere)."""


class MissingView(GaitError):
    """A required view angle is absent from the gallery or probe set."""


class EmptyInput(GaitError):
    """An aggregation was asked to pool zero frame features."""


# --- data files --------------------------------------------------------------

class MalformedLine(GaitError):
    """A manifest line failed to parse; carries the 1-based line number."""

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class DuplicateId(GaitError):
    """Two records share a tracklet id."""


class LayoutError(GaitError):
    """A dataset directory does not follow the expected layout."""


class BadMagic(GaitError):
    """A binary file does not start with the expected magic/version."""


class DimMismatch(GaitError):
    """Stored vectors disagree on dimensionality."""


class Truncated(GaitError):
    """A binary file ended mid-record."""


# --- synthetic generator -----------------------------------------------------

class InvalidCanvas(GaitError):
    """The rendered figure does not fit the label map canvas."""
