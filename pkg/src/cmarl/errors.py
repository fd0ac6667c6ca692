"""Exception hierarchy shared across the package.

Every failure mode that callers are expected to handle has a named class
here; modules raise these rather than bare ValueError so the CLI can map
them to stable exit codes.
"""


class CmarlError(Exception):
    """Base class for all package-specific errors."""


# volume_io

class MalformedHeader(CmarlError):
    """Header bytes are not a valid NIfTI-1 header in either endianness."""


class UnsupportedDatatype(CmarlError):
    """NIfTI datatype code outside the supported {uint8, int16, float32} set."""


class UnsupportedDimensionality(CmarlError):
    """Header dim[0] is not 3."""


class TruncatedFile(CmarlError):
    """File ends before the declared voxel payload."""


class IoFailure(CmarlError):
    """Underlying OS-level read/write failure."""


class InvalidDims(CmarlError):
    """Requested volume dimensions are out of range."""


class TooManyLandmarks(CmarlError):
    """Landmark spec size outside 1..8."""


class TooFewVolumes(CmarlError):
    """Dataset split needs at least 3 volume ids."""


# environment

class UnknownLandmark(CmarlError):
    """A requested target landmark is not annotated on the volume."""


class VolumeTooSmall(CmarlError):
    """Volume cannot contain the finest-scale ROI."""


class AllAgentsTerminal(CmarlError):
    """step() called with no live agent."""


# qnet / replay / trainer

class ShapeMismatch(CmarlError):
    """Array shape inconsistent with the configured network or buffer."""


class CacheMismatch(CmarlError):
    """Forward cache does not correspond to the given config/params."""


class InsufficientSamples(CmarlError):
    """Replay buffer holds fewer transitions than the requested batch."""


# evaluator

class EmptyInput(CmarlError):
    """Summary requested over zero episode reports."""


# cli

class InvalidConfig(CmarlError):
    """Run config is missing fields or cross-field consistency fails."""


class ChecksumMismatch(CmarlError):
    """Checkpoint bytes do not match their trailing checksum."""


class ConfigMismatch(CmarlError):
    """Checkpoint config is inconsistent with the dataset or request."""


class UnsupportedVersion(CmarlError):
    """Checkpoint format version is newer than this build understands."""
