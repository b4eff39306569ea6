"""Exception hierarchy shared by every skillet module.

Errors are grouped by how callers should react: ``UsageError`` subclasses
mean the caller passed something invalid, ``DataError`` subclasses mean a
file on disk is unusable, and ``ExecutionError`` subclasses are runtime
failures of a rollout.  The CLI maps these groups onto exit codes.
"""


class SkilletError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    code = "error"


class UsageError(SkilletError):
    code = "usage"


class InvalidArgument(UsageError):
    code = "invalid_argument"


class EmptyInput(UsageError):
    code = "empty_input"


class InsufficientPoints(UsageError):
    code = "insufficient_points"


class DimensionMismatch(UsageError):
    code = "dimension_mismatch"


class ConfigError(UsageError):
    code = "config"


class DataError(SkilletError):
    code = "data"


class CorruptCloud(DataError):
    code = "corrupt_cloud"


class VersionMismatch(DataError):
    code = "version_mismatch"


class CorruptManifest(DataError):
    code = "corrupt_manifest"


class MissingCloudFile(DataError):
    code = "missing_cloud_file"


class CorruptRecord(DataError):
    code = "corrupt_record"


class SegmentationError(SkilletError):
    code = "segmentation"


class KeyframeNotFound(SegmentationError):
    code = "keyframe_not_found"

    def __init__(self, k, message=None):
        self.k = k
        super().__init__(message or f"no sustained contact found for subtask {k}")


class OrderViolation(SegmentationError):
    code = "order_violation"


class LibraryIncomplete(SkilletError):
    code = "library_incomplete"

    def __init__(self, demo, k, message=None):
        self.demo = demo
        self.k = k
        super().__init__(message or f"demo {demo!r} has no skill for subtask {k}")


class ExecutionError(SkilletError):
    code = "execution"


class EmptySkill(ExecutionError):
    code = "empty_skill"


class StartInCollision(ExecutionError):
    code = "start_in_collision"


class AlignTimeout(ExecutionError):
    code = "align_timeout"

    def __init__(self, k, message=None):
        self.k = k
        super().__init__(message or f"alignment for subtask {k} did not converge")
