"""Exception hierarchy shared by every graspkit module."""


class GraspkitError(Exception):
    """Base class for all library errors."""


class ZeroAreaMesh(GraspkitError):
    pass


class NonWatertight(GraspkitError):
    pass


class MeshFormatError(GraspkitError):
    pass


class DepthOutOfRange(GraspkitError):
    pass


class MissingAttributes(GraspkitError):
    pass


class CorruptHeader(GraspkitError):
    pass


class VersionMismatch(GraspkitError):
    pass


class UnknownObjectId(GraspkitError):
    pass


class EmptyVoxelList(GraspkitError):
    pass


class DegenerateContacts(GraspkitError):
    pass


class EmptyPointSet(GraspkitError):
    pass


class MissingNormals(GraspkitError):
    pass


class MissingGroundTruth(GraspkitError):
    pass


class InvariantViolation(GraspkitError):
    """Raised when an internal consistency check fails (CLI exit code 2)."""
