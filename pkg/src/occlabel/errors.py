"""Exception hierarchy shared across occlabel."""


class OccLabelError(Exception):
    """Base class for all library errors."""


class OutOfRange(OccLabelError):
    """A query time lies outside the span of a trajectory."""


class DegenerateRay(OccLabelError):
    """Ray origin and endpoint coincide."""


class NoPlane(OccLabelError):
    """RANSAC could not find a supported ground plane."""


class MisalignedSequences(OccLabelError):
    """Two label/scan sequences do not line up (ids or dimensions)."""


class ConfigError(OccLabelError):
    """Invalid configuration value or file."""


class FormatError(OccLabelError):
    """Structural problem in a binary or text input file.

    ``offset`` is the byte offset (or line number for text formats) at which
    the problem was detected.
    """

    def __init__(self, message: str, path=None, offset: int | None = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedFile(FormatError):
    pass


class TrailingData(FormatError):
    pass


class CorruptRecord(FormatError):
    pass
