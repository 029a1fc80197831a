"""Exception hierarchy shared across modules."""


class MobisimError(Exception):
    """Base class for all package errors."""


class FileFormatError(MobisimError):
    """Input file cannot be parsed or is missing required fields."""


class NetworkValidationError(MobisimError):
    """Road network violates a structural invariant (dangling edge, disconnected graph, ...)."""


class NoPathError(MobisimError):
    """No open path between origin and destination; caller should relocate the destination."""

    def __init__(self, origin_edge: str, dest_edge: str):
        super().__init__(f"no open path from edge {origin_edge!r} to edge {dest_edge!r}")
        self.origin_edge = origin_edge
        self.dest_edge = dest_edge


class UnknownElementError(MobisimError):
    """Reference to an edge / node / POI / agent that does not exist."""


class GenerationError(MobisimError):
    """Activity chain generation failed for an agent (e.g. missing POI category)."""


class ResponseParseError(MobisimError):
    """Backend response contains no parsable modification block. Retry-able."""


class ResponseSchemaError(MobisimError):
    """Modification block parsed but violates the schema. Retry-able."""
