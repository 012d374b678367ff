class OmnisegError(Exception):
    """Base class for all package errors."""


class ContractViolation(OmnisegError, ValueError):
    """An operation was called with arguments outside its contract."""


class GenerationError(OmnisegError):
    """Procedural scene generation could not satisfy its constraints."""


class SceneLoadError(OmnisegError):
    """A scene directory is malformed; the message names the offending file."""


class EmptyTokensError(OmnisegError):
    """No view had a single valid depth pixel, so nothing can be lifted to 3D."""


class ConfigError(OmnisegError):
    """Unknown key or out-of-range value in a configuration file."""


class CheckpointError(OmnisegError):
    """Checkpoint manifest/blob is inconsistent or does not match the config."""
