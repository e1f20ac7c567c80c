"""Exception types shared across the package."""


class GsAvatarError(Exception):
    """Base class for all package-specific errors."""


class InvalidParameterError(GsAvatarError, ValueError):
    """An argument violates an operation's preconditions."""


class InvalidStateError(GsAvatarError, RuntimeError):
    """An object holds non-finite or otherwise unusable state."""


class ContractError(GsAvatarError, RuntimeError):
    """Paired forward/backward inputs do not match."""


class FormatError(GsAvatarError, ValueError):
    """A file (PLY, OBJ, dataset folder, pose track) is malformed."""
