"""Exception hierarchy shared across the pipeline."""


class ShiplightError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ShiplightError):
    """Pipeline configuration is invalid; message carries the offending path."""


# -- channel / executor ------------------------------------------------------

class ChannelError(ShiplightError):
    pass


class ConnectTimeout(ChannelError):
    pass


class AuthFailure(ChannelError):
    pass


class ChannelClosed(ChannelError):
    """Command issued on a channel that is not open."""


class ChannelBroken(ChannelError):
    """Connection lost while a command or transfer was in flight."""


class CommandTimeout(ChannelError):
    """Remote process killed after exceeding its deadline; partial output kept."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CommandDenied(ChannelError):
    """argv[0] is not on the host allow-list; nothing was sent."""


class TransferInterrupted(ChannelError):
    pass


class InsufficientSpace(ChannelError):
    pass


class RemotePathMissing(ChannelError):
    pass


# -- remote build ------------------------------------------------------------

class BuildError(ShiplightError):
    pass


class WorkspaceCollision(BuildError):
    """Workspace for (component, stamp) already exists: stamp reuse."""


class ImagePullFailed(BuildError):
    pass


class BuildFailed(BuildError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class ContainerKilled(BuildError):
    """Build container was terminated externally while running."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class CollectEmpty(BuildError):
    """Build exited 0 but produced no output files."""


# -- packaging / store -------------------------------------------------------

class PackagingError(ShiplightError):
    pass


class StampMismatch(PackagingError):
    pass


class BundleCollision(PackagingError):
    pass


class ArchiveFailed(PackagingError):
    pass


class StoreError(ShiplightError):
    pass


class DuplicateStamp(StoreError):
    pass


class StoreUnreachable(StoreError):
    pass


class UnknownStamp(StoreError):
    pass


# -- deploy ------------------------------------------------------------------

class DeployError(ShiplightError):
    pass


class BackupFailed(DeployError):
    pass


class PromoteFailed(DeployError):
    pass


class ConfigRestoreFailed(PromoteFailed):
    pass


class StopFailed(DeployError):
    pass


class StartFailed(DeployError):
    pass


class RollbackFailed(DeployError):
    """Restore did not complete; operator attention required."""


# -- orchestrator / notify ---------------------------------------------------

class CheckoutFailed(ShiplightError):
    pass


class SinkFailed(ShiplightError):
    """A notification sink did not accept the message; never fatal to a run."""
