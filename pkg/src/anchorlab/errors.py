"""Exception taxonomy. Each class carries the CLI exit code it maps to."""


class AnchorError(Exception):
    exit_code = 1


class ConfigError(AnchorError, ValueError):
    exit_code = 2


class StorageError(AnchorError, OSError):
    """Unwritable/unreadable paths and manifests."""

    exit_code = 3


class OverwriteRefused(AnchorError):
    exit_code = 4


class RegistryError(AnchorError):
    """Unknown domains, id conflicts, fingerprint mismatches, corrupted checkpoints."""

    exit_code = 5


class DomainNotFound(RegistryError, KeyError):
    def __str__(self):
        # KeyError would quote the message
        return str(self.args[0]) if self.args else ""


class DomainConflict(RegistryError):
    pass


class CorruptionError(RegistryError):
    pass


class IntegrityError(RegistryError):
    """The frozen prior changed when it must not have."""


class DomainError(AnchorError, ValueError):
    """An image does not match the expected domain kind or shape."""

    exit_code = 5


class DataError(AnchorError, ValueError):
    exit_code = 3


class UnsupportedSpecError(AnchorError):
    """Operation not defined for this latent-space kind (e.g. W+ ops on a Z prior)."""

    exit_code = 6


class SpecError(AnchorError, ValueError):
    """Shapes or indices inconsistent with the prior's latent/feature spec."""

    exit_code = 6


class ContractError(AnchorError, ValueError):
    exit_code = 2


class TrainingError(AnchorError, RuntimeError):
    exit_code = 7

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class NumericalError(AnchorError, ArithmeticError):
    exit_code = 7
