"""Exception hierarchy shared by every layer of the package."""


class TeamError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for this category."""

    exit_code = 1


class ConfigError(TeamError):
    """Invalid layer geometry, hyperparameter or experiment configuration."""

    exit_code = 2


class InputError(TeamError):
    """A caller handed in data that violates an operation's precondition."""

    exit_code = 3


class FormatError(InputError):
    """Malformed binary file (IDX or checkpoint)."""

    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PlanError(InputError):
    """Partition plan cannot be satisfied by the dataset."""

    exit_code = 3


class ProtocolError(TeamError):
    """Device updates that cannot be aggregated together."""

    exit_code = 5


class OracleError(TeamError):
    """The finite-difference oracle could not produce a usable reference."""

    exit_code = 6


class ConfigFileError(ConfigError):
    """Every problem found in one experiment file, each with a key locator."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
