"""Exception hierarchy shared across the engine."""


class DeskloopError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(DeskloopError):
    pass


class SequencingError(DeskloopError):
    """A step record was appended out of order."""


# -- parsing ---------------------------------------------------------------


class ParseError(DeskloopError):
    """Base for all parser failures; parsers raise only subclasses of this."""


class MalformedOutputError(ParseError):
    pass


class UnknownActionError(ParseError):
    pass


class ActionArgumentError(ParseError, ValueError):
    pass


class RenderError(DeskloopError):
    pass


# -- backends --------------------------------------------------------------


class BackendError(DeskloopError):
    pass


class TransportError(BackendError):
    """A single attempt failed; retried by the gateway."""


class BackendUnavailableError(BackendError):
    pass


class EmptyOutputError(BackendError):
    pass


class ReplayExhaustedError(BackendError):
    pass


class GroundingError(DeskloopError):
    pass


# -- environment / tools ---------------------------------------------------


class WorldLoadError(DeskloopError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class PolicyViolation(DeskloopError):
    pass


class NotApplicableError(DeskloopError):
    """Micro-verification requested for an action that is not a UI action."""


class EmptyInputError(DeskloopError, ValueError):
    pass
