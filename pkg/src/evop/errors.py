"""Exception hierarchy shared by every layer of the manager."""


class EvopError(Exception):
    """Base class. ``code`` is the name sent in ERROR frames."""

    @property
    def code(self) -> str:
        return type(self).__name__


# provider layer
class UnknownProvider(EvopError):
    pass


class UnknownInstance(EvopError):
    pass


class UnknownImage(EvopError):
    pass


class CapacityExceeded(EvopError):
    pass


class AlreadyTerminated(EvopError):
    pass


class NotRunning(EvopError):
    pass


class InvalidTransition(EvopError):
    pass


# simulator
class PastEvent(EvopError):
    pass


# model library
class ModelConflict(EvopError):
    pass


class UnknownModel(EvopError):
    pass


# broker
class UnknownSession(EvopError):
    pass


class AlreadyClosed(EvopError):
    pass


class TargetNotRunning(EvopError):
    pass


class PlacementFailed(EvopError):
    pass


class CorruptCache(EvopError):
    pass


class BrokerUnavailable(EvopError):
    pass


class ProtocolError(EvopError):
    pass


# gateway
class ModelNotServed(EvopError):
    pass


class MalformedRequest(EvopError):
    pass


# harness
class ParseError(EvopError):
    pass


class ValidationError(EvopError):
    """Carries every problem found, not only the first."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class UnreadableTrace(EvopError):
    pass
