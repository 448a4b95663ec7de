"""Exception hierarchy shared by every pipeline stage."""


class CisperError(Exception):
    """Base class; the CLI maps subclasses of this to exit code 1."""


class ConfigurationError(CisperError, ValueError):
    pass


class MalformedDatasetError(CisperError, ValueError):
    def __init__(self, conversation_id, message):
        self.conversation_id = conversation_id
        super().__init__(f"conversation {conversation_id!r}: {message}")


class EmptyLabelsError(CisperError, ValueError):
    pass


class BackendError(CisperError, RuntimeError):
    def __init__(self, message, conversation_id=None, index=None):
        self.conversation_id = conversation_id
        self.index = index
        where = ""
        if conversation_id is not None:
            where = f" [conversation {conversation_id!r}, utterance {index}]"
        super().__init__(f"{message}{where}")


class CorruptCacheError(CisperError, IOError):
    pass


class SchemaError(CisperError, ValueError):
    pass


class CacheMissError(CisperError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class VerbalizerError(CisperError, ValueError):
    pass


class InputTooLongError(CisperError, ValueError):
    pass


class InjectionError(CisperError, ValueError):
    pass


class NumericalError(CisperError, FloatingPointError):
    pass


class TrainingError(CisperError, RuntimeError):
    pass
