"""Exception hierarchy. Every error carries a ``context`` dict for programmatic inspection."""


class SplitGuardError(Exception):
    def __init__(self, message, **context):
        super().__init__(message)
        self.context = context


class ShapeError(SplitGuardError, ValueError):
    pass


class CacheError(SplitGuardError, ValueError):
    pass


class LabelError(SplitGuardError, ValueError):
    pass


class ConfigError(SplitGuardError, ValueError):
    pass


class PrivacyError(SplitGuardError, ValueError):
    pass


class DataFormatError(SplitGuardError, ValueError):
    pass


class TrainingError(SplitGuardError, RuntimeError):
    pass


class OutputError(SplitGuardError, OSError):
    pass
