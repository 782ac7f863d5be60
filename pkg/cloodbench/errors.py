"""Exception hierarchy. Each family maps to one CLI exit code."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class CloodbenchError(Exception):
    exit_code = EXIT_RUNTIME


class ConfigError(CloodbenchError, ValueError):
    exit_code = EXIT_CONFIG


class DatasetParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(CloodbenchError, RuntimeError):
    pass


class DetectorError(CloodbenchError, RuntimeError):
    pass
