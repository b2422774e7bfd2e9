"""Shared infrastructure: the logging console, the error hierarchy and small helpers used across the
package."""

import enum
import hashlib
import os
import rich.console

kAvailableFormats = ("txt", "svg", "html")

# environment overrides, the only ones honored
kEnvLogLevel = "EMOSTACK_LOG_LEVEL"
kEnvCacheDir = "EMOSTACK_CACHE_DIR"


################################################################################
# errors
################################################################################


class EmostackError(RuntimeError):
    """Base class of all user-facing failures. `code` is a short machine-readable identifier, and
    `exit_code` is what the CLI returns to the shell when the error escapes a command."""

    code = "runtime"
    exit_code = 4

    def __init__(self, detail: str) -> None:
        assert isinstance(detail, str)
        super().__init__(detail)
        self.detail = detail

    def oneLine(self) -> str:
        return f"error:{self.code}:" + " ".join(self.detail.split())


class ConfigError(EmostackError):
    code = "config"
    exit_code = 2

    def __init__(self, violations: str | list[str]) -> None:
        if isinstance(violations, str):
            violations = [violations]
        assert len(violations) > 0
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(EmostackError):
    code = "data"
    exit_code = 3


class TsvParseError(DataError):
    code = "parse"

    def __init__(self, path: str, line_no: int, detail: str) -> None:
        self.path, self.line_no = path, line_no
        super().__init__(f"{path}:{line_no}: {detail}")


class ValidationError(DataError):
    code = "validation"

    def __init__(self, path: str, line_no: int, detail: str) -> None:
        self.path, self.line_no = path, line_no
        super().__init__(f"{path}:{line_no}: {detail}")


class EmptyDatasetError(DataError):
    code = "empty"


class ShapeError(EmostackError):
    code = "shape"


class AlignmentError(EmostackError):
    code = "alignment"


class CapabilityError(EmostackError):
    code = "capability"


class CacheError(EmostackError):
    code = "cache"


class CheckpointError(EmostackError):
    code = "checkpoint"


class CorruptCheckpointError(CheckpointError):
    code = "checkpoint_corrupt"


class CheckpointVersionError(CheckpointError):
    code = "checkpoint_version"


class NonFiniteLossError(EmostackError):
    code = "nonfinite_loss"

    def __init__(self, epoch: int, batch_idx: int, value: float) -> None:
        self.epoch, self.batch_idx = epoch, batch_idx
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch_idx}")


################################################################################
# logging
################################################################################


class LoggingConsole(rich.console.Console):
    """rich Console with leveled, tag-prefixed log methods. Lines below `log_level` are dropped."""

    class LogLevel(enum.IntEnum):
        Debug = 0
        Info = 1
        Warning = 2
        Error = 3
        Failure = 4
        Critical = 5

    # level -> (tag color, tag)
    _kTags = {
        LogLevel.Debug: ("gray", "dbg"),
        LogLevel.Info: ("white", "info"),
        LogLevel.Warning: ("yellow", "warn"),
        LogLevel.Error: ("orange", "Err"),
        LogLevel.Failure: ("red", "FAIL"),
        LogLevel.Critical: ("magenta", "CRIT"),
    }

    def __init__(self, log_level: LogLevel = LogLevel.Debug, **kwargs):
        assert isinstance(log_level, LoggingConsole.LogLevel)
        self.log_level = log_level
        kwargs.setdefault("emoji", False)
        kwargs.setdefault("highlight", False)
        super().__init__(**kwargs)

    def logAt(self, level: LogLevel, *args, **kwargs):
        if level < self.log_level:
            return None
        color, tag = LoggingConsole._kTags[level]
        # an empty sep still separates the tag from the message
        kwargs.setdefault("sep", " ")
        tag_sep = kwargs["sep"] or " "
        return super().print(f"[[{color}]{tag:4s}[/{color}]]{tag_sep}", *args, **kwargs)

    def debug(self, *args, **kwargs):
        return self.logAt(LoggingConsole.LogLevel.Debug, *args, **kwargs)

    def info(self, *args, **kwargs):
        return self.logAt(LoggingConsole.LogLevel.Info, *args, **kwargs)

    def warning(self, *args, **kwargs):
        return self.logAt(LoggingConsole.LogLevel.Warning, *args, **kwargs)

    def error(self, *args, **kwargs):
        return self.logAt(LoggingConsole.LogLevel.Error, *args, **kwargs)

    def failure(self, *args, **kwargs):
        return self.logAt(LoggingConsole.LogLevel.Failure, *args, **kwargs)

    def critical(self, *args, **kwargs):
        return self.logAt(LoggingConsole.LogLevel.Critical, *args, **kwargs)


def logLevelFromName(name: str | None, default: LoggingConsole.LogLevel) -> LoggingConsole.LogLevel:
    """Maps a case-insensitive level name (as used in EMOSTACK_LOG_LEVEL) to a LogLevel"""
    if name is None or len(name.strip()) == 0:
        return default
    levels = {lvl.name.lower(): lvl for lvl in LoggingConsole.LogLevel}
    lname = name.strip().lower()
    if lname not in levels:
        raise ConfigError(
            f"{kEnvLogLevel}='{name}' is not a valid log level (options: {', '.join(levels)})"
        )
    return levels[lname]


def toLogger(debug_log: "None | bool | LoggingConsole") -> LoggingConsole | None:
    """Normalizes the debug_log argument convention used across the package: None or False disables
    logging, True creates a debug console, and a LoggingConsole instance is used as is."""
    if debug_log is None or (isinstance(debug_log, bool) and not debug_log):
        return None
    if isinstance(debug_log, bool):
        return LoggingConsole(log_level=LoggingConsole.LogLevel.Debug)
    assert isinstance(debug_log, LoggingConsole)
    return debug_log


def detectExportFormat(export_to: str | None, export_fmt: str | None) -> str | None:
    """Format to export rendered tables in, None when not exporting. Inferred from the file
    extension unless given explicitly."""
    if export_to is None:
        if export_fmt is not None:
            raise ConfigError("--export_fmt needs --export_to")
        return None
    if not isinstance(export_to, str) or len(export_to) == 0:
        raise ConfigError("--export_to must be a non-empty path")
    if export_fmt is not None and export_fmt not in kAvailableFormats:
        raise ConfigError(
            f"--export_fmt must be one of {', '.join(kAvailableFormats)}, got '{export_fmt}'"
        )

    if export_fmt is None:
        ext = os.path.splitext(export_to)[1]
        if ext not in ["." + e for e in kAvailableFormats]:
            raise ConfigError(f"Unrecognized export file extension '{ext}' of '{export_to}'")
        export_fmt = ext[1:]

    return export_fmt


def fileSha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
