"""
Error Handling for the linearized probit regression toolkit

This module defines the exception hierarchy shared by the estimators, the
experiment harness and the CLI, together with error logging and the small
recovery helpers used to keep long experiments running when one trial or one
dataset fails.
"""

import logging
import sys
import traceback
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, Optional, TextIO, Union

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE_NAME = "linprobit.log"

# Create logger
logger = logging.getLogger("linprobit")


def configure_logging(
    level: Union[str, int] = "INFO",
    log_dir: Optional[Union[str, Path]] = "logs",
    stream: Optional[TextIO] = None,
) -> logging.Logger:
    """
    Configure the package logger with a stream handler and an optional file handler.

    Args:
        level: Logging level name or number
        log_dir: Directory for the log file; None or "" disables file logging
        stream: Stream for console output (defaults to stderr so stdout stays
            free for result tables)

    Returns:
        The configured package logger
    """
    if isinstance(level, str):
        numeric_level = logging.getLevelName(level.upper())
        if not isinstance(numeric_level, int):
            raise ConfigurationError(
                f"Unknown log level: {level}",
                details={"level": level},
            )
        level = numeric_level

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    logger.setLevel(level)
    formatter = logging.Formatter(LOG_FORMAT)

    stream_handler = logging.StreamHandler(stream or sys.stderr)
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)

    if log_dir:
        # Create logs directory if it doesn't exist
        logs_dir = Path(log_dir)
        logs_dir.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(logs_dir / LOG_FILE_NAME)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


class ErrorSeverity(Enum):
    """Enum for error severity levels."""

    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class LinProbitError(Exception):
    """Base exception class for all toolkit errors."""

    def __init__(
        self,
        message: str,
        severity: ErrorSeverity = ErrorSeverity.ERROR,
        details: Optional[Dict[str, Any]] = None,
    ):
        self.message = message
        self.severity = severity
        self.details = details or {}
        super().__init__(self.message)


class ConfigurationError(LinProbitError):
    """Exception raised for invalid or unknown configuration."""

    pass


class ValidationError(LinProbitError):
    """Exception raised when an argument violates an operation's preconditions."""

    pass


class CovarianceError(ValidationError):
    """Exception raised for asymmetric, indefinite or near-singular covariances."""

    pass


class EstimatorUnavailableError(LinProbitError):
    """Exception raised when an estimator does not exist for the given problem."""

    pass


class NumericalError(LinProbitError):
    """Exception raised when a computation leaves its admissible range."""

    pass


class DataLoadError(LinProbitError):
    """Exception raised for errors while ingesting a dataset."""

    pass


class DatasetNotFoundError(DataLoadError):
    """The dataset file does not exist."""

    pass


class MissingValueError(DataLoadError):
    """A cell of the dataset is empty."""

    pass


class NonNumericError(DataLoadError):
    """A feature cell could not be parsed as a number."""

    pass


class SingleClassError(DataLoadError):
    """The label column holds a single class."""

    pass


class DuplicateHeaderError(DataLoadError):
    """Two columns share the same header name."""

    pass


class VerificationError(LinProbitError):
    """Exception raised when one or more verification properties fail."""

    pass


class OutputError(LinProbitError):
    """Exception raised when results cannot be written."""

    pass


def log_error(
    error: Union[LinProbitError, Exception], context: Optional[Dict[str, Any]] = None
) -> None:
    """
    Log an error with context information.

    Args:
        error: The error to log
        context: Additional context information
    """
    context = context or {}

    if isinstance(error, LinProbitError):
        severity = error.severity
        details = error.details
    else:
        severity = ErrorSeverity.ERROR
        details = {}

    error_info = {
        "message": str(error),
        "type": error.__class__.__name__,
        "severity": severity.value,
        "details": details,
        "context": context,
        "traceback": traceback.format_exc(),
    }

    if severity == ErrorSeverity.CRITICAL:
        logger.critical(f"CRITICAL ERROR: {error}", extra={"error_info": error_info})
    elif severity == ErrorSeverity.ERROR:
        logger.error(f"ERROR: {error}", extra={"error_info": error_info})
    elif severity == ErrorSeverity.WARNING:
        logger.warning(f"WARNING: {error}", extra={"error_info": error_info})
    else:
        logger.info(f"INFO: {error}", extra={"error_info": error_info})


def handle_error(
    error: Union[LinProbitError, Exception],
    context: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Handle an error by logging it and returning a structured error response.

    Args:
        error: The error to handle
        context: Additional context information

    Returns:
        A structured error response
    """
    log_error(error, context)

    if isinstance(error, LinProbitError):
        severity = error.severity
    else:
        severity = ErrorSeverity.ERROR

    return {
        "success": False,
        "error": {
            "message": str(error),
            "type": error.__class__.__name__,
            "severity": severity.value,
        },
    }


def safe_execute(func: Callable[..., Any], *args, **kwargs) -> Dict[str, Any]:
    """
    Execute a function safely, catching and handling any exceptions.

    Args:
        func: The function to execute
        *args: Positional arguments to pass to the function
        **kwargs: Keyword arguments to pass to the function

    Returns:
        {"success": True, "result": ...} or the error response
    """
    try:
        return {"success": True, "result": func(*args, **kwargs)}
    except Exception as e:
        return handle_error(e, {"function": getattr(func, "__name__", repr(func))})


class ErrorHandler:
    """
    Context manager for handling errors in a block of code.

    Example:
        with ErrorHandler(context={"dataset": "SAheart"}) as handler:
            run_benchmark(dataset, estimators, plan, grid)

        if handler.has_error:
            print(f"Error occurred: {handler.error}")
    """

    def __init__(self, context: Optional[Dict[str, Any]] = None):
        self.context = context or {}
        self.error = None
        self.has_error = False
        self.error_response = None

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_val is None:
            return False
        if not isinstance(exc_val, Exception):
            # KeyboardInterrupt and friends
            return False
        self.has_error = True
        self.error = exc_val
        self.error_response = handle_error(exc_val, self.context)
        return True
