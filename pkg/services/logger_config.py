import logging
import time
from logging.handlers import RotatingFileHandler
import os

from dotenv import load_dotenv

load_dotenv()

# Create logs directory if it doesn't exist
LOGS_DIR = os.getenv("FHM_LOG_DIR", "logs")
os.makedirs(LOGS_DIR, exist_ok=True)

# Configure root logger
logging.basicConfig(level=logging.INFO)

standard_formatter = logging.Formatter(
    '%(asctime)s [%(levelname)s] %(name)s: %(message)s',
    datefmt='%Y-%m-%d %H:%M:%S'
)


def _rotating_handler(filename: str) -> RotatingFileHandler:
    handler = RotatingFileHandler(
        os.path.join(LOGS_DIR, filename),
        maxBytes=10*1024*1024,  # 10MB
        backupCount=5
    )
    handler.setFormatter(standard_formatter)
    handler.setLevel(logging.INFO)
    return handler


app_handler = _rotating_handler('app.log')
training_handler = _rotating_handler('training.log')
inverse_handler = _rotating_handler('inverse.log')

# Create loggers
app_logger = logging.getLogger('app')
app_logger.addHandler(app_handler)
app_logger.setLevel(logging.INFO)

training_logger = logging.getLogger('training')
training_logger.addHandler(training_handler)
training_logger.setLevel(logging.INFO)
training_logger.propagate = False

inverse_logger = logging.getLogger('inverse')
inverse_logger.addHandler(inverse_handler)
inverse_logger.setLevel(logging.INFO)
inverse_logger.propagate = False

data_logger = logging.getLogger('data')
data_logger.addHandler(app_handler)
data_logger.setLevel(logging.INFO)


# Throttled logging decorator
def throttled_log(interval):
    """Decorator to throttle logging to once per interval seconds per logger."""
    def decorator(func):
        last_log = {}

        def wrapper(*args, **kwargs):
            current_time = time.monotonic()
            if args[0] not in last_log or current_time - last_log[args[0]] >= interval:
                last_log[args[0]] = current_time
                return func(*args, **kwargs)
        return wrapper
    return decorator


@throttled_log(5)  # Only log once every 5 seconds
def log_operation(logger, operation: str, details: str = None, level: int = logging.INFO):
    """Log an operation with optional details."""
    if details:
        logger.log(level, f"Operation: {operation} | Details: {details}")
    else:
        logger.log(level, f"Operation: {operation}")


def log_event(logger, operation: str, details: str = None, level: int = logging.INFO):
    """Unthrottled variant for one-off events (fold finished, file written)."""
    if details:
        logger.log(level, f"Operation: {operation} | Details: {details}")
    else:
        logger.log(level, f"Operation: {operation}")


# Export the loggers
__all__ = ['app_logger', 'training_logger', 'inverse_logger', 'data_logger',
           'log_operation', 'log_event']
