import logging
import time
from functools import wraps
from pathlib import Path
from typing import Callable, Optional, TypeVar

from src.exceptions import NON_RETRYABLE_EXCEPTIONS

logger = logging.getLogger(__name__)

T = TypeVar("T")


def retry(
    attempts: int = 3,
    delay: float = 0.0,
    backoff: float = 2.0,
    retry_on: tuple[type[Exception], ...] = (Exception,),
) -> Callable[[Callable[..., T]], Callable[..., T]]:
    """Re-run a call that raised one of `retry_on`; the last failure propagates."""
    if attempts < 1:
        raise ValueError(f"attempts must be >= 1, got {attempts}")

    def decorator(fn: Callable[..., T]) -> Callable[..., T]:
        @wraps(fn)
        def wrapper(*args, **kwargs) -> T:
            wait = delay
            for attempt in range(1, attempts + 1):
                try:
                    return fn(*args, **kwargs)
                except retry_on as e:
                    if type(e) in NON_RETRYABLE_EXCEPTIONS or attempt == attempts:
                        raise
                    logger.warning(
                        f"{fn.__name__} failed on attempt {attempt}/{attempts} "
                        f"({type(e).__name__}: {e}); retrying"
                    )
                    if wait > 0:
                        time.sleep(wait)
                        wait *= backoff

        return wrapper

    return decorator


def get_error_location(exception: BaseException) -> Optional[str]:
    """file:line of the innermost frame that raised."""
    tb = exception.__traceback__
    if tb is None:
        return None
    while tb.tb_next is not None:
        tb = tb.tb_next
    return f"{Path(tb.tb_frame.f_code.co_filename).name}:{tb.tb_lineno}"
