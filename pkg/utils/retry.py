import logging
import time

log = logging.getLogger(__name__)


def api_retry(func, *args, retry_on=(Exception,), max_retries=3, base_delay=1.0, sleep=time.sleep, **kwargs):
    """Retry a remote call with exponential backoff.

    Only exceptions in ``retry_on`` are retried; the last one is re-raised.
    """
    for attempt in range(max_retries):
        try:
            return func(*args, **kwargs)
        except retry_on as e:
            if attempt < max_retries - 1:
                wait = base_delay * 2 ** attempt
                log.warning("attempt %d/%d failed (%s), retrying in %.1fs", attempt + 1, max_retries, e, wait)
                sleep(wait)
            else:
                raise
