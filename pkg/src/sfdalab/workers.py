import os


def worker_count() -> int:
    """Worker cap from SFDA_THREADS, else the available CPU count."""
    env = os.environ.get("SFDA_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"SFDA_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise ValueError("SFDA_THREADS must be >= 1")
        return n
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
