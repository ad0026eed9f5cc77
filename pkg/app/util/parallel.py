from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable

from app.internal.env_settings import Settings


def ordered_map[T, R](fn: Callable[[T], R], items: Iterable[T]) -> list[R]:
    """
    Maps `fn` over `items` on a thread pool. Results come back in input order,
    so the output never depends on the schedule.
    """
    items = list(items)
    threads = min(Settings().app.get_threads(), max(len(items), 1))
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
