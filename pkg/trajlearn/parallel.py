"""
Worker pools and order-fixed reductions.

Work is always cut into the same pieces regardless of the worker count, and
partial results are combined pairwise in a fixed order, so outputs are
bit-identical for any number of workers.
"""

import logging
import operator
from concurrent.futures import Executor, ProcessPoolExecutor, ThreadPoolExecutor
from contextlib import contextmanager
from typing import Any, Callable, Iterator, List, Optional, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

BLOCK_SIZE = 256

logger = logging.getLogger(__name__)


@contextmanager
def worker_pool(workers: int = 1, kind: str = "process") -> Iterator[Optional[Executor]]:
    """
    A pool that lives for the whole ``with`` block, or None when ``workers == 1``.

    Hand it to every ``map_ordered`` call of a long run so that workers are
    started once.
    """
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1:
        yield None
        return
    if kind == "process":
        pool_cls: Any = ProcessPoolExecutor
    elif kind == "thread":
        pool_cls = ThreadPoolExecutor
    else:
        raise ValueError(f"unknown pool kind {kind!r}")
    logger.debug(f"Starting {workers} {kind} workers")
    with pool_cls(max_workers=workers) as pool:
        yield pool


def map_ordered(
    fn: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    kind: str = "process",
    pool: Optional[Executor] = None,
) -> List[R]:
    """
    Apply ``fn`` to every item and return the results in input order.

    Args:
        fn: A picklable (module-level) function when ``kind == "process"``.
        items: Work items.
        workers: Pool size; 1 runs inline. Ignored when ``pool`` is given.
        kind: "process" or "thread".
        pool: A running executor from ``worker_pool``; none is created then.
    """
    items = list(items)
    if pool is not None:
        if len(items) <= 1:
            return [fn(item) for item in items]
        return list(pool.map(fn, items))
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with worker_pool(min(workers, len(items)), kind) as own:
        logger.debug(f"Dispatching {len(items)} items to {workers} {kind} workers")
        return list(own.map(fn, items))


def tree_sum(parts: Sequence[Any], add: Callable[[Any, Any], Any] = operator.add) -> Any:
    """Pairwise reduction in a fixed order: ((p0+p1)+(p2+p3))+..."""
    level = list(parts)
    if not level:
        raise ValueError("tree_sum of an empty sequence")
    while len(level) > 1:
        paired = [add(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            paired.append(level[-1])
        level = paired
    return level[0]
