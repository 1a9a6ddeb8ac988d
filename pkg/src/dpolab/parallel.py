"""Order-preserving worker pool.

Results come back in input order and each task is independent, so the worker
count changes wall time only, never the values.
"""

from concurrent.futures import ThreadPoolExecutor


def pmap(fn, items, workers=1):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
