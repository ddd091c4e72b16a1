"""Ordered chunk mapping, serial or across worker processes.

Chunks are always merged in submission order, so results do not depend on
the worker count; ``threads=1`` bypasses multiprocessing entirely.
"""

from __future__ import annotations

import multiprocessing as mp

_WORKER_FN = None


def _init(fn):
    global _WORKER_FN
    _WORKER_FN = fn


def _call(task):
    return _WORKER_FN(task)


def map_ordered(fn, tasks, threads: int = 1) -> list:
    tasks = list(tasks)
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ctx.Pool(min(threads, len(tasks)), initializer=_init, initargs=(fn,)) as pool:
        return pool.map(_call, tasks)
