"""
Run independent jobs (folds, grid points, cross-year cells) with bounded parallelism.

Jobs run through asyncio tasks. With parallel > 1 each job executes in a
spawned worker process, so every job owns its global RNG state and results
stay deterministic. Workers inherit the parent's event-log file. Results are
merged by job key, never by completion order.
"""

from __future__ import annotations

import asyncio
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Hashable, Iterable, Optional, Tuple

from . import event_log

Job = Tuple[Hashable, Callable[..., Any], Tuple[Any, ...]]


@dataclass
class JobResult:
    key: Hashable
    value: Any = None
    error: Optional[BaseException] = None

    @property
    def ok(self) -> bool:
        return self.error is None


async def run_jobs_async(jobs: Iterable[Job], *, parallel: int = 1) -> Dict[Hashable, JobResult]:
    """
    Run `(key, fn, args)` jobs; a failing job is recorded, the others continue.
    """
    job_list = list(jobs)
    parallel = max(1, int(parallel))
    loop = asyncio.get_running_loop()
    gate = asyncio.Semaphore(parallel)
    executor: Optional[ProcessPoolExecutor] = None
    if parallel > 1 and len(job_list) > 1:
        executor = ProcessPoolExecutor(
            max_workers=parallel,
            mp_context=multiprocessing.get_context("spawn"),
            initializer=event_log.configure,
            initargs=event_log.current(),
        )

    async def _runner(key: Hashable, fn: Callable[..., Any], args: Tuple[Any, ...]) -> JobResult:
        async with gate:
            try:
                if executor is not None:
                    value = await loop.run_in_executor(executor, fn, *args)
                else:
                    value = fn(*args)
                return JobResult(key, value)
            except Exception as exc:
                return JobResult(key, error=exc)

    try:
        results = await asyncio.gather(*(_runner(key, fn, args) for key, fn, args in job_list))
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    order = {key: idx for idx, (key, _, _) in enumerate(job_list)}
    return {res.key: res for res in sorted(results, key=lambda r: order[r.key])}


def run_jobs(jobs: Iterable[Job], *, parallel: int = 1) -> Dict[Hashable, JobResult]:
    """Blocking wrapper around run_jobs_async."""
    return asyncio.run(run_jobs_async(jobs, parallel=parallel))
