"""Pure-Python DES kernel: deterministic list scheduling in integer picoseconds.

A node starts once all predecessors finished and every participant device is
free; nodes are processed in nondecreasing (ready time, node id) order, so
identical graphs replay identically.  This is the fallback twin of the
compiled kernel in ``_ckernel``; both must produce bit-identical schedules.
"""
from __future__ import annotations

import heapq

import numpy as np

IMPL = "python"


def simulate_flat(
    dur: np.ndarray,
    succ_indptr: np.ndarray,
    succ_idx: np.ndarray,
    dev_indptr: np.ndarray,
    dev_idx: np.ndarray,
    num_devices: int,
) -> tuple[np.ndarray, np.ndarray]:
    n = len(dur)
    start = np.zeros(n, dtype=np.int64)
    finish = np.zeros(n, dtype=np.int64)
    indeg = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(succ_indptr[i], succ_indptr[i + 1]):
            indeg[succ_idx[j]] += 1
    ready = np.zeros(n, dtype=np.int64)
    dev_free = [0] * num_devices

    heap = [(0, i) for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    done = 0
    while heap:
        r, i = heapq.heappop(heap)
        s = r
        for j in range(dev_indptr[i], dev_indptr[i + 1]):
            s = max(s, dev_free[dev_idx[j]])
        f = s + dur[i]
        start[i] = s
        finish[i] = f
        for j in range(dev_indptr[i], dev_indptr[i + 1]):
            dev_free[dev_idx[j]] = f
        done += 1
        for j in range(succ_indptr[i], succ_indptr[i + 1]):
            succ = succ_idx[j]
            if ready[succ] < f:
                ready[succ] = f
            indeg[succ] -= 1
            if indeg[succ] == 0:
                heapq.heappush(heap, (int(ready[succ]), int(succ)))
    if done != n:
        raise ValueError("execution graph contains a cycle")
    return start, finish
