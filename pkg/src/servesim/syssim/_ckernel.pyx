# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled DES kernel: same scheduling policy as ``_kernel``.

Processes nodes in nondecreasing (ready time, node id) order via a
min-heap; all times are integer picoseconds so results match the pure
Python twin bit for bit.
"""
import numpy as np

cimport numpy as cnp  # noqa: E402
from libcpp.pair cimport pair
from libcpp.queue cimport priority_queue

ctypedef long long i64

IMPL = "cython"


def simulate_flat(
    cnp.int64_t[::1] dur,
    cnp.int64_t[::1] succ_indptr,
    cnp.int64_t[::1] succ_idx,
    cnp.int64_t[::1] dev_indptr,
    cnp.int64_t[::1] dev_idx,
    int num_devices,
):
    cdef Py_ssize_t n = dur.shape[0]
    start_arr = np.zeros(n, dtype=np.int64)
    finish_arr = np.zeros(n, dtype=np.int64)
    indeg_arr = np.zeros(n, dtype=np.int64)
    ready_arr = np.zeros(n, dtype=np.int64)
    free_arr = np.zeros(num_devices, dtype=np.int64)
    cdef cnp.int64_t[::1] start = start_arr
    cdef cnp.int64_t[::1] finish = finish_arr
    cdef cnp.int64_t[::1] indeg = indeg_arr
    cdef cnp.int64_t[::1] ready = ready_arr
    cdef cnp.int64_t[::1] dev_free = free_arr

    cdef Py_ssize_t i, j
    cdef i64 s, f, succ, done = 0
    # max-heap of (-ready, -id) emulates a min-heap on (ready, id)
    cdef priority_queue[pair[i64, i64]] heap
    for i in range(n):
        for j in range(succ_indptr[i], succ_indptr[i + 1]):
            indeg[succ_idx[j]] += 1
    for i in range(n):
        if indeg[i] == 0:
            heap.push(pair[i64, i64](0, -i))

    cdef pair[i64, i64] top
    while not heap.empty():
        top = heap.top()
        heap.pop()
        i = -top.second
        s = -top.first
        for j in range(dev_indptr[i], dev_indptr[i + 1]):
            if dev_free[dev_idx[j]] > s:
                s = dev_free[dev_idx[j]]
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
                heap.push(pair[i64, i64](-ready[succ], -succ))

    if done != n:
        raise ValueError("execution graph contains a cycle")
    return start_arr, finish_arr
