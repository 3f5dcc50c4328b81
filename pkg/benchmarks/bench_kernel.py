"""Benchmark the compiled event-loop kernel against the pure-Python twin.

Builds one large tensor-parallel decode iteration, flattens it to the CSR
form both kernels consume, checks they produce bit-identical schedules, and
reports wall-clock times.

    python benchmarks/bench_kernel.py [--npus 64] [--requests 64] [--repeats 5]
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from servesim import graphgen
from servesim.engine import DeviceConfig, simulate_block_replicated
from servesim.graphgen import ParallelismConfig
from servesim.modelprofile import BatchEntry, load_model_config, profile_operators
from servesim.scheduler import MappingPlan
from servesim.syssim import Topology, _kernel, _node_duration_ps
from servesim.workload import Phase

try:
    from servesim.syssim import _ckernel
except ImportError:
    _ckernel = None


def build_flat_graph(npus: int, requests: int):
    model = load_model_config("gpt3-7b")
    batch = [BatchEntry(i, Phase.GENERATION, 511, 512) for i in range(requests)]
    par = ParallelismConfig(npus, mode="tensor")
    profile = graphgen.shard_profile(profile_operators(model, batch), par.tp_degree)
    mapping = MappingPlan()
    sim = simulate_block_replicated(profile, mapping, DeviceConfig(kind="npu"),
                                    None, cache=None)
    insts = graphgen.expand_instances(profile, mapping, sim, sub_batch=0)
    trace = graphgen.schedule_operators([insts], model=model,
                                        sub_total_tokens={0: profile.total_tokens},
                                        num_blocks=model.num_layers)
    graph = graphgen.build_graph(trace, par)
    topo = Topology(num_devices=graph.num_devices)

    n = len(graph.nodes)
    dur = np.array([_node_duration_ps(nd, topo) for nd in graph.nodes],
                   dtype=np.int64)
    succ_counts = np.zeros(n + 1, dtype=np.int64)
    for nd in graph.nodes:
        for dep in nd.deps:
            succ_counts[dep + 1] += 1
    succ_indptr = np.cumsum(succ_counts, dtype=np.int64)
    succ_idx = np.empty(succ_indptr[-1], dtype=np.int64)
    cur = succ_indptr[:-1].copy()
    for nd in graph.nodes:
        for dep in nd.deps:
            succ_idx[cur[dep]] = nd.id
            cur[dep] += 1
    dev_indptr = np.zeros(n + 1, dtype=np.int64)
    for nd in graph.nodes:
        dev_indptr[nd.id + 1] = dev_indptr[nd.id] + len(nd.devices)
    dev_idx = np.empty(dev_indptr[-1], dtype=np.int64)
    for nd in graph.nodes:
        dev_idx[dev_indptr[nd.id]: dev_indptr[nd.id + 1]] = nd.devices
    return n, (dur, succ_indptr, succ_idx, dev_indptr, dev_idx, graph.num_devices)


def time_kernel(kernel, args, repeats: int):
    times = []
    result = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        result = kernel.simulate_flat(*args)
        times.append(time.perf_counter() - t0)
    return result, min(times), statistics.median(times)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--npus", type=int, default=64)
    parser.add_argument("--requests", type=int, default=64)
    parser.add_argument("--repeats", type=int, default=5)
    opts = parser.parse_args()

    print(f"building graph: {opts.npus} NPUs, {opts.requests} decode requests ...")
    n_nodes, flat = build_flat_graph(opts.npus, opts.requests)
    print(f"graph has {n_nodes} nodes")

    (s_py, f_py), best_py, med_py = time_kernel(_kernel, flat, opts.repeats)
    print(f"python kernel: best {best_py * 1e3:9.2f} ms, median {med_py * 1e3:9.2f} ms")

    if _ckernel is None:
        print("compiled kernel not available; skipping comparison")
        return 0

    (s_cy, f_cy), best_cy, med_cy = time_kernel(_ckernel, flat, opts.repeats)
    print(f"cython kernel: best {best_cy * 1e3:9.2f} ms, median {med_cy * 1e3:9.2f} ms")

    if not (np.array_equal(s_py, s_cy) and np.array_equal(f_py, f_cy)):
        print("ERROR: kernels disagree on node start/finish times")
        return 1
    print(f"results identical; speedup {best_py / best_cy:.1f}x "
          f"(best-over-{opts.repeats} runs)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
