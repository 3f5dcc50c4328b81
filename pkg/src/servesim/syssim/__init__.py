"""Discrete-event simulation of an execution graph over a device topology.

Compute and memory nodes occupy their home device for their duration;
communication nodes (ring all-reduce, send/recv, pool transfers) block all
participants.  Event times are integer picoseconds for exact, deterministic
replay.  The inner event loop runs in a compiled Cython kernel when the
extension is available and falls back to a pure-Python twin otherwise
(force the fallback with ``SERVESIM_PURE_PYTHON=1``).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if os.environ.get("SERVESIM_PURE_PYTHON"):
    from . import _kernel as _impl
else:
    try:
        from . import _ckernel as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernel as _impl

KERNEL_IMPL: str = _impl.IMPL

if TYPE_CHECKING:
    from ..graphgen import ExecGraph

PS_PER_S = 1_000_000_000_000


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Topology:
    """Flat all-to-all interconnect plus a host link for paging traffic."""

    num_devices: int
    link_bw: float = 64e9  # bytes/s
    link_latency: float = 100e-9  # seconds
    host_bw: float = 64e9
    host_latency: float = 100e-9

    def __post_init__(self) -> None:
        if self.num_devices < 1:
            raise TopologyError("topology needs at least one device")
        if self.link_bw <= 0 or self.host_bw <= 0:
            raise TopologyError("link bandwidth must be positive")
        if self.link_latency < 0 or self.host_latency < 0:
            raise TopologyError("link latency must be non-negative")


def collective_time(nbytes: int, group_size: int, bw: float, latency: float) -> float:
    """Ring all-reduce: 2(g-1)/g bandwidth passes plus 2(g-1) hop latencies."""
    if group_size < 2:
        raise TopologyError(f"all-reduce needs group size >= 2, got {group_size}")
    if nbytes <= 0:
        raise TopologyError("collective bytes must be positive")
    return 2.0 * (group_size - 1) / group_size * nbytes / bw + 2.0 * (group_size - 1) * latency


def transfer_time(nbytes: int, bw: float, latency: float) -> float:
    if nbytes <= 0:
        raise TopologyError("transfer bytes must be positive")
    return nbytes / bw + latency


@dataclass
class SimOutcome:
    latency_ps: int
    busy_ps: dict[int, int]
    start_ps: np.ndarray
    finish_ps: np.ndarray
    comm_ps: int

    @property
    def latency_s(self) -> float:
        return self.latency_ps / PS_PER_S


def _node_duration_ps(node, topo: Topology) -> int:
    if node.kind == "compute":
        return node.value
    if node.kind == "allreduce":
        return round(collective_time(node.value, len(node.devices), topo.link_bw,
                                     topo.link_latency) * PS_PER_S)
    if node.kind in ("send", "transfer"):
        return round(transfer_time(node.value, topo.link_bw, topo.link_latency) * PS_PER_S)
    if node.kind == "recv":
        return 0  # the matched send carries the wire time
    if node.kind in ("memload", "memstore"):
        return round(transfer_time(node.value, topo.host_bw, topo.host_latency) * PS_PER_S)
    raise TopologyError(f"unknown node kind '{node.kind}'")


def simulate_graph(graph: "ExecGraph", topo: Topology) -> SimOutcome:
    """Event-driven list scheduling of the graph over the topology."""
    nodes = graph.nodes
    n = len(nodes)
    if n == 0:
        return SimOutcome(0, {}, np.zeros(0, np.int64), np.zeros(0, np.int64), 0)

    dur = np.empty(n, dtype=np.int64)
    comm_ps = 0
    for node in nodes:
        if any(d >= topo.num_devices or d < 0 for d in node.devices):
            raise TopologyError(
                f"node {node.id} homed on unknown device {node.devices} "
                f"(topology has {topo.num_devices})"
            )
        dur[node.id] = _node_duration_ps(node, topo)
        if node.kind in ("allreduce", "send", "recv", "transfer"):
            comm_ps += dur[node.id]

    succ_counts = np.zeros(n + 1, dtype=np.int64)
    for node in nodes:
        for dep in node.deps:
            succ_counts[dep + 1] += 1
    succ_indptr = np.cumsum(succ_counts, dtype=np.int64)
    succ_idx = np.empty(succ_indptr[-1], dtype=np.int64)
    cursor = succ_indptr[:-1].copy()
    for node in nodes:
        for dep in node.deps:
            succ_idx[cursor[dep]] = node.id
            cursor[dep] += 1

    dev_indptr = np.zeros(n + 1, dtype=np.int64)
    for node in nodes:
        dev_indptr[node.id + 1] = dev_indptr[node.id] + len(node.devices)
    dev_idx = np.empty(dev_indptr[-1], dtype=np.int64)
    for node in nodes:
        dev_idx[dev_indptr[node.id]: dev_indptr[node.id + 1]] = node.devices

    start, finish = _impl.simulate_flat(dur, succ_indptr, succ_idx, dev_indptr, dev_idx,
                                        topo.num_devices)

    busy: dict[int, int] = {}
    for node in nodes:
        d = int(dur[node.id])
        for dev in node.devices:
            busy[dev] = busy.get(dev, 0) + d
    return SimOutcome(
        latency_ps=int(finish.max()),
        busy_ps=busy,
        start_ps=start,
        finish_ps=finish,
        comm_ps=int(comm_ps),
    )


def load_network_config(path: str | Path) -> dict:
    """Parse the key-value network config file.

    Recognized keys: npu_num, npu_group, pim_num, link_bw_GBps,
    link_latency_ns, host_bw_GBps, host_latency_ns.
    """
    from ..modelprofile import _parse_kv_file

    raw = _parse_kv_file(Path(path).read_text(encoding="utf-8"), str(path))
    out: dict = {}
    for key in ("npu_num", "npu_group", "pim_num"):
        if key in raw:
            out[key] = int(raw[key])
    if "link_bw_GBps" in raw:
        out["link_bw"] = float(raw["link_bw_GBps"]) * 1e9
    if "link_latency_ns" in raw:
        out["link_latency"] = float(raw["link_latency_ns"]) * 1e-9
    if "host_bw_GBps" in raw:
        out["host_bw"] = float(raw["host_bw_GBps"]) * 1e9
    if "host_latency_ns" in raw:
        out["host_latency"] = float(raw["host_latency_ns"]) * 1e-9
    return out
