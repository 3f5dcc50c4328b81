"""Execution-graph construction for one simulated iteration.

The engine-timed representative block expands to all layers, operator
scheduling fixes a device-aware total order (sub-batch interleaving across
NPU and PIM), and the graph builder lowers the ordered trace onto concrete
devices: per-group compute nodes under tensor parallelism with two
all-reduces per block, send/recv pairs at pipeline-stage boundaries,
transfers around pool-PIM GEMVs, and memory load/store nodes for KV paging.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from .engine import BlockSimResult
from .modelprofile import IterationProfile, ModelConfig, OpKind
from .scheduler import MappingPlan, PageEvent

PS_PER_S = 1_000_000_000_000


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class ParallelismConfig:
    npu_num: int
    npu_group: int = 1
    mode: str = "hybrid"  # tensor | pipeline | hybrid

    def __post_init__(self) -> None:
        if self.mode not in ("tensor", "pipeline", "hybrid"):
            raise GraphError(f"parallelism mode must be tensor|pipeline|hybrid, got '{self.mode}'")
        if self.npu_num < 1:
            raise GraphError("npu_num must be >= 1")
        groups = self.effective_groups
        if self.npu_num % groups != 0:
            raise GraphError(f"npu_group {groups} does not divide npu_num {self.npu_num}")

    @property
    def effective_groups(self) -> int:
        if self.mode == "tensor":
            return 1
        if self.mode == "pipeline":
            return self.npu_num
        return self.npu_group

    @property
    def tp_degree(self) -> int:
        return self.npu_num // self.effective_groups

    @property
    def stages(self) -> int:
        return self.effective_groups

    def group_devices(self, stage: int) -> list[int]:
        g = self.tp_degree
        return list(range(stage * g, (stage + 1) * g))


def shard_profile(profile: IterationProfile, g: int, pim_type: str = "none") -> IterationProfile:
    """Tensor-parallel shard of every descriptor (1/g work per device).

    Pool-PIM attention stays unsharded: each GEMV runs whole on one pool
    device.
    """
    if g == 1:
        return profile
    batched = [op.sharded(g) for op in profile.batched_ops]
    attention = {}
    for rid, (score, attend) in profile.per_request_attention.items():
        if pim_type == "pool":
            attention[rid] = (score, attend)
        else:
            heads = profile.model.num_heads
            if heads % g != 0 and g % heads != 0:
                raise GraphError(
                    f"tensor degree {g} is incompatible with num_heads {heads}: "
                    "one must divide the other to split attention evenly"
                )
            attention[rid] = (score.sharded(g), attend.sharded(g))
    return IterationProfile(
        batched_ops=batched,
        per_request_attention=attention,
        total_tokens=profile.total_tokens,
        replication=profile.replication,
        model=profile.model,
    )


# block-op positions inside IterationProfile.batched_ops
_EMBED, _LN1, _QKV, _OUTPROJ, _LN2, _FFN1, _FFN2, _LMHEAD = range(8)


@dataclass
class OpInstance:
    """One operator occurrence in the fully expanded iteration."""

    uid: int
    sub_batch: int
    block: Optional[int]  # None for Embedding / LMHead
    kind: OpKind
    latency_ps: int
    device_kind: str  # "npu" | "pim"
    deps: list[int]
    request_id: Optional[int] = None
    transfer_in: bool = False
    transfer_out: bool = False
    act_bytes: int = 0
    is_tail: bool = False  # LMHead marker


@dataclass
class ScheduledTrace:
    instances: list[OpInstance]  # in scheduled execution order
    makespan_ps: int
    model: ModelConfig
    sub_total_tokens: dict[int, int]
    num_blocks: int


def _lat_ps(latency_s: float) -> int:
    return max(1, round(latency_s * PS_PER_S))


def expand_instances(
    profile: IterationProfile,
    mapping: MappingPlan,
    sim: BlockSimResult,
    sub_batch: int,
    start_uid: int = 0,
) -> list[OpInstance]:
    """Expand the representative block into all layers for one sub-batch."""
    uid = start_uid
    out: list[OpInstance] = []
    bpp = profile.model.bytes_per_param
    d = profile.model.hidden_dim

    def inst(slot: int, block: Optional[int], deps: list[int], *, is_tail=False) -> OpInstance:
        nonlocal uid
        op = profile.batched_ops[slot]
        node = OpInstance(
            uid=uid, sub_batch=sub_batch, block=block, kind=op.kind,
            latency_ps=_lat_ps(sim.batched[slot].latency),
            device_kind=mapping.device_for(("batched", slot)),
            deps=deps, is_tail=is_tail,
        )
        uid += 1
        out.append(node)
        return node

    def attn_inst(rid: int, which: str, block: int, deps: list[int]) -> OpInstance:
        nonlocal uid
        idx = 0 if which == "score" else 1
        desc = profile.per_request_attention[rid][idx]
        key = ("attn", rid, which)
        node = OpInstance(
            uid=uid, sub_batch=sub_batch, block=block, kind=desc.kind,
            latency_ps=_lat_ps(sim.attention[rid][idx].latency),
            device_kind=mapping.device_for(key),
            deps=deps, request_id=rid,
            transfer_in=(which == "score" and mapping.needs_transfer(key)),
            transfer_out=(which == "attend" and mapping.needs_transfer(key)),
            act_bytes=desc.m * d * bpp,
        )
        uid += 1
        out.append(node)
        return node

    prev = inst(_EMBED, None, [])
    for b in range(profile.replication):
        ln1 = inst(_LN1, b, [prev.uid])
        qkv = inst(_QKV, b, [ln1.uid])
        attends = []
        for rid in profile.per_request_attention:
            score = attn_inst(rid, "score", b, [qkv.uid])
            attends.append(attn_inst(rid, "attend", b, [score.uid]))
        outproj = inst(_OUTPROJ, b, [a.uid for a in attends])
        ln2 = inst(_LN2, b, [outproj.uid])
        ffn1 = inst(_FFN1, b, [ln2.uid])
        prev = inst(_FFN2, b, [ffn1.uid])
    inst(_LMHEAD, None, [prev.uid], is_tail=True)
    return out


def schedule_operators(
    sub_batch_instances: Sequence[Sequence[OpInstance]],
    model: Optional[ModelConfig] = None,
    sub_total_tokens: Optional[dict[int, int]] = None,
    num_blocks: int = 0,
) -> ScheduledTrace:
    """Greedy list scheduling across device kinds.

    Ready operators run in earliest-ready order (ties by sub-batch id then
    op index); independent sub-batches interleave, overlapping NPU compute
    with PIM attention.
    """
    instances = {i.uid: i for sub in sub_batch_instances for i in sub}
    indeg = {uid: len(i.deps) for uid, i in instances.items()}
    succs: dict[int, list[int]] = {uid: [] for uid in instances}
    for node in instances.values():
        for dep in node.deps:
            succs[dep].append(node.uid)

    ready_time = {uid: 0 for uid in instances}
    heap = [(0, i.sub_batch, i.uid) for i in instances.values() if indeg[i.uid] == 0]
    heapq.heapify(heap)
    resource_free: dict[str, int] = {}
    order: list[OpInstance] = []
    makespan = 0
    while heap:
        ready, _, uid = heapq.heappop(heap)
        node = instances[uid]
        start = max(ready, resource_free.get(node.device_kind, 0))
        finish = start + node.latency_ps
        resource_free[node.device_kind] = finish
        makespan = max(makespan, finish)
        order.append(node)
        for succ in succs[uid]:
            ready_time[succ] = max(ready_time[succ], finish)
            indeg[succ] -= 1
            if indeg[succ] == 0:
                heapq.heappush(heap, (ready_time[succ], instances[succ].sub_batch, succ))
    if len(order) != len(instances):
        raise GraphError("dependency cycle among operator instances")
    return ScheduledTrace(
        instances=order,
        makespan_ps=makespan,
        model=model,
        sub_total_tokens=sub_total_tokens or {},
        num_blocks=num_blocks,
    )


@dataclass(frozen=True)
class GraphNode:
    id: int
    kind: str  # compute | allreduce | send | recv | transfer | memload | memstore
    value: int  # duration (ps) for compute, bytes otherwise
    devices: tuple[int, ...]
    deps: tuple[int, ...]
    label: str = ""


@dataclass
class ExecGraph:
    nodes: list[GraphNode] = field(default_factory=list)
    num_devices: int = 0

    def add(self, kind: str, value: int, devices: Sequence[int], deps: Sequence[int],
            label: str = "") -> int:
        if kind == "compute" and value <= 0:
            raise GraphError(f"compute node '{label}' must have positive duration")
        if kind != "compute" and value <= 0:
            raise GraphError(f"{kind} node '{label}' must carry positive bytes")
        if not devices:
            raise GraphError(f"node '{label}' has an empty participant set")
        nid = len(self.nodes)
        self.nodes.append(GraphNode(nid, kind, value, tuple(devices), tuple(deps), label))
        return nid

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes if n.kind == kind)

    def topo_order(self) -> list[int]:
        indeg = [0] * len(self.nodes)
        succ: list[list[int]] = [[] for _ in self.nodes]
        for node in self.nodes:
            for dep in node.deps:
                succ[dep].append(node.id)
                indeg[node.id] += 1
        stack = [i for i, deg in enumerate(indeg) if deg == 0]
        order = []
        while stack:
            nid = stack.pop()
            order.append(nid)
            for s in succ[nid]:
                indeg[s] -= 1
                if indeg[s] == 0:
                    stack.append(s)
        if len(order) != len(self.nodes):
            raise GraphError("execution graph contains a cycle")
        return order

    def dump(self, path: str | Path) -> None:
        """Line-oriented text dump for golden-file comparisons."""
        with open(path, "w", encoding="utf-8") as fh:
            for n in self.nodes:
                home = "+".join(str(d) for d in n.devices)
                deps = ",".join(str(d) for d in n.deps)
                fh.write(f"{n.id}\t{n.kind}\t{n.value}\t{home}\t{deps}\n")


def build_graph(
    trace: ScheduledTrace,
    par: ParallelismConfig,
    page_events: Sequence[PageEvent] = (),
    pim_type: str = "none",
    pim_num: int = 0,
) -> ExecGraph:
    """Lower a scheduled trace onto devices as a dependency DAG."""
    model = trace.model
    if model is None:
        raise GraphError("trace carries no model metadata")
    g = par.tp_degree
    stages = par.stages
    layers_per_stage = -(-trace.num_blocks // stages) if trace.num_blocks else 1
    n_npu = par.npu_num
    if pim_type == "local":
        num_devices = 2 * n_npu
    elif pim_type == "pool":
        if pim_num < 1:
            pim_num = n_npu
        num_devices = n_npu + pim_num
    else:
        num_devices = n_npu
    graph = ExecGraph(num_devices=num_devices)

    def stage_of(inst: OpInstance) -> int:
        if inst.block is None:
            return stages - 1 if inst.is_tail else 0
        return min(inst.block // layers_per_stage, stages - 1)

    # KV paging: stores from the previous iteration boundary, then loads,
    # all before the first compute node
    mem_chain: list[int] = []
    for ev in sorted(page_events, key=lambda e: (e.kind != "store",)):
        kind = "memstore" if ev.kind == "store" else "memload"
        deps = [mem_chain[-1]] if mem_chain else []
        mem_chain.append(graph.add(kind, ev.bytes, [0], deps, f"{kind}:req{ev.request_id}"))

    # per-instance output handles: device -> node id, or a single node id
    # (comm/pool nodes) that every dependent attaches to
    per_dev: dict[int, dict[int, int]] = {}
    single: dict[int, int] = {}
    inst_stage: dict[int, int] = {}
    boundary: dict[tuple[int, int, int], int] = {}  # (sub, dep_uid, stage) -> recv id

    def resolve(dep_uid: int, dev: int, stage: int, sub: int, bytes_: int) -> list[int]:
        dep_stage = inst_stage[dep_uid]
        if dep_stage != stage:
            # pipeline-stage boundary: one send/recv pair per crossing
            key = (sub, dep_uid, stage)
            if key not in boundary:
                src_nodes = [single[dep_uid]] if dep_uid in single \
                    else list(per_dev[dep_uid].values())
                src = par.group_devices(dep_stage)[0]
                dst = par.group_devices(stage)[0]
                send = graph.add("send", bytes_, [src], src_nodes,
                                 f"send:s{dep_stage}->s{stage}")
                boundary[key] = graph.add("recv", bytes_, [dst], [send],
                                          f"recv:s{dep_stage}->s{stage}")
            return [boundary[key]]
        if dep_uid in single:
            return [single[dep_uid]]
        handle = per_dev[dep_uid]
        if dev in handle:
            return [handle[dev]]
        return list(handle.values())

    for inst in trace.instances:
        stage = stage_of(inst)
        inst_stage[inst.uid] = stage
        group = par.group_devices(stage)
        t_sub = trace.sub_total_tokens.get(inst.sub_batch, 0)
        act_bytes = max(1, t_sub * model.hidden_dim * model.bytes_per_param)
        label = f"{inst.kind.value}:b{inst.sub_batch}" + (
            f":l{inst.block}" if inst.block is not None else ""
        ) + (f":r{inst.request_id}" if inst.request_id is not None else "")

        if inst.device_kind == "pim" and pim_type == "pool":
            pool_dev = n_npu + (inst.request_id or 0) % pim_num
            deps: list[int] = []
            for dep in inst.deps:
                deps.extend(resolve(dep, group[0], stage, inst.sub_batch, act_bytes))
            # transfers occupy only the pool side (DMA), so NPU compute from
            # other sub-batches keeps running while activations move
            if inst.transfer_in:
                tin = graph.add("transfer", max(1, inst.act_bytes), [pool_dev],
                                deps, f"xfer_in:{label}")
                deps = [tin]
            nid = graph.add("compute", inst.latency_ps, [pool_dev], deps, label)
            if inst.transfer_out:
                single[inst.uid] = graph.add(
                    "transfer", max(1, inst.act_bytes), [pool_dev], [nid],
                    f"xfer_out:{label}")
            else:
                single[inst.uid] = nid
            continue

        handle: dict[int, int] = {}
        for dev in group:
            home = n_npu + dev if (inst.device_kind == "pim" and pim_type == "local") else dev
            deps = []
            for dep in inst.deps:
                deps.extend(resolve(dep, dev, stage, inst.sub_batch, act_bytes))
            if not deps and mem_chain:
                deps = [mem_chain[-1]]
            handle[dev] = graph.add("compute", inst.latency_ps, [home], deps, label)
        per_dev[inst.uid] = handle

        # two all-reduces per transformer block: after OutProj and after FFN2
        if g > 1 and inst.kind in (OpKind.OUT_PROJ, OpKind.FFN2):
            ar = graph.add("allreduce", max(1, t_sub * model.hidden_dim * model.bytes_per_param),
                           group, list(handle.values()), f"allreduce:{label}")
            single[inst.uid] = ar
            del per_dev[inst.uid]

    return graph
