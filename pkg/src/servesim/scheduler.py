"""Iteration-level request scheduling with paged KV-cache management.

The scheduler owns the simulated clock, the request queues, and the page
table.  Every iteration it re-forms the batch (continuous batching), admits
arrived requests while their prompt pages fit, reloads evicted requests
first, and after the iteration allocates pages for grown contexts, evicting
the most recently admitted running requests (whole-request granularity,
LIFO) when memory runs short.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .modelprofile import BatchEntry, IterationProfile, ModelConfig, kv_bytes_per_token
from .workload import Phase, Request, RequestState


class SchedulerError(RuntimeError):
    pass


class InfeasibleRequestError(SchedulerError):
    """A request's KV demand can never fit in device memory."""


class ConfigError(ValueError):
    pass


PS_PER_US = 1_000_000
PS_PER_S = 1_000_000_000_000

DEFAULT_PAGE_SIZE = 16
# fixed activation workspace subtracted from device memory, in tokens
ACTIVATION_RESERVE_TOKENS = 2048


@dataclass(frozen=True)
class PageEvent:
    kind: str  # "store" | "load"
    request_id: int
    pages: int
    bytes: int


class KVPageTable:
    """Paged KV occupancy for one symmetric group of devices.

    KV for a token is spread evenly over all ``npu_num`` devices, so page
    accounting collapses to a single pool with per-device page bytes.
    """

    def __init__(self, model: ModelConfig, npu_num: int, npu_mem_bytes: int,
                 page_size: int = DEFAULT_PAGE_SIZE) -> None:
        self.page_size = page_size
        kv_tok = kv_bytes_per_token(model)
        self.page_bytes = -(-page_size * kv_tok // npu_num)  # per device
        weight_per_dev = -(-model.weight_bytes // npu_num)
        reserve = 2 * ACTIVATION_RESERVE_TOKENS * model.hidden_dim * model.bytes_per_param
        budget = npu_mem_bytes - weight_per_dev - reserve
        if budget < self.page_bytes:
            raise ConfigError(
                f"npu_mem {npu_mem_bytes} B leaves no room for KV pages "
                f"(weights/device {weight_per_dev} B, reserve {reserve} B)"
            )
        self.capacity_pages = budget // self.page_bytes
        self.free_pages = self.capacity_pages
        self.resident: dict[int, int] = {}
        self.host: dict[int, int] = {}

    def pages_for(self, tokens: int) -> int:
        return -(-tokens // self.page_size)

    def allocate(self, request_id: int, pages: int) -> None:
        if pages > self.free_pages:
            raise SchedulerError(f"page allocation underflow for request {request_id}")
        self.free_pages -= pages
        self.resident[request_id] = self.resident.get(request_id, 0) + pages

    def release(self, request_id: int) -> int:
        pages = self.resident.pop(request_id, 0)
        self.free_pages += pages
        return pages

    def evict_to_host(self, request_id: int) -> int:
        pages = self.release(request_id)
        self.host[request_id] = pages
        return pages

    def reload_from_host(self, request_id: int, pages: int) -> None:
        self.host.pop(request_id, None)
        self.allocate(request_id, pages)


class PartitionCriteria(Enum):
    TOKEN_COUNT = "token_count"
    REQUEST_COUNT = "request_count"


@dataclass
class BatchPlan:
    entries: list[BatchEntry]
    requests: list[Request]
    load_events: list[PageEvent] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class MappingPlan:
    """Operator-to-device-kind assignment for one sub-batch."""

    pim_type: str = "none"
    assignment: dict = field(default_factory=dict)
    transfers: set = field(default_factory=set)

    def device_for(self, key) -> str:
        return self.assignment.get(key, "npu")

    def needs_transfer(self, key) -> bool:
        return key in self.transfers


@dataclass
class SchedulerState:
    model: ModelConfig
    page_table: KVPageTable
    npu_num: int
    max_batch: int = 0  # 0 = unlimited
    batch_delay_ps: int = 0
    kv_manage: str = "vllm"
    scheduling: str = "orca"
    clock_ps: int = 0
    waiting: list[Request] = field(default_factory=list)
    running: list[Request] = field(default_factory=list)
    evicted: list[Request] = field(default_factory=list)
    finished: list[Request] = field(default_factory=list)
    admit_counter: int = 0
    # (clock_ps at iteration end, prompt tokens, generation tokens)
    throughput_events: list[tuple[int, int, int]] = field(default_factory=list)
    event_log: list = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.scheduling != "orca":
            raise ConfigError(f"scheduling must be 'orca', got '{self.scheduling}'")
        if self.kv_manage not in ("vllm", "maxlen"):
            raise ConfigError(f"kv_manage must be 'vllm' or 'maxlen', got '{self.kv_manage}'")

    @property
    def unfinished(self) -> int:
        return len(self.waiting) + len(self.running) + len(self.evicted)

    def next_arrival_ps(self) -> Optional[int]:
        if not self.waiting:
            return None
        return min(r.arrival_us for r in self.waiting) * PS_PER_US


def make_state(model: ModelConfig, requests: list[Request], npu_num: int,
               npu_mem_bytes: int, max_batch: int = 0, batch_delay_ps: int = 0,
               kv_manage: str = "vllm", scheduling: str = "orca",
               page_size: int = DEFAULT_PAGE_SIZE, gen_only: bool = False) -> SchedulerState:
    """Build the initial scheduler state for a trace."""
    table = KVPageTable(model, npu_num, npu_mem_bytes, page_size)
    state = SchedulerState(
        model=model, page_table=table, npu_num=npu_num, max_batch=max_batch,
        batch_delay_ps=batch_delay_ps, kv_manage=kv_manage, scheduling=scheduling,
        waiting=sorted(requests, key=lambda r: (r.arrival_us, r.id)),
    )
    if gen_only:
        # skip the initiation phase: requests start mid-decode with their
        # prompt KV already resident
        for req in list(state.waiting):
            _check_feasible(state, req)
            req.state = RequestState.RUNNING
            req.phase = Phase.GENERATION
            req.context_len = req.input_len
            req.admit_seq = state.admit_counter
            state.admit_counter += 1
        state.running = state.waiting
        state.waiting = []
        total = sum(_admission_pages(state, r) for r in state.running)
        if total > table.capacity_pages:
            raise InfeasibleRequestError(
                f"gen-only start needs {total} pages but capacity is {table.capacity_pages}"
            )
        for req in state.running:
            table.allocate(req.id, _admission_pages(state, req))
    return state


def _admission_pages(state: SchedulerState, req: Request) -> int:
    table = state.page_table
    if state.kv_manage == "maxlen":
        return table.pages_for(req.input_len + req.output_len)
    tokens = req.context_len if req.context_len > 0 else req.input_len
    return table.pages_for(tokens)


def _check_feasible(state: SchedulerState, req: Request) -> None:
    if _admission_pages(state, req) > state.page_table.capacity_pages:
        raise InfeasibleRequestError(
            f"request {req.id} needs {_admission_pages(state, req)} KV pages; "
            f"device capacity is {state.page_table.capacity_pages}"
        )


def _entry_for(req: Request) -> BatchEntry:
    if req.phase is Phase.INITIATION:
        return BatchEntry(req.id, Phase.INITIATION, prompt_len=req.input_len,
                          context_len=req.input_len)
    return BatchEntry(req.id, Phase.GENERATION, prompt_len=req.input_len,
                      context_len=req.context_len)


def form_batch(state: SchedulerState) -> BatchPlan:
    """Assemble this iteration's batch: running + reloads + new admissions."""
    table = state.page_table
    plan = BatchPlan(entries=[], requests=[])

    for req in state.running:
        plan.requests.append(req)

    def at_capacity() -> bool:
        return state.max_batch > 0 and len(plan.requests) >= state.max_batch

    # evicted requests reload before new admissions
    for req in sorted(state.evicted, key=lambda r: r.admit_seq):
        if at_capacity():
            break
        pages = table.pages_for(req.context_len) if state.kv_manage == "vllm" \
            else table.pages_for(req.input_len + req.output_len)
        if pages <= table.free_pages:
            # only the pages written before eviction travel back over the
            # host link; the context may since have crossed a page boundary,
            # in which case the extra page is a fresh allocation
            stored = table.host.get(req.id, pages)
            table.reload_from_host(req.id, pages)
            req.state = RequestState.RUNNING
            req.admit_seq = state.admit_counter  # reload counts as re-admission
            state.admit_counter += 1
            state.evicted.remove(req)
            state.running.append(req)
            plan.requests.append(req)
            plan.load_events.append(
                PageEvent("load", req.id, stored, stored * table.page_bytes))
            state.event_log.append(("reload", req.id, stored))

    arrived = [r for r in state.waiting if r.arrival_us * PS_PER_US <= state.clock_ps]
    if arrived and state.batch_delay_ps > 0 and state.max_batch > 0:
        deadline = arrived[0].arrival_us * PS_PER_US + state.batch_delay_ps
        would_be = len(plan.requests) + len(arrived)
        if would_be < state.max_batch and state.clock_ps < deadline:
            arrived = []

    for req in arrived:
        if at_capacity():
            break
        _check_feasible(state, req)
        pages = _admission_pages(state, req)
        if pages > table.free_pages:
            break  # admission is in arrival order; do not skip ahead
        table.allocate(req.id, pages)
        req.state = RequestState.RUNNING
        req.admit_seq = state.admit_counter
        state.admit_counter += 1
        state.waiting.remove(req)
        state.running.append(req)
        plan.requests.append(req)
        state.event_log.append(("admit", req.id, pages))

    plan.entries = [_entry_for(r) for r in plan.requests]
    return plan


def batch_deadline_ps(state: SchedulerState) -> Optional[int]:
    """Earliest time at which a currently-delayed batch must form."""
    arrived = [r for r in state.waiting]
    if not arrived or state.batch_delay_ps <= 0:
        return None
    return min(r.arrival_us for r in arrived) * PS_PER_US + state.batch_delay_ps


def grow_or_evict(state: SchedulerState) -> list[PageEvent]:
    """Allocate pages for contexts that crossed a page boundary.

    On shortage, whole requests are evicted to host, most recently admitted
    first, until the allocation fits.
    """
    if state.kv_manage == "maxlen":
        return []
    table = state.page_table
    events: list[PageEvent] = []
    for req in sorted(state.running, key=lambda r: r.admit_seq):
        if req.state is not RequestState.RUNNING:
            continue
        need = table.pages_for(req.context_len) - table.resident.get(req.id, 0)
        if need <= 0:
            continue
        while need > table.free_pages:
            victim = max(
                (r for r in state.running if r.state is RequestState.RUNNING),
                key=lambda r: r.admit_seq,
            )
            pages = table.evict_to_host(victim.id)
            victim.state = RequestState.EVICTED
            state.running.remove(victim)
            state.evicted.append(victim)
            events.append(PageEvent("store", victim.id, pages, pages * table.page_bytes))
            state.event_log.append(("evict", victim.id, pages))
            if victim is req:
                break
        if req.state is RequestState.RUNNING:
            table.allocate(req.id, need)
    if not state.running and state.evicted and not state.waiting:
        # the cascade emptied the batch: the oldest evicted request alone
        # cannot fit, so the simulation can never make progress
        worst = min(state.evicted, key=lambda r: r.admit_seq)
        if table.pages_for(worst.context_len) > table.capacity_pages:
            raise InfeasibleRequestError(
                f"request {worst.id} KV ({table.pages_for(worst.context_len)} pages) "
                f"exceeds device capacity ({table.capacity_pages} pages)"
            )
    return events


def partition_batch(
    plan: BatchPlan,
    criteria: PartitionCriteria = PartitionCriteria.TOKEN_COUNT,
    enabled: bool = False,
) -> list[list[BatchEntry]]:
    """Split the batch into two balanced sub-batches (greedy longest-first)."""
    if not plan.entries:
        raise SchedulerError("cannot partition an empty batch")
    if not enabled or len(plan.entries) < 2:
        return [list(plan.entries)]

    def weight(entry: BatchEntry) -> int:
        if criteria is PartitionCriteria.TOKEN_COUNT:
            return entry.context_len
        return 1

    bins: list[list[BatchEntry]] = [[], []]
    loads = [0, 0]
    order = sorted(range(len(plan.entries)), key=lambda i: (-weight(plan.entries[i]), i))
    for i in order:
        target = 0 if loads[0] <= loads[1] else 1
        bins[target].append(plan.entries[i])
        loads[target] += weight(plan.entries[i])
    return [b for b in bins if b]


def map_operators(profile: IterationProfile, pim_type: str, has_pim: bool) -> MappingPlan:
    """Assign operators to device kinds (Algorithm: GEMVs to PIM, rest NPU)."""
    if pim_type not in ("none", "local", "pool"):
        raise ConfigError(f"pim_type must be none|local|pool, got '{pim_type}'")
    plan = MappingPlan(pim_type=pim_type)
    if pim_type == "none":
        return plan
    if not has_pim:
        raise ConfigError(f"pim_type='{pim_type}' but no PIM device is configured")
    for rid, (score, attend) in profile.per_request_attention.items():
        # only generation-phase GEMVs benefit from PIM; prefill attention is
        # GEMM-shaped and stays on the NPU
        if score.phase is Phase.GENERATION and score.m == 1:
            for which in ("score", "attend"):
                key = ("attn", rid, which)
                plan.assignment[key] = "pim"
                if pim_type == "pool":
                    plan.transfers.add(key)
    return plan


def advance(state: SchedulerState, plan: BatchPlan, latency_ps: int) -> None:
    """Apply one simulated iteration's outcome to the scheduler state."""
    if latency_ps <= 0:
        raise SchedulerError("iteration latency must be positive")
    state.clock_ps += latency_ps
    prompt_toks = 0
    gen_toks = 0
    for req in plan.requests:
        req.generated += 1
        gen_toks += 1
        if req.phase is Phase.INITIATION:
            prompt_toks += req.input_len
            req.phase = Phase.GENERATION
        req.context_len = req.input_len + req.generated
        if req.generated >= req.output_len:
            req.state = RequestState.FINISHED
            req.finish_ps = state.clock_ps
            state.page_table.release(req.id)
            state.running.remove(req)
            state.finished.append(req)
            state.event_log.append(("finish", req.id, 0))
    state.throughput_events.append((state.clock_ps, prompt_toks, gen_toks))
