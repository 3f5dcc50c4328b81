"""Configuration, the iteration driver loop, and TSV/stdout reporting."""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import engine, graphgen, scheduler, syssim, workload
from .engine import DeviceConfig, GiB, ReuseCache
from .modelprofile import ProfileError, load_model_config, profile_operators
from .scheduler import (
    ConfigError,
    PartitionCriteria,
    SchedulerError,
    PS_PER_S,
    advance,
    batch_deadline_ps,
    form_batch,
    grow_or_evict,
    make_state,
    map_operators,
    partition_batch,
)
from .workload import TraceError, load_trace

PARALLEL_MODES = ("pipeline", "tensor", "hybrid")
PIM_TYPES = ("none", "local", "pool")


@dataclass
class RunConfig:
    """The simulator's 16 input parameters."""

    model_name: str = "gpt2"
    npu_num: int = 16
    max_batch: int = 0  # 0 = no limit
    batch_delay: float = 0.0  # milliseconds
    scheduling: str = "orca"
    parallel: str = "hybrid"
    npu_group: int = 1
    npu_mem: int = 40  # GB
    kv_manage: str = "vllm"
    pim_type: str = "none"
    sub_batch: bool = False
    dataset: str = ""
    network: str = ""
    output: str = "servesim"
    gen: bool = False
    fast_run: bool = False

    def __post_init__(self) -> None:
        if self.parallel not in PARALLEL_MODES:
            raise ConfigError(f"parallel must be one of {PARALLEL_MODES}, got '{self.parallel}'")
        if self.pim_type not in PIM_TYPES:
            raise ConfigError(f"pim_type must be one of {PIM_TYPES}, got '{self.pim_type}'")
        if self.scheduling != "orca":
            raise ConfigError(f"scheduling must be 'orca', got '{self.scheduling}'")
        if self.kv_manage not in ("vllm", "maxlen"):
            raise ConfigError(f"kv_manage must be 'vllm' or 'maxlen', got '{self.kv_manage}'")
        if self.npu_num < 1:
            raise ConfigError("npu_num must be >= 1")
        if self.npu_mem < 1:
            raise ConfigError("npu_mem must be >= 1 GB")


@dataclass(frozen=True)
class ThroughputSample:
    time_s: float  # interval end
    prompt_tps: float
    gen_tps: float


@dataclass
class RunResult:
    state: object
    samples: list[ThroughputSample]
    timers_ms: dict[str, float]
    iterations: int
    engine_invocations: int
    wall_s: float


THROUGHPUT_INTERVAL_S = 1.0


def bucket_throughput(
    events: list[tuple[int, int, int]], interval_s: float = THROUGHPUT_INTERVAL_S
) -> list[ThroughputSample]:
    """Aggregate per-iteration token counts into contiguous intervals."""
    if not events:
        return []
    interval_ps = round(interval_s * PS_PER_S)
    end_ps = max(t for t, _, _ in events)
    n_intervals = -(-end_ps // interval_ps) or 1
    prompt = [0] * n_intervals
    gen = [0] * n_intervals
    for t, p, g in events:
        idx = min((t - 1) // interval_ps, n_intervals - 1)
        prompt[idx] += p
        gen[idx] += g
    return [
        ThroughputSample(
            time_s=(i + 1) * interval_s,
            prompt_tps=prompt[i] / interval_s,
            gen_tps=gen[i] / interval_s,
        )
        for i in range(n_intervals)
    ]


def write_reports(
    samples: list[ThroughputSample],
    timers_ms: dict[str, float],
    prefix: str | Path,
) -> tuple[Path, Path]:
    prefix = Path(prefix)
    tp_path = prefix.parent / f"{prefix.name}-throughput.tsv"
    st_path = prefix.parent / f"{prefix.name}-simulation-time.tsv"
    with open(tp_path, "w", encoding="utf-8") as fh:
        fh.write("time_s\tprompt_tps\tgen_tps\n")
        for s in samples:
            fh.write(f"{s.time_s:.3f}\t{s.prompt_tps:.6f}\t{s.gen_tps:.6f}\n")
    with open(st_path, "w", encoding="utf-8") as fh:
        fh.write("component\ttime_ms\n")
        total = 0.0
        for comp in ("scheduler", "engine", "graphgen", "syssim"):
            ms = timers_ms.get(comp, 0.0)
            total += ms
            fh.write(f"{comp}\t{ms:.3f}\n")
        fh.write(f"total\t{total:.3f}\n")
    return tp_path, st_path


def run(config: RunConfig, quiet: bool = False) -> RunResult:
    """Drive the iteration loop until every request finishes."""
    wall_start = time.perf_counter()
    model = load_model_config(config.model_name)
    par = graphgen.ParallelismConfig(config.npu_num, config.npu_group, config.parallel)

    net = syssim.load_network_config(config.network) if config.network else {}
    pim_num = net.pop("pim_num", config.npu_num)
    net.pop("npu_num", None)
    net.pop("npu_group", None)

    requests = load_trace(config.dataset) if config.dataset else []
    state = make_state(
        model,
        requests,
        npu_num=config.npu_num,
        npu_mem_bytes=config.npu_mem * GiB,
        max_batch=config.max_batch,
        batch_delay_ps=round(config.batch_delay * 1e9),  # ms -> ps
        kv_manage=config.kv_manage,
        scheduling=config.scheduling,
        gen_only=config.gen,
    )

    npu = DeviceConfig(kind="npu", mem_capacity=config.npu_mem * GiB)
    pim = DeviceConfig(kind="pim") if config.pim_type != "none" else None
    cache = ReuseCache()

    timers = {"scheduler": 0.0, "engine": 0.0, "graphgen": 0.0, "syssim": 0.0}
    iterations = 0
    invocations = 0
    pending_stores: list[scheduler.PageEvent] = []

    while state.unfinished:
        t0 = time.perf_counter()
        plan = form_batch(state)
        timers["scheduler"] += time.perf_counter() - t0
        if not plan.entries:
            wake_candidates = []
            nxt = state.next_arrival_ps()
            if nxt is not None:
                wake_candidates.append(nxt)
            deadline = batch_deadline_ps(state)
            if deadline is not None:
                wake_candidates.append(deadline)
            wake = min((t for t in wake_candidates if t > state.clock_ps), default=None)
            if wake is None:
                raise SchedulerError(
                    "no batchable requests and no future arrivals; simulation is stuck"
                )
            state.clock_ps = wake
            continue

        t0 = time.perf_counter()
        subs = partition_batch(
            plan,
            PartitionCriteria.TOKEN_COUNT,
            enabled=config.sub_batch and config.pim_type != "none",
        )
        profiles = [profile_operators(model, sub) for sub in subs]
        sharded = [graphgen.shard_profile(p, par.tp_degree, config.pim_type) for p in profiles]
        mappings = [
            map_operators(p, config.pim_type, has_pim=pim is not None) for p in sharded
        ]
        timers["scheduler"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        sims = [
            engine.simulate_block_replicated(p, mp, npu, pim, cache, config.fast_run)
            for p, mp in zip(sharded, mappings)
        ]
        invocations += sum(s.invocations for s in sims)
        timers["engine"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        instance_lists = []
        uid = 0
        for sub_id, (p, mp, sim) in enumerate(zip(sharded, mappings, sims)):
            insts = graphgen.expand_instances(p, mp, sim, sub_id, uid)
            uid += len(insts)
            instance_lists.append(insts)
        trace = graphgen.schedule_operators(
            instance_lists,
            model=model,
            sub_total_tokens={i: p.total_tokens for i, p in enumerate(sharded)},
            num_blocks=model.num_layers,
        )
        page_events = pending_stores + plan.load_events
        graph = graphgen.build_graph(trace, par, page_events, config.pim_type, pim_num)
        timers["graphgen"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        topo = syssim.Topology(num_devices=graph.num_devices, **net)
        outcome = syssim.simulate_graph(graph, topo)
        timers["syssim"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        advance(state, plan, outcome.latency_ps)
        pending_stores = grow_or_evict(state)
        timers["scheduler"] += time.perf_counter() - t0

        iterations += 1
        if not quiet:
            clock_ms = state.clock_ps / 1e9
            _, p_toks, g_toks = state.throughput_events[-1]
            lat_s = outcome.latency_ps / PS_PER_S
            ids = [r.id for r in plan.requests]
            print(
                f"iter={iterations} clock_ms={clock_ms:.3f} batch={ids} "
                f"prompt_tps={p_toks / lat_s:.1f} gen_tps={g_toks / lat_s:.1f}"
            )

    samples = bucket_throughput(state.throughput_events)
    timers_ms = {k: v * 1000 for k, v in timers.items()}
    wall_s = time.perf_counter() - wall_start
    result = RunResult(
        state=state,
        samples=samples,
        timers_ms=timers_ms,
        iterations=iterations,
        engine_invocations=invocations,
        wall_s=wall_s,
    )
    write_reports(samples, timers_ms, config.output)

    if not quiet:
        total_s = state.clock_ps / PS_PER_S
        total_prompt = sum(r.input_len for r in state.finished)
        total_gen = sum(r.output_len for r in state.finished)
        if total_s > 0:
            print(
                f"summary: simulated={total_s:.3f}s iterations={iterations} "
                f"prompt_tps={total_prompt / total_s:.1f} gen_tps={total_gen / total_s:.1f} "
                f"wall={wall_s:.2f}s"
            )
        else:
            print(f"summary: no iterations simulated; wall={wall_s:.2f}s")
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="servesim",
        description="Iteration-level simulator for scale-out LLM inference serving",
    )
    parser.add_argument("--model_name", default="gpt2", help="model preset name or .cfg path")
    parser.add_argument("--npu_num", type=int, default=16, help="number of NPUs")
    parser.add_argument("--max_batch", type=int, default=0, help="max batch size (0 = no limit)")
    parser.add_argument("--batch_delay", type=float, default=0.0, help="batching delay in ms")
    parser.add_argument("--scheduling", default="orca", choices=["orca"])
    parser.add_argument("--parallel", default="hybrid", choices=list(PARALLEL_MODES))
    parser.add_argument("--npu_group", type=int, default=1, help="NPU groups for hybrid parallelism")
    parser.add_argument("--npu_mem", type=int, default=40, help="NPU local memory in GB")
    parser.add_argument("--kv_manage", default="vllm", choices=["vllm", "maxlen"])
    parser.add_argument("--pim_type", default="none", choices=list(PIM_TYPES))
    parser.add_argument("--sub_batch", action="store_true", help="enable sub-batch interleaving")
    parser.add_argument("--dataset", default="", help="TSV request trace path")
    parser.add_argument("--network", default="", help="network config file path")
    parser.add_argument("--output", default="servesim", help="output TSV path prefix")
    parser.add_argument("--gen", action="store_true", help="skip the initiation phase")
    parser.add_argument("--fast_run", action="store_true",
                        help="closed-form GEMM cost instead of the tile model")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    config = RunConfig(**vars(args))
    try:
        run(config)
    except (ConfigError, TraceError, ProfileError, SchedulerError, graphgen.GraphError,
            syssim.TopologyError, engine.EngineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
