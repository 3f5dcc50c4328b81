"""Shared fixtures: a full single-iteration pipeline usable outside the CLI."""
from __future__ import annotations

from servesim import engine, graphgen, syssim
from servesim.engine import DeviceConfig, ReuseCache
from servesim.modelprofile import BatchEntry, ModelConfig, profile_operators
from servesim.scheduler import MappingPlan, map_operators
from servesim.workload import Phase

TINY = ModelConfig(name="tiny", num_layers=2, hidden_dim=64, num_heads=4,
                   ffn_dim=256, vocab_size=512)


def decode_entries(contexts, start_id=0):
    """Generation-phase batch entries at the given context lengths."""
    return [
        BatchEntry(request_id=start_id + i, phase=Phase.GENERATION,
                   prompt_len=max(1, c - 1), context_len=c)
        for i, c in enumerate(contexts)
    ]


def prefill_entries(prompts, start_id=0):
    return [
        BatchEntry(request_id=start_id + i, phase=Phase.INITIATION,
                   prompt_len=p, context_len=p)
        for i, p in enumerate(prompts)
    ]


def run_iteration(model, sub_batches, par, npu=None, pim=None, pim_type="none",
                  pim_num=0, page_events=(), net=None, cache=None,
                  fast_run=False):
    """One iteration end to end: profile -> engine -> graph -> event sim.

    ``sub_batches`` is a list of BatchEntry lists (usually one).  Returns
    (outcome, graph, trace).
    """
    npu = npu or DeviceConfig(kind="npu")
    if pim_type != "none" and pim is None:
        pim = DeviceConfig(kind="pim")
    profiles = [profile_operators(model, sub) for sub in sub_batches]
    sharded = [graphgen.shard_profile(p, par.tp_degree, pim_type) for p in profiles]
    mappings = [map_operators(p, pim_type, has_pim=pim is not None) for p in sharded]
    sims = [
        engine.simulate_block_replicated(p, mp, npu, pim, cache, fast_run)
        for p, mp in zip(sharded, mappings)
    ]
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
    graph = graphgen.build_graph(trace, par, page_events, pim_type, pim_num)
    topo = syssim.Topology(num_devices=graph.num_devices, **(net or {}))
    outcome = syssim.simulate_graph(graph, topo)
    return outcome, graph, trace
