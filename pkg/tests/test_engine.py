"""Analytical device cost model and the result-reuse cache."""
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from servesim.engine import (
    DeviceConfig,
    EngineError,
    ReuseCache,
    cached_simulate,
    gemm_compute_cycles,
    load_device_config,
    simulate_block_replicated,
    simulate_operator,
)
from servesim.modelprofile import (
    BatchEntry,
    ModelConfig,
    OpKind,
    OperatorDescriptor,
    profile_operators,
)
from servesim.scheduler import MappingPlan, map_operators
from servesim.workload import Phase

NPU = DeviceConfig(kind="npu")
PIM = DeviceConfig(kind="pim")


def gemm(m, k, n, flops=None, nbytes=1, kind=OpKind.QKV_GEN, phase=Phase.INITIATION):
    return OperatorDescriptor(kind=kind, phase=phase, m=m, k=k, n=n,
                              flops=flops if flops is not None else 2 * m * k * n,
                              bytes=nbytes)


def brute_force_cycles(m, k, n, rows, cols):
    """Oracle: walk every output tile and accumulate its fill/drain cost."""
    total = 0
    i = 0
    while i < m:
        j = 0
        while j < n:
            total += k + rows + cols
            j += cols
        i += rows
    return total


def test_defaults_give_expected_peak():
    assert NPU.peak_flops == 2 * 128 * 128 * 1e9 == 32.768e12
    # within 10% of a commodity accelerator's dense FP16 peak (~35.6 TFLOPS)
    assert abs(NPU.peak_flops - 35.58e12) / 35.58e12 < 0.10


def test_qkv_projection_is_compute_bound():
    # m=128, k=4096, n=12288 on the default array: 1*96 tiles of 4352 cycles
    nbytes = 100_663_296 + 128 * 4096 * 2 + 3 * 128 * 4096 * 2
    desc = gemm(128, 4096, 12288, nbytes=nbytes)
    r = simulate_operator(desc, NPU)
    cycles = gemm_compute_cycles(128, 4096, 12288, 128, 128)
    assert cycles == 96 * (4096 + 256) == 417_792
    assert r.bound == "Compute"
    assert math.isclose(r.latency, cycles / 1e9 + 2e-6, rel_tol=1e-12)
    assert nbytes / 900e9 < cycles / 1e9  # memory stream hides under compute


def test_decode_score_on_pim_is_bandwidth_limited():
    desc = gemm(1, 128, 1024, flops=8_388_608, nbytes=8_388_608,
                kind=OpKind.SCORE, phase=Phase.GENERATION)
    r = simulate_operator(desc, PIM)
    assert r.bound == "Memory"
    assert math.isclose(r.latency, 8_388_608 / (8 * 900e9) + 2e-6, rel_tol=1e-12)
    # the same GEMV on the NPU pays the full memory stream at 1x bandwidth
    npu_r = simulate_operator(desc, NPU)
    assert npu_r.bound == "Memory"
    assert npu_r.latency > r.latency


def test_elementwise_uses_peak_flops():
    desc = OperatorDescriptor(kind=OpKind.LAYERNORM, phase=Phase.INITIATION,
                              m=128, k=0, n=4096, flops=5 * 128 * 4096,
                              bytes=2 * 128 * 4096 * 2)
    r = simulate_operator(desc, NPU)
    compute_t = 5 * 128 * 4096 / NPU.peak_flops
    memory_t = 2 * 128 * 4096 * 2 / 900e9
    assert r.bound == "Memory"
    assert math.isclose(r.latency, memory_t + 2e-6, rel_tol=1e-12)
    assert compute_t < memory_t


def test_fast_run_replaces_tile_formula():
    desc = gemm(128, 4096, 12288, nbytes=1)
    slow = simulate_operator(desc, NPU, fast_run=False)
    fast = simulate_operator(desc, NPU, fast_run=True)
    assert math.isclose(fast.latency, desc.flops / NPU.peak_flops + 2e-6, rel_tol=1e-12)
    assert fast.latency <= slow.latency  # peak is an optimistic bound


def test_pim_rejects_non_gemv():
    with pytest.raises(EngineError):
        simulate_operator(gemm(2, 64, 64, kind=OpKind.SCORE, phase=Phase.GENERATION), PIM)
    ln = OperatorDescriptor(kind=OpKind.LAYERNORM, phase=Phase.GENERATION,
                            m=1, k=0, n=64, flops=320, bytes=256)
    with pytest.raises(EngineError):
        simulate_operator(ln, PIM)


def test_device_config_validation():
    with pytest.raises(EngineError):
        DeviceConfig(kind="gpu")
    with pytest.raises(EngineError):
        DeviceConfig(mem_bw=0)
    with pytest.raises(EngineError):
        DeviceConfig(launch_overhead=-1e-9)


def test_device_config_file_round_trip(tmp_path):
    p = tmp_path / "dev.cfg"
    p.write_text("kind = npu\narray_rows = 64\narray_cols = 32\nclock_hz = 2e9\n"
                 "mem_bw = 1e12\nlaunch_overhead = 0\n")
    dev = load_device_config(p)
    assert (dev.array_rows, dev.array_cols) == (64, 32)
    assert dev.peak_flops == 2 * 64 * 32 * 2e9


def test_tile_formula_matches_per_tile_walk():
    rng = random.Random(7)
    for _ in range(100):
        m, k, n = (rng.randint(1, 1024) for _ in range(3))
        rows = rng.choice([16, 32, 64, 128])
        cols = rng.choice([16, 32, 64, 128])
        assert gemm_compute_cycles(m, k, n, rows, cols) == \
            brute_force_cycles(m, k, n, rows, cols)


@given(
    m=st.integers(1, 2048), k=st.integers(1, 4096), n=st.integers(1, 4096),
    dm=st.integers(0, 64), dn=st.integers(0, 64),
)
@settings(max_examples=80, deadline=None)
def test_latency_monotone_in_problem_size(m, k, n, dm, dn):
    small = gemm(m, k, n, nbytes=m * k + k * n + m * n)
    big = gemm(m + dm, k, n + dn, nbytes=(m + dm) * k + k * (n + dn) + (m + dm) * (n + dn))
    assert simulate_operator(big, NPU).latency >= simulate_operator(small, NPU).latency


# --- reuse cache -------------------------------------------------------------

def test_cache_hit_for_identical_shape():
    cache = ReuseCache()
    desc = gemm(64, 256, 256, nbytes=1000)
    r1 = cached_simulate(desc, NPU, cache)
    r2 = cached_simulate(gemm(64, 256, 256, nbytes=1000), NPU, cache)
    assert r1 is r2
    assert (cache.hits, cache.misses, len(cache)) == (1, 1, 1)


def test_cache_distinguishes_device_and_mode():
    cache = ReuseCache()
    desc = gemm(1, 256, 256, kind=OpKind.SCORE, phase=Phase.GENERATION, nbytes=1000)
    cached_simulate(desc, NPU, cache)
    cached_simulate(desc, PIM, cache)
    cached_simulate(desc, NPU, cache, fast_run=True)
    assert cache.misses == 3 and cache.hits == 0


def test_cache_distinguishes_sharded_work():
    # same (m, k, n) but different flops/bytes must not collide
    cache = ReuseCache()
    cached_simulate(gemm(64, 256, 256, flops=100, nbytes=100), NPU, cache)
    cached_simulate(gemm(64, 256, 256, flops=50, nbytes=50), NPU, cache)
    assert cache.misses == 2


def test_cached_value_equals_uncached():
    cache = ReuseCache()
    desc = gemm(33, 1000, 65, nbytes=12345)
    assert cached_simulate(desc, NPU, cache) == simulate_operator(desc, NPU)


# --- block-level evaluation ----------------------------------------------------

def small_model():
    return ModelConfig(name="s", num_layers=32, hidden_dim=64, num_heads=4,
                       ffn_dim=256, vocab_size=512)


def test_block_evaluated_once_regardless_of_depth():
    m = small_model()
    prof = profile_operators(m, [BatchEntry(0, Phase.INITIATION, 16, 16)])
    sim = simulate_block_replicated(prof, MappingPlan(), NPU, None, cache=None)
    # 8 batched ops + score + attend: one evaluation each, not 32x
    assert sim.invocations == 10
    assert len(sim.batched) == 8 and len(sim.attention) == 1


def test_equal_contexts_collapse_under_cache():
    m = small_model()
    batch = [BatchEntry(i, Phase.GENERATION, 31, 32) for i in range(8)]
    prof = profile_operators(m, batch)
    cache = ReuseCache()
    sim = simulate_block_replicated(prof, MappingPlan(), NPU, None, cache=cache)
    # 8 batched ops minus the two identical LayerNorms, plus one score and
    # one attend shape shared by all 8 requests
    assert sim.invocations == 9
    uncached = simulate_block_replicated(prof, MappingPlan(), NPU, None, cache=None)
    assert uncached.invocations == 8 + 2 * 8
    for a, b in zip(sim.batched, uncached.batched):
        assert a.latency == b.latency
    for rid in prof.per_request_attention:
        assert sim.attention[rid][0].latency == uncached.attention[rid][0].latency
        assert sim.attention[rid][1].latency == uncached.attention[rid][1].latency


def test_pim_mapping_routes_decode_attention():
    m = small_model()
    prof = profile_operators(m, [BatchEntry(0, Phase.GENERATION, 31, 32)])
    mapping = map_operators(prof, "local", has_pim=True)
    sim = simulate_block_replicated(prof, mapping, NPU, PIM, cache=None)
    score_pim, attend_pim = sim.attention[0]
    sim_npu = simulate_block_replicated(prof, MappingPlan(), NPU, None, cache=None)
    score_npu, _ = sim_npu.attention[0]
    assert score_pim.bound == "Memory"
    assert score_pim.latency < score_npu.latency  # 8x internal bandwidth wins
