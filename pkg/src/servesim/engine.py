"""Analytical accelerator cost models and the simulation-result reuse cache.

NPU operators are costed with a systolic-array tile model (output-stationary
fill/drain of ``rows + cols`` cycles per tile); element-wise operators fall
back to flops/peak.  PIM takes only generation-phase GEMVs and is purely
bandwidth-limited.  New engines plug in by providing a callable with the
``simulate_operator`` signature.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .modelprofile import GEMM_KINDS, IterationProfile, OperatorDescriptor

GiB = 1024**3


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class DeviceConfig:
    kind: str = "npu"  # "npu" | "pim"
    array_rows: int = 128
    array_cols: int = 128
    clock_hz: float = 1e9
    mem_bw: float = 900e9
    mem_capacity: int = 40 * GiB
    gemv_bw: float = 8 * 900e9  # PIM effective internal bandwidth
    launch_overhead: float = 2e-6

    def __post_init__(self) -> None:
        if self.kind not in ("npu", "pim"):
            raise EngineError(f"unknown device kind '{self.kind}'")
        for name in ("array_rows", "array_cols", "clock_hz", "mem_bw", "gemv_bw", "mem_capacity"):
            if getattr(self, name) <= 0:
                raise EngineError(f"device {name} must be positive")
        if self.launch_overhead < 0:
            raise EngineError("launch_overhead must be non-negative")

    @property
    def peak_flops(self) -> float:
        return 2.0 * self.array_rows * self.array_cols * self.clock_hz


@dataclass(frozen=True)
class EngineResult:
    latency: float  # seconds, launch overhead included
    bound: str  # "Compute" | "Memory"
    flops: int
    bytes: int


def gemm_compute_cycles(m: int, k: int, n: int, rows: int, cols: int) -> int:
    """Closed-form tile cost: ceil(m/R)*ceil(n/C) tiles of k + R + C cycles."""
    tiles = -(-m // rows) * (-(-n // cols))
    return tiles * (k + rows + cols)


def simulate_operator(
    desc: OperatorDescriptor, device: DeviceConfig, fast_run: bool = False
) -> EngineResult:
    """Latency of one operator instance on one device."""
    if device.kind == "pim":
        if desc.kind not in GEMM_KINDS or desc.m != 1:
            raise EngineError(
                f"PIM accepts only GEMV-shaped operators (m=1); got {desc.kind.value} m={desc.m}"
            )
        latency = desc.bytes / device.gemv_bw + device.launch_overhead
        return EngineResult(latency=latency, bound="Memory", flops=desc.flops, bytes=desc.bytes)

    if desc.kind in GEMM_KINDS and not fast_run:
        cycles = gemm_compute_cycles(desc.m, desc.k, desc.n, device.array_rows, device.array_cols)
        compute_t = cycles / device.clock_hz
    else:
        compute_t = desc.flops / device.peak_flops
    memory_t = desc.bytes / device.mem_bw
    bound = "Compute" if compute_t >= memory_t else "Memory"
    return EngineResult(
        latency=max(compute_t, memory_t) + device.launch_overhead,
        bound=bound,
        flops=desc.flops,
        bytes=desc.bytes,
    )


def _cache_key(desc: OperatorDescriptor, device: DeviceConfig, fast_run: bool):
    # flops/bytes are part of the key: tensor-parallel shards share dims but
    # differ in sharded work.
    return (desc.kind, desc.m, desc.k, desc.n, desc.phase, desc.flops, desc.bytes, device, fast_run)


class ReuseCache:
    """Get-or-compute cache over (operator shape, device); linearizable."""

    def __init__(self) -> None:
        self._store: dict = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)


def cached_simulate(
    desc: OperatorDescriptor,
    device: DeviceConfig,
    cache: ReuseCache,
    fast_run: bool = False,
) -> EngineResult:
    key = _cache_key(desc, device, fast_run)
    with cache._lock:
        hit = cache._store.get(key)
        if hit is not None:
            cache.hits += 1
            return hit
        result = simulate_operator(desc, device, fast_run)
        cache._store[key] = result
        cache.misses += 1
        return result


@dataclass
class BlockSimResult:
    """Per-operator latencies for one iteration's representative block."""

    batched: list[EngineResult]
    attention: dict[int, tuple[EngineResult, EngineResult]]
    invocations: int  # raw engine evaluations performed by this call


def simulate_block_replicated(
    profile: IterationProfile,
    mapping,  # scheduler.MappingPlan
    npu: DeviceConfig,
    pim: Optional[DeviceConfig],
    cache: Optional[ReuseCache],
    fast_run: bool = False,
) -> BlockSimResult:
    """Evaluate the representative block once; layer replication reuses it.

    With a cache, identical shapes (e.g. two requests at the same context
    length) collapse to a single engine evaluation.
    """
    invocations = 0

    def run(desc: OperatorDescriptor, device: DeviceConfig) -> EngineResult:
        nonlocal invocations
        if cache is None:
            invocations += 1
            return simulate_operator(desc, device, fast_run)
        before = cache.misses
        result = cached_simulate(desc, device, cache, fast_run)
        invocations += cache.misses - before
        return result

    batched = []
    for i, op in enumerate(profile.batched_ops):
        device = pim if mapping.device_for(("batched", i)) == "pim" else npu
        batched.append(run(op, device))
    attention = {}
    for rid, (score, attend) in profile.per_request_attention.items():
        sdev = pim if mapping.device_for(("attn", rid, "score")) == "pim" else npu
        adev = pim if mapping.device_for(("attn", rid, "attend")) == "pim" else npu
        attention[rid] = (run(score, sdev), run(attend, adev))
    return BlockSimResult(batched=batched, attention=attention, invocations=invocations)


# --- device config file ------------------------------------------------------

def load_device_config(path: str | Path) -> DeviceConfig:
    """Parse a key-value device config file into a DeviceConfig."""
    from .modelprofile import _parse_kv_file

    raw = _parse_kv_file(Path(path).read_text(encoding="utf-8"), str(path))
    kwargs = {}
    for key, conv in (
        ("kind", str),
        ("array_rows", int),
        ("array_cols", int),
        ("clock_hz", float),
        ("mem_bw", float),
        ("mem_capacity", int),
        ("gemv_bw", float),
        ("launch_overhead", float),
    ):
        if key in raw:
            kwargs[key] = conv(raw[key])
    return DeviceConfig(**kwargs)
