"""servesim: iteration-level simulator for scale-out LLM inference serving.

Pipeline per simulated iteration: batch formation and KV paging
(:mod:`servesim.scheduler`), operator profiling
(:mod:`servesim.modelprofile`), analytical device cost models with result
reuse (:mod:`servesim.engine`), execution-graph construction
(:mod:`servesim.graphgen`), and discrete-event system simulation
(:mod:`servesim.syssim`).  :mod:`servesim.cli` ties the loop together.
"""

__version__ = "0.1.0"

from .engine import DeviceConfig, EngineResult, ReuseCache, cached_simulate, simulate_operator
from .modelprofile import (
    BatchEntry,
    IterationProfile,
    ModelConfig,
    OperatorDescriptor,
    OpKind,
    kv_bytes_per_token,
    load_model_config,
    profile_operators,
)
from .scheduler import KVPageTable, SchedulerState, form_batch, grow_or_evict, make_state
from .syssim import KERNEL_IMPL, SimOutcome, Topology, simulate_graph
from .workload import Phase, Request, RequestState, load_trace, save_trace, synthesize_poisson

__all__ = [
    "BatchEntry",
    "DeviceConfig",
    "EngineResult",
    "IterationProfile",
    "KERNEL_IMPL",
    "KVPageTable",
    "ModelConfig",
    "OpKind",
    "OperatorDescriptor",
    "Phase",
    "Request",
    "RequestState",
    "ReuseCache",
    "SchedulerState",
    "SimOutcome",
    "Topology",
    "cached_simulate",
    "form_batch",
    "grow_or_evict",
    "kv_bytes_per_token",
    "load_model_config",
    "load_trace",
    "make_state",
    "profile_operators",
    "save_trace",
    "simulate_graph",
    "simulate_operator",
    "synthesize_poisson",
    "__version__",
]
