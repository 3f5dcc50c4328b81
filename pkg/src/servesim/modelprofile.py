"""Parametric decoder model description and per-iteration operator profiling.

One serving iteration expands into a single representative transformer
block (replicated ``num_layers`` times downstream) plus the embedding and
LM-head operators.  Non-attention operators batch across requests with
``m = total_tokens``; Score/Attend are emitted per request and tagged with
the request id so the graph builder can place them individually.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional

from .workload import Phase


class OpKind(Enum):
    EMBEDDING = "Embedding"
    QKV_GEN = "QKVGen"
    SCORE = "Score"
    ATTEND = "Attend"
    OUT_PROJ = "OutProj"
    FFN1 = "FFN1"
    FFN2 = "FFN2"
    LAYERNORM = "LayerNorm"
    LM_HEAD = "LMHead"


#: operators costed with the systolic tile formula; everything else is
#: element-wise (flops / peak).
GEMM_KINDS = frozenset(
    {OpKind.QKV_GEN, OpKind.SCORE, OpKind.ATTEND, OpKind.OUT_PROJ, OpKind.FFN1, OpKind.FFN2, OpKind.LM_HEAD}
)

ATTENTION_KINDS = frozenset({OpKind.SCORE, OpKind.ATTEND})

#: layer_index marker for block-replicated operators
ALL_LAYERS = -1


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    name: str
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int = 0  # 0 -> defaults to 4 * hidden_dim
    vocab_size: int = 50257
    bytes_per_param: int = 2

    def __post_init__(self) -> None:
        if self.ffn_dim == 0:
            object.__setattr__(self, "ffn_dim", 4 * self.hidden_dim)
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "bytes_per_param"):
            if getattr(self, name) < 1:
                raise ProfileError(f"{self.name}: {name} must be >= 1")
        if self.hidden_dim % self.num_heads != 0:
            raise ProfileError(
                f"{self.name}: hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def weight_bytes(self) -> int:
        d, f, L, v = self.hidden_dim, self.ffn_dim, self.num_layers, self.vocab_size
        params = v * d + L * (4 * d * d + 2 * d * f + 4 * d) + 2 * d
        return params * self.bytes_per_param


def kv_bytes_per_token(model: ModelConfig) -> int:
    """KV-cache bytes per token (keys and values across all layers)."""
    return 2 * model.hidden_dim * model.num_layers * model.bytes_per_param


@dataclass(frozen=True)
class OperatorDescriptor:
    kind: OpKind
    phase: Phase
    m: int
    k: int
    n: int
    flops: int
    bytes: int
    layer_index: Optional[int] = ALL_LAYERS  # None for Embedding / LMHead
    attention_id: Optional[int] = None
    device: Optional[str] = None

    def sharded(self, g: int) -> "OperatorDescriptor":
        """Tensor-parallel shard: 1/g of the work on each group device."""
        if g == 1:
            return self
        return replace(
            self,
            n=-(-self.n // g),
            flops=-(-self.flops // g),
            bytes=-(-self.bytes // g),
        )


@dataclass(frozen=True)
class BatchEntry:
    """What profiling needs to know about one batched request."""

    request_id: int
    phase: Phase
    prompt_len: int
    context_len: int

    @property
    def q_tokens(self) -> int:
        return self.prompt_len if self.phase is Phase.INITIATION else 1


@dataclass
class IterationProfile:
    """Operators for one iteration: a representative block plus ends."""

    batched_ops: list[OperatorDescriptor]
    per_request_attention: dict[int, tuple[OperatorDescriptor, OperatorDescriptor]]
    total_tokens: int
    replication: int
    model: ModelConfig


def operator_bytes(desc: OperatorDescriptor, model: ModelConfig) -> int:
    """Weights + activations + KV traffic moved by one operator instance."""
    bpp = model.bytes_per_param
    d, f, v, h = model.hidden_dim, model.ffn_dim, model.vocab_size, model.num_heads
    m = desc.m
    if desc.kind is OpKind.EMBEDDING:
        return 2 * m * d * bpp
    if desc.kind is OpKind.LAYERNORM:
        return 2 * m * d * bpp
    if desc.kind is OpKind.QKV_GEN:
        return 3 * d * d * bpp + m * d * bpp + 3 * m * d * bpp
    if desc.kind is OpKind.SCORE:
        c = desc.n
        return c * d * bpp + m * d * bpp + m * c * h * bpp
    if desc.kind is OpKind.ATTEND:
        c = desc.n
        return c * d * bpp + m * c * h * bpp + m * d * bpp
    if desc.kind is OpKind.OUT_PROJ:
        return d * d * bpp + 2 * m * d * bpp
    if desc.kind is OpKind.FFN1:
        return d * f * bpp + m * d * bpp + m * f * bpp
    if desc.kind is OpKind.FFN2:
        return d * f * bpp + m * f * bpp + m * d * bpp
    if desc.kind is OpKind.LM_HEAD:
        return d * v * bpp + m * d * bpp + m * v * bpp
    raise ProfileError(f"unknown operator kind {desc.kind}")


def _make(kind: OpKind, model: ModelConfig, phase: Phase, m: int, k: int, n: int,
          flops: int, layer_index: Optional[int] = ALL_LAYERS,
          attention_id: Optional[int] = None) -> OperatorDescriptor:
    desc = OperatorDescriptor(kind=kind, phase=phase, m=m, k=k, n=n, flops=flops,
                              bytes=0, layer_index=layer_index, attention_id=attention_id)
    return replace(desc, bytes=operator_bytes(desc, model))


def attention_descriptors(
    model: ModelConfig, entry: BatchEntry
) -> tuple[OperatorDescriptor, OperatorDescriptor]:
    """Score and Attend for one request: (m, k, n) = (q, d/h, c) per head,
    flops aggregated over heads to 2*q*c*d."""
    if entry.context_len < 1:
        raise ProfileError(f"request {entry.request_id}: context_len must be >= 1")
    q = entry.q_tokens
    c = entry.context_len
    d = model.hidden_dim
    flops = 2 * q * c * d
    score = _make(OpKind.SCORE, model, entry.phase, q, model.head_dim, c, flops,
                  attention_id=entry.request_id)
    attend = _make(OpKind.ATTEND, model, entry.phase, q, model.head_dim, c, flops,
                   attention_id=entry.request_id)
    return score, attend


def profile_operators(model: ModelConfig, batch: list[BatchEntry]) -> IterationProfile:
    """Expand one iteration into concrete operators with FLOP/byte counts."""
    if not batch:
        raise ProfileError("cannot profile an empty batch")
    for entry in batch:
        if entry.phase is Phase.GENERATION and entry.context_len < 1:
            raise ProfileError(f"request {entry.request_id}: generation phase with empty context")

    total_tokens = sum(e.q_tokens for e in batch)
    if total_tokens == 0:
        raise ProfileError("batch has zero tokens")

    d, f, v = model.hidden_dim, model.ffn_dim, model.vocab_size
    t = total_tokens
    phase = Phase.INITIATION if any(e.phase is Phase.INITIATION for e in batch) else Phase.GENERATION

    batched = [
        _make(OpKind.EMBEDDING, model, phase, t, 0, d, t * d, layer_index=None),
        _make(OpKind.LAYERNORM, model, phase, t, 0, d, 5 * t * d),
        _make(OpKind.QKV_GEN, model, phase, t, d, 3 * d, 2 * t * d * 3 * d),
        _make(OpKind.OUT_PROJ, model, phase, t, d, d, 2 * t * d * d),
        _make(OpKind.LAYERNORM, model, phase, t, 0, d, 5 * t * d),
        _make(OpKind.FFN1, model, phase, t, d, f, 2 * t * d * f),
        _make(OpKind.FFN2, model, phase, t, f, d, 2 * t * d * f),
        _make(OpKind.LM_HEAD, model, phase, t, d, v, 2 * t * d * v, layer_index=None),
    ]
    attention = {e.request_id: attention_descriptors(model, e) for e in batch}
    return IterationProfile(
        batched_ops=batched,
        per_request_attention=attention,
        total_tokens=total_tokens,
        replication=model.num_layers,
        model=model,
    )


def profile_total_flops(profile: IterationProfile) -> int:
    """Total iteration FLOPs implied by the block-replicated profile."""
    total = 0
    for op in profile.batched_ops:
        count = profile.replication if op.layer_index == ALL_LAYERS else 1
        total += op.flops * count
    for score, attend in profile.per_request_attention.values():
        total += (score.flops + attend.flops) * profile.replication
    return total


# --- model presets ---------------------------------------------------------

def _parse_kv_file(text: str, origin: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ProfileError(f"{origin}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def load_model_config(name_or_path: str) -> ModelConfig:
    """Load a model preset by name (bundled) or from a key-value file."""
    path = Path(name_or_path)
    if path.suffix == ".cfg" and path.exists():
        text = path.read_text(encoding="utf-8")
        origin = str(path)
    else:
        res = resources.files("servesim").joinpath(f"presets/{name_or_path}.cfg")
        if not res.is_file():
            available = sorted(
                p.name[: -len(".cfg")]
                for p in resources.files("servesim").joinpath("presets").iterdir()
                if p.name.endswith(".cfg")
            )
            raise ProfileError(f"unknown model '{name_or_path}'; bundled presets: {available}")
        text = res.read_text(encoding="utf-8")
        origin = name_or_path
    raw = _parse_kv_file(text, origin)
    try:
        return ModelConfig(
            name=raw.get("name", name_or_path),
            num_layers=int(raw["num_layers"]),
            hidden_dim=int(raw["hidden_dim"]),
            num_heads=int(raw["num_heads"]),
            ffn_dim=int(raw.get("ffn_dim", "0")),
            vocab_size=int(raw.get("vocab_size", "50257")),
            bytes_per_param=int(raw.get("bytes_per_param", "2")),
        )
    except KeyError as exc:
        raise ProfileError(f"{origin}: missing required field {exc}") from None
