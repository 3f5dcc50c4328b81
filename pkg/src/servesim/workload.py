"""Request traces driving the serving simulation.

Traces are TSV files with three columns (input tokens, output tokens,
arrival time in milliseconds) and an optional header line.  Arrival times
are stored internally as integer microseconds so the scheduler clock stays
exact across iterations.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence


class RequestState(Enum):
    WAITING = "waiting"
    RUNNING = "running"
    EVICTED = "evicted"
    FINISHED = "finished"


class Phase(Enum):
    INITIATION = "initiation"
    GENERATION = "generation"


class TraceError(ValueError):
    """Malformed trace file or degenerate request."""


@dataclass
class Request:
    """One serving request and its lifecycle state."""

    id: int
    arrival_us: int
    input_len: int
    output_len: int
    state: RequestState = RequestState.WAITING
    phase: Phase = Phase.INITIATION
    generated: int = 0
    context_len: int = 0
    # bookkeeping filled in by the scheduler
    admit_seq: int = -1
    finish_ps: int = -1

    @property
    def arrival_ms(self) -> float:
        return self.arrival_us / 1000.0

    def __post_init__(self) -> None:
        if self.input_len < 1 or self.output_len < 1:
            raise TraceError(
                f"request {self.id}: input/output lengths must be >= 1 "
                f"(got {self.input_len}, {self.output_len})"
            )
        if self.arrival_us < 0:
            raise TraceError(f"request {self.id}: negative arrival time")


@dataclass(frozen=True)
class TraceRecord:
    input_len: int
    output_len: int
    arrival_ms: float


def _parse_row(fields: Sequence[str], lineno: int) -> TraceRecord:
    if len(fields) != 3:
        raise TraceError(f"line {lineno}: expected 3 tab-separated columns, got {len(fields)}")
    try:
        input_len = int(fields[0])
        output_len = int(fields[1])
        arrival_ms = float(fields[2])
    except ValueError as exc:
        raise TraceError(f"line {lineno}: non-numeric field ({exc})") from None
    if input_len <= 0 or output_len <= 0:
        raise TraceError(f"line {lineno}: degenerate request with zero token length")
    if arrival_ms < 0:
        raise TraceError(f"line {lineno}: negative arrival time")
    return TraceRecord(input_len, output_len, arrival_ms)


def _is_header(fields: Sequence[str]) -> bool:
    if not fields:
        return False
    try:
        float(fields[0])
    except ValueError:
        return True
    return False


def load_trace(path: str | Path) -> list[Request]:
    """Load a TSV trace, sorted by arrival time (ties keep file order).

    Request ids are assigned 0..n-1 in sorted order; all requests start
    Waiting.
    """
    records: list[tuple[int, TraceRecord]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if lineno == 1 and _is_header(fields):
                continue
            records.append((lineno, _parse_row(fields, lineno)))

    records.sort(key=lambda item: (round(item[1].arrival_ms * 1000), item[0]))
    return [
        Request(
            id=i,
            arrival_us=round(rec.arrival_ms * 1000),
            input_len=rec.input_len,
            output_len=rec.output_len,
        )
        for i, (_, rec) in enumerate(records)
    ]


def save_trace(requests: Sequence[Request], path: str | Path, header: bool = True) -> None:
    """Write requests back out as a TSV trace (milliseconds, 3 decimals)."""
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write("input_toks\toutput_toks\tarrival_ms\n")
        for req in requests:
            us = req.arrival_us
            fh.write(f"{req.input_len}\t{req.output_len}\t{us // 1000}.{us % 1000:03d}\n")


def synthesize_poisson(
    rate: float,
    count: int,
    length_pairs: Sequence[tuple[int, int]],
    seed: int,
) -> list[Request]:
    """Synthesize a trace with exponential inter-arrival gaps.

    ``rate`` is in requests/second; prompt/output lengths are sampled
    uniformly with replacement from ``length_pairs``.  Deterministic for a
    fixed (rate, count, length_pairs, seed).
    """
    if rate <= 0:
        raise ValueError(f"poisson rate must be positive, got {rate}")
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    if not length_pairs:
        raise ValueError("length_pairs must be non-empty")

    rng = random.Random(seed)
    requests = []
    t_sec = 0.0
    for i in range(count):
        t_sec += rng.expovariate(rate)
        input_len, output_len = length_pairs[rng.randrange(len(length_pairs))]
        requests.append(
            Request(id=i, arrival_us=round(t_sec * 1e6), input_len=input_len, output_len=output_len)
        )
    return requests
