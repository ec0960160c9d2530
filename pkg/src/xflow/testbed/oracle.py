"""Reader for the append-only event logs fixtures write when XFLOW_ORACLE=1."""

from __future__ import annotations

import os
from collections import Counter, defaultdict
from pathlib import Path
from typing import NamedTuple


class OracleEvent(NamedTuple):
    tid: int
    caller: str
    symbol: str
    t0: int
    t1: int


def read_oracle(out_dir: str | os.PathLike, pid: int | None = None) -> list[OracleEvent]:
    events = []
    pattern = f"oracle.{pid}.log" if pid is not None else "oracle.*.log"
    for path in sorted(Path(out_dir).glob(pattern)):
        for line in path.read_text().splitlines():
            tid, caller, sym, t0, t1 = line.split("\t")
            events.append(OracleEvent(int(tid), caller, sym, int(t0), int(t1)))
    return events


def oracle_counts(events: list[OracleEvent]) -> Counter:
    """Invocation counts keyed by (caller image name, symbol)."""
    return Counter((e.caller, e.symbol) for e in events)


def oracle_cycles(events: list[OracleEvent]) -> dict[tuple[str, str], int]:
    total: dict[tuple[str, str], int] = defaultdict(int)
    for e in events:
        total[(e.caller, e.symbol)] += e.t1 - e.t0
    return dict(total)


def per_thread_counts(events: list[OracleEvent]) -> Counter:
    return Counter(e.tid for e in events)
