"""Ledger files: the per-thread folded accumulators written by the agent.

The agent writes these from C; this module is the reader/writer used by the
analyzer and the tests, plus a reference implementation of the fold rule.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

FORMAT_VERSION = 1
MAGIC = "XFLOW"
U64_MAX = (1 << 64) - 1
KINDS = ("plt-lazy", "plt-eager", "dyn-got", "dlsym")
LEDGER_RE = re.compile(r"^xflow\.(\d+)\.(\d+)\.tsv(?:\.snap(\d+))?(\.retry)?$")


class LedgerFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LedgerRow:
    site_id: int
    caller_image: int
    symbol: str
    kind: str
    count: int
    timed_count: int
    raw_cycles: int
    attributed_cycles: int
    callee_image: int = -1


@dataclass
class LedgerFile:
    ordinal: int
    group: int
    hz: int
    total_cycles: int
    images: dict[int, str] = field(default_factory=dict)
    rows: list[LedgerRow] = field(default_factory=list)
    pid: int | None = None
    snapshot: int | None = None
    warnings: list[str] = field(default_factory=list)

    def image_path(self, image_id: int) -> str | None:
        return self.images.get(image_id)


def sat_add(a: int, b: int) -> int:
    return min(a + b, U64_MAX)


def attributed_share(value: int, active: int) -> int:
    """Integer division rounding half up."""
    active = max(active, 1)
    q, r = divmod(value, active)
    return q + (1 if r >= (active + 1) // 2 else 0)


def fold(row: list[int], duration: int | None, active: int = 1, scale: int = 1) -> list[int]:
    """Apply one invocation to a [count, timed, raw, attributed] accumulator in place."""
    row[0] = sat_add(row[0], 1)
    if duration is None:
        return row
    v = min(duration * max(scale, 1), U64_MAX)
    row[1] = sat_add(row[1], 1)
    row[2] = sat_add(row[2], v)
    row[3] = sat_add(row[3], attributed_share(v, active))
    return row


def _u(text: str, what: str) -> int:
    if not text.isdigit():
        raise LedgerFormatError(f"bad {what}: {text!r}")
    return int(text)


def parse_ledger(text: str, name: str = "<ledger>") -> LedgerFile:
    """Parse ledger text. Header errors raise; malformed data rows are skipped and noted."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise LedgerFormatError(f"{name}: empty file")
    first = lines[0].split("\t")
    if len(first) != 2 or first[0] != MAGIC:
        raise LedgerFormatError(f"{name}: not a ledger file")
    if first[1] != str(FORMAT_VERSION):
        raise LedgerFormatError(f"{name}: unsupported format version {first[1]}")

    head: dict[str, int] = {}
    images: dict[int, str] = {}
    rows: list[LedgerRow] = []
    warnings: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line.startswith("#"):
            key, _, rest = line[1:].partition("\t")
            if key == "image":
                ident, _, path = rest.partition("\t")
                images[_u(ident, "image id")] = path
            elif key == "group":
                try:
                    head[key] = int(rest, 16)
                except ValueError:
                    raise LedgerFormatError(f"{name}: bad group tag {rest!r}") from None
            elif key in ("tid", "hz", "total_cycles"):
                head[key] = _u(rest, key)
            else:
                warnings.append(f"{name}:{lineno}: unknown header {key!r}")
            continue
        f = line.split("\t")
        try:
            if len(f) not in (8, 9) or f[3] not in KINDS:
                raise LedgerFormatError("wrong shape")
            rows.append(
                LedgerRow(
                    site_id=_u(f[0], "site"),
                    caller_image=int(f[1]),
                    symbol=f[2],
                    kind=f[3],
                    count=_u(f[4], "count"),
                    timed_count=_u(f[5], "timed"),
                    raw_cycles=_u(f[6], "raw"),
                    attributed_cycles=_u(f[7], "attributed"),
                    callee_image=int(f[8]) if len(f) == 9 else -1,
                )
            )
        except (LedgerFormatError, ValueError) as e:
            warnings.append(f"{name}:{lineno}: malformed row skipped ({e})")
    for key in ("tid", "group", "hz", "total_cycles"):
        if key not in head:
            raise LedgerFormatError(f"{name}: missing #{key} header")
    return LedgerFile(
        ordinal=head["tid"],
        group=head["group"],
        hz=head["hz"],
        total_cycles=head["total_cycles"],
        images=images,
        rows=rows,
        warnings=warnings,
    )


def read_ledger(path: str | os.PathLike) -> LedgerFile:
    p = Path(path)
    led = parse_ledger(p.read_text(encoding="utf-8"), p.name)
    m = LEDGER_RE.match(p.name)
    if m:
        led.pid = int(m.group(1))
        led.snapshot = int(m.group(3)) if m.group(3) else None
    return led


def format_ledger(led: LedgerFile) -> str:
    """Byte-exact inverse of parse_ledger for files the agent writes."""
    out = [
        f"{MAGIC}\t{FORMAT_VERSION}",
        f"#tid\t{led.ordinal}",
        f"#group\t{led.group:016x}",
        f"#hz\t{led.hz:020d}",
        f"#total_cycles\t{led.total_cycles:020d}",
    ]
    out += [f"#image\t{i}\t{p}" for i, p in sorted(led.images.items())]
    for r in led.rows:
        out.append(
            f"{r.site_id}\t{r.caller_image}\t{r.symbol}\t{r.kind}\t{r.count:020d}\t"
            f"{r.timed_count:020d}\t{r.raw_cycles:020d}\t{r.attributed_cycles:020d}\t{r.callee_image}"
        )
    return "\n".join(out) + "\n"


def write_ledger(led: LedgerFile, directory: str | os.PathLike, pid: int) -> Path:
    path = Path(directory) / f"xflow.{pid}.{led.ordinal}.tsv"
    path.write_text(format_ledger(led), encoding="utf-8")
    return path


def ledger_paths(directory: str | os.PathLike, pid: int | None = None,
                 snapshots: bool = False) -> list[Path]:
    """Final ledgers in a directory (a ".retry" copy stands in for a missing primary)."""
    found: dict[tuple[int, int, int | None], Path] = {}
    d = Path(directory)
    if not d.is_dir():
        return []
    for p in sorted(d.iterdir()):
        m = LEDGER_RE.match(p.name)
        if not m or not p.is_file():
            continue
        fpid, ordinal = int(m.group(1)), int(m.group(2))
        snap = int(m.group(3)) if m.group(3) else None
        if pid is not None and fpid != pid:
            continue
        if (snap is not None) != snapshots:
            continue
        key = (fpid, ordinal, snap)
        if m.group(4) and key in found:
            continue
        found[key] = p
    return [found[k] for k in sorted(found)]


def load_ledgers(paths: Iterable[str | os.PathLike]) -> tuple[list[LedgerFile], list[str]]:
    """Read many files; unreadable ones are reported, not raised."""
    ledgers, warnings = [], []
    for p in paths:
        try:
            led = read_ledger(p)
        except (OSError, UnicodeDecodeError, LedgerFormatError) as e:
            warnings.append(f"{Path(p).name}: rejected ({e})")
            continue
        warnings.extend(led.warnings)
        ledgers.append(led)
    return ledgers, warnings
