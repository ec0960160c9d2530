"""Offline analysis of ledger files: merge, component/API views, wait and imbalance."""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from . import elf_inspector
from .data_folder import LedgerFile, ledger_paths, load_ledgers

REPORT_SCHEMA = "xflow.report/1"
UNRESOLVED = "<unresolved>"

_CV_WAIT = "_ZNSt18condition_variable4waitERSt11unique_lockISt5mutexE"
DEFAULT_WAIT_APIS = frozenset(
    {
        "pthread_cond_wait",
        "pthread_cond_timedwait",
        "pthread_cond_clockwait",
        "pthread_barrier_wait",
        "pthread_join",
        "pthread_timedjoin_np",
        "pthread_clockjoin_np",
        "pthread_tryjoin_np",
        "sem_wait",
        "sem_timedwait",
        "sem_clockwait",
        "sleep",
        "usleep",
        "nanosleep",
        "clock_nanosleep",
        _CV_WAIT,
        "_ZNSt6thread4joinEv",
    }
)


class AnalysisError(Exception):
    pass


@dataclass
class SiteTotals:
    count: int = 0
    timed_count: int = 0
    raw_cycles: int = 0
    attributed_cycles: int = 0

    def add(self, count: int, timed: int, raw: int, attributed: int) -> None:
        self.count += count
        self.timed_count += timed
        self.raw_cycles += raw
        self.attributed_cycles += attributed


@dataclass(frozen=True, order=True)
class ThreadInfo:
    pid: int
    ordinal: int
    group: int
    total_cycles: int
    wait_cycles: int


@dataclass
class Aggregate:
    sites: dict[tuple[str, str, str], SiteTotals] = field(default_factory=dict)
    owners: dict[tuple[str, str, str], str] = field(default_factory=dict)
    images: list[str] = field(default_factory=list)
    main_image: str = ""
    threads: list[ThreadInfo] = field(default_factory=list)
    hz: int = 0
    wait_apis: frozenset[str] = DEFAULT_WAIT_APIS
    warnings: list[str] = field(default_factory=list)

    @property
    def process_total(self) -> int:
        """Wall-clock span of the process: the longest-lived thread's runtime."""
        return max((t.total_cycles for t in self.threads), default=0)

    def owner(self, key: tuple[str, str, str]) -> str:
        return self.owners.get(key, UNRESOLVED)


@dataclass
class ViewRow:
    name: str
    cycles: int
    percent: float
    count: int | None = None


@dataclass
class View:
    kind: str  # "component" or "api"
    subject: str
    total_cycles: int
    rows: list[ViewRow]
    measured_total: int = 0
    diagnostics: list[str] = field(default_factory=list)


@dataclass
class GroupStats:
    group: str
    threads: int
    mean_exec_cycles: float
    mean_wait_cycles: float


@dataclass
class ImbalanceReport:
    groups: list[GroupStats]
    ratio: float
    threshold: float
    flagged: bool
    excluded_main: bool = False


# ---------------------------------------------------------------- merge


def _owner_for(led: LedgerFile, row, resolver: Callable[[str], frozenset[str]]) -> str | None:
    path = led.images.get(row.callee_image) if row.callee_image >= 0 else None
    if path:
        return path
    for _, p in sorted(led.images.items()):
        if row.symbol in resolver(p):
            return p
    return None


def merge(ledgers: Iterable[LedgerFile], wait_apis: Iterable[str] | None = None,
          resolver: Callable[[str], frozenset[str]] = elf_inspector.exported_functions) -> Aggregate:
    """Sum ledgers keyed by (caller path, symbol, kind). The result does not depend on input order."""
    agg = Aggregate()
    if wait_apis is not None:
        agg.wait_apis = frozenset(wait_apis)
    images: set[str] = set()
    mains: set[str] = set()
    owner_votes: dict[tuple[str, str, str], set[str]] = defaultdict(set)
    threads = []
    for led in ledgers:
        images.update(led.images.values())
        if 0 in led.images:
            mains.add(led.images[0])
        agg.hz = max(agg.hz, led.hz)
        wait = 0
        for row in led.rows:
            caller = led.images.get(row.caller_image)
            if caller is None:
                agg.warnings.append(f"thread {led.ordinal}: row for unknown image {row.caller_image}")
                caller = f"<image {row.caller_image}>"
            key = (caller, row.symbol, row.kind)
            agg.sites.setdefault(key, SiteTotals()).add(
                row.count, row.timed_count, row.raw_cycles, row.attributed_cycles
            )
            owner = _owner_for(led, row, resolver)
            if owner:
                owner_votes[key].add(owner)
            if row.symbol in agg.wait_apis:
                wait += row.raw_cycles
        threads.append(ThreadInfo(led.pid or 0, led.ordinal, led.group, led.total_cycles, wait))
    agg.sites = dict(sorted(agg.sites.items()))
    agg.owners = {k: min(v) for k, v in sorted(owner_votes.items())}
    agg.images = sorted(images)
    agg.main_image = min(mains) if mains else ""
    agg.threads = sorted(threads)
    agg.warnings.sort()
    return agg


def merge_directory(out_dir: str | os.PathLike, pid: int | None = None,
                    wait_apis: Iterable[str] | None = None) -> Aggregate:
    if pid is None:
        pid = default_pid(out_dir)
    paths = ledger_paths(out_dir, pid)
    if not paths:
        raise AnalysisError(f"no ledgers found in {out_dir}")
    ledgers, warnings = load_ledgers(paths)
    if not ledgers:
        raise AnalysisError("no readable ledgers: " + "; ".join(warnings))
    agg = merge(ledgers, wait_apis)
    agg.warnings[:0] = warnings
    return agg


def default_pid(out_dir: str | os.PathLike) -> int | None:
    """The pid recorded by `xflow run`, else the pid whose threads ran longest."""
    meta = Path(out_dir) / "xflow.run"
    try:
        pid = json.loads(meta.read_text()).get("pid")
        if isinstance(pid, int) and ledger_paths(out_dir, pid):
            return pid
    except (OSError, ValueError, AttributeError):
        pass
    best: dict[int, int] = {}
    for p in ledger_paths(out_dir):
        led, _ = load_ledgers([p])
        for lf in led:
            best[lf.pid or 0] = max(best.get(lf.pid or 0, 0), lf.total_cycles)
    if not best:
        return None
    return max(sorted(best), key=lambda k: best[k])


# ---------------------------------------------------------------- views


def display_name(path: str) -> str:
    return os.path.basename(path) or path


def resolve_component(agg: Aggregate, name: str) -> str:
    """Map a user-supplied image name (path, basename or unique substring) to a path."""
    if name in agg.images:
        return name
    by_base = [p for p in agg.images if display_name(p) == name]
    if len(by_base) == 1:
        return by_base[0]
    hits = [p for p in agg.images if name in p]
    if len(hits) == 1:
        return hits[0]
    known = ", ".join(display_name(p) for p in agg.images)
    if len(hits) > 1:
        raise AnalysisError(f"image name {name!r} is ambiguous; known images: {known}")
    raise AnalysisError(f"unknown image {name!r}; known images: {known}")


def percentages(values: list[int], total: int) -> list[float]:
    """Largest-remainder rounding to hundredths so the column sums to exactly 100."""
    if total <= 0:
        return [0.0 for _ in values]
    scaled = [v * 10000 for v in values]
    base = [s // total for s in scaled]
    missing = 10000 - sum(base)
    order = sorted(range(len(values)), key=lambda i: (-(scaled[i] % total), i))
    for i in order[: max(missing, 0)]:
        base[i] += 1
    return [b / 100 for b in base]


def library_total(agg: Aggregate, library: str) -> int:
    return sum(t.attributed_cycles for k, t in agg.sites.items() if agg.owner(k) == library)


def component_total(agg: Aggregate, component: str) -> int:
    if component == agg.main_image:
        return agg.process_total
    return library_total(agg, component)


def component_view(agg: Aggregate, component: str) -> View:
    path = resolve_component(agg, component)
    callees: dict[str, int] = defaultdict(int)
    wait = 0
    for key, t in agg.sites.items():
        if key[0] != path:
            continue
        if key[1] in agg.wait_apis:
            wait += t.attributed_cycles
        else:
            callees[agg.owner(key)] += t.attributed_cycles
    measured = component_total(agg, path)
    spent = wait + sum(callees.values())
    diags = []
    self_cycles = measured - spent
    if self_cycles < 0:
        diags.append(
            f"Self clamped to 0 for {display_name(path)}: callee time exceeds the measured total by {-self_cycles} cycles"
        )
        self_cycles = 0
    total = self_cycles + spent
    names = ["Self", "Wait"] + [display_name(p) if p != UNRESOLVED else p for p in callees]
    cycles = [self_cycles, wait] + list(callees.values())
    order = [0, 1] + sorted(range(2, len(names)), key=lambda i: (-cycles[i], names[i]))
    names = [names[i] for i in order]
    cycles = [cycles[i] for i in order]
    pcts = percentages(cycles, total)
    rows = [ViewRow(n, c, p) for n, c, p in zip(names, cycles, pcts)]
    return View("component", display_name(path), total, rows, measured, diags)


def api_view(agg: Aggregate, library: str) -> View:
    path = resolve_component(agg, library)
    per_symbol: dict[str, SiteTotals] = {}
    for key, t in agg.sites.items():
        if agg.owner(key) != path:
            continue
        per_symbol.setdefault(key[1], SiteTotals()).add(
            t.count, t.timed_count, t.raw_cycles, t.attributed_cycles
        )
    total = sum(t.attributed_cycles for t in per_symbol.values())
    items = sorted(per_symbol.items(), key=lambda kv: (-kv[1].attributed_cycles, kv[0]))
    pcts = percentages([t.attributed_cycles for _, t in items], total)
    rows = [ViewRow(s, t.attributed_cycles, p, t.count) for (s, t), p in zip(items, pcts)]
    diags = [] if rows else [f"no intercepted APIs are owned by {display_name(path)}"]
    return View("api", display_name(path), total, rows, total, diags)


def largest_callee(agg: Aggregate, component: str) -> str | None:
    view = component_view(agg, component)
    for row in view.rows[2:]:
        if row.name != UNRESOLVED and row.cycles > 0:
            path = resolve_component(agg, row.name)
            return path
    return None


def imbalance_report(agg: Aggregate, threshold: float = 4.0) -> ImbalanceReport:
    """Compare mean non-wait runtime across thread groups (threads sharing a start routine)."""
    groups: dict[int, list[ThreadInfo]] = defaultdict(list)
    for t in agg.threads:
        groups[t.group].append(t)
    excluded = False
    if len(groups) > 1 and 0 in groups:
        del groups[0]
        excluded = True
    stats = []
    for tag in sorted(groups):
        ts = groups[tag]
        execs = [max(t.total_cycles - t.wait_cycles, 0) for t in ts]
        waits = [min(t.wait_cycles, t.total_cycles) for t in ts]
        name = "main" if tag == 0 else f"{tag:#x}"
        stats.append(GroupStats(name, len(ts), sum(execs) / len(ts), sum(waits) / len(ts)))
    means = [g.mean_exec_cycles for g in stats]
    if not means or max(means) == 0:
        ratio = 1.0
    elif min(means) == 0:
        ratio = math.inf
    else:
        ratio = max(means) / min(means)
    return ImbalanceReport(stats, ratio, threshold, ratio > threshold, excluded)


# ---------------------------------------------------------------- rendering


def _seconds(cycles: float, hz: int) -> float:
    return round(cycles / hz, 9) if hz else 0.0


def view_to_dict(view: View, hz: int) -> dict:
    d = asdict(view)
    d["total_seconds"] = _seconds(view.total_cycles, hz)
    for row in d["rows"]:
        row["seconds"] = _seconds(row["cycles"], hz)
        if row["count"] is None:
            del row["count"]
    return d


def view_from_dict(d: dict) -> View:
    rows = [ViewRow(r["name"], r["cycles"], r["percent"], r.get("count")) for r in d["rows"]]
    return View(d["kind"], d["subject"], d["total_cycles"], rows, d.get("measured_total", 0),
                list(d.get("diagnostics", [])))


def imbalance_to_dict(rep: ImbalanceReport, hz: int) -> dict:
    d = asdict(rep)
    d["ratio"] = rep.ratio if math.isfinite(rep.ratio) else None
    for g in d["groups"]:
        g["mean_exec_seconds"] = _seconds(g["mean_exec_cycles"], hz)
        g["mean_wait_seconds"] = _seconds(g["mean_wait_cycles"], hz)
    return d


def imbalance_from_dict(d: dict) -> ImbalanceReport:
    groups = [GroupStats(g["group"], g["threads"], g["mean_exec_cycles"], g["mean_wait_cycles"])
              for g in d["groups"]]
    ratio = d["ratio"] if d["ratio"] is not None else math.inf
    return ImbalanceReport(groups, ratio, d["threshold"], d["flagged"], d.get("excluded_main", False))


def render_json(agg: Aggregate, views: list[View], imbalance: ImbalanceReport | None = None,
                pid: int | None = None) -> str:
    doc = {
        "schema": REPORT_SCHEMA,
        "pid": pid,
        "hz": agg.hz,
        "threads": len(agg.threads),
        "process_total_cycles": agg.process_total,
        "views": [view_to_dict(v, agg.hz) for v in views],
        "warnings": list(agg.warnings),
    }
    if imbalance is not None:
        doc["imbalance"] = imbalance_to_dict(imbalance, agg.hz)
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def parse_report(text: str) -> tuple[list[View], ImbalanceReport | None]:
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA:
        raise AnalysisError(f"unexpected report schema {doc.get('schema')!r}")
    views = [view_from_dict(v) for v in doc["views"]]
    imb = imbalance_from_dict(doc["imbalance"]) if "imbalance" in doc else None
    return views, imb


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(header)]
    fmt = lambda cells: "  ".join(  # noqa: E731
        c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
    ).rstrip()
    return [fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in rows]


def render_view_text(view: View, hz: int) -> str:
    title = "Component view" if view.kind == "component" else "API view"
    lines = [f"{title}: {view.subject}  total {view.total_cycles} cycles ({_seconds(view.total_cycles, hz):.6f} s)"]
    if view.kind == "component":
        header = ["row", "cycles", "seconds", "%"]
        body = [[r.name, str(r.cycles), f"{_seconds(r.cycles, hz):.6f}", f"{r.percent:.2f}"] for r in view.rows]
    else:
        header = ["api", "count", "cycles", "seconds", "%"]
        body = [[r.name, str(r.count), str(r.cycles), f"{_seconds(r.cycles, hz):.6f}", f"{r.percent:.2f}"]
                for r in view.rows]
    lines += _table(header, body)
    lines += [f"note: {d}" for d in view.diagnostics]
    return "\n".join(lines) + "\n"


def render_imbalance_text(rep: ImbalanceReport, hz: int) -> str:
    lines = ["Thread groups" + ("  (main thread excluded)" if rep.excluded_main else "")]
    body = [[g.group, str(g.threads), f"{g.mean_exec_cycles:.0f}", f"{_seconds(g.mean_exec_cycles, hz):.6f}",
             f"{g.mean_wait_cycles:.0f}"] for g in rep.groups]
    lines += _table(["group", "threads", "exec cycles", "exec s", "wait cycles"], body)
    verdict = "IMBALANCED" if rep.flagged else "balanced"
    lines.append(f"ratio {rep.ratio:.2f} (threshold {rep.threshold:.2f}): {verdict}")
    return "\n".join(lines) + "\n"


def render_text(agg: Aggregate, views: list[View], imbalance: ImbalanceReport | None = None) -> str:
    parts = [render_view_text(v, agg.hz) for v in views]
    if imbalance is not None:
        parts.append(render_imbalance_text(imbalance, agg.hz))
    parts += [f"warning: {w}\n" for w in agg.warnings]
    return "\n".join(parts)
