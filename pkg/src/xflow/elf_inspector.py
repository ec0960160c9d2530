"""Offline ELF reading and process memory-map helpers.

The agent does its own in-process parsing in C. This module reads the same
tables from disk with pyelftools so tests can cross-check the agent's site
plan, and so the analyzer can tell which library exports a symbol.
"""

from __future__ import annotations

import bisect
import functools
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from elftools.common.exceptions import ELFError
from elftools.elf.dynamic import DynamicSection
from elftools.elf.elffile import ELFFile
from elftools.elf.relocation import RelocationSection

R_X86_64_64 = 1
R_X86_64_GLOB_DAT = 6
R_X86_64_JUMP_SLOT = 7
DF_BIND_NOW = 0x8
DF_1_NOW = 0x1

SECTION_ROLES = {
    ".plt": "plt",
    ".plt.sec": "plt_sec",
    ".got.plt": "got_plt",
    ".plt.got": "plt_got",
    ".got": "got",
    ".rela.plt": "rela_plt",
    ".rela.dyn": "rela_dyn",
    ".text": "text",
}
DATA_SYMBOL_TYPES = {"STT_OBJECT", "STT_TLS", "STT_COMMON"}


class PlannedSite(NamedTuple):
    symbol: str
    kind: str  # "plt" or "dyn-got"
    cell_offset: int  # link-time address of the GOT cell
    symbol_type: str


@dataclass
class ElfImage:
    path: str
    sections: dict[str, tuple[int, int]] = field(default_factory=dict)
    bind_now: bool = False
    has_dynamic: bool = False
    first_load_vaddr: int = 0


class MapRegion(NamedTuple):
    start: int
    end: int
    perms: str
    offset: int
    inode: int
    path: str


def _open(path: str | os.PathLike):
    return open(path, "rb")


def inspect(path: str | os.PathLike) -> ElfImage:
    """Section roles, binding mode and load bias info for one file."""
    with _open(path) as fh:
        elf = ELFFile(fh)
        img = ElfImage(path=str(path))
        for sec in elf.iter_sections():
            role = SECTION_ROLES.get(sec.name)
            if role:
                img.sections[role] = (sec["sh_addr"], sec["sh_size"])
        loads = [s for s in elf.iter_segments() if s["p_type"] == "PT_LOAD"]
        img.first_load_vaddr = loads[0]["p_vaddr"] if loads else 0
        dyn = elf.get_section_by_name(".dynamic")
        if isinstance(dyn, DynamicSection):
            img.has_dynamic = True
            for tag in dyn.iter_tags():
                t = tag.entry.d_tag
                if t == "DT_BIND_NOW":
                    img.bind_now = True
                elif t == "DT_FLAGS" and tag.entry.d_val & DF_BIND_NOW:
                    img.bind_now = True
                elif t == "DT_FLAGS_1" and tag.entry.d_val & DF_1_NOW:
                    img.bind_now = True
        return img


def _reloc_symbols(elf: ELFFile, name: str, types: set[int]):
    sec = elf.get_section_by_name(name)
    if not isinstance(sec, RelocationSection):
        return
    symtab = elf.get_section(sec["sh_link"])
    for rel in sec.iter_relocations():
        if rel["r_info_type"] not in types or rel["r_info_sym"] == 0:
            continue
        sym = symtab.get_symbol(rel["r_info_sym"])
        yield rel, sym


def plan_sites(path: str | os.PathLike) -> list[PlannedSite]:
    """Function-linkage relocations of one file, as the agent would plan them.

    PLT entries come from .rela.plt JUMP_SLOTs. GOT entries are GLOB_DAT or
    64-bit absolute relocations landing in .got whose symbol is not a data
    type. The agent additionally checks at run time that the resolved value
    is executable, so its dyn-got set is a subset of this one.
    """
    out: list[PlannedSite] = []
    with _open(path) as fh:
        elf = ELFFile(fh)
        for rel, sym in _reloc_symbols(elf, ".rela.plt", {R_X86_64_JUMP_SLOT}):
            out.append(PlannedSite(sym.name, "plt", rel["r_offset"], sym["st_info"]["type"]))
        got = elf.get_section_by_name(".got")
        lo, hi = (got["sh_addr"], got["sh_addr"] + got["sh_size"]) if got else (0, 0)
        for rel, sym in _reloc_symbols(elf, ".rela.dyn", {R_X86_64_GLOB_DAT, R_X86_64_64}):
            off = rel["r_offset"]
            if not (lo <= off and off + 8 <= hi):
                continue
            stype = sym["st_info"]["type"]
            if stype in DATA_SYMBOL_TYPES:
                continue
            out.append(PlannedSite(sym.name, "dyn-got", off, stype))
    return out


@functools.lru_cache(maxsize=256)
def _exports_cached(path: str, mtime_ns: int) -> frozenset[str]:
    names = set()
    with _open(path) as fh:
        elf = ELFFile(fh)
        dynsym = elf.get_section_by_name(".dynsym")
        if dynsym is None:
            return frozenset()
        for sym in dynsym.iter_symbols():
            if sym["st_shndx"] == "SHN_UNDEF" or not sym.name:
                continue
            if sym["st_info"]["type"] in ("STT_FUNC", "STT_GNU_IFUNC"):
                names.add(sym.name)
    return frozenset(names)


def exported_functions(path: str | os.PathLike) -> frozenset[str]:
    """Defined function symbols in .dynsym; empty if the file is missing or not ELF."""
    try:
        st = os.stat(path)
        return _exports_cached(str(path), st.st_mtime_ns)
    except (OSError, ELFError):
        return frozenset()


def is_elf(path: str | os.PathLike) -> bool:
    try:
        with _open(path) as fh:
            return fh.read(4) == b"\x7fELF"
    except OSError:
        return False


def parse_maps(text: str) -> list[MapRegion]:
    regions = []
    for line in text.splitlines():
        parts = line.split(None, 5)
        if len(parts) < 5:
            continue
        lo, hi = (int(x, 16) for x in parts[0].split("-"))
        regions.append(
            MapRegion(lo, hi, parts[1], int(parts[2], 16), int(parts[4]),
                      parts[5].strip() if len(parts) > 5 else "")
        )
    regions.sort()
    return regions


def read_maps(pid: int | str = "self") -> list[MapRegion]:
    return parse_maps(Path(f"/proc/{pid}/maps").read_text())


def classify(addr: int, regions: list[MapRegion]) -> str:
    """'function' when addr falls inside an executable mapping, else 'data'."""
    if not addr:
        return "data"
    i = bisect.bisect_right([r.start for r in regions], addr) - 1
    if i >= 0 and regions[i].start <= addr < regions[i].end and "x" in regions[i].perms:
        return "function"
    return "data"


def mapped_images(regions: list[MapRegion]) -> list[str]:
    """Paths of file-backed ELF objects mapped from offset 0, in address order."""
    seen, out = set(), []
    for r in regions:
        if r.offset or not r.path.startswith("/") or r.path in seen:
            continue
        if "r" in r.perms and is_elf(r.path):
            seen.add(r.path)
            out.append(r.path)
    return out
