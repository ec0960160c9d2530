"""Compile the fixture libraries and drivers with the host toolchain."""

from __future__ import annotations

import hashlib
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

from ..agent import cache_root

FIXTURE_DIR = Path(__file__).resolve().parent / "fixtures"
CFLAGS = ["-O2", "-g", "-fPIC", "-Wall"]
EXPORT_COUNTS = (10, 1000)


class ToolchainMissing(RuntimeError):
    pass


@dataclass(frozen=True)
class Fixtures:
    root: Path

    @property
    def main_lazy(self) -> Path:
        return self.root / "fx_main"

    @property
    def main_now(self) -> Path:
        return self.root / "fx_main_now"

    @property
    def main_nogot(self) -> Path:
        return self.root / "fx_main_nogot"

    @property
    def strtree(self) -> Path:
        return self.root / "fx_strtree"

    @property
    def alloc_shim(self) -> Path:
        return self.root / "libfx_alloccount.so"

    @property
    def rss_probe(self) -> Path:
        return self.root / "fx_rss"

    def lib(self, name: str) -> Path:
        return self.root / f"lib{name}.so"

    def exports_driver(self, n: int) -> Path:
        return self.root / f"fx_exports_{n}"

    def variants(self) -> dict[str, Path]:
        return {"lazy": self.main_lazy, "eager": self.main_now, "nogot": self.main_nogot}


def _digest() -> str:
    h = hashlib.sha256()
    for p in sorted(FIXTURE_DIR.iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(" ".join(CFLAGS).encode())
    h.update(repr(EXPORT_COUNTS).encode())
    return h.hexdigest()[:16]


def _run(cmd: list[str], cwd: Path) -> None:
    proc = subprocess.run(cmd, cwd=cwd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"fixture build failed: {' '.join(cmd)}\n{proc.stderr}")


def exports_source(n: int) -> tuple[str, str]:
    """A library with n exported functions and a driver that calls each one once."""
    lib = ["long fx_e_%d(long x) { return x + %d; }" % (i, i) for i in range(n)]
    decl = ["long fx_e_%d(long x);" % i for i in range(n)]
    calls = ["    acc += fx_e_%d(acc);" % i for i in range(n)]
    driver = "\n".join(
        ["#include <stdio.h>", *decl, "int main(void)", "{", "    long acc = 0;", *calls,
         '    printf("exports %ld\\n", acc);', "    return 0;", "}"]
    )
    return "\n".join(lib) + "\n", driver + "\n"


def _build_into(out: Path, cc: str, cxx: str | None) -> None:
    src = FIXTURE_DIR
    inc = ["-I", str(src)]
    rpath = ["-Wl,-rpath,$ORIGIN", "-L", str(out)]

    def shared(name: str, sources: list[str], deps: list[str] = (), extra: list[str] = ()) -> None:
        cmd = [cc, *CFLAGS, *inc, "-shared", "-o", str(out / f"lib{name}.so"),
               *[str(src / s) for s in sources], *rpath, *[f"-l{d}" for d in deps], "-Wl,-z,lazy", *extra]
        _run(cmd, out)

    shared("fx_z", ["fx_z.c"])
    shared("fx_b", ["fx_b.c"], ["fx_z"])
    shared("fx_a", ["fx_a.c", "fx_a_rec.c"], ["fx_b"])
    shared("fx_d", ["fx_d.c"])
    shared("fx_c", ["fx_c.c"], ["fx_d"])
    shared("fx_alloccount", ["fx_alloccount.c"])

    variants = {
        "fx_main": ["-Wl,-z,lazy"],
        "fx_main_now": ["-Wl,-z,now"],
        "fx_main_nogot": ["-fno-plt", "-Wl,-z,now"],
    }
    for name, flags in variants.items():
        _run([cc, *CFLAGS, *inc, *flags, "-o", str(out / name), str(src / "fx_main.c"),
              *rpath, "-lfx_a", "-lfx_b", "-lpthread", "-ldl"], out)

    _run([cc, "-O2", "-Wall", "-o", str(out / "fx_rss"), str(src / "fx_rss.c")], out)

    if cxx:
        _run([cxx, "-O2", "-g", "-o", str(out / "fx_strtree"), str(src / "fx_strtree.cpp")], out)

    for n in EXPORT_COUNTS:
        lib_src, drv_src = exports_source(n)
        (out / f"fx_e{n}.c").write_text(lib_src)
        (out / f"fx_exports_{n}.c").write_text(drv_src)
        _run([cc, "-O1", "-fPIC", "-shared", "-o", str(out / f"libfx_e{n}.so"), str(out / f"fx_e{n}.c"),
              "-Wl,-z,lazy"], out)
        _run([cc, "-O1", "-fno-inline", "-o", str(out / f"fx_exports_{n}"), str(out / f"fx_exports_{n}.c"),
              *rpath, f"-lfx_e{n}", "-Wl,-z,lazy"], out)


def peak_rss_kb(fixtures: Fixtures, argv: list, env: dict[str, str]) -> tuple[int, int, str]:
    """Run argv under the launcher; return (peak RSS in KiB, exit status, stdout)."""
    env = dict(env)
    if "LD_PRELOAD" in env:
        env["FX_RSS_PRELOAD"] = env.pop("LD_PRELOAD")
    proc = subprocess.run([str(fixtures.rss_probe), *map(str, argv)], env=env, capture_output=True, text=True)
    for line in proc.stderr.splitlines():
        if line.startswith("fx_rss maxrss_kb "):
            return int(line.split()[2]), proc.returncode, proc.stdout
    raise RuntimeError(f"launcher gave no measurement: {proc.stderr.strip()}")


def build_fixtures(dest: str | os.PathLike | None = None) -> Fixtures:
    """Build every fixture (cached by a hash of the sources) and return their locations."""
    cc = os.environ.get("CC") or shutil.which("gcc") or shutil.which("cc")
    if not cc:
        raise ToolchainMissing("skipped: no toolchain")
    cxx = os.environ.get("CXX") or shutil.which("g++") or shutil.which("c++")
    if dest is not None:
        out = Path(dest)
        out.mkdir(parents=True, exist_ok=True)
        _build_into(out, cc, cxx)
        return Fixtures(out)
    final = cache_root() / f"fixtures-{_digest()}"
    if (final / ".complete").exists():
        return Fixtures(final)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix="fixtures-", dir=final.parent))
    try:
        _build_into(tmp, cc, cxx)
        (tmp / ".complete").write_text("ok\n")
        try:
            os.rename(tmp, final)
        except OSError:
            if not (final / ".complete").exists():
                raise
    finally:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
    return Fixtures(final)
