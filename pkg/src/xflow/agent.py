"""Build, locate and (for tests) load the native preload agent."""

from __future__ import annotations

import ctypes
import hashlib
import os
import shutil
import subprocess
import tempfile
from pathlib import Path

AGENT_NAME = "libxflow.so"
NATIVE_DIR = Path(__file__).resolve().parent / "native"

CFLAGS = [
    "-O2",
    "-fPIC",
    "-shared",
    "-fvisibility=hidden",
    "-ftls-model=initial-exec",
    "-mgeneral-regs-only",
    "-Wall",
    "-Wl,-z,now",
]
LIBS = ["-ldl", "-lpthread"]


class AgentBuildError(RuntimeError):
    pass


def native_sources() -> list[Path]:
    return sorted(NATIVE_DIR.glob("*.c")) + sorted(NATIVE_DIR.glob("*.h"))


def source_digest() -> str:
    h = hashlib.sha256()
    for p in native_sources():
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(" ".join(CFLAGS + LIBS).encode())
    return h.hexdigest()[:16]


def cache_root() -> Path:
    env = os.environ.get("XFLOW_CACHE_DIR")
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or str(Path.home() / ".cache")
    return Path(base) / "xflow"


def compiler() -> str | None:
    return os.environ.get("CC") or shutil.which("gcc") or shutil.which("cc")


def build_agent(force: bool = False) -> Path:
    """Compile the agent into the cache (keyed by a hash of its sources) and return its path."""
    out = cache_root() / source_digest() / AGENT_NAME
    if out.exists() and not force:
        return out
    cc = compiler()
    if cc is None:
        raise AgentBuildError("no C compiler found (set CC)")
    out.parent.mkdir(parents=True, exist_ok=True)
    srcs = [str(p) for p in sorted(NATIVE_DIR.glob("*.c"))]
    fd, tmp = tempfile.mkstemp(dir=out.parent, suffix=".so")
    os.close(fd)
    cmd = [cc, *CFLAGS, "-o", tmp, *srcs, *LIBS]
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        os.unlink(tmp)
        raise AgentBuildError(f"agent build failed:\n{' '.join(cmd)}\n{proc.stderr}")
    os.replace(tmp, out)
    return out


def agent_path() -> Path:
    """XFLOW_AGENT wins; otherwise the cached build (built on first use)."""
    env = os.environ.get("XFLOW_AGENT")
    if env:
        return Path(env)
    return build_agent()


_u64 = ctypes.c_uint64
_u32 = ctypes.c_uint32
_int = ctypes.c_int
_vp = ctypes.c_void_p
_cp = ctypes.c_char_p
_size = ctypes.c_size_t

_SIGNATURES: dict[str, tuple[object, list[object]]] = {
    "xflow_test_init": (_int, []),
    "xflow_is_active": (_int, []),
    "xflow_hz": (_u64, []),
    "xflow_test_configure": (None, [_u64, _u32, _cp]),
    "xflow_parse_signal": (_int, [_cp]),
    "xflow_classify": (_int, [_u64]),
    "xflow_symbol_denied": (_int, [_cp]),
    "xflow_debug_images": (_size, [_cp, _size]),
    "xflow_debug_sections": (_size, [_int, _cp, _size]),
    "xflow_debug_sites": (ctypes.c_long, [_int, _cp, _size]),
    "xflow_debug_codegen": (_int, [_u32, _int, _u64, _vp, _size, _vp]),
    "xflow_test_make_site": (_int, [_u64, _cp]),
    "xflow_site_code": (_u64, [_u32]),
    "xflow_post_addr": (_u64, [_u32]),
    "xflow_site_count": (_int, []),
    "xflow_test_enter": (_int, [_vp, _u32, _vp, _u64]),
    "xflow_test_exit": (_u64, [_vp, _u32, _vp, _u64]),
    "xflow_shadow_depth": (_u32, [_vp]),
    "xflow_frame_slot": (_u64, [_vp, _u32]),
    "xflow_read_cycles": (_u64, []),
    "xflow_calibrate": (_u64, [_u32]),
    "xflow_test_context": (_vp, []),
    "xflow_test_free_context": (None, [_vp]),
    "xflow_test_init_thread": (_vp, [_u64]),
    "xflow_test_clear_thread": (None, []),
    "xflow_ensure_context": (_vp, []),
    "xflow_active_threads": (_int, []),
    "xflow_test_set_active": (None, [_int]),
    "xflow_test_set_busy": (None, [_vp, _int]),
    "xflow_test_record": (None, [_vp, _u32, _u64]),
    "xflow_ctx_ordinal": (_u32, [_vp]),
    "xflow_ctx_tag": (_u64, [_vp]),
    "xflow_fold": (None, [_vp, _u32, _u64, _u64, _u64, _int]),
    "xflow_row": (None, [_vp, _u32, _vp]),
    "xflow_persist": (_int, [_vp, _cp, _cp, _size]),
    "xflow_snapshot": (None, []),
    "xflow_uninstall": (_int, []),
    "xflow_site_stat": (_int, [_cp, _cp, _vp]),
    "xflow_patch_count": (_size, []),
}


class NativeAgent:
    """ctypes view of the agent's debug surface. Loading it this way never installs hooks."""

    def __init__(self, path: Path | None = None):
        self.path = Path(path) if path else agent_path()
        self.lib = ctypes.CDLL(str(self.path))
        for name, (res, args) in _SIGNATURES.items():
            fn = getattr(self.lib, name)
            fn.restype = res
            fn.argtypes = args
        if self.lib.xflow_test_init() != 0:
            raise RuntimeError("agent initialisation failed")

    def __getattr__(self, name: str):
        return getattr(self.lib, "xflow_" + name)

    def images(self) -> list[dict]:
        buf = ctypes.create_string_buffer(1 << 20)
        n = self.lib.xflow_debug_images(buf, len(buf))
        rows = []
        for line in buf.raw[: min(n, len(buf) - 1)].decode().splitlines():
            f = line.split("\t")
            rows.append(
                {
                    "id": int(f[0]),
                    "base": int(f[1], 16),
                    "lo": int(f[2], 16),
                    "hi": int(f[3], 16),
                    "is_main": f[4] == "1",
                    "is_agent": f[5] == "1",
                    "is_linker": f[6] == "1",
                    "denied": f[7] == "1",
                    "sections_ok": f[8] == "1",
                    "path": f[9],
                }
            )
        return rows

    def sections(self, image_id: int) -> dict[str, tuple[int, int]]:
        buf = ctypes.create_string_buffer(4096)
        n = self.lib.xflow_debug_sections(image_id, buf, len(buf))
        out = {}
        for line in buf.raw[:n].decode().splitlines():
            role, addr, size = line.split("\t")
            out[role] = (int(addr, 16), int(size, 16))
        return out

    def sites(self, image_id: int) -> list[tuple[str, str, int, int, bool]]:
        """Un-filtered site plan of one mapped image: (symbol, kind, cell, plt_entry, denied)."""
        buf = ctypes.create_string_buffer(1 << 22)
        n = self.lib.xflow_debug_sites(image_id, buf, len(buf))
        if n < 0:
            raise ValueError(f"cannot plan sites for image {image_id}")
        out = []
        for line in buf.raw[:n].decode().splitlines():
            sym, kind, cell, plt, denied = line.split("\t")
            out.append((sym, kind, int(cell, 16), int(plt, 16), denied == "1"))
        return out

    def codegen(self, site: int, kind: int, rate: int) -> tuple[bytes, tuple[int, int, int, int]]:
        buf = (ctypes.c_uint8 * 256)()
        seg = (ctypes.c_uint8 * 4)()
        n = self.lib.xflow_debug_codegen(site, kind, rate, buf, len(buf), seg)
        if n < 0:
            raise ValueError("code generation failed")
        return bytes(buf[:n]), tuple(seg)

    def row(self, ctx: int, site: int) -> tuple[int, int, int, int]:
        out = (ctypes.c_uint64 * 4)()
        self.lib.xflow_row(ctx, site, out)
        return tuple(out)

    def persist(self, ctx: int, directory: str | os.PathLike) -> Path:
        buf = ctypes.create_string_buffer(2048)
        if self.lib.xflow_persist(ctx, os.fsencode(directory), buf, len(buf)) != 0:
            raise OSError("persist failed")
        return Path(buf.value.decode())
