import ctypes
import os

import pytest

from xflow import elf_inspector


@pytest.fixture(scope="module")
def loaded(native, fx):
    """Map libfx_a (and its dependencies) into this process so the agent can inspect it."""
    ctypes.CDLL(str(fx.lib("fx_a")))
    images = native.images()
    by_name = {os.path.basename(i["path"]): i for i in images}
    return images, by_name


def test_images_include_main_libc_and_linker(loaded):
    images, by_name = loaded
    assert images[0]["is_main"] and images[0]["id"] == 0
    assert [i["id"] for i in images] == list(range(len(images)))
    assert "libc.so.6" in by_name
    assert sum(i["is_linker"] for i in images) == 1
    assert sum(i["is_agent"] for i in images) == 1
    assert by_name["libxflow.so"]["is_agent"]


def test_fixture_libraries_get_distinct_ids(loaded):
    _, by_name = loaded
    ids = {by_name[n]["id"] for n in ("libfx_a.so", "libfx_b.so", "libfx_z.so")}
    assert len(ids) == 3


def test_images_match_process_maps(loaded):
    images, _ = loaded
    maps = elf_inspector.read_maps()
    mapped = set(elf_inspector.mapped_images(maps))
    ours = {i["path"] for i in images if i["path"].startswith("/")}
    assert ours <= mapped
    # everything ELF and file-backed the kernel reports is enumerated (ignoring non-libraries like locale files)
    missing = {p for p in mapped - ours if ".so" in p or os.access(p, os.X_OK)}
    assert not missing


def test_sections_inside_mapping(native, loaded):
    images, _ = loaded
    for img in images:
        if not img["sections_ok"]:
            continue
        for role, (addr, size) in native.sections(img["id"]).items():
            assert img["lo"] <= addr and addr + size <= img["hi"], (img["path"], role)


def test_plt_sites_equal_offline_dump(native, loaded, fx):
    _, by_name = loaded
    for name in ("libfx_a.so", "libfx_b.so"):
        img = by_name[name]
        runtime = {(s[0], s[2] - img["base"]) for s in native.sites(img["id"]) if s[1].startswith("plt")}
        offline = {(p.symbol, p.cell_offset) for p in elf_inspector.plan_sites(img["path"]) if p.kind == "plt"}
        assert runtime == offline
        assert len(runtime) >= 3


def test_dyn_got_sites_subset_of_offline_plan(native, loaded):
    _, by_name = loaded
    img = by_name["libfx_a.so"]
    runtime = {(s[0], s[2] - img["base"]) for s in native.sites(img["id"]) if s[1] == "dyn-got"}
    offline = {(p.symbol, p.cell_offset) for p in elf_inspector.plan_sites(img["path"]) if p.kind == "dyn-got"}
    assert runtime <= offline


def test_data_relocations_never_planned(fx):
    # libfx_c exports fx_c_data; the main driver of a -fno-plt build has both
    # data (stdout) and function GOT entries
    for path in (fx.main_nogot, fx.lib("fx_c")):
        for p in elf_inspector.plan_sites(path):
            assert p.symbol_type not in elf_inspector.DATA_SYMBOL_TYPES
    planned = {p.symbol for p in elf_inspector.plan_sites(fx.main_nogot)}
    assert "stdout" not in planned
    assert "fx_noop" in planned


def test_site_planning_is_idempotent(native, loaded):
    _, by_name = loaded
    i = by_name["libfx_a.so"]["id"]
    assert native.sites(i) == native.sites(i)
    assert native.images() == native.images()


def test_binding_mode(fx):
    assert not elf_inspector.inspect(fx.main_lazy).bind_now
    assert elf_inspector.inspect(fx.main_now).bind_now
    assert elf_inspector.inspect(fx.main_nogot).bind_now


def test_classify_function_and_data(native):
    libc = ctypes.CDLL(None)
    fn = ctypes.cast(libc.strlen, ctypes.c_void_p).value
    data = ctypes.addressof(ctypes.c_long.in_dll(libc, "timezone"))
    assert native.classify(fn) == 1
    assert native.classify(data) == 0
    assert native.classify(0) == 0
    maps = elf_inspector.read_maps()
    assert elf_inspector.classify(fn, maps) == "function"
    assert elf_inspector.classify(data, maps) == "data"
    assert elf_inspector.classify(0, maps) == "data"


def test_exported_functions(fx):
    names = elf_inspector.exported_functions(fx.lib("fx_a"))
    assert {"fx_noop", "fx_add", "fx_hash_args"} <= names
    assert "fx_b_inner" not in names  # imported, not defined
    assert "fx_c_data" not in elf_inspector.exported_functions(fx.lib("fx_c"))
    assert elf_inspector.exported_functions("/nonexistent") == frozenset()


def test_symbol_deny_list(native):
    for name in (b"exit", b"longjmp", b"__longjmp_chk", b"__stack_chk_fail", b"_Unwind_Resume",
                 b"__cxa_throw", b"_ZSt20__throw_length_errorPKc", b"abort"):
        assert native.symbol_denied(name), name
    for name in (b"malloc", b"fx_noop", b"pthread_create", b"strcmp"):
        assert not native.symbol_denied(name), name


def test_parse_maps_text():
    text = (
        "00400000-00401000 r-xp 00000000 08:01 123 /bin/true\n"
        "00600000-00601000 rw-p 00000000 00:00 0 \n"
        "7fff0000-7fff1000 r--p 00000000 00:00 0 [vvar]\n"
    )
    regions = elf_inspector.parse_maps(text)
    assert regions[0].path == "/bin/true" and regions[0].inode == 123
    assert regions[1].path == ""
    assert elf_inspector.classify(0x400800, regions) == "function"
    assert elf_inspector.classify(0x600010, regions) == "data"
    assert elf_inspector.classify(0x500000, regions) == "data"
