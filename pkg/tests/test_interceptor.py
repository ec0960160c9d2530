import json
import os
import subprocess
import sys
import textwrap

import pytest


def kinds(run, caller, symbol):
    return {r.kind for _, r in run.rows(caller, symbol)}


@pytest.mark.parametrize(
    "variant,env,kind",
    [
        ("lazy", {}, "plt-lazy"),
        ("eager", {}, "plt-eager"),
        ("lazy", {"LD_BIND_NOW": "1"}, "plt-eager"),
        ("nogot", {}, "dyn-got"),
    ],
)
def test_each_linkage_kind_counts_exactly(fx, traced, variant, env, kind):
    run = traced([fx.variants()[variant], "calls", "250"], env=env)
    assert run.returncode == 0, run.proc.stderr
    c = run.counts()
    assert c[("fx_main", "fx_noop")] == 250
    assert c[("fx_main", "fx_add")] == 250
    assert kinds(run, "fx_main", "fx_add") == {kind}


def test_lazy_sites_run_the_resolver_once(fx, traced):
    run = traced([fx.main_lazy, "lazyprobe"])
    assert run.stdout.strip() == "lazyprobe kind 0 resolves 0 1"
    run = traced([fx.main_now, "lazyprobe"])
    assert run.stdout.startswith("lazyprobe kind 1")


def test_dlopen_hooks_new_library_and_dependencies(fx, traced):
    run = traced([fx.main_lazy, "dl", "9"])
    assert run.returncode == 0
    assert run.stdout.rstrip().endswith("data 42")
    c = run.counts()
    assert c[("fx_main", "fx_c_entry")] == 9
    assert kinds(run, "fx_main", "fx_c_entry") == {"dlsym"}
    assert c[("libfx_c", "fx_d_leaf")] == 9
    assert c[("fx_main", "dlopen")] == 1
    # a data symbol is never wrapped
    assert ("fx_main", "fx_c_data") not in c


def test_tail_jump_chain_counts_three_relations(fx, traced):
    run = traced([fx.main_lazy, "tail", "6"])
    c = run.counts()
    assert (c[("fx_main", "fx_a_chain1")], c[("libfx_a", "fx_b_chain2")], c[("libfx_b", "fx_z_chain3")]) == (6, 6, 6)
    (_, row), = run.rows("fx_main", "fx_a_chain1")
    assert row.timed_count == 6


def test_recursion_through_the_plt(fx, traced):
    run = traced([fx.main_lazy, "recurse", "2", "4"])
    c = run.counts()
    assert c[("fx_main", "fx_recurse")] == 2
    assert c[("libfx_a", "fx_a_step")] == 8
    assert c[("libfx_a", "fx_recurse")] == 8


def test_longjmp_out_of_an_api(fx, traced):
    run = traced([fx.main_lazy, "noreturn", "5"])
    assert run.returncode == 0
    assert run.stdout.strip() == "noreturn 5 depth 0"
    c = run.counts()
    assert c[("fx_main", "fx_a_longjmp")] == 5
    assert c[("fx_main", "fx_noop")] == 5
    (_, row), = run.rows("fx_main", "fx_a_longjmp")
    assert row.timed_count == 0


def test_shadow_stack_empty_between_calls(fx, traced):
    run = traced([fx.main_lazy, "stackprobe"])
    assert run.stdout.strip() == "depths 0 0 0 0 0 0"


def test_deny_list_leaves_image_untouched(fx, traced):
    run = traced([fx.main_lazy, "nested", "3", "1"], env={"XFLOW_DENY_IMAGES": "libfx_a"})
    c = run.counts()
    assert c[("fx_main", "fx_outer")] == 3
    assert not [k for k in c if k[0] == "libfx_a"]


def test_no_hooks_into_agent_or_linker(fx, traced):
    run = traced([fx.main_lazy, "calls", "3"])
    for led in run.ledgers:
        for r in led.rows:
            path = led.images[r.caller_image]
            assert "libxflow" not in path and "ld-linux" not in path


def test_functional_output_unchanged(fx, traced):
    for argv in (["args", "20"], ["calls", "50"], ["tail", "5"], ["dl", "4"], ["recurse", "1", "5"]):
        plain = traced([fx.main_lazy, *argv], plain=True)
        hooked = traced([fx.main_lazy, *argv])
        assert hooked.stdout == plain.stdout
        assert hooked.returncode == plain.returncode == 0


def test_hot_path_does_not_allocate(fx, traced):
    run = traced([fx.main_lazy, "alloc", "100000"], preload_extra=str(fx.alloc_shim))
    assert run.stdout.strip() == "alloc 0"


ROUND_TRIP = textwrap.dedent(
    r"""
    import ctypes, json, sys
    from elftools.elf.elffile import ELFFile
    from xflow.agent import NativeAgent

    native = NativeAgent(sys.argv[1])
    fxa = sys.argv[2]

    def plt_state():
        differ, checked = [], 0
        for img in native.images():
            if img["is_agent"] or img["is_linker"] or img["denied"] or not img["sections_ok"]:
                continue
            with open(img["path"], "rb") as fh:
                elf = ELFFile(fh)
                for name in (".plt", ".plt.sec"):
                    sec = elf.get_section_by_name(name)
                    if sec is None or not sec["sh_size"]:
                        continue
                    live = ctypes.string_at(img["base"] + sec["sh_addr"], sec["sh_size"])
                    checked += 1
                    if live != sec.data():
                        differ.append(img["path"] + name)
        return differ, checked

    before = native.patch_count()
    ctypes.CDLL(fxa)
    after_first = native.patch_count()
    ctypes.CDLL(fxa)
    after_second = native.patch_count()
    images_before = len(native.images())
    try:
        ctypes.CDLL("/nonexistent/libnothing.so")
        missing = "loaded"
    except OSError:
        missing = "failed"
    images_after = len(native.images())

    patched, _ = plt_state()
    restored = native.uninstall()
    clean, checked = plt_state()
    lo = native.site_code(0)
    hi = lo + 65536 * 160
    in_shadow = 0
    for img in native.images():
        secs = native.sections(img["id"])
        for role in ("got", "got_plt"):
            if role in secs:
                addr, size = secs[role]
                cells = (ctypes.c_uint64 * (size // 8)).from_address(addr)
                in_shadow += sum(lo <= v < hi for v in cells)
    print(json.dumps(dict(active=native.is_active(), before=before, after_first=after_first,
                          after_second=after_second, missing=missing, images=[images_before, images_after],
                          patched=len(patched), restored=restored, clean=clean, checked=checked,
                          in_shadow=in_shadow)))
    """
)


def test_install_uninstall_round_trip(fx, agent_so, tmp_path):
    env = dict(os.environ, LD_PRELOAD=str(agent_so), XFLOW_OUT_DIR=str(tmp_path))
    proc = subprocess.run([sys.executable, "-c", ROUND_TRIP, str(agent_so), str(fx.lib("fx_a"))],
                          env=env, capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    r = json.loads(proc.stdout.splitlines()[-1])
    assert r["active"] == 1
    assert r["after_first"] > r["before"]  # libfx_a, libfx_b and libfx_z got hooked
    assert r["after_second"] == r["after_first"]  # already loaded: nothing new
    assert r["missing"] == "failed" and r["images"][0] == r["images"][1]
    assert r["patched"] > 0
    assert r["restored"] == r["after_second"]
    assert r["clean"] == [] and r["checked"] > 0
    assert r["in_shadow"] == 0
