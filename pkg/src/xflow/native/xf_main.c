/* Agent bootstrap: configuration, diagnostics, string arena, init/fini. */
#include "xflow.h"

#include <dlfcn.h>
#include <errno.h>
#include <fcntl.h>
#include <signal.h>
#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

struct xf_config xf_cfg;
int xf_active;
uint64_t xf_hz;

static int xf_cfg_loaded;

static size_t xf_strlcpy(char *dst, const char *src, size_t n)
{
    size_t len = strlen(src);
    if (n) {
        size_t m = len < n - 1 ? len : n - 1;
        memcpy(dst, src, m);
        dst[m] = 0;
    }
    return len;
}

static int xf_mkdirs(const char *dir)
{
    char tmp[1024];
    xf_strlcpy(tmp, dir, sizeof tmp);
    for (char *p = tmp + 1; *p; p++) {
        if (*p == '/') {
            *p = 0;
            mkdir(tmp, 0755);
            *p = '/';
        }
    }
    if (mkdir(tmp, 0755) && errno != EEXIST)
        return -1;
    return 0;
}

static void xf_write_all(int fd, const char *s, size_t n)
{
    while (n) {
        ssize_t w = write(fd, s, n);
        if (w <= 0) {
            if (w < 0 && errno == EINTR)
                continue;
            return;
        }
        s += w;
        n -= (size_t)w;
    }
}

static void xf_append(char *buf, size_t *n, size_t cap, const char *s)
{
    while (*s && *n + 1 < cap)
        buf[(*n)++] = *s++;
    buf[*n] = 0;
}

static void xf_diag(const char *level, const char *msg, const char *detail)
{
    char line[1536];
    size_t n = 0;
    xf_append(line, &n, sizeof line, "xflow: ");
    xf_append(line, &n, sizeof line, level);
    xf_append(line, &n, sizeof line, ": ");
    xf_append(line, &n, sizeof line, msg);
    if (detail) {
        xf_append(line, &n, sizeof line, " (");
        xf_append(line, &n, sizeof line, detail);
        xf_append(line, &n, sizeof line, ")");
    }
    xf_append(line, &n, sizeof line, "\n");

    char path[1200], pid[24];
    int k = 0;
    for (unsigned long v = (unsigned long)getpid(); v; v /= 10)
        pid[k++] = (char)('0' + v % 10);
    size_t pl = 0;
    xf_append(path, &pl, sizeof path, xf_cfg.out_dir[0] ? xf_cfg.out_dir : "./xflow-out");
    xf_append(path, &pl, sizeof path, "/xflow.");
    while (k && pl + 1 < sizeof path)
        path[pl++] = pid[--k];
    path[pl] = 0;
    xf_append(path, &pl, sizeof path, ".diag");
    int fd = open(path, O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd >= 0) {
        xf_write_all(fd, line, n);
        close(fd);
    }
    const char *verbose = getenv("XFLOW_VERBOSE");
    if (verbose && *verbose && *verbose != '0')
        xf_write_all(2, line, n);
}

void xf_warn(const char *msg, const char *detail) { xf_diag("warning", msg, detail); }

void xf_fatal(const char *msg, const char *detail)
{
    xf_diag("fatal", msg, detail);
    char line[512];
    size_t n = 0;
    xf_append(line, &n, sizeof line, "xflow: fatal: ");
    xf_append(line, &n, sizeof line, msg);
    xf_append(line, &n, sizeof line, "\n");
    xf_write_all(2, line, n);
}

/* Bump arena backed by anonymous mappings; never freed. */
static char *arena_cur, *arena_end;
static pthread_mutex_t arena_lock = PTHREAD_MUTEX_INITIALIZER;

const char *xf_strdup(const char *s)
{
    size_t n = strlen(s) + 1;
    pthread_mutex_lock(&arena_lock);
    if (!arena_cur || (size_t)(arena_end - arena_cur) < n) {
        size_t sz = n > 65536 ? (n + 4095) & ~(size_t)4095 : 65536;
        void *p = mmap(NULL, sz, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
        if (p == MAP_FAILED) {
            pthread_mutex_unlock(&arena_lock);
            return "";
        }
        arena_cur = p;
        arena_end = arena_cur + sz;
    }
    char *d = arena_cur;
    memcpy(d, s, n);
    arena_cur += n;
    pthread_mutex_unlock(&arena_lock);
    return d;
}

static uint64_t env_u64(const char *name, uint64_t dflt, uint64_t min)
{
    const char *v = getenv(name);
    if (!v || !*v)
        return dflt;
    char *end;
    unsigned long long x = strtoull(v, &end, 10);
    if (*end || x < min) {
        xf_warn("ignoring invalid value", name);
        return dflt;
    }
    return x;
}

static void xf_load_config(void)
{
    if (xf_cfg_loaded)
        return;
    xf_cfg_loaded = 1;
    const char *out = getenv("XFLOW_OUT_DIR");
    xf_strlcpy(xf_cfg.out_dir, out && *out ? out : "./xflow-out", sizeof xf_cfg.out_dir);
    xf_cfg.timing_rate = env_u64("XFLOW_TIMING_RATE", 1, 1);
    if (xf_cfg.timing_rate > 0x7fffffffu)
        xf_cfg.timing_rate = 0x7fffffffu;
    xf_cfg.shadow_depth = (uint32_t)env_u64("XFLOW_SHADOW_DEPTH", XF_DEFAULT_DEPTH, 1);
    const char *sig = getenv("XFLOW_DUMP_SIGNAL");
    xf_cfg.dump_signal = sig && *sig ? xf_parse_signal(sig) : 0;
    if (sig && *sig && xf_cfg.dump_signal <= 0)
        xf_warn("unknown XFLOW_DUMP_SIGNAL", sig);
    const char *deny = getenv("XFLOW_DENY_IMAGES");
    xf_strlcpy(xf_cfg.deny, "[vdso],[vsyscall]", sizeof xf_cfg.deny);
    if (deny && *deny) {
        size_t n = strlen(xf_cfg.deny);
        n += xf_strlcpy(xf_cfg.deny + n, ",", sizeof xf_cfg.deny - n);
        xf_strlcpy(xf_cfg.deny + n, deny, sizeof xf_cfg.deny - n);
    }
    const char *bn = getenv("LD_BIND_NOW");
    xf_cfg.bind_now_env = bn && *bn;
}

/* The agent installs itself only when it was injected through LD_PRELOAD. */
static int xf_was_preloaded(void)
{
    const char *pre = getenv("LD_PRELOAD");
    Dl_info info;
    if (!pre || !dladdr((void *)xf_was_preloaded, &info) || !info.dli_fname)
        return 0;
    const char *base = strrchr(info.dli_fname, '/');
    base = base ? base + 1 : info.dli_fname;
    const char *p = pre;
    size_t bl = strlen(base);
    while ((p = strstr(p, base))) {
        char after = p[bl];
        if (after == 0 || after == ' ' || after == ':')
            return 1;
        p += bl;
    }
    return 0;
}

static void xf_atfork_child(void)
{
    xf_tracer_atfork_child();
}

/* Shared setup for the preloaded agent and for the ctypes test surface. */
static int xf_base_init(void)
{
    static int done;
    if (done)
        return done > 0 ? 0 : -1;
    xf_load_config();
    xf_hz = xf_calibrate(2);
    if (xf_shadow_init()) {
        done = -1;
        xf_fatal("cannot allocate executable memory for the shadow table", NULL);
        return -1;
    }
    done = 1;
    return 0;
}

__attribute__((constructor(101))) static void xf_agent_init(void)
{
    if (!xf_was_preloaded())
        return;
    const char *off = getenv("XFLOW_DISABLE");
    if (off && *off && *off != '0')
        return;
    xf_load_config();
    xf_mkdirs(xf_cfg.out_dir);
    if (xf_base_init())
        return;
    struct xf_ctx *main_ctx = xf_ctx_create(0, 0);
    if (!main_ctx) {
        xf_fatal("cannot allocate the main thread context", NULL);
        return;
    }
    if (xf_maps_refresh() < 0) {
        xf_fatal("cannot read /proc/self/maps", NULL);
        return;
    }
    xf_enumerate_images();
    pthread_mutex_lock(&xf_install_lock);
    xf_hook_all();
    pthread_mutex_unlock(&xf_install_lock);
    xf_tls_ctx = main_ctx;
    if (xf_cfg.dump_signal > 0)
        xf_install_dump_signal(xf_cfg.dump_signal);
    pthread_atfork(NULL, NULL, xf_atfork_child);
    xf_active = 1;
}

__attribute__((destructor(101))) static void xf_agent_fini(void)
{
    if (!xf_active)
        return;
    xf_persist_all();
}

/* ---- debug / test surface (ctypes) ---- */

XF_API int xflow_test_init(void)
{
    return xf_base_init();
}

XF_API int xflow_is_active(void) { return xf_active; }

XF_API uint64_t xflow_hz(void) { return xf_hz; }

XF_API void xflow_test_configure(uint64_t timing_rate, uint32_t shadow_depth, const char *out_dir)
{
    xf_load_config();
    if (timing_rate) {
        xf_cfg.timing_rate = timing_rate;
        xf_set_scale(timing_rate);
    }
    if (shadow_depth)
        xf_cfg.shadow_depth = shadow_depth;
    if (out_dir)
        xf_strlcpy(xf_cfg.out_dir, out_dir, sizeof xf_cfg.out_dir);
}

XF_API int xflow_parse_signal(const char *s) { return xf_parse_signal(s); }
