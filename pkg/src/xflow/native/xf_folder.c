/* Folding arithmetic and ledger persistence (async-signal-safe writer). */
#include "xflow.h"

#include <ctype.h>
#include <errno.h>
#include <fcntl.h>
#include <signal.h>
#include <stdlib.h>
#include <string.h>
#include <strings.h>
#include <unistd.h>

static inline uint64_t sat_add(uint64_t a, uint64_t b)
{
    uint64_t r;
    return __builtin_add_overflow(a, b, &r) ? UINT64_MAX : r;
}

void xf_fold(uint64_t *rows, uint32_t site, uint64_t duration, uint64_t active,
             uint64_t scale, int has_duration)
{
    uint64_t *r = rows + (size_t)site * XF_ROW_WORDS;
    r[0] = sat_add(r[0], 1);
    if (!has_duration)
        return;
    if (!active)
        active = 1;
    uint64_t v;
    if (__builtin_mul_overflow(duration, scale ? scale : 1, &v))
        v = UINT64_MAX;
    r[1] = sat_add(r[1], 1);
    r[2] = sat_add(r[2], v);
    /* round half up */
    r[3] = sat_add(r[3], v / active + (v % active >= (active + 1) / 2 ? 1 : 0));
}

/* Buffered writer over a file descriptor. */
struct out {
    int fd, err;
    size_t n;
    char buf[4096];
};

static void flush(struct out *o)
{
    size_t off = 0;
    while (off < o->n && !o->err) {
        ssize_t w = write(o->fd, o->buf + off, o->n - off);
        if (w < 0 && errno == EINTR)
            continue;
        if (w <= 0)
            o->err = 1;
        else
            off += (size_t)w;
    }
    o->n = 0;
}

static void puts_(struct out *o, const char *s)
{
    while (*s) {
        if (o->n == sizeof o->buf)
            flush(o);
        o->buf[o->n++] = *s++;
    }
}

/* Unsigned integer, zero-padded to `width` digits (0 = natural width). */
static void putu(struct out *o, uint64_t v, unsigned base, int width)
{
    char tmp[32];
    int k = 0;
    do {
        unsigned d = (unsigned)(v % base);
        tmp[k++] = (char)(d < 10 ? '0' + d : 'a' + d - 10);
        v /= base;
    } while (v);
    while (k < width)
        tmp[k++] = '0';
    char s[33];
    int i = 0;
    while (k)
        s[i++] = tmp[--k];
    s[i] = 0;
    puts_(o, s);
}

static void puti(struct out *o, int64_t v)
{
    if (v < 0) {
        puts_(o, "-");
        putu(o, (uint64_t)(-v), 10, 0);
    } else {
        putu(o, (uint64_t)v, 10, 0);
    }
}

static const char *const kind_str[] = {"plt-lazy", "plt-eager", "dyn-got", "dlsym"};

/* Image that defines the site's current target, or -1 when not yet known. */
static int callee_image(const struct xf_site *s)
{
    uint64_t a;
    if (s->special || s->kind == XF_DLSYM)
        a = s->key_addr;
    else if (s->target_ptr)
        a = *s->target_ptr;
    else
        return -1;
    if (!a || xf_in_shadow(a))
        return -1;
    return xf_image_of(a);
}

static void write_ledger(struct out *o, struct xf_ctx *ctx, uint64_t total)
{
    puts_(o, "XFLOW\t1\n#tid\t");
    putu(o, ctx->ordinal, 10, 0);
    puts_(o, "\n#group\t");
    putu(o, ctx->group_tag, 16, 16);
    puts_(o, "\n#hz\t");
    putu(o, xf_hz, 10, 20);
    puts_(o, "\n#total_cycles\t");
    putu(o, total, 10, 20);
    puts_(o, "\n");
    int ni = xf_image_count();
    for (int i = 0; i < ni; i++) {
        struct xf_image *img = xf_image_get(i);
        puts_(o, "#image\t");
        putu(o, (uint64_t)i, 10, 0);
        puts_(o, "\t");
        puts_(o, img->path);
        puts_(o, "\n");
    }
    uint32_t ns = atomic_load(&xf_site_count);
    for (uint32_t id = 0; ctx->rows && id < ns; id++) {
        const uint64_t *r = ctx->rows + (size_t)id * XF_ROW_WORDS;
        uint64_t count = __atomic_load_n(&r[0], __ATOMIC_RELAXED);
        if (!count)
            continue;
        const struct xf_site *s = &xf_sites[id];
        putu(o, id, 10, 0);
        puts_(o, "\t");
        puti(o, s->caller_image);
        puts_(o, "\t");
        puts_(o, s->symbol ? s->symbol : "?");
        puts_(o, "\t");
        puts_(o, kind_str[s->kind & 3]);
        for (int k = 0; k < 4; k++) {
            puts_(o, "\t");
            putu(o, k ? __atomic_load_n(&r[k], __ATOMIC_RELAXED) : count, 10, 20);
        }
        puts_(o, "\t");
        puti(o, callee_image(s));
        puts_(o, "\n");
    }
    flush(o);
}

static size_t build_path(char *p, size_t cap, const char *dir, uint32_t ordinal, const char *suffix)
{
    struct out tmp; /* reuse the formatter on a scratch buffer */
    tmp.fd = -1;
    tmp.err = 0;
    tmp.n = 0;
    puts_(&tmp, dir);
    puts_(&tmp, "/xflow.");
    putu(&tmp, (uint64_t)getpid(), 10, 0);
    puts_(&tmp, ".");
    putu(&tmp, ordinal, 10, 0);
    puts_(&tmp, ".tsv");
    if (suffix)
        puts_(&tmp, suffix);
    if (tmp.n + 8 > cap)
        return 0;
    memcpy(p, tmp.buf, tmp.n);
    p[tmp.n] = 0;
    return tmp.n;
}

static int write_file(const char *path, struct xf_ctx *ctx, uint64_t total)
{
    struct out o;
    int fd = open(path, O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0)
        return -1;
    o.fd = fd;
    o.err = 0;
    o.n = 0;
    write_ledger(&o, ctx, total);
    if (!o.err && fdatasync(fd) && errno != EINVAL && errno != EROFS)
        o.err = 1;
    if (close(fd))
        o.err = 1;
    return o.err ? -1 : 0;
}

int xf_persist(struct xf_ctx *ctx, const char *dir, const char *suffix, char *out_path, size_t n)
{
    char path[1200];
    size_t len = build_path(path, sizeof path - 8, dir, ctx->ordinal, suffix);
    if (!len) {
        xf_warn("ledger path too long", dir);
        return -1;
    }
    uint64_t end = ctx->end_cycles ? ctx->end_cycles : xf_rdtsc();
    uint64_t total = end > ctx->start_cycles ? end - ctx->start_cycles : 0;
    if (write_file(path, ctx, total)) {
        memcpy(path + len, ".retry", 7);
        if (write_file(path, ctx, total)) {
            xf_warn("cannot write ledger", path);
            return -1;
        }
    }
    if (out_path && n) {
        size_t k = strlen(path);
        if (k >= n)
            k = n - 1;
        memcpy(out_path, path, k);
        out_path[k] = 0;
    }
    return 0;
}

/* ---- mid-run snapshots ---- */

static _Atomic uint32_t snap_gen;

static void snapshot_all(void)
{
    uint32_t gen = atomic_fetch_add(&snap_gen, 1) + 1;
    char suffix[24] = ".snap";
    char digits[12];
    int k = 0;
    for (uint32_t v = gen; v; v /= 10)
        digits[k++] = (char)('0' + v % 10);
    int i = 5;
    while (k)
        suffix[i++] = digits[--k];
    suffix[i] = 0;
    for (struct xf_ctx *c = xf_ctx_list(); c; c = c->next) {
        int expect = XF_CTX_LIVE;
        if (!atomic_compare_exchange_strong(&c->state, &expect, XF_CTX_PERSISTING))
            continue;
        c->snapshot_gen = gen;
        xf_persist(c, xf_cfg.out_dir, suffix, NULL, 0);
        atomic_store(&c->state, XF_CTX_LIVE);
    }
}

static void on_dump_signal(int sig)
{
    (void)sig;
    int saved = errno;
    struct xf_ctx *self = xf_tls_ctx;
    uint8_t was = self ? self->busy : 0;
    if (self)
        self->busy = 1;
    snapshot_all();
    if (self)
        self->busy = was;
    errno = saved;
}

int xf_install_dump_signal(int sig)
{
    struct sigaction sa;
    memset(&sa, 0, sizeof sa);
    sa.sa_handler = on_dump_signal;
    sa.sa_flags = SA_RESTART;
    sigemptyset(&sa.sa_mask);
    return sigaction(sig, &sa, NULL);
}

/* "USR1", "SIGUSR1", "sigusr1", "10" or "RTMIN+2" -> signal number; -1 if unknown. */
int xf_parse_signal(const char *s)
{
    if (!s || !*s)
        return -1;
    char *end;
    long v = strtol(s, &end, 10);
    if (!*end)
        return v > 0 && v < NSIG ? (int)v : -1;
    if (!strncasecmp(s, "SIG", 3))
        s += 3;
    if (!strncasecmp(s, "RTMIN", 5) || !strncasecmp(s, "RTMAX", 5)) {
        int base = toupper((unsigned char)s[3]) == 'I' ? SIGRTMIN : SIGRTMAX;
        long off = 0;
        if (s[5]) {
            off = strtol(s + 5, &end, 10);
            if (*end)
                return -1;
        }
        long n = base + off;
        return n >= SIGRTMIN && n <= SIGRTMAX ? (int)n : -1;
    }
    for (int i = 1; i < SIGRTMIN; i++) {
        const char *name = sigabbrev_np(i);
        if (name && !strcasecmp(name, s))
            return i;
    }
    return -1;
}

/* ---- debug / test surface ---- */

XF_API void xflow_fold(struct xf_ctx *ctx, uint32_t site, uint64_t duration, uint64_t active,
                       uint64_t scale, int has_duration)
{
    xf_fold(ctx->rows, site, duration, active, scale, has_duration);
}

XF_API void xflow_row(struct xf_ctx *ctx, uint32_t site, uint64_t out[4])
{
    for (int k = 0; k < 4; k++)
        out[k] = ctx->rows ? ctx->rows[(size_t)site * XF_ROW_WORDS + k] : 0;
}

XF_API int xflow_persist(struct xf_ctx *ctx, const char *dir, char *out, size_t n)
{
    ctx->end_cycles = xf_rdtsc();
    return xf_persist(ctx, dir, NULL, out, n);
}

XF_API void xflow_snapshot(void) { snapshot_all(); }
