/* Per-thread recording contexts, the cycle clock and thread lifecycle hooks. */
#include "xflow.h"

#include <stdlib.h>
#include <string.h>
#include <sys/mman.h>
#include <time.h>

__thread struct xf_ctx *xf_tls_ctx __attribute__((tls_model("initial-exec")));
_Atomic int xf_active_threads = 1;

static _Atomic(struct xf_ctx *) registry;
static _Atomic uint32_t next_ordinal;

extern void *__dso_handle;
int __cxa_thread_atexit_impl(void (*fn)(void *), void *obj, void *dso);

uint64_t xf_rdtsc(void)
{
    return __builtin_ia32_rdtsc();
}

static uint64_t mono_ns(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (uint64_t)ts.tv_sec * 1000000000ull + (uint64_t)ts.tv_nsec;
}

/* Cycles per second, measured against the monotonic clock over `ms` milliseconds. */
uint64_t xf_calibrate(uint32_t ms)
{
    if (!ms)
        ms = 1;
    uint64_t t0 = mono_ns(), c0 = xf_rdtsc();
    uint64_t t1, c1;
    do {
        t1 = mono_ns();
        c1 = xf_rdtsc();
    } while (t1 - t0 < (uint64_t)ms * 1000000ull);
    unsigned __int128 hz = (unsigned __int128)(c1 - c0) * 1000000000ull / (t1 - t0);
    return (uint64_t)hz;
}

static void *map_anon(size_t n)
{
    void *p = mmap(NULL, n, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    return p == MAP_FAILED ? NULL : p;
}

static size_t rows_bytes(void) { return (size_t)XF_MAX_SITES * XF_ROW_WORDS * 8; }

static size_t stack_bytes(uint32_t depth) { return (size_t)depth * sizeof(struct xf_frame); }

struct xf_ctx *xf_ctx_create(uint64_t group_tag, int standalone)
{
    struct xf_ctx *ctx = map_anon(4096);
    if (!ctx)
        return NULL;
    uint32_t depth = xf_cfg.shadow_depth ? xf_cfg.shadow_depth : XF_DEFAULT_DEPTH;
    ctx->rows = map_anon(rows_bytes());
    ctx->stack = map_anon(stack_bytes(depth));
    if (!ctx->rows || !ctx->stack) {
        if (ctx->rows)
            munmap(ctx->rows, rows_bytes());
        if (ctx->stack)
            munmap(ctx->stack, stack_bytes(depth));
        munmap(ctx, 4096);
        return NULL;
    }
    ctx->max_depth = depth;
    ctx->group_tag = group_tag;
    ctx->standalone = (uint8_t)standalone;
    ctx->start_cycles = xf_rdtsc();
    atomic_init(&ctx->state, XF_CTX_LIVE);
    if (!standalone) {
        ctx->ordinal = atomic_fetch_add(&next_ordinal, 1);
        struct xf_ctx *head = atomic_load(&registry);
        do
            ctx->next = head;
        while (!atomic_compare_exchange_weak(&registry, &head, ctx));
    }
    return ctx;
}

/* Frees the per-thread arrays; the small header stays mapped for registry walkers. */
void xf_ctx_release(struct xf_ctx *ctx)
{
    if (!ctx || !ctx->rows)
        return;
    uint64_t *rows = ctx->rows;
    struct xf_frame *stack = ctx->stack;
    ctx->rows = NULL;
    ctx->stack = NULL;
    munmap(rows, rows_bytes());
    munmap(stack, stack_bytes(ctx->max_depth));
}

struct xf_ctx *xf_ctx_list(void) { return atomic_load(&registry); }

/* Persist once; a snapshot in progress on another thread is waited out. */
static int persist_final(struct xf_ctx *ctx)
{
    int expect;
    for (;;) {
        expect = XF_CTX_LIVE;
        if (atomic_compare_exchange_weak(&ctx->state, &expect, XF_CTX_PERSISTING))
            break;
        if (expect == XF_CTX_DONE)
            return 0;
    }
    ctx->end_cycles = xf_rdtsc();
    int r = xf_persist(ctx, xf_cfg.out_dir, NULL, NULL, 0);
    atomic_store(&ctx->state, XF_CTX_DONE);
    return r;
}

static void thread_dtor(void *p)
{
    struct xf_ctx *ctx = p;
    xf_tls_ctx = NULL;
    persist_final(ctx);
    atomic_fetch_sub(&xf_active_threads, 1);
    xf_ctx_release(ctx);
}

struct start_pack {
    void *(*fn)(void *);
    void *arg;
};

static void *thread_start(void *p)
{
    struct start_pack pk = *(struct start_pack *)p;
    free(p);
    struct xf_ctx *ctx = xf_ctx_create((uint64_t)(uintptr_t)pk.fn, 0);
    if (ctx) {
        atomic_fetch_add(&xf_active_threads, 1);
        __cxa_thread_atexit_impl(thread_dtor, ctx, &__dso_handle);
        xf_tls_ctx = ctx;
    } else {
        xf_warn("cannot allocate a thread context; thread runs untraced", NULL);
    }
    return pk.fn(pk.arg);
}

int xf_wrapped_pthread_create(pthread_t *t, const pthread_attr_t *attr, void *(*fn)(void *), void *arg)
{
    struct start_pack *pk = malloc(sizeof *pk);
    if (!pk)
        return pthread_create(t, attr, fn, arg);
    pk->fn = fn;
    pk->arg = arg;
    int r = pthread_create(t, attr, thread_start, pk);
    if (r)
        free(pk);
    return r;
}

void xf_persist_all(void)
{
    for (struct xf_ctx *c = xf_ctx_list(); c; c = c->next)
        persist_final(c);
}

void xf_tracer_atfork_child(void)
{
    struct xf_ctx *self = xf_tls_ctx;
    for (struct xf_ctx *c = xf_ctx_list(); c; c = c->next)
        if (c != self)
            atomic_store(&c->state, XF_CTX_DONE);
    atomic_store(&xf_active_threads, 1);
    if (self && self->rows) {
        madvise(self->rows, rows_bytes(), MADV_DONTNEED);
        self->start_cycles = xf_rdtsc();
    }
}

/* ---- debug / test surface ---- */

XF_API uint64_t xflow_read_cycles(void) { return xf_rdtsc(); }

XF_API uint64_t xflow_calibrate(uint32_t ms) { return xf_calibrate(ms); }

XF_API struct xf_ctx *xflow_test_context(void) { return xf_ctx_create(0, 1); }

XF_API void xflow_test_free_context(struct xf_ctx *ctx)
{
    if (ctx && ctx->standalone) {
        xf_ctx_release(ctx);
        munmap(ctx, 4096);
    }
}

/* Give the calling thread a registered context, as the thread-start wrapper would. */
XF_API struct xf_ctx *xflow_test_init_thread(uint64_t tag)
{
    if (!xf_tls_ctx)
        xf_tls_ctx = xf_ctx_create(tag, 0);
    return xf_tls_ctx;
}

XF_API void xflow_test_clear_thread(void) { xf_tls_ctx = NULL; }

XF_API struct xf_ctx *xflow_ensure_context(void) { return xf_tls_ctx; }

XF_API int xflow_active_threads(void) { return atomic_load(&xf_active_threads); }

XF_API void xflow_test_set_active(int n) { atomic_store(&xf_active_threads, n); }

XF_API void xflow_test_set_busy(struct xf_ctx *ctx, int busy) { ctx->busy = (uint8_t)busy; }

XF_API void xflow_test_record(struct xf_ctx *ctx, uint32_t site, uint64_t duration)
{
    xf_record(ctx, site, duration);
}

XF_API uint32_t xflow_ctx_ordinal(struct xf_ctx *ctx) { return ctx->ordinal; }

XF_API uint64_t xflow_ctx_tag(struct xf_ctx *ctx) { return ctx->group_tag; }
