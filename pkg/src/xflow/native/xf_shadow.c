/* Shadow table: generated per-site entry code and the per-thread shadow stack. */
#include "xflow.h"

#include <string.h>
#include <sys/mman.h>
#include <unistd.h>

#define XF_GLOBALS_SIZE 4096u
#define XF_CODE_SIZE ((size_t)XF_MAX_SITES * XF_ENTRY_SIZE)
#define XF_SIDE_AREA ((size_t)XF_MAX_SITES * XF_SIDE_SIZE)

uint8_t *xf_code_base;
struct xf_site *xf_sites;
_Atomic uint32_t xf_site_count;

static uint8_t *region;
static uint64_t *globals; /* [0] common enter, [1] common exit */
static int32_t tls_off;
static uint64_t scale = 1;

uint64_t xf_hot_enter(uint32_t site, uint64_t *slot) XF_HIDDEN;
uint64_t xf_hot_exit(uint32_t site, uint64_t *after) XF_HIDDEN;
void xf_common_enter(void) XF_HIDDEN;
void xf_common_exit(void) XF_HIDDEN;

/*
 * Common enter: r11d = site id, (%rsp) = return slot of the intercepted call.
 * Preserves every argument register, then jumps to the target returned by C.
 * Common exit: r11d = site id, rsp = stack pointer after the callee returned.
 * Preserves the return registers, then jumps to the real return address.
 */
__asm__(
    ".text\n"
    ".globl xf_common_enter\n"
    ".hidden xf_common_enter\n"
    ".type xf_common_enter,@function\n"
    "xf_common_enter:\n"
    "  push %rax\n  push %rdi\n  push %rsi\n  push %rdx\n  push %rcx\n"
    "  push %r8\n  push %r9\n  push %r10\n  push %rbx\n"
    "  mov %rsp, %rbx\n"
    "  and $-16, %rsp\n"
    "  sub $128, %rsp\n"
    "  movdqu %xmm0, 0(%rsp)\n  movdqu %xmm1, 16(%rsp)\n"
    "  movdqu %xmm2, 32(%rsp)\n  movdqu %xmm3, 48(%rsp)\n"
    "  movdqu %xmm4, 64(%rsp)\n  movdqu %xmm5, 80(%rsp)\n"
    "  movdqu %xmm6, 96(%rsp)\n  movdqu %xmm7, 112(%rsp)\n"
    "  mov %r11d, %edi\n"
    "  lea 72(%rbx), %rsi\n"
    "  call xf_hot_enter\n"
    "  mov %rax, %r11\n"
    "  movdqu 0(%rsp), %xmm0\n  movdqu 16(%rsp), %xmm1\n"
    "  movdqu 32(%rsp), %xmm2\n  movdqu 48(%rsp), %xmm3\n"
    "  movdqu 64(%rsp), %xmm4\n  movdqu 80(%rsp), %xmm5\n"
    "  movdqu 96(%rsp), %xmm6\n  movdqu 112(%rsp), %xmm7\n"
    "  mov %rbx, %rsp\n"
    "  pop %rbx\n  pop %r10\n  pop %r9\n  pop %r8\n  pop %rcx\n"
    "  pop %rdx\n  pop %rsi\n  pop %rdi\n  pop %rax\n"
    "  jmp *%r11\n"
    ".size xf_common_enter, .-xf_common_enter\n"
    "\n"
    ".globl xf_common_exit\n"
    ".hidden xf_common_exit\n"
    ".type xf_common_exit,@function\n"
    "xf_common_exit:\n"
    "  push %rax\n  push %rdx\n  push %rbx\n"
    "  mov %rsp, %rbx\n"
    "  and $-16, %rsp\n"
    "  sub $32, %rsp\n"
    "  movdqu %xmm0, 0(%rsp)\n  movdqu %xmm1, 16(%rsp)\n"
    "  mov %r11d, %edi\n"
    "  lea 24(%rbx), %rsi\n"
    "  call xf_hot_exit\n"
    "  mov %rax, %r11\n"
    "  movdqu 0(%rsp), %xmm0\n  movdqu 16(%rsp), %xmm1\n"
    "  mov %rbx, %rsp\n"
    "  pop %rbx\n  pop %rdx\n  pop %rax\n"
    "  jmp *%r11\n"
    ".size xf_common_exit, .-xf_common_exit\n");

int xf_shadow_init(void)
{
    if (region)
        return 0;
    size_t total = XF_GLOBALS_SIZE + XF_CODE_SIZE + XF_SIDE_AREA;
    void *p = mmap(NULL, total, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0);
    if (p == MAP_FAILED)
        return -1;
    region = p;
    globals = (uint64_t *)region;
    xf_code_base = region + XF_GLOBALS_SIZE;
    xf_sites = (struct xf_site *)(xf_code_base + XF_CODE_SIZE);
    globals[0] = (uint64_t)(uintptr_t)xf_common_enter;
    globals[1] = (uint64_t)(uintptr_t)xf_common_exit;
    if (mprotect(xf_code_base, XF_CODE_SIZE, PROT_READ | PROT_EXEC)) {
        munmap(region, total);
        region = NULL;
        return -1;
    }
    uint64_t fs_base;
    __asm__ volatile("mov %%fs:0, %0" : "=r"(fs_base));
    tls_off = (int32_t)((int64_t)(uintptr_t)&xf_tls_ctx - (int64_t)fs_base);
    scale = xf_cfg.timing_rate ? xf_cfg.timing_rate : 1;
    return 0;
}

int xf_in_shadow(uint64_t addr)
{
    return xf_code_base && addr >= (uint64_t)(uintptr_t)xf_code_base &&
           addr < (uint64_t)(uintptr_t)xf_code_base + XF_CODE_SIZE;
}

struct xf_site *xf_site_alloc(void)
{
    uint32_t id = atomic_load(&xf_site_count);
    if (!region || id >= XF_MAX_SITES)
        return NULL;
    struct xf_site *s = &xf_sites[id];
    memset(s, 0, sizeof *s);
    s->id = id;
    s->caller_image = -1;
    s->code_addr = (uint64_t)(uintptr_t)(xf_code_base + (size_t)id * XF_ENTRY_SIZE);
    return s;
}

uint64_t xf_post_addr(uint32_t site)
{
    return (uint64_t)(uintptr_t)xf_code_base + (uint64_t)site * XF_ENTRY_SIZE + xf_sites[site].post_off;
}

/* ---- code generation ---- */

struct emit {
    uint8_t *buf;
    size_t cap, n;
    uint64_t at; /* runtime address of buf[0] */
};

static void put(struct emit *e, const void *b, size_t n)
{
    if (e->n + n <= e->cap)
        memcpy(e->buf + e->n, b, n);
    e->n += n;
}

static void put8(struct emit *e, uint8_t v) { put(e, &v, 1); }
static void put32(struct emit *e, uint32_t v) { put(e, &v, 4); }

/* rel32 operand placed at the current position, for an instruction ending `tail` bytes later */
static void put_rel32(struct emit *e, uint64_t target, size_t tail)
{
    uint64_t next = e->at + e->n + 4 + tail;
    put32(e, (uint32_t)(int32_t)(int64_t)(target - next));
}

static void patch_rel8(struct emit *e, size_t pos, size_t to)
{
    if (pos < e->cap)
        e->buf[pos] = (uint8_t)(int8_t)((int64_t)to - (int64_t)(pos + 1));
}

static int gen(const struct xf_site *s, uint64_t rate, uint8_t *out, size_t cap,
               uint8_t seg[4], uint16_t *post_off, size_t *stub_off)
{
    static const uint8_t a0[] = {0x64, 0x4c, 0x8b, 0x1c, 0x25};     /* mov %fs:off,%r11 */
    static const uint8_t test_r11[] = {0x4d, 0x85, 0xdb};           /* test %r11,%r11 */
    static const uint8_t cmp_busy[] = {0x41, 0x80, 0x3b, 0x00};     /* cmpb $0,(%r11) */
    static const uint8_t load_rows[] = {0x4d, 0x8b, 0x5b, 0x08};    /* mov 8(%r11),%r11 */
    static const uint8_t inc_row[] = {0x49, 0xff, 0x83};            /* incq d32(%r11) */
    static const uint8_t dec_row[] = {0x49, 0xff, 0x8b};            /* decq d32(%r11) */
    static const uint8_t mov_row[] = {0x49, 0xc7, 0x83};            /* movq $i32,d32(%r11) */
    static const uint8_t load_tgt[] = {0x4c, 0x8b, 0x1d};           /* mov r32(%rip),%r11 */
    static const uint8_t jmp_m_r11[] = {0x41, 0xff, 0x23};          /* jmp *(%r11) */
    static const uint8_t jmp_rip[] = {0xff, 0x25};                  /* jmp *r32(%rip) */
    static const uint8_t lock_inc[] = {0xf0, 0x48, 0xff, 0x05};     /* lock incq r32(%rip) */

    uint64_t side = (uint64_t)(uintptr_t)&xf_sites[s->id];
    uint64_t g = (uint64_t)(uintptr_t)globals;
    uint32_t row = s->id * XF_ROW_WORDS * 8;
    struct emit e = {out, cap, 0, s->code_addr};
    size_t j_null, j_busy, j_gate = 0;

    /* A: thread context present and not busy */
    put(&e, a0, sizeof a0);
    put32(&e, (uint32_t)tls_off);
    put(&e, test_r11, sizeof test_r11);
    put8(&e, 0x74);
    j_null = e.n;
    put8(&e, 0);
    put(&e, cmp_busy, sizeof cmp_busy);
    put8(&e, 0x75);
    j_busy = e.n;
    put8(&e, 0);
    size_t end_a = e.n;

    /* B: count, then the timing gate */
    put(&e, load_rows, sizeof load_rows);
    put(&e, inc_row, sizeof inc_row);
    put32(&e, row);
    if (rate > 1) {
        put(&e, dec_row, sizeof dec_row);
        put32(&e, row + 32);
        put8(&e, 0x79); /* jns: untimed */
        j_gate = e.n;
        put8(&e, 0);
        put(&e, mov_row, sizeof mov_row);
        put32(&e, row + 32);
        put32(&e, (uint32_t)(rate - 1));
    }
    size_t end_b = e.n;

    /* C: timed invocation through the common enter path */
    put8(&e, 0x41);
    put8(&e, 0xbb);
    put32(&e, s->id);
    put(&e, jmp_rip, sizeof jmp_rip);
    put_rel32(&e, g, 0);

    /* bypass: straight to the real target */
    size_t bypass = e.n;
    put(&e, load_tgt, sizeof load_tgt);
    put_rel32(&e, side + offsetof(struct xf_site, target_ptr), 0);
    put(&e, jmp_m_r11, sizeof jmp_m_r11);
    size_t end_c = e.n;

    /* D: post-return */
    size_t post = e.n;
    put8(&e, 0x41);
    put8(&e, 0xbb);
    put32(&e, s->id);
    put(&e, jmp_rip, sizeof jmp_rip);
    put_rel32(&e, g + 8, 0);

    /* lazy resolver stub: same handshake as the original PLT entry */
    size_t stub = e.n;
    if (s->kind == XF_PLT_LAZY) {
        put(&e, lock_inc, sizeof lock_inc);
        put_rel32(&e, side + offsetof(struct xf_site, resolve_count), 0);
        put8(&e, 0x68);
        put32(&e, s->reloc_index);
        put(&e, jmp_rip, sizeof jmp_rip);
        put_rel32(&e, side + offsetof(struct xf_site, plt0), 0);
    }
    size_t end_d = e.n;
    if (e.n > cap || e.n > XF_ENTRY_SIZE)
        return -1;

    patch_rel8(&e, j_null, bypass);
    patch_rel8(&e, j_busy, bypass);
    if (rate > 1)
        patch_rel8(&e, j_gate, bypass);
    if (seg) {
        seg[0] = (uint8_t)end_a;
        seg[1] = (uint8_t)(end_b - end_a);
        seg[2] = (uint8_t)(end_c - end_b);
        seg[3] = (uint8_t)(end_d - end_c);
    }
    if (post_off)
        *post_off = (uint16_t)post;
    if (stub_off)
        *stub_off = s->kind == XF_PLT_LAZY ? stub : 0;
    return (int)e.n;
}

int xf_entry_generate(struct xf_site *s, uint8_t *out, size_t cap)
{
    size_t stub;
    int n = gen(s, xf_cfg.timing_rate, out, cap, s->seg, &s->post_off, &stub);
    if (n > 0) {
        s->code_len = (uint32_t)n;
        s->stub_addr = stub ? s->code_addr + stub : 0;
    }
    return n;
}

/* Write the entry for an allocated site and make the site id visible. */
int xf_entry_publish(struct xf_site *s)
{
    uint8_t code[XF_ENTRY_SIZE];
    memset(code, 0xcc, sizeof code);
    if (xf_entry_generate(s, code, sizeof code) < 0)
        return -1;
    uintptr_t page = (uintptr_t)s->code_addr & ~(uintptr_t)4095;
    uintptr_t end = ((uintptr_t)s->code_addr + XF_ENTRY_SIZE + 4095) & ~(uintptr_t)4095;
    if (mprotect((void *)page, end - page, PROT_READ | PROT_WRITE | PROT_EXEC))
        return -1;
    memcpy((void *)(uintptr_t)s->code_addr, code, XF_ENTRY_SIZE);
    mprotect((void *)page, end - page, PROT_READ | PROT_EXEC);
    __atomic_thread_fence(__ATOMIC_SEQ_CST);
    atomic_store(&xf_site_count, s->id + 1);
    return 0;
}

/* ---- shadow stack ---- */

static inline uint64_t sat_add(uint64_t a, uint64_t b)
{
    uint64_t r;
    return __builtin_add_overflow(a, b, &r) ? UINT64_MAX : r;
}

/* Adds one timed duration; the count itself is kept by the generated code. */
static inline void fold_duration(uint64_t *rows, uint32_t site, uint64_t d)
{
    uint64_t *r = rows + (size_t)site * XF_ROW_WORDS;
    uint64_t active = (uint64_t)atomic_load_explicit(&xf_active_threads, memory_order_relaxed);
    if (active < 1)
        active = 1;
    uint64_t v;
    if (__builtin_mul_overflow(d, scale, &v))
        v = UINT64_MAX;
    r[1] = sat_add(r[1], 1);
    r[2] = sat_add(r[2], v);
    r[3] = sat_add(r[3], v / active + (v % active >= (active + 1) / 2 ? 1 : 0));
}

/* 0 = pushed, 1 = replaced a tail-jumping frame, 2 = count-only (overflow) */
static int push(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, struct xf_frame **out)
{
    *out = NULL;
    while (ctx->depth && ctx->stack[ctx->depth - 1].slot < slot)
        ctx->depth--;
    if (ctx->depth) {
        struct xf_frame *top = &ctx->stack[ctx->depth - 1];
        if (top->slot == slot) {
            if (*slot == xf_post_addr(top->site)) {
                uint64_t now = xf_rdtsc();
                if (top->start && now > top->start)
                    fold_duration(ctx->rows, top->site, now - top->start);
                top->site = site;
                top->start = 0;
                *slot = xf_post_addr(site);
                *out = top;
                return 1;
            }
            ctx->depth--;
        }
    }
    if (ctx->depth >= ctx->max_depth) {
        if (!ctx->overflow_warned) {
            ctx->overflow_warned = 1;
            xf_warn("shadow stack full, deeper calls are counted but not timed", NULL);
        }
        return 2;
    }
    struct xf_frame *f = &ctx->stack[ctx->depth++];
    f->site = site;
    f->real_ret = *slot;
    f->slot = slot;
    f->start = 0;
    *slot = xf_post_addr(site);
    *out = f;
    return 0;
}

static uint64_t pop(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, uint64_t now)
{
    uint32_t k = ctx->depth;
    while (k && ctx->stack[k - 1].slot != slot)
        k--;
    if (!k) {
        if (!ctx->depth) {
            xf_fatal("return through the shadow table with an empty shadow stack", NULL);
            __builtin_trap();
        }
        if (!ctx->mismatch_warned) {
            ctx->mismatch_warned = 1;
            xf_warn("shadow stack mismatch on return", xf_sites[site].symbol);
        }
        k = ctx->depth;
    } else if (k != ctx->depth && !ctx->mismatch_warned) {
        ctx->mismatch_warned = 1;
        xf_warn("dropping stale shadow frames", xf_sites[site].symbol);
    }
    struct xf_frame *f = &ctx->stack[k - 1];
    if (f->start && now > f->start)
        fold_duration(ctx->rows, f->site, now - f->start);
    ctx->depth = k - 1;
    return f->real_ret;
}

uint64_t xf_hot_enter(uint32_t site, uint64_t *slot)
{
    struct xf_ctx *ctx = xf_tls_ctx;
    uint64_t target = *xf_sites[site].target_ptr;
    struct xf_frame *f;
    ctx->busy = 1;
    push(ctx, site, slot, &f);
    ctx->busy = 0;
    if (f)
        f->start = xf_rdtsc();
    return target;
}

uint64_t xf_hot_exit(uint32_t site, uint64_t *after)
{
    uint64_t now = xf_rdtsc();
    struct xf_ctx *ctx = xf_tls_ctx;
    if (!ctx) {
        xf_fatal("return through the shadow table without a thread context", NULL);
        __builtin_trap();
    }
    uint8_t was = ctx->busy;
    ctx->busy = 1;
    uint64_t ret = pop(ctx, site, after - 1, now);
    ctx->busy = was;
    return ret;
}

int xf_shadow_enter(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, uint64_t target, uint64_t now)
{
    (void)target;
    struct xf_frame *f;
    int r = push(ctx, site, slot, &f);
    if (f)
        f->start = now;
    return r;
}

uint64_t xf_shadow_exit(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, uint64_t now)
{
    return pop(ctx, site, slot, now);
}

void xf_set_scale(uint64_t s) { scale = s ? s : 1; }

void xf_record(struct xf_ctx *ctx, uint32_t site, uint64_t duration)
{
    if (!ctx || ctx->busy)
        return;
    ctx->busy = 1;
    fold_duration(ctx->rows, site, duration);
    ctx->busy = 0;
}

/* ---- debug / test surface ---- */

XF_API int xflow_debug_codegen(uint32_t site, int kind, uint64_t rate, uint8_t *out, size_t n, uint8_t seg[4])
{
    if (!region || site >= XF_MAX_SITES)
        return -1;
    struct xf_site s;
    memset(&s, 0, sizeof s);
    s.id = site;
    s.kind = (uint8_t)kind;
    s.reloc_index = 7;
    s.code_addr = (uint64_t)(uintptr_t)(xf_code_base + (size_t)site * XF_ENTRY_SIZE);
    return gen(&s, rate ? rate : 1, out, n, seg, NULL, NULL);
}

/* A Dlsym-kind site that forwards to `target`; returns its id or -1. */
XF_API int xflow_test_make_site(uint64_t target, const char *symbol)
{
    pthread_mutex_lock(&xf_install_lock);
    struct xf_site *s = xf_site_alloc();
    int id = -1;
    if (s) {
        s->kind = XF_DLSYM;
        s->symbol = xf_strdup(symbol ? symbol : "test");
        s->key_addr = target;
        atomic_store(&s->resolved, target);
        s->target_ptr = (uint64_t *)&s->resolved;
        if (!xf_entry_publish(s))
            id = (int)s->id;
    }
    pthread_mutex_unlock(&xf_install_lock);
    return id;
}

XF_API uint64_t xflow_site_code(uint32_t site)
{
    return site < atomic_load(&xf_site_count) ? xf_sites[site].code_addr : 0;
}

XF_API uint64_t xflow_post_addr(uint32_t site)
{
    return site < atomic_load(&xf_site_count) ? xf_post_addr(site) : 0;
}

XF_API int xflow_test_enter(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, uint64_t now)
{
    return xf_shadow_enter(ctx, site, slot, 0, now);
}

XF_API uint64_t xflow_test_exit(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, uint64_t now)
{
    return xf_shadow_exit(ctx, site, slot, now);
}

XF_API uint32_t xflow_shadow_depth(struct xf_ctx *ctx) { return ctx ? ctx->depth : 0; }

XF_API uint64_t xflow_frame_slot(struct xf_ctx *ctx, uint32_t i)
{
    return ctx && i < ctx->depth ? (uint64_t)(uintptr_t)ctx->stack[i].slot : 0;
}
