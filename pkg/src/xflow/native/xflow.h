/* Shared declarations for the xflow in-process agent (x86-64 Linux only). */
#ifndef XFLOW_H
#define XFLOW_H

#ifndef _GNU_SOURCE
#define _GNU_SOURCE
#endif
#include <pthread.h>
#include <stdatomic.h>
#include <stddef.h>
#include <stdint.h>

#if !defined(__x86_64__) || !defined(__linux__)
#error "xflow agent: only x86-64 Linux targets are supported"
#endif

#define XF_API __attribute__((visibility("default")))
#define XF_HIDDEN __attribute__((visibility("hidden")))

#define XF_MAX_SITES 65536u
#define XF_MAX_IMAGES 1024
#define XF_ENTRY_SIZE 160u   /* per-entry code budget */
#define XF_SIDE_SIZE 128u    /* per-entry side record */
#define XF_ROW_WORDS 5u      /* count, timed, raw, attributed, gate */
#define XF_DEFAULT_DEPTH 4096u

enum xf_kind { XF_PLT_LAZY = 0, XF_PLT_EAGER = 1, XF_DYN_GOT = 2, XF_DLSYM = 3 };

enum xf_sec {
    XF_SEC_PLT, XF_SEC_PLT_SEC, XF_SEC_GOT_PLT, XF_SEC_PLT_GOT, XF_SEC_GOT,
    XF_SEC_RELA_PLT, XF_SEC_RELA_DYN, XF_SEC_TEXT, XF_SEC_N
};

enum xf_special { XF_SP_NONE = 0, XF_SP_DLOPEN, XF_SP_DLSYM, XF_SP_PTHREAD_CREATE };

struct xf_section { uint64_t addr, size; };

struct xf_image {
    int id;
    const char *path;
    uint64_t base, lo, hi;
    struct xf_section sec[XF_SEC_N];
    uint8_t is_agent, is_linker, is_main, denied, hooked, bind_now, sections_ok;
};

/* Side record; the generated code addresses the first words RIP-relative. */
struct xf_site {
    uint64_t *target_ptr;       /* +0  cell the direct path jumps through */
    _Atomic uint64_t resolved;  /* +8  real address, 0 while unresolved */
    uint64_t plt0;              /* +16 lazy resolver entry of the image */
    _Atomic uint64_t resolve_count; /* +24 resolver stub entries */
    uint64_t got_cell;
    uint64_t plt_entry;
    uint64_t stub_addr;
    uint64_t code_addr;
    const char *symbol;
    uint64_t key_addr;          /* dlsym: real address used as key */
    uint32_t id;
    int32_t caller_image;
    uint32_t reloc_index;
    uint32_t code_len;
    uint8_t kind;
    uint8_t special;
    uint8_t seg[4];             /* A, B, C, D byte lengths */
    uint16_t post_off;
};
_Static_assert(sizeof(struct xf_site) <= XF_SIDE_SIZE, "side record too large");

struct xf_frame {
    uint32_t site;
    uint64_t real_ret;
    uint64_t *slot;
    uint64_t start;
};

enum { XF_CTX_LIVE = 0, XF_CTX_PERSISTING = 1, XF_CTX_DONE = 2 };

/* Per-thread context. The generated code reads busy at offset 0 and rows at offset 8. */
struct xf_ctx {
    uint8_t busy;
    uint8_t overflow_warned;
    uint8_t mismatch_warned;
    uint8_t standalone;
    uint32_t ordinal;
    uint64_t *rows;
    struct xf_frame *stack;
    uint32_t depth, max_depth;
    uint64_t group_tag;
    uint64_t start_cycles;
    uint64_t end_cycles;
    _Atomic int state;
    uint32_t snapshot_gen;
    struct xf_ctx *next;
};
_Static_assert(offsetof(struct xf_ctx, busy) == 0, "layout");
_Static_assert(offsetof(struct xf_ctx, rows) == 8, "layout");

struct xf_config {
    char out_dir[1024];
    uint64_t timing_rate;
    int dump_signal;
    char deny[1024];
    uint32_t shadow_depth;
    int bind_now_env;
};

struct xf_patch {
    uint32_t site;
    uint8_t is_cell;
    uint8_t len;
    uint8_t patched;
    uint64_t addr;
    uint8_t orig[16];
};

/* globals (xf_main.c) */
extern struct xf_config xf_cfg;
extern int xf_active;          /* agent installed in this process */
extern uint64_t xf_hz;

/* diagnostics */
void xf_warn(const char *msg, const char *detail);
void xf_fatal(const char *msg, const char *detail);

/* arena for strings */
const char *xf_strdup(const char *s);

/* elf_inspector (xf_elf.c) */
int xf_maps_refresh(void);
int xf_enumerate_images(void);
int xf_image_count(void);
struct xf_image *xf_image_get(int id);
int xf_image_of(uint64_t addr);
int xf_classify(uint64_t addr);   /* 1 = function (executable), 0 = data */
int xf_region_prot(uint64_t addr, int *prot);
int xf_symbol_denied(const char *name);

struct xf_cand {
    const char *symbol;
    uint64_t cell;
    uint64_t plt_entry;
    uint32_t reloc_index;
    uint8_t kind;
    uint8_t sym_type;
};
typedef void (*xf_cand_fn)(struct xf_image *img, const struct xf_cand *c, void *arg);
int xf_parse_relocations(struct xf_image *img, xf_cand_fn fn, void *arg);

/* shadow_table (xf_shadow.c) */
extern uint8_t *xf_code_base;
extern struct xf_site *xf_sites;
extern _Atomic uint32_t xf_site_count;
int xf_shadow_init(void);
struct xf_site *xf_site_alloc(void);
int xf_entry_generate(struct xf_site *s, uint8_t *out, size_t cap);
int xf_entry_publish(struct xf_site *s);
int xf_in_shadow(uint64_t addr);
uint64_t xf_post_addr(uint32_t site);
int xf_shadow_enter(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, uint64_t target, uint64_t now);
uint64_t xf_shadow_exit(struct xf_ctx *ctx, uint32_t site, uint64_t *slot, uint64_t now);
void xf_set_scale(uint64_t s);
void xf_record(struct xf_ctx *ctx, uint32_t site, uint64_t duration);

/* tracer (xf_tracer.c) */
extern __thread struct xf_ctx *xf_tls_ctx __attribute__((tls_model("initial-exec")));
extern _Atomic int xf_active_threads;
uint64_t xf_rdtsc(void);
uint64_t xf_calibrate(uint32_t ms);
struct xf_ctx *xf_ctx_create(uint64_t group_tag, int standalone);
void xf_ctx_release(struct xf_ctx *ctx);
struct xf_ctx *xf_ctx_list(void);
int xf_wrapped_pthread_create(pthread_t *t, const pthread_attr_t *attr, void *(*fn)(void *), void *arg);
void xf_persist_all(void);
void xf_tracer_atfork_child(void);

/* data_folder (xf_folder.c) */
void xf_fold(uint64_t *rows, uint32_t site, uint64_t duration, uint64_t active,
             uint64_t scale, int has_duration);
int xf_persist(struct xf_ctx *ctx, const char *dir, const char *suffix, char *out_path, size_t n);
int xf_install_dump_signal(int sig);
int xf_parse_signal(const char *s);

/* interceptor (xf_intercept.c) */
extern pthread_mutex_t xf_install_lock;
int xf_hook_image(struct xf_image *img);
int xf_hook_all(void);
void *xf_wrapped_dlopen(const char *path, int flags);
void *xf_wrapped_dlsym(void *handle, const char *name);
uint64_t xf_special_target(int special);
int xf_uninstall_all(void);

#endif
