/* Interceptor: binds call sites (PLT slots, GOT cells, dlsym results) to shadow entries. */
#include "xflow.h"

#include <dlfcn.h>
#include <link.h>
#include <string.h>
#include <sys/mman.h>

pthread_mutex_t xf_install_lock = PTHREAD_MUTEX_INITIALIZER;

static struct xf_patch *patches;
static size_t patch_n, patch_cap;
static int exhausted_warned;

/* dlsym sites keyed by (real address, caller image) */
#define XF_DLSYM_BUCKETS 16384u
static int32_t dlsym_index[XF_DLSYM_BUCKETS]; /* site id + 1 */

static uint64_t special_real[4];

uint64_t xf_special_target(int special)
{
    switch (special) {
    case XF_SP_DLOPEN: return (uint64_t)(uintptr_t)xf_wrapped_dlopen;
    case XF_SP_DLSYM: return (uint64_t)(uintptr_t)xf_wrapped_dlsym;
    case XF_SP_PTHREAD_CREATE: return (uint64_t)(uintptr_t)xf_wrapped_pthread_create;
    }
    return 0;
}

static int special_of(const char *name)
{
    if (!strcmp(name, "dlopen"))
        return XF_SP_DLOPEN;
    if (!strcmp(name, "dlsym"))
        return XF_SP_DLSYM;
    if (!strcmp(name, "pthread_create"))
        return XF_SP_PTHREAD_CREATE;
    return XF_SP_NONE;
}

static void init_special_real(void)
{
    if (special_real[XF_SP_DLOPEN])
        return;
    special_real[XF_SP_DLOPEN] = (uint64_t)(uintptr_t)dlopen;
    special_real[XF_SP_DLSYM] = (uint64_t)(uintptr_t)dlsym;
    special_real[XF_SP_PTHREAD_CREATE] = (uint64_t)(uintptr_t)pthread_create;
}

static struct xf_patch *patch_new(void)
{
    if (patch_n == patch_cap) {
        size_t ncap = patch_cap ? patch_cap * 2 : 4096;
        void *p = mmap(NULL, ncap * sizeof *patches, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
        if (p == MAP_FAILED)
            return NULL;
        if (patches) {
            memcpy(p, patches, patch_n * sizeof *patches);
            munmap(patches, patch_cap * sizeof *patches);
        }
        patches = p;
        patch_cap = ncap;
    }
    struct xf_patch *r = &patches[patch_n++];
    memset(r, 0, sizeof *r);
    return r;
}

/* Copy bytes into mapped image memory, adding write permission only for the write. */
static int write_protected(uint64_t addr, const void *bytes, size_t n)
{
    int prot, prot_end;
    if (xf_region_prot(addr, &prot) || xf_region_prot(addr + n - 1, &prot_end) || prot != prot_end)
        return -1;
    uintptr_t page = (uintptr_t)addr & ~(uintptr_t)4095;
    uintptr_t end = ((uintptr_t)addr + n + 4095) & ~(uintptr_t)4095;
    int widen = !(prot & PROT_WRITE);
    if (widen && mprotect((void *)page, end - page, prot | PROT_WRITE))
        return -1;
    if (n == 8 && !(addr & 7))
        __atomic_store_n((uint64_t *)(uintptr_t)addr, *(const uint64_t *)bytes, __ATOMIC_RELEASE);
    else
        memcpy((void *)(uintptr_t)addr, bytes, n);
    if (widen)
        mprotect((void *)page, end - page, prot);
    return 0;
}

static int record_patch(uint32_t site, uint64_t addr, const void *bytes, size_t n, int is_cell)
{
    struct xf_patch *p = patch_new();
    if (!p)
        return -1;
    p->site = site;
    p->is_cell = (uint8_t)is_cell;
    p->len = (uint8_t)n;
    p->addr = addr;
    memcpy(p->orig, (const void *)(uintptr_t)addr, n);
    if (write_protected(addr, bytes, n)) {
        patch_n--;
        return -1;
    }
    p->patched = 1;
    return 0;
}

static int in_any_plt(uint64_t a)
{
    int n = xf_image_count();
    for (int i = 0; i < n; i++) {
        struct xf_image *img = xf_image_get(i);
        for (int k = XF_SEC_PLT; k <= XF_SEC_PLT_GOT; k++) {
            if (k == XF_SEC_GOT_PLT)
                continue;
            if (img->sec[k].size && a >= img->sec[k].addr && a < img->sec[k].addr + img->sec[k].size)
                return 1;
        }
    }
    return 0;
}

/* Target addresses that must not be redirected. */
static int target_excluded(uint64_t a)
{
    int id = xf_image_of(a);
    if (id < 0)
        return 0;
    struct xf_image *img = xf_image_get(id);
    return img->is_agent || img->is_linker;
}

static struct xf_site *new_site(struct xf_image *img, const struct xf_cand *c)
{
    struct xf_site *s = xf_site_alloc();
    if (!s) {
        if (!exhausted_warned) {
            exhausted_warned = 1;
            xf_warn("shadow table full, further call sites are not intercepted", c->symbol);
        }
        return NULL;
    }
    s->symbol = xf_strdup(c->symbol);
    s->caller_image = img ? img->id : -1;
    s->kind = c->kind;
    s->reloc_index = c->reloc_index;
    s->got_cell = c->cell;
    s->plt_entry = c->plt_entry;
    s->special = (uint8_t)special_of(c->symbol);
    if (s->special) {
        init_special_real();
        s->key_addr = special_real[s->special];
        atomic_store(&s->resolved, xf_special_target(s->special));
        s->target_ptr = (uint64_t *)&s->resolved;
    }
    return s;
}

struct hook_stats { int hooked, skipped; };

static void hook_candidate(struct xf_image *img, const struct xf_cand *c, void *arg)
{
    struct hook_stats *st = arg;
    if (xf_symbol_denied(c->symbol)) {
        st->skipped++;
        return;
    }
    uint64_t v = *(const uint64_t *)(uintptr_t)c->cell;
    if (c->kind == XF_DYN_GOT) {
        if (xf_in_shadow(v) || !xf_classify(v) || target_excluded(v) || in_any_plt(v)) {
            st->skipped++;
            return;
        }
        struct xf_site *s = new_site(img, c);
        if (!s)
            return;
        if (!s->special) {
            atomic_store(&s->resolved, v);
            s->key_addr = v;
            s->target_ptr = (uint64_t *)&s->resolved;
        }
        if (xf_entry_publish(s) || record_patch(s->id, c->cell, &s->code_addr, 8, 1)) {
            xf_warn("cannot patch GOT cell", c->symbol);
            st->skipped++;
            return;
        }
        st->hooked++;
        return;
    }

    const struct xf_section *plt = &img->sec[XF_SEC_PLT];
    int unresolved = plt->size && v >= plt->addr && v < plt->addr + plt->size;
    if (!unresolved && (!xf_classify(v) || target_excluded(v))) {
        st->skipped++;
        return;
    }
    if (unresolved && !plt->addr) {
        st->skipped++;
        return;
    }
    struct xf_site *s = new_site(img, c);
    if (!s)
        return;
    s->plt0 = plt->addr;
    if (unresolved)
        s->kind = XF_PLT_LAZY;
    if (!s->special)
        s->target_ptr = (uint64_t *)(uintptr_t)c->cell;
    if (xf_entry_publish(s)) {
        xf_warn("cannot generate entry", c->symbol);
        return;
    }
    /* movabs $entry,%r11 ; jmp *%r11 ; int3 padding */
    uint8_t slot[16];
    memset(slot, 0xcc, sizeof slot);
    slot[0] = 0x49;
    slot[1] = 0xbb;
    memcpy(slot + 2, &s->code_addr, 8);
    slot[10] = 0x41;
    slot[11] = 0xff;
    slot[12] = 0xe3;
    if (unresolved && s->stub_addr && !s->special &&
        record_patch(s->id, c->cell, &s->stub_addr, 8, 1)) {
        xf_warn("cannot redirect lazy GOT cell", c->symbol);
        st->skipped++;
        return;
    }
    if (record_patch(s->id, c->plt_entry, slot, sizeof slot, 0)) {
        xf_warn("cannot patch PLT slot", c->symbol);
        st->skipped++;
        return;
    }
    st->hooked++;
}

int xf_hook_image(struct xf_image *img)
{
    if (img->hooked || img->denied || img->is_agent || img->is_linker)
        return 0;
    img->hooked = 1;
    if (!img->sections_ok) {
        xf_warn("image sections outside its mapping, not instrumented", img->path);
        return 0;
    }
    struct hook_stats st = {0, 0};
    if (xf_parse_relocations(img, hook_candidate, &st) < 0)
        return -1;
    return st.hooked;
}

int xf_hook_all(void)
{
    int total = 0;
    int n = xf_image_count();
    for (int i = 0; i < n; i++) {
        int r = xf_hook_image(xf_image_get(i));
        if (r > 0)
            total += r;
    }
    return total;
}

int xf_uninstall_all(void)
{
    int restored = 0;
    for (size_t i = patch_n; i-- > 0;) {
        struct xf_patch *p = &patches[i];
        if (!p->patched)
            continue;
        if (!write_protected(p->addr, p->orig, p->len)) {
            p->patched = 0;
            restored++;
        }
    }
    return restored;
}

/* ---- wrappers reached through special sites ---- */

void *xf_wrapped_dlopen(const char *path, int flags)
{
    void *h = dlopen(path, flags);
    if (h && xf_active) {
        pthread_mutex_lock(&xf_install_lock);
        if (xf_maps_refresh() >= 0) {
            xf_enumerate_images();
            xf_hook_all();
        }
        pthread_mutex_unlock(&xf_install_lock);
    }
    return h;
}

/* Image the return address belongs to; shadow-table addresses map back to the site's caller. */
static int caller_of(uint64_t ra)
{
    if (xf_in_shadow(ra)) {
        uint32_t id = (uint32_t)((ra - (uint64_t)(uintptr_t)xf_code_base) / XF_ENTRY_SIZE);
        return id < atomic_load(&xf_site_count) ? xf_sites[id].caller_image : -1;
    }
    return xf_image_of(ra);
}

/* RTLD_NEXT relative to the original caller rather than to this wrapper. */
static void *dlsym_next(int caller, const char *name)
{
    struct xf_image *img = xf_image_get(caller);
    if (!img)
        return NULL;
    Dl_info info;
    struct link_map *lm = NULL;
    if (!dladdr1((void *)(uintptr_t)img->lo, &info, (void **)&lm, RTLD_DL_LINKMAP) || !lm)
        return NULL;
    for (struct link_map *l = lm->l_next; l; l = l->l_next) {
        void *r = dlsym(l, name);
        Dl_info ri;
        if (r && dladdr(r, &ri) && ri.dli_fbase == (void *)l->l_addr)
            return r;
        if (r && dladdr(r, &ri) && l->l_name && ri.dli_fname && !strcmp(ri.dli_fname, l->l_name))
            return r;
    }
    return NULL;
}

void *xf_wrapped_dlsym(void *handle, const char *name)
{
    uint64_t ra = (uint64_t)(uintptr_t)__builtin_return_address(0);
    if (!xf_active)
        return dlsym(handle, name);
    int caller = caller_of(ra);
    void *r = handle == RTLD_NEXT ? dlsym_next(caller, name) : dlsym(handle, name);
    if (!r || !name || xf_symbol_denied(name))
        return r;
    uint64_t a = (uint64_t)(uintptr_t)r;

    pthread_mutex_lock(&xf_install_lock);
    int prot;
    if (xf_region_prot(a, &prot) && xf_maps_refresh() >= 0)
        xf_enumerate_images();
    void *out = r;
    if (!xf_classify(a) || xf_in_shadow(a) || target_excluded(a))
        goto done;
    uint64_t key = a ^ ((uint64_t)(uint32_t)caller * 0x9e3779b97f4a7c15ull);
    uint32_t b = (uint32_t)((key >> 4) ^ (key >> 20)) & (XF_DLSYM_BUCKETS - 1);
    for (uint32_t probe = 0; probe < XF_DLSYM_BUCKETS; probe++, b = (b + 1) & (XF_DLSYM_BUCKETS - 1)) {
        int32_t v = dlsym_index[b];
        if (!v)
            break;
        struct xf_site *s = &xf_sites[v - 1];
        if (s->key_addr == a && s->caller_image == caller) {
            out = (void *)(uintptr_t)s->code_addr;
            goto done;
        }
    }
    struct xf_cand c = {0};
    c.symbol = name;
    c.kind = XF_DLSYM;
    struct xf_site *s = new_site(xf_image_get(caller), &c);
    if (!s)
        goto done;
    s->caller_image = caller;
    if (!s->special) {
        s->key_addr = a;
        atomic_store(&s->resolved, a);
        s->target_ptr = (uint64_t *)&s->resolved;
    } else {
        s->key_addr = a;
    }
    if (xf_entry_publish(s)) {
        xf_warn("cannot generate entry", name);
        goto done;
    }
    if (!dlsym_index[b])
        dlsym_index[b] = (int32_t)s->id + 1;
    out = (void *)(uintptr_t)s->code_addr;
done:
    pthread_mutex_unlock(&xf_install_lock);
    return out;
}

/* ---- debug / test surface ---- */

XF_API int xflow_uninstall(void)
{
    pthread_mutex_lock(&xf_install_lock);
    int r = xf_uninstall_all();
    pthread_mutex_unlock(&xf_install_lock);
    return r;
}

/* out: resolver entries, kind, site id, caller image id. Returns 0 if found. */
XF_API int xflow_site_stat(const char *caller_substr, const char *symbol, uint64_t out[4])
{
    uint32_t n = atomic_load(&xf_site_count);
    for (uint32_t i = 0; i < n; i++) {
        struct xf_site *s = &xf_sites[i];
        struct xf_image *img = xf_image_get(s->caller_image);
        if (!s->symbol || strcmp(s->symbol, symbol) || !img || !strstr(img->path, caller_substr))
            continue;
        out[0] = atomic_load(&s->resolve_count);
        out[1] = s->kind;
        out[2] = s->id;
        out[3] = (uint64_t)s->caller_image;
        return 0;
    }
    return -1;
}

XF_API int xflow_site_count(void) { return (int)atomic_load(&xf_site_count); }

XF_API size_t xflow_patch_count(void) { return patch_n; }
