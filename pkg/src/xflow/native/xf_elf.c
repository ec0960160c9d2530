/* Image discovery from /proc/self/maps and relocation planning from ELF files. */
#include "xflow.h"

#include <elf.h>
#include <errno.h>
#include <fcntl.h>
#include <stdlib.h>
#include <string.h>
#include <sys/auxv.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

struct xf_region {
    uint64_t start, end, offset, inode;
    int prot;
    const char *path; /* points into maps_buf, valid until next refresh */
};

static char *maps_buf;
static size_t maps_cap;
static struct xf_region *regions;
static size_t region_cap, region_n;

static struct xf_image images[XF_MAX_IMAGES];
static _Atomic int image_n;

static const char **linker_syms;
static size_t linker_sym_n;

static void *xf_grow(void *old, size_t old_sz, size_t new_sz)
{
    void *p = mmap(NULL, new_sz, PROT_READ | PROT_WRITE, MAP_PRIVATE | MAP_ANONYMOUS, -1, 0);
    if (p == MAP_FAILED)
        return NULL;
    if (old) {
        memcpy(p, old, old_sz);
        munmap(old, old_sz);
    }
    return p;
}

static uint64_t parse_hex(const char **pp)
{
    const char *p = *pp;
    uint64_t v = 0;
    for (;; p++) {
        int c = *p, d;
        if (c >= '0' && c <= '9') d = c - '0';
        else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
        else if (c >= 'A' && c <= 'F') d = c - 'A' + 10;
        else break;
        v = v * 16 + (uint64_t)d;
    }
    *pp = p;
    return v;
}

static uint64_t parse_dec(const char **pp)
{
    const char *p = *pp;
    uint64_t v = 0;
    while (*p >= '0' && *p <= '9')
        v = v * 10 + (uint64_t)(*p++ - '0');
    *pp = p;
    return v;
}

/* Re-read the memory-map description. Returns the region count or -1. */
int xf_maps_refresh(void)
{
    int fd = open("/proc/self/maps", O_RDONLY | O_CLOEXEC);
    if (fd < 0)
        return -1;
    if (!maps_buf) {
        maps_cap = 1 << 18;
        maps_buf = xf_grow(NULL, 0, maps_cap);
        if (!maps_buf) {
            close(fd);
            return -1;
        }
    }
    size_t len = 0;
    for (;;) {
        if (len + 4096 >= maps_cap) {
            char *nb = xf_grow(maps_buf, maps_cap, maps_cap * 2);
            if (!nb) {
                close(fd);
                return -1;
            }
            maps_buf = nb;
            maps_cap *= 2;
        }
        ssize_t r = read(fd, maps_buf + len, maps_cap - len - 1);
        if (r < 0 && errno == EINTR)
            continue;
        if (r <= 0)
            break;
        len += (size_t)r;
    }
    close(fd);
    maps_buf[len] = 0;

    region_n = 0;
    char *line = maps_buf;
    while (*line) {
        char *eol = strchr(line, '\n');
        if (eol)
            *eol = 0;
        if (region_n == region_cap) {
            size_t ncap = region_cap ? region_cap * 2 : 4096;
            struct xf_region *nr = xf_grow(regions, region_cap * sizeof *regions, ncap * sizeof *regions);
            if (!nr)
                return -1;
            regions = nr;
            region_cap = ncap;
        }
        const char *p = line;
        struct xf_region *r = &regions[region_n];
        r->start = parse_hex(&p);
        p++; /* '-' */
        r->end = parse_hex(&p);
        p++;
        r->prot = (p[0] == 'r' ? PROT_READ : 0) | (p[1] == 'w' ? PROT_WRITE : 0) |
                  (p[2] == 'x' ? PROT_EXEC : 0);
        p += 5;
        r->offset = parse_hex(&p);
        p++;
        while (*p && *p != ' ') p++; /* dev */
        p++;
        r->inode = parse_dec(&p);
        while (*p == ' ') p++;
        r->path = p;
        region_n++;
        if (!eol)
            break;
        line = eol + 1;
    }
    return (int)region_n;
}

static struct xf_region *region_find(uint64_t addr)
{
    size_t lo = 0, hi = region_n;
    while (lo < hi) {
        size_t mid = (lo + hi) / 2;
        if (addr < regions[mid].start)
            hi = mid;
        else if (addr >= regions[mid].end)
            lo = mid + 1;
        else
            return &regions[mid];
    }
    return NULL;
}

int xf_region_prot(uint64_t addr, int *prot)
{
    struct xf_region *r = region_find(addr);
    if (!r)
        return -1;
    *prot = r->prot;
    return 0;
}

int xf_classify(uint64_t addr)
{
    if (!addr)
        return 0;
    struct xf_region *r = region_find(addr);
    return r && (r->prot & PROT_EXEC) ? 1 : 0;
}

int xf_image_count(void) { return atomic_load_explicit(&image_n, memory_order_acquire); }

struct xf_image *xf_image_get(int id)
{
    return id >= 0 && id < xf_image_count() ? &images[id] : NULL;
}

int xf_image_of(uint64_t addr)
{
    /* newest first, so a library reloaded over an unloaded one wins */
    for (int i = xf_image_count() - 1; i >= 0; i--)
        if (addr >= images[i].lo && addr < images[i].hi)
            return i;
    return -1;
}

static int path_denied(const char *path)
{
    const char *p = xf_cfg.deny;
    while (*p) {
        const char *comma = strchr(p, ',');
        size_t n = comma ? (size_t)(comma - p) : strlen(p);
        if (n) {
            char sub[256];
            if (n >= sizeof sub)
                n = sizeof sub - 1;
            memcpy(sub, p, n);
            sub[n] = 0;
            if (strstr(path, sub))
                return 1;
        }
        if (!comma)
            break;
        p = comma + 1;
    }
    return 0;
}

/* Read-only view of an image file, validated against the mapped inode. */
struct xf_file {
    const uint8_t *data;
    size_t size;
    const Elf64_Ehdr *eh;
    const Elf64_Shdr *sh;
    const char *shstr;
};

static int file_open(const char *path, uint64_t inode, struct xf_file *f)
{
    memset(f, 0, sizeof *f);
    int fd = open(path, O_RDONLY | O_CLOEXEC);
    if (fd < 0)
        return -1;
    struct stat st;
    if (fstat(fd, &st) || (inode && (uint64_t)st.st_ino != inode) || st.st_size < (off_t)sizeof(Elf64_Ehdr)) {
        close(fd);
        return -1;
    }
    void *m = mmap(NULL, (size_t)st.st_size, PROT_READ, MAP_PRIVATE, fd, 0);
    close(fd);
    if (m == MAP_FAILED)
        return -1;
    f->data = m;
    f->size = (size_t)st.st_size;
    f->eh = m;
    const Elf64_Ehdr *eh = f->eh;
    if (memcmp(eh->e_ident, ELFMAG, SELFMAG) || eh->e_ident[EI_CLASS] != ELFCLASS64 ||
        eh->e_machine != EM_X86_64 || eh->e_shentsize != sizeof(Elf64_Shdr) ||
        eh->e_shoff + (uint64_t)eh->e_shnum * sizeof(Elf64_Shdr) > f->size || eh->e_shstrndx >= eh->e_shnum) {
        munmap(m, f->size);
        memset(f, 0, sizeof *f);
        return -1;
    }
    f->sh = (const Elf64_Shdr *)(f->data + eh->e_shoff);
    const Elf64_Shdr *ss = &f->sh[eh->e_shstrndx];
    if (ss->sh_offset + ss->sh_size > f->size) {
        munmap(m, f->size);
        memset(f, 0, sizeof *f);
        return -1;
    }
    f->shstr = (const char *)f->data + ss->sh_offset;
    return 0;
}

static void file_close(struct xf_file *f)
{
    if (f->data)
        munmap((void *)f->data, f->size);
    memset(f, 0, sizeof *f);
}

static const Elf64_Shdr *file_section(const struct xf_file *f, const char *name)
{
    for (int i = 0; i < f->eh->e_shnum; i++)
        if (f->sh[i].sh_name < f->size && !strcmp(f->shstr + f->sh[i].sh_name, name))
            return &f->sh[i];
    return NULL;
}

static const void *file_bytes(const struct xf_file *f, const Elf64_Shdr *s)
{
    if (!s || s->sh_type == SHT_NOBITS || s->sh_offset + s->sh_size > f->size)
        return NULL;
    return f->data + s->sh_offset;
}

static const char *const sec_names[XF_SEC_N] = {
    ".plt", ".plt.sec", ".got.plt", ".plt.got", ".got", ".rela.plt", ".rela.dyn", ".text"};

static void image_load_sections(struct xf_image *img, uint64_t inode)
{
    struct xf_file f;
    img->sections_ok = 0;
    if (img->path[0] != '/' || file_open(img->path, inode, &f))
        return;
    int ok = 1;
    for (int i = 0; i < XF_SEC_N; i++) {
        const Elf64_Shdr *s = file_section(&f, sec_names[i]);
        if (!s || !s->sh_addr) {
            img->sec[i].addr = img->sec[i].size = 0;
            continue;
        }
        img->sec[i].addr = img->base + s->sh_addr;
        img->sec[i].size = s->sh_size;
        if (img->sec[i].addr < img->lo || img->sec[i].addr + s->sh_size > img->hi)
            ok = 0;
    }
    const Elf64_Shdr *dyn = file_section(&f, ".dynamic");
    const Elf64_Dyn *d = file_bytes(&f, dyn);
    if (d) {
        for (size_t i = 0; i < dyn->sh_size / sizeof *d && d[i].d_tag != DT_NULL; i++) {
            if (d[i].d_tag == DT_BIND_NOW ||
                (d[i].d_tag == DT_FLAGS && (d[i].d_un.d_val & DF_BIND_NOW)) ||
                (d[i].d_tag == DT_FLAGS_1 && (d[i].d_un.d_val & DF_1_NOW)))
                img->bind_now = 1;
        }
    }
    img->sections_ok = (uint8_t)ok;
    file_close(&f);
}

static void load_linker_symbols(struct xf_image *img, uint64_t inode)
{
    struct xf_file f;
    if (linker_syms || file_open(img->path, inode, &f))
        return;
    const Elf64_Shdr *ds = file_section(&f, ".dynsym");
    const Elf64_Sym *syms = file_bytes(&f, ds);
    if (syms && ds->sh_link < f.eh->e_shnum) {
        const char *str = file_bytes(&f, &f.sh[ds->sh_link]);
        size_t n = ds->sh_size / sizeof *syms;
        size_t cap = n ? n : 1;
        linker_syms = xf_grow(NULL, 0, cap * sizeof *linker_syms);
        for (size_t i = 0; str && linker_syms && i < n; i++) {
            if (syms[i].st_shndx == SHN_UNDEF || !syms[i].st_name)
                continue;
            int t = ELF64_ST_TYPE(syms[i].st_info);
            if (t != STT_FUNC && t != STT_GNU_IFUNC)
                continue;
            linker_syms[linker_sym_n++] = xf_strdup(str + syms[i].st_name);
        }
    }
    file_close(&f);
}

/* Returns the number of images, including ones discovered earlier. */
int xf_enumerate_images(void)
{
    uint64_t at_phdr = getauxval(AT_PHDR);
    uint64_t at_base = getauxval(AT_BASE);
    uint64_t self = (uint64_t)(uintptr_t)&xf_enumerate_images;
    int n = xf_image_count();

    /* two passes so that the main executable is always image 0 */
    for (int pass = 0; pass < 2; pass++) {
        for (size_t i = 0; i < region_n; i++) {
            struct xf_region *r = &regions[i];
            if (r->offset != 0 || !r->path[0] || !(r->prot & PROT_READ))
                continue;
            if (r->end - r->start < sizeof(Elf64_Ehdr))
                continue;
            const Elf64_Ehdr *eh = (const Elf64_Ehdr *)(uintptr_t)r->start;
            if (memcmp(eh->e_ident, ELFMAG, SELFMAG) || eh->e_ident[EI_CLASS] != ELFCLASS64)
                continue;
            uint64_t hi = r->end;
            for (size_t j = i + 1; j < region_n && !strcmp(regions[j].path, r->path) && regions[j].offset; j++)
                hi = regions[j].end;
            int is_main = at_phdr >= r->start && at_phdr < hi;
            if ((pass == 0) != (is_main && n == 0))
                continue;
            if (pass == 1 && is_main && xf_image_count() == 1 && images[0].lo == r->start)
                continue;

            if (eh->e_phoff + (uint64_t)eh->e_phnum * sizeof(Elf64_Phdr) > r->end - r->start) {
                xf_warn("skipping image with unreadable program headers", r->path);
                continue;
            }
            const Elf64_Phdr *ph = (const Elf64_Phdr *)(uintptr_t)(r->start + eh->e_phoff);
            uint64_t first_vaddr = UINT64_MAX;
            int has_dynamic = 0;
            for (int k = 0; k < eh->e_phnum; k++) {
                if (ph[k].p_type == PT_LOAD && ph[k].p_vaddr < first_vaddr)
                    first_vaddr = ph[k].p_vaddr;
                if (ph[k].p_type == PT_DYNAMIC)
                    has_dynamic = 1;
            }
            if (first_vaddr == UINT64_MAX)
                continue;
            uint64_t base = r->start - (first_vaddr & ~(uint64_t)0xfff);

            int known = 0;
            int cur = xf_image_count();
            for (int k = 0; k < cur; k++)
                if (images[k].base == base && images[k].lo == r->start && !strcmp(images[k].path, r->path))
                    known = 1;
            if (known)
                continue;
            if (cur >= XF_MAX_IMAGES) {
                xf_warn("image table full", r->path);
                return cur;
            }
            struct xf_image *img = &images[cur];
            memset(img, 0, sizeof *img);
            img->id = cur;
            img->path = xf_strdup(r->path);
            img->base = base;
            img->lo = r->start;
            img->hi = hi;
            img->is_main = (uint8_t)is_main;
            img->is_linker = at_base && base == at_base;
            img->is_agent = self >= r->start && self < hi;
            img->denied = (uint8_t)(path_denied(r->path) || !has_dynamic);
            if (!img->denied)
                image_load_sections(img, r->inode);
            if (img->is_linker)
                load_linker_symbols(img, r->inode);
            atomic_store_explicit(&image_n, cur + 1, memory_order_release);
        }
    }
    return xf_image_count();
}

static const char *const deny_exact[] = {
    /* no-return */
    "exit", "_exit", "_Exit", "quick_exit", "abort", "pthread_exit", "thrd_exit",
    "longjmp", "_longjmp", "siglongjmp", "__longjmp_chk", "__stack_chk_fail", "__fortify_fail",
    "__chk_fail", "__assert_fail", "__assert_perror_fail", "__assert", "err", "errx", "verr",
    "verrx", "__libc_start_main", "__libc_start_call_main", "setcontext", "_ZSt9terminatev",
    "_ZSt10unexpectedv", "__cxa_pure_virtual", "__cxa_deleted_virtual", "__cxa_bad_cast",
    "__cxa_bad_typeid", "__cxa_call_unexpected", "__cxa_call_terminate",
    /* depend on their own return address or stack frame */
    "setjmp", "_setjmp", "__sigsetjmp", "sigsetjmp", "vfork", "__vfork", "getcontext",
    "swapcontext", "makecontext", "__tls_get_addr", "__builtin_return_address",
};

int xf_symbol_denied(const char *name)
{
    if (!name || !*name)
        return 1;
    for (size_t i = 0; i < sizeof deny_exact / sizeof deny_exact[0]; i++)
        if (!strcmp(name, deny_exact[i]))
            return 1;
    if (!strncmp(name, "_Unwind_", 8) || !strncmp(name, "xflow_", 6) ||
        !strncmp(name, "__cxa_throw", 11) || !strncmp(name, "__cxa_rethrow", 13) ||
        !strncmp(name, "__cxa_end_catch", 15) || !strncmp(name, "__cxa_begin_catch", 17))
        return 1;
    if (!strncmp(name, "_ZSt", 4) && strstr(name, "__throw_"))
        return 1;
    if (!strncmp(name, "_ZN9__gnu_cxx", 13) && strstr(name, "__throw_"))
        return 1;
    for (size_t i = 0; i < linker_sym_n; i++)
        if (!strcmp(name, linker_syms[i]))
            return 1;
    return 0;
}

struct plt_slot { uint64_t cell, entry; };

static int slot_cmp(const void *a, const void *b)
{
    const struct plt_slot *x = a, *y = b;
    return x->cell < y->cell ? -1 : x->cell > y->cell;
}

/* Decode "[endbr64] [bnd] jmp *disp32(%rip)" at the start of a 16-byte slot. */
static uint64_t decode_plt_slot(const uint8_t *p, uint64_t addr)
{
    size_t i = 0;
    if (p[0] == 0xf3 && p[1] == 0x0f && p[2] == 0x1e && p[3] == 0xfa)
        i = 4;
    if (p[i] == 0xf2)
        i++;
    if (p[i] != 0xff || p[i + 1] != 0x25)
        return 0;
    int32_t disp;
    memcpy(&disp, p + i + 2, 4);
    return addr + i + 6 + (int64_t)disp;
}

int xf_parse_relocations(struct xf_image *img, xf_cand_fn fn, void *arg)
{
    struct xf_file f;
    struct xf_region *r = region_find(img->lo);
    if (!img->sections_ok || file_open(img->path, r ? r->inode : 0, &f)) {
        xf_warn("cannot read relocation tables", img->path);
        return -1;
    }
    int produced = 0;
    const Elf64_Shdr *rp = file_section(&f, ".rela.plt");
    const Elf64_Shdr *rd = file_section(&f, ".rela.dyn");
    const Elf64_Shdr *ds = file_section(&f, ".dynsym");
    const Elf64_Sym *syms = file_bytes(&f, ds);
    const char *strs = syms && ds->sh_link < f.eh->e_shnum ? file_bytes(&f, &f.sh[ds->sh_link]) : NULL;
    size_t nsyms = syms ? ds->sh_size / sizeof *syms : 0;
    size_t strsz = strs ? f.sh[ds->sh_link].sh_size : 0;
    if ((rp || rd) && (!syms || !strs)) {
        xf_warn("malformed relocation tables", img->path);
        file_close(&f);
        return -1;
    }

    /* map GOT cells to PLT slots */
    struct plt_slot *slots = NULL;
    size_t nslots = 0, slots_bytes = 0;
    const struct xf_section *ps = img->sec[XF_SEC_PLT_SEC].size ? &img->sec[XF_SEC_PLT_SEC] : &img->sec[XF_SEC_PLT];
    if (rp && ps->size >= 16) {
        size_t first = ps == &img->sec[XF_SEC_PLT] ? 1 : 0;
        size_t total = ps->size / 16;
        slots_bytes = (total + 1) * sizeof *slots;
        slots = xf_grow(NULL, 0, slots_bytes);
        for (size_t i = first; slots && i < total; i++) {
            uint64_t a = ps->addr + i * 16;
            uint64_t cell = decode_plt_slot((const uint8_t *)(uintptr_t)a, a);
            if (cell) {
                slots[nslots].cell = cell;
                slots[nslots].entry = a;
                nslots++;
            }
        }
        if (slots)
            qsort(slots, nslots, sizeof *slots, slot_cmp);
    }

    if (rp) {
        const Elf64_Rela *rel = file_bytes(&f, rp);
        size_t n = rel ? rp->sh_size / sizeof *rel : 0;
        if (!rel || rp->sh_entsize != sizeof *rel) {
            xf_warn("malformed .rela.plt", img->path);
            n = 0;
        }
        for (size_t i = 0; i < n; i++) {
            if (ELF64_R_TYPE(rel[i].r_info) != R_X86_64_JUMP_SLOT)
                continue;
            size_t si = ELF64_R_SYM(rel[i].r_info);
            if (!si || si >= nsyms || syms[si].st_name >= strsz)
                continue;
            struct xf_cand c = {0};
            c.symbol = strs + syms[si].st_name;
            c.cell = img->base + rel[i].r_offset;
            c.reloc_index = (uint32_t)i;
            c.sym_type = (uint8_t)ELF64_ST_TYPE(syms[si].st_info);
            c.kind = (img->bind_now || xf_cfg.bind_now_env) ? XF_PLT_EAGER : XF_PLT_LAZY;
            struct plt_slot key = {c.cell, 0};
            struct plt_slot *hit = slots ? bsearch(&key, slots, nslots, sizeof *slots, slot_cmp) : NULL;
            if (!hit) {
                xf_warn("no PLT slot for relocation", c.symbol);
                continue;
            }
            c.plt_entry = hit->entry;
            fn(img, &c, arg);
            produced++;
        }
    }
    if (slots)
        munmap(slots, slots_bytes);

    if (rd) {
        const Elf64_Rela *rel = file_bytes(&f, rd);
        size_t n = rel ? rd->sh_size / sizeof *rel : 0;
        if (!rel || rd->sh_entsize != sizeof *rel) {
            xf_warn("malformed .rela.dyn", img->path);
            n = 0;
        }
        const struct xf_section *got = &img->sec[XF_SEC_GOT];
        for (size_t i = 0; i < n; i++) {
            uint32_t t = ELF64_R_TYPE(rel[i].r_info);
            if (t != R_X86_64_GLOB_DAT && t != R_X86_64_64)
                continue;
            size_t si = ELF64_R_SYM(rel[i].r_info);
            if (!si || si >= nsyms || syms[si].st_name >= strsz)
                continue;
            uint64_t cell = img->base + rel[i].r_offset;
            if (cell < got->addr || cell + 8 > got->addr + got->size)
                continue;
            uint64_t value = *(const uint64_t *)(uintptr_t)cell;
            if (!xf_classify(value) && !xf_in_shadow(value))
                continue;
            struct xf_cand c = {0};
            c.symbol = strs + syms[si].st_name;
            c.cell = cell;
            c.reloc_index = (uint32_t)i;
            c.kind = XF_DYN_GOT;
            c.sym_type = (uint8_t)ELF64_ST_TYPE(syms[si].st_info);
            if (c.sym_type == STT_OBJECT || c.sym_type == STT_TLS || c.sym_type == STT_COMMON)
                continue;
            fn(img, &c, arg);
            produced++;
        }
    }
    file_close(&f);
    return produced;
}

/* ---- debug / test surface ---- */

extern pthread_mutex_t xf_install_lock;

static void buf_put(char *buf, size_t n, size_t *pos, const char *s)
{
    while (*s) {
        if (*pos + 1 < n)
            buf[*pos] = *s;
        (*pos)++;
        s++;
    }
    if (n)
        buf[*pos < n ? *pos : n - 1] = 0;
}

static void buf_u64(char *buf, size_t n, size_t *pos, uint64_t v, int hex)
{
    char tmp[24];
    int k = 0;
    do {
        unsigned d = (unsigned)(hex ? v % 16 : v % 10);
        tmp[k++] = (char)(d < 10 ? '0' + d : 'a' + d - 10);
        v = hex ? v / 16 : v / 10;
    } while (v);
    char out[26];
    int o = 0;
    if (hex) {
        out[o++] = '0';
        out[o++] = 'x';
    }
    while (k)
        out[o++] = tmp[--k];
    out[o] = 0;
    buf_put(buf, n, pos, out);
}

XF_API int xflow_classify(uint64_t addr)
{
    pthread_mutex_lock(&xf_install_lock);
    if (!region_find(addr))
        xf_maps_refresh();
    int r = xf_classify(addr);
    pthread_mutex_unlock(&xf_install_lock);
    return r;
}

/* TSV: id base lo hi is_main is_agent is_linker denied sections_ok path */
XF_API size_t xflow_debug_images(char *buf, size_t n)
{
    size_t pos = 0;
    pthread_mutex_lock(&xf_install_lock);
    if (xf_maps_refresh() >= 0)
        xf_enumerate_images();
    int cnt = xf_image_count();
    for (int i = 0; i < cnt; i++) {
        struct xf_image *img = &images[i];
        buf_u64(buf, n, &pos, (uint64_t)img->id, 0);
        uint64_t vals[] = {img->base, img->lo, img->hi};
        for (int k = 0; k < 3; k++) {
            buf_put(buf, n, &pos, "\t");
            buf_u64(buf, n, &pos, vals[k], 1);
        }
        uint64_t flags[] = {img->is_main, img->is_agent, img->is_linker, img->denied, img->sections_ok};
        for (int k = 0; k < 5; k++) {
            buf_put(buf, n, &pos, "\t");
            buf_u64(buf, n, &pos, flags[k], 0);
        }
        buf_put(buf, n, &pos, "\t");
        buf_put(buf, n, &pos, img->path);
        buf_put(buf, n, &pos, "\n");
    }
    pthread_mutex_unlock(&xf_install_lock);
    return pos;
}

/* TSV: sections of one image: role addr size */
XF_API size_t xflow_debug_sections(int id, char *buf, size_t n)
{
    size_t pos = 0;
    struct xf_image *img = xf_image_get(id);
    if (!img)
        return 0;
    static const char *const roles[XF_SEC_N] = {"plt", "plt_sec", "got_plt", "plt_got", "got",
                                                "rela_plt", "rela_dyn", "text"};
    for (int i = 0; i < XF_SEC_N; i++) {
        if (!img->sec[i].addr)
            continue;
        buf_put(buf, n, &pos, roles[i]);
        buf_put(buf, n, &pos, "\t");
        buf_u64(buf, n, &pos, img->sec[i].addr, 1);
        buf_put(buf, n, &pos, "\t");
        buf_u64(buf, n, &pos, img->sec[i].size, 1);
        buf_put(buf, n, &pos, "\n");
    }
    return pos;
}

struct dbg_acc { char *buf; size_t n, pos; };

static const char *const kind_names[] = {"plt-lazy", "plt-eager", "dyn-got", "dlsym"};

static void dbg_cand(struct xf_image *img, const struct xf_cand *c, void *arg)
{
    (void)img;
    struct dbg_acc *a = arg;
    buf_put(a->buf, a->n, &a->pos, c->symbol);
    buf_put(a->buf, a->n, &a->pos, "\t");
    buf_put(a->buf, a->n, &a->pos, kind_names[c->kind]);
    buf_put(a->buf, a->n, &a->pos, "\t");
    buf_u64(a->buf, a->n, &a->pos, c->cell, 1);
    buf_put(a->buf, a->n, &a->pos, "\t");
    buf_u64(a->buf, a->n, &a->pos, c->plt_entry, 1);
    buf_put(a->buf, a->n, &a->pos, "\t");
    buf_u64(a->buf, a->n, &a->pos, (uint64_t)xf_symbol_denied(c->symbol), 0);
    buf_put(a->buf, a->n, &a->pos, "\n");
}

/* TSV: symbol kind cell plt_entry denied -- the un-filtered site plan of one image */
XF_API long xflow_debug_sites(int id, char *buf, size_t n)
{
    struct dbg_acc a = {buf, n, 0};
    if (n)
        buf[0] = 0;
    pthread_mutex_lock(&xf_install_lock);
    struct xf_image *img = xf_image_get(id);
    int r = img ? xf_parse_relocations(img, dbg_cand, &a) : -1;
    pthread_mutex_unlock(&xf_install_lock);
    return r < 0 ? -1 : (long)a.pos;
}

XF_API int xflow_symbol_denied(const char *name) { return xf_symbol_denied(name); }
