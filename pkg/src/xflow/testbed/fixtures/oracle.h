/* Append-only event log, enabled with XFLOW_ORACLE=1. Independent of the profiler. */
#ifndef FX_ORACLE_H
#define FX_ORACLE_H
#ifndef _GNU_SOURCE
#define _GNU_SOURCE
#endif
#include <fcntl.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/syscall.h>
#include <unistd.h>

#ifndef FX_IMAGE
#error "define FX_IMAGE before including oracle.h"
#endif

static int fx_oracle_state = -1; /* -1 unknown, 0 off, else fd + 1 */

static inline unsigned long long fx_tsc(void) { return __builtin_ia32_rdtsc(); }

static int fx_oracle_fd(void)
{
    int st = __atomic_load_n(&fx_oracle_state, __ATOMIC_ACQUIRE);
    if (st >= 0)
        return st - 1;
    const char *on = getenv("XFLOW_ORACLE");
    int fd = -1;
    if (on && !strcmp(on, "1")) {
        const char *dir = getenv("XFLOW_OUT_DIR");
        char path[1024];
        snprintf(path, sizeof path, "%s/oracle.%d.log", dir && *dir ? dir : ".", (int)getpid());
        fd = open(path, O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    }
    int expect = -1;
    if (!__atomic_compare_exchange_n(&fx_oracle_state, &expect, fd + 1, 0, __ATOMIC_ACQ_REL, __ATOMIC_ACQUIRE)) {
        if (fd >= 0)
            close(fd);
        return expect - 1;
    }
    return fd;
}

__attribute__((unused)) static void fx_oracle_log(const char *sym, unsigned long long t0, unsigned long long t1)
{
    char line[256];
    int n = snprintf(line, sizeof line, "%ld\t%s\t%s\t%llu\t%llu\n", (long)syscall(SYS_gettid), FX_IMAGE,
                     sym, t0, t1);
    if (write(fx_oracle_fd(), line, (size_t)n) < 0)
        abort();
}

#define FX_CALL(sym, expr)                                                                        \
    do {                                                                                          \
        if (fx_oracle_fd() >= 0) {                                                                \
            unsigned long long t0_ = fx_tsc();                                                    \
            expr;                                                                                 \
            unsigned long long t1_ = fx_tsc();                                                    \
            fx_oracle_log(#sym, t0_, t1_);                                                        \
        } else {                                                                                  \
            expr;                                                                                 \
        }                                                                                         \
    } while (0)

#endif
