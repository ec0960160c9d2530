/* Driver program: one scenario per invocation, selected by argv[1]. */
#define FX_IMAGE "fx_main"
#include "oracle.h"
#include "fx_api.h"

#include <dlfcn.h>
#include <libgen.h>
#include <limits.h>
#include <pthread.h>
#include <sched.h>
#include <semaphore.h>
#include <signal.h>
#include <stdint.h>
#include <time.h>

static long arg(int argc, char **argv, int i, long dflt)
{
    return i < argc ? strtol(argv[i], NULL, 10) : dflt;
}

static long long now_ns(void)
{
    struct timespec t;
    clock_gettime(CLOCK_MONOTONIC, &t);
    return t.tv_sec * 1000000000ll + t.tv_nsec;
}

/* Profiler probes are looked up at run time so the driver also runs without the agent. */
static long shadow_depth(void)
{
    void *(*ctx)(void) = (void *(*)(void))dlsym(RTLD_DEFAULT, "xflow_ensure_context");
    unsigned (*depth)(void *) = (unsigned (*)(void *))dlsym(RTLD_DEFAULT, "xflow_shadow_depth");
    if (!ctx || !depth)
        return -1;
    return (long)depth(ctx());
}

static int sc_hello(void)
{
    FX_CALL(fx_noop, fx_noop());
    printf("hello\n");
    return 0;
}

static int sc_calls(long n)
{
    long acc = 0;
    for (long i = 0; i < n; i++) {
        FX_CALL(fx_noop, fx_noop());
        FX_CALL(fx_add, acc = fx_add(acc, i));
    }
    printf("calls %ld sum %ld\n", n, acc);
    return 0;
}

static int sc_args(long n)
{
    float f = 0;
    for (long i = 0; i < n; i++) {
        FX_CALL(fx_hash_args,
                f = fx_hash_args(i, -1, 2, LONG_MIN, 4, LONG_MAX, 6, 7 * i, 0.5, -1.25, 1e300, -0.0,
                                 3.14159, 2.71828, 1e-300, (double)i));
        printf("%ld %a\n", i, (double)f);
    }
    return 0;
}

static int sc_tail(long n)
{
    long acc = 0;
    for (long i = 0; i < n; i++)
        FX_CALL(fx_a_chain1, acc += fx_a_chain1(i));
    printf("tail %ld %ld\n", n, acc);
    return 0;
}

static int sc_nested(long n, long us)
{
    long acc = 0;
    for (long i = 0; i < n; i++)
        FX_CALL(fx_outer, acc += fx_outer(us));
    printf("nested %ld %ld\n", n, acc);
    return 0;
}

static int sc_recurse(long n, long depth)
{
    long acc = 0;
    for (long i = 0; i < n; i++)
        FX_CALL(fx_recurse, acc += fx_recurse(depth));
    printf("recurse %ld\n", acc);
    return 0;
}

static int sc_noreturn(long n)
{
    static jmp_buf env;
    static volatile long jumps;
    jumps = 0;
    for (long i = 0; i < n; i++) {
        if (setjmp(env) == 0)
            FX_CALL(fx_a_longjmp, fx_a_longjmp(&env));
        else
            jumps++;
        FX_CALL(fx_noop, fx_noop());
    }
    printf("noreturn %ld depth %ld\n", (long)jumps, shadow_depth());
    return 0;
}

struct worker_arg {
    long calls;
    int mode;
    sem_t *done;
};

static void worker_calls(long m)
{
    for (long i = 0; i < m; i++)
        FX_CALL(fx_noop, fx_noop());
}

static void exit_from_nested(void) { pthread_exit(NULL); }

static void *worker(void *p)
{
    struct worker_arg *a = p;
    worker_calls(a->calls);
    if (a->mode == 1)
        exit_from_nested();
    if (a->mode == 2) {
        sem_post(a->done);
        for (;;)
            pause();
    }
    return NULL;
}

/* mode: join, exit (pthread_exit mid-function) or detach (alive at process exit) */
static int sc_threads(long n, long m, const char *mode)
{
    int md = !strcmp(mode, "exit") ? 1 : !strcmp(mode, "detach") ? 2 : 0;
    pthread_t t[256];
    struct worker_arg a[256];
    sem_t done;
    sem_init(&done, 0, 0);
    if (n > 256)
        n = 256;
    for (long i = 0; i < n; i++) {
        a[i] = (struct worker_arg){m, md, &done};
        pthread_create(&t[i], NULL, worker, &a[i]);
        if (md == 2)
            pthread_detach(t[i]);
    }
    for (long i = 0; i < n; i++) {
        if (md == 2)
            sem_wait(&done);
        else
            pthread_join(t[i], NULL);
    }
    printf("threads %ld x %ld %s\n", n, m, mode);
    return 0;
}

static int sc_dl(long n)
{
    char exe[PATH_MAX], path[PATH_MAX + 32];
    ssize_t k = readlink("/proc/self/exe", exe, sizeof exe - 1);
    if (k < 0)
        return 3;
    exe[k] = 0;
    snprintf(path, sizeof path, "%s/libfx_c.so", dirname(exe));
    void *h = dlopen(path, RTLD_NOW);
    if (!h) {
        fprintf(stderr, "dlopen: %s\n", dlerror());
        return 3;
    }
    long (*entry)(long) = (long (*)(long))dlsym(h, "fx_c_entry");
    int *data = (int *)dlsym(h, "fx_c_data");
    long acc = 0;
    for (long i = 0; i < n; i++)
        FX_CALL(fx_c_entry, acc += entry(i));
    printf("dl %ld %ld data %d\n", n, acc, *data);
    return 0;
}

static int sc_loop(long n, long batch)
{
    if (batch <= 0)
        batch = n;
    for (long done = 0; done < n; done += batch) {
        long b = n - done < batch ? n - done : batch;
        long long t0 = now_ns();
        for (long i = 0; i < b; i++)
            fx_noop();
        long long t1 = now_ns();
        printf("batch\t%ld\t%lld\n", b, t1 - t0);
    }
    return 0;
}

static int sc_busy(long n, long us)
{
    for (long i = 0; i < n; i++)
        FX_CALL(fx_busy_us, fx_busy_us(us));
    printf("busy %ld x %ld us\n", n, us);
    return 0;
}

/* main plus three workers run the busy API concurrently, then main runs it alone */
static pthread_barrier_t attr_bar;
static long attr_n, attr_us;

static void *attr_worker(void *p)
{
    (void)p;
    pthread_barrier_wait(&attr_bar);
    for (long i = 0; i < attr_n; i++)
        FX_CALL(fx_busy_us, fx_busy_us(attr_us));
    pthread_barrier_wait(&attr_bar);
    return NULL;
}

static int sc_attr(long n, long us, long serial)
{
    pthread_t t[3];
    attr_n = n;
    attr_us = us;
    pthread_barrier_init(&attr_bar, NULL, 4);
    for (int i = 0; i < 3; i++)
        pthread_create(&t[i], NULL, attr_worker, NULL);
    attr_worker(NULL);
    for (int i = 0; i < 3; i++)
        pthread_join(t[i], NULL);
    for (long i = 0; i < serial; i++)
        FX_CALL(fx_b_inner, fx_b_inner(us));
    printf("attr %ld %ld %ld\n", n, us, serial);
    return 0;
}

/* Two thread groups take turns: in round k only thread k works, everyone else sits in the barrier.
 * Every hand-off happens inside pthread_barrier_wait, so on a single CPU the wakeup preemption is
 * charged to a wait API rather than to the thread that finished its turn. */
struct turn {
    long index, rounds, us;
};
static pthread_barrier_t imb_bar;

static void imb_body(struct turn *t)
{
    for (long k = 0; k < t->rounds; k++) {
        if (k == t->index) {
            /* let the others get back into the barrier first; yielding keeps the CPU busy,
             * where a sleep would idle it and invite the host to steal the next few ms */
            for (int y = 0; y < 8; y++)
                sched_yield();
            fx_busy_us(t->us);
        }
        pthread_barrier_wait(&imb_bar);
    }
}

static void *group_heavy(void *p) { imb_body(p); return NULL; }
static void *group_light(void *p) { imb_body(p); return NULL; }

static int sc_imbalance(long per_group, long heavy_us, long light_us)
{
    long n = per_group * 2;
    if (n > 64)
        n = 64;
    struct turn turns[64];
    pthread_t t[64];
    pthread_barrier_init(&imb_bar, NULL, (unsigned)n);
    for (long i = 0; i < n; i++) {
        turns[i] = (struct turn){i, n, i % 2 ? light_us : heavy_us};
        pthread_create(&t[i], NULL, i % 2 ? group_light : group_heavy, &turns[i]);
    }
    for (long i = 0; i < n; i++)
        pthread_join(t[i], NULL);
    printf("imbalance %ld %ld %ld\n", per_group, heavy_us, light_us);
    return 0;
}

static int sc_alloc(long n)
{
    uint64_t (*count)(void) = (uint64_t (*)(void))dlsym(RTLD_DEFAULT, "fx_alloc_count");
    if (!count) {
        printf("alloc unavailable\n");
        return 0;
    }
    fx_noop();
    uint64_t before = count();
    for (long i = 0; i < n; i++)
        fx_noop();
    uint64_t after = count();
    printf("alloc %llu\n", (unsigned long long)(after - before));
    return 0;
}

static int sc_lazyprobe(void)
{
    int (*stat)(const char *, const char *, uint64_t *) =
        (int (*)(const char *, const char *, uint64_t *))dlsym(RTLD_DEFAULT, "xflow_site_stat");
    uint64_t before[4] = {0}, after[4] = {0};
    if (!stat || stat("fx_main", "fx_add", before)) {
        printf("lazyprobe unavailable\n");
        return 0;
    }
    fx_add(1, 2);
    fx_add(3, 4);
    stat("fx_main", "fx_add", after);
    printf("lazyprobe kind %llu resolves %llu %llu\n", (unsigned long long)after[1],
           (unsigned long long)before[0], (unsigned long long)after[0]);
    return 0;
}

static int sc_stackprobe(void)
{
    long d[6];
    jmp_buf env;
    fx_noop();
    d[0] = shadow_depth();
    fx_a_chain1(1);
    d[1] = shadow_depth();
    fx_outer(1);
    d[2] = shadow_depth();
    fx_recurse(5);
    d[3] = shadow_depth();
    if (setjmp(env) == 0)
        fx_a_longjmp(&env);
    fx_noop();
    d[4] = shadow_depth();
    fx_a_calls_target(2);
    d[5] = shadow_depth();
    printf("depths %ld %ld %ld %ld %ld %ld\n", d[0], d[1], d[2], d[3], d[4], d[5]);
    return 0;
}

/* API called from the driver and, through libfx_a, from a second caller library */
static int sc_relation(long n1, long n2)
{
    long acc = 0;
    for (long i = 0; i < n1; i++)
        FX_CALL(fx_b_target, acc += fx_b_target(i));
    for (long i = 0; i < n2; i++)
        FX_CALL(fx_a_calls_target, acc += fx_a_calls_target(i));
    printf("relation %ld %ld %ld\n", n1, n2, acc);
    return 0;
}

static int sc_snap(long n, int sig)
{
    for (int phase = 0; phase < 3; phase++) {
        for (long i = 0; i < n; i++)
            fx_noop();
        if (phase < 2)
            raise(sig);
    }
    printf("snap %ld\n", n);
    return 0;
}

int main(int argc, char **argv)
{
    const char *sc = argc > 1 ? argv[1] : "hello";
    setvbuf(stdout, NULL, _IOLBF, 0);
    if (!strcmp(sc, "hello")) return sc_hello();
    if (!strcmp(sc, "calls")) return sc_calls(arg(argc, argv, 2, 100));
    if (!strcmp(sc, "args")) return sc_args(arg(argc, argv, 2, 10));
    if (!strcmp(sc, "tail")) return sc_tail(arg(argc, argv, 2, 10));
    if (!strcmp(sc, "nested")) return sc_nested(arg(argc, argv, 2, 10), arg(argc, argv, 3, 20));
    if (!strcmp(sc, "recurse")) return sc_recurse(arg(argc, argv, 2, 1), arg(argc, argv, 3, 3));
    if (!strcmp(sc, "noreturn")) return sc_noreturn(arg(argc, argv, 2, 10));
    if (!strcmp(sc, "threads"))
        return sc_threads(arg(argc, argv, 2, 4), arg(argc, argv, 3, 100), argc > 4 ? argv[4] : "join");
    if (!strcmp(sc, "dl")) return sc_dl(arg(argc, argv, 2, 10));
    if (!strcmp(sc, "loop")) return sc_loop(arg(argc, argv, 2, 1000), arg(argc, argv, 3, 0));
    if (!strcmp(sc, "busy")) return sc_busy(arg(argc, argv, 2, 10), arg(argc, argv, 3, 1000));
    if (!strcmp(sc, "attr"))
        return sc_attr(arg(argc, argv, 2, 10), arg(argc, argv, 3, 1000), arg(argc, argv, 4, 10));
    if (!strcmp(sc, "imbalance"))
        return sc_imbalance(arg(argc, argv, 2, 2), arg(argc, argv, 3, 16000), arg(argc, argv, 4, 1000));
    if (!strcmp(sc, "alloc")) return sc_alloc(arg(argc, argv, 2, 1000000));
    if (!strcmp(sc, "lazyprobe")) return sc_lazyprobe();
    if (!strcmp(sc, "stackprobe")) return sc_stackprobe();
    if (!strcmp(sc, "relation")) return sc_relation(arg(argc, argv, 2, 5), arg(argc, argv, 3, 7));
    if (!strcmp(sc, "snap")) return sc_snap(arg(argc, argv, 2, 1000), (int)arg(argc, argv, 3, SIGUSR1));
    fprintf(stderr, "unknown scenario %s\n", sc);
    return 2;
}
