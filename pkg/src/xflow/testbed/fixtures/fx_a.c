#define FX_IMAGE "libfx_a"
#include "oracle.h"
#include "fx_api.h"

#include <stdint.h>
#include <time.h>

void fx_noop(void) { __asm__ volatile(""); }

long fx_add(long a, long b) { return a + b; }

static uint64_t mix(uint64_t h, uint64_t v)
{
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h * 0xff51afd7ed558ccdull;
}

float fx_hash_args(long a0, long a1, long a2, long a3, long a4, long a5, long a6, long a7,
                   double d0, double d1, double d2, double d3, double d4, double d5, double d6,
                   double d7)
{
    long ints[8] = {a0, a1, a2, a3, a4, a5, a6, a7};
    double dbls[8] = {d0, d1, d2, d3, d4, d5, d6, d7};
    uint64_t h = 1469598103934665603ull;
    for (int i = 0; i < 8; i++) {
        uint64_t bits;
        memcpy(&bits, &dbls[i], 8);
        h = mix(h, (uint64_t)ints[i]);
        h = mix(h, bits);
    }
    return (float)(h % 1000003u) / 7.0f;
}

void fx_busy_us(long us)
{
    struct timespec t0, t;
    clock_gettime(CLOCK_MONOTONIC, &t0);
    long long end = t0.tv_sec * 1000000000ll + t0.tv_nsec + us * 1000ll;
    do
        clock_gettime(CLOCK_MONOTONIC, &t);
    while (t.tv_sec * 1000000000ll + t.tv_nsec < end);
}

long fx_outer(long us)
{
    long r;
    fx_busy_us(us);
    FX_CALL(fx_b_inner, r = fx_b_inner(us));
    return r + 1;
}

/* sibling call: compiles to a jump through this library's PLT */
long fx_a_chain1(long x) { return fx_b_chain2(x + 1); }

/* recursion re-enters through the PLT via fx_a_step, defined in another unit */
long fx_recurse(long n)
{
    if (n <= 0)
        return 0;
    long r = fx_a_step(n - 1);
    __asm__ volatile("" : "+r"(r));
    return r + 1;
}

void fx_a_longjmp(jmp_buf *env) { longjmp(*env, 1); }

long fx_a_calls_target(long x)
{
    long r;
    FX_CALL(fx_b_target, r = fx_b_target(x));
    return r + 1;
}
