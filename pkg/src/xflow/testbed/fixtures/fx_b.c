#define FX_IMAGE "libfx_b"
#include "oracle.h"
#include "fx_api.h"

#include <time.h>

long fx_b_inner(long us)
{
    struct timespec t0, t;
    clock_gettime(CLOCK_MONOTONIC, &t0);
    long long end = t0.tv_sec * 1000000000ll + t0.tv_nsec + us * 1000ll;
    do
        clock_gettime(CLOCK_MONOTONIC, &t);
    while (t.tv_sec * 1000000000ll + t.tv_nsec < end);
    return us;
}

long fx_b_target(long x) { return x * 2 + 1; }

long fx_b_chain2(long x) { return fx_z_chain3(x * 2); }
