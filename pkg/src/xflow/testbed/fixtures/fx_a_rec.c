#include "fx_api.h"

long fx_a_step(long n)
{
    long r = fx_recurse(n);
    __asm__ volatile("" : "+r"(r));
    return r;
}
