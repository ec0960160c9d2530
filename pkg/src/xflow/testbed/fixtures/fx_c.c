#define FX_IMAGE "libfx_c"
#include "oracle.h"
#include "fx_api.h"

int fx_c_data = 42;

long fx_c_entry(long x)
{
    long r;
    FX_CALL(fx_d_leaf, r = fx_d_leaf(x));
    return r + 1;
}
