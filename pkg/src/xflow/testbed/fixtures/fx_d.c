#include "fx_api.h"

long fx_d_leaf(long x) { return x * 3; }
