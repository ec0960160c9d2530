#include "fx_api.h"

long fx_z_chain3(long x) { return x + 3; }
