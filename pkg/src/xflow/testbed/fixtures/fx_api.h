/* Exported APIs of the fixture libraries. */
#ifndef FX_API_H
#define FX_API_H
#include <setjmp.h>

/* libfx_a */
void fx_noop(void);
long fx_add(long a, long b);
float fx_hash_args(long a0, long a1, long a2, long a3, long a4, long a5, long a6, long a7,
                   double d0, double d1, double d2, double d3, double d4, double d5, double d6,
                   double d7);
void fx_busy_us(long us);
long fx_outer(long us);
long fx_a_chain1(long x);
long fx_recurse(long n);
long fx_a_step(long n);
void fx_a_longjmp(jmp_buf *env) __attribute__((noreturn));
long fx_a_calls_target(long x);

/* libfx_b */
long fx_b_inner(long us);
long fx_b_target(long x);
long fx_b_chain2(long x);

/* libfx_z */
long fx_z_chain3(long x);

/* libfx_c (dlopen'd) and libfx_d */
long fx_c_entry(long x);
long fx_d_leaf(long x);

#endif
