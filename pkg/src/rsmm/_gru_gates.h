/* Fused GRU gate arithmetic for one batch row, vectorized through libmvec. */
#ifndef RSMM_GRU_GATES_H
#define RSMM_GRU_GATES_H

#include <math.h>
#include <stddef.h>

#pragma omp declare simd notinbranch
extern double exp(double);
#pragma omp declare simd notinbranch
extern double tanh(double);

/* Pointer offsets and a ptrdiff_t index keep the loop vectorizable under -fwrapv. */
static inline void gates_forward_row(int h, const double *restrict rec,
                                     const double *restrict xp,
                                     const double *restrict prev,
                                     double *restrict hs,
                                     double *restrict gates,
                                     double *restrict hn)
{
    ptrdiff_t j, n = h;
    const double *rec_r = rec + n, *rec_h = rec + 2 * n;
    const double *xp_r = xp + n, *xp_h = xp + 2 * n;
    double *g_r = gates + n, *g_c = gates + 2 * n;
#pragma omp simd
    for (j = 0; j < n; j++) {
        double u = 1.0 / (1.0 + exp(-(rec[j] + xp[j])));
        double r = 1.0 / (1.0 + exp(-(rec_r[j] + xp_r[j])));
        double cand = tanh(r * rec_h[j] + xp_h[j]);
        hs[j] = u * prev[j] + (1.0 - u) * cand;
        gates[j] = u;
        g_r[j] = r;
        g_c[j] = cand;
        hn[j] = rec_h[j];
    }
}

static inline void gates_backward_row(int h, const double *restrict dh_in,
                                      double *restrict carry,
                                      const double *restrict prev,
                                      const double *restrict gates,
                                      const double *restrict hn,
                                      double *restrict dxp,
                                      double *restrict dhid)
{
    ptrdiff_t j, n = h;
    const double *g_r = gates + n, *g_c = gates + 2 * n;
    double *dxp_r = dxp + n, *dxp_c = dxp + 2 * n;
    double *dhid_r = dhid + n, *dhid_c = dhid + 2 * n;
#pragma omp simd
    for (j = 0; j < n; j++) {
        double u = gates[j];
        double r = g_r[j];
        double cand = g_c[j];
        double dh = dh_in[j] + carry[j];
        double dpre_c = dh * (1.0 - u) * (1.0 - cand * cand);
        double dpre_r = dpre_c * hn[j] * r * (1.0 - r);
        double dpre_u = dh * (prev[j] - cand) * u * (1.0 - u);
        dxp[j] = dpre_u;
        dxp_r[j] = dpre_r;
        dxp_c[j] = dpre_c;
        dhid[j] = dpre_u;
        dhid_r[j] = dpre_r;
        dhid_c[j] = dpre_c * r;
        carry[j] = dh * u;
    }
}

#endif
