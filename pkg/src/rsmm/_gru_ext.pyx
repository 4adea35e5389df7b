# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU recurrence kernels.

Same contract as ``rsmm._gru_py``. Per time step the recurrent product is a
single dgemm call and the gate nonlinearities run as one fused, vectorized
pass per batch row (see ``_gru_gates.h``).
"""

import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef extern from "_gru_gates.h" nogil:
    void gates_forward_row(int h, const double* rec, const double* xp,
                           const double* prev, double* hs, double* gates,
                           double* hn)
    void gates_backward_row(int h, const double* dh_in, double* carry,
                            const double* prev, const double* gates,
                            const double* hn, double* dxp, double* dhid)


def gru_forward(xproj, w_hh, h0):
    cdef double[:, :, ::1] xp = np.ascontiguousarray(xproj, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(w_hh, dtype=np.float64)
    cdef double[:, ::1] init = np.ascontiguousarray(h0, dtype=np.float64)
    cdef int nt = xp.shape[0]
    cdef int nb = xp.shape[1]
    cdef int h3 = xp.shape[2]
    cdef int h = h3 // 3
    hs_arr = np.empty((nt, nb, h))
    gates_arr = np.empty((nt, nb, h3))
    hn_arr = np.empty((nt, nb, h))
    if nb == 0 or nt == 0 or h == 0:
        return hs_arr, gates_arr, hn_arr
    rec_arr = np.empty((nb, h3))
    cdef double[:, :, ::1] hs = hs_arr
    cdef double[:, :, ::1] gates = gates_arr
    cdef double[:, :, ::1] hn = hn_arr
    cdef double[:, ::1] rec = rec_arr
    cdef double* prev = &init[0, 0]
    cdef int t, bi
    cdef char transa = b'T'
    cdef char transb = b'N'
    cdef double one = 1.0
    cdef double zero = 0.0
    with nogil:
        for t in range(nt):
            # rec (row-major B x 3H) = prev (B x H) @ w^T
            dgemm(&transa, &transb, &h3, &nb, &h, &one, &w[0, 0], &h,
                  prev, &h, &zero, &rec[0, 0], &h3)
            for bi in range(nb):
                gates_forward_row(h, &rec[bi, 0], &xp[t, bi, 0],
                                  prev + bi * h, &hs[t, bi, 0],
                                  &gates[t, bi, 0], &hn[t, bi, 0])
            prev = &hs[t, 0, 0]
    return hs_arr, gates_arr, hn_arr


def gru_backward(dhs, hs, h0, gates, hn, w_hh):
    cdef double[:, :, ::1] dh_in = np.ascontiguousarray(dhs, dtype=np.float64)
    cdef double[:, :, ::1] hsv = np.ascontiguousarray(hs, dtype=np.float64)
    cdef double[:, ::1] init = np.ascontiguousarray(h0, dtype=np.float64)
    cdef double[:, :, ::1] g = np.ascontiguousarray(gates, dtype=np.float64)
    cdef double[:, :, ::1] hnv = np.ascontiguousarray(hn, dtype=np.float64)
    cdef double[:, ::1] w = np.ascontiguousarray(w_hh, dtype=np.float64)
    cdef int nt = hsv.shape[0]
    cdef int nb = hsv.shape[1]
    cdef int h = hsv.shape[2]
    cdef int h3 = 3 * h
    dxproj_arr = np.empty((nt, nb, h3))
    dhid_arr = np.empty((nt, nb, h3))
    carry_arr = np.zeros((nb, h))
    if nb == 0 or nt == 0 or h == 0:
        return dxproj_arr, dhid_arr, carry_arr
    cdef double[:, :, ::1] dxp = dxproj_arr
    cdef double[:, :, ::1] dhid = dhid_arr
    cdef double[:, ::1] carry = carry_arr
    cdef int t, bi
    cdef const double* prev
    cdef char trans = b'N'
    cdef double one = 1.0
    with nogil:
        for t in range(nt - 1, -1, -1):
            for bi in range(nb):
                if t > 0:
                    prev = &hsv[t - 1, bi, 0]
                else:
                    prev = &init[bi, 0]
                gates_backward_row(h, &dh_in[t, bi, 0], &carry[bi, 0], prev,
                                   &g[t, bi, 0], &hnv[t, bi, 0],
                                   &dxp[t, bi, 0], &dhid[t, bi, 0])
            # carry (B x H) += dhid_t (B x 3H) @ w (3H x H)
            dgemm(&trans, &trans, &h, &nb, &h3, &one, &w[0, 0], &h,
                  &dhid[t, 0, 0], &h3, &one, &carry[0, 0], &h)
    return dxproj_arr, dhid_arr, carry_arr
