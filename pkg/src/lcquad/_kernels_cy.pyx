# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementation of the pairwise kernel operations.

Mirrors the interface of the numpy fallback module: same function names,
same self-exclusion convention (pairs closer than 1e-300 contribute zero).
"""

import numpy as np

from libc.math cimport sqrt, M_PI


cdef extern from "complex.h" nogil:
    double complex cexp(double complex)

cdef double R_TINY = 1e-300
cdef double FOUR_PI = 4.0 * M_PI
cdef double complex I_UNIT = 1j


def matrix_single(k, double[:, ::1] targets, double[:, ::1] sources):
    cdef double complex kk = k
    cdef Py_ssize_t m = targets.shape[0], n = sources.shape[0], i, j
    out_arr = np.zeros((m, n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_arr
    cdef double dx, dy, dz, r
    with nogil:
        for i in range(m):
            for j in range(n):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if r > R_TINY:
                    out[i, j] = cexp(I_UNIT * kk * r) / (FOUR_PI * r)
    return out_arr


def matrix_double(k, double[:, ::1] targets, double[:, ::1] sources,
                  double[:, ::1] src_normals):
    cdef double complex kk = k
    cdef Py_ssize_t m = targets.shape[0], n = sources.shape[0], i, j
    out_arr = np.zeros((m, n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_arr
    cdef double dx, dy, dz, r, ns
    with nogil:
        for i in range(m):
            for j in range(n):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if r > R_TINY:
                    ns = (src_normals[j, 0] * dx + src_normals[j, 1] * dy
                          + src_normals[j, 2] * dz)
                    out[i, j] = (ns * (1.0 - I_UNIT * kk * r) * cexp(I_UNIT * kk * r)
                                 / (FOUR_PI * r * r * r))
    return out_arr


def matrix_adjoint(k, double[:, ::1] targets, double[:, ::1] sources,
                   double[:, ::1] tgt_normals):
    cdef double complex kk = k
    cdef Py_ssize_t m = targets.shape[0], n = sources.shape[0], i, j
    out_arr = np.zeros((m, n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_arr
    cdef double dx, dy, dz, r, ns
    with nogil:
        for i in range(m):
            for j in range(n):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if r > R_TINY:
                    ns = (tgt_normals[i, 0] * dx + tgt_normals[i, 1] * dy
                          + tgt_normals[i, 2] * dz)
                    out[i, j] = (ns * (I_UNIT * kk * r - 1.0) * cexp(I_UNIT * kk * r)
                                 / (FOUR_PI * r * r * r))
    return out_arr


def matrix_combined(k, double[:, ::1] targets, double[:, ::1] sources,
                    double[:, ::1] src_normals, beta_d, beta_s):
    cdef double complex kk = k, bd = beta_d, bs = beta_s
    cdef Py_ssize_t m = targets.shape[0], n = sources.shape[0], i, j
    out_arr = np.zeros((m, n), dtype=np.complex128)
    cdef double complex[:, ::1] out = out_arr
    cdef double dx, dy, dz, r, ns
    cdef double complex ekr
    with nogil:
        for i in range(m):
            for j in range(n):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if r > R_TINY:
                    ns = (src_normals[j, 0] * dx + src_normals[j, 1] * dy
                          + src_normals[j, 2] * dz)
                    ekr = cexp(I_UNIT * kk * r)
                    out[i, j] = ekr * (bs / (FOUR_PI * r)
                                       + bd * ns * (1.0 - I_UNIT * kk * r)
                                       / (FOUR_PI * r * r * r))
    return out_arr


def potential(k, double[:, ::1] targets, double[:, ::1] sources,
              mono=None, dipstr=None, dipvec=None, chunk=0):
    cdef double complex kk = k
    cdef Py_ssize_t m = targets.shape[0], n = sources.shape[0], i, j
    cdef bint has_mono = mono is not None
    cdef bint has_dip = dipstr is not None
    out_arr = np.zeros(m, dtype=np.complex128)
    cdef double complex[::1] out = out_arr
    cdef double complex[::1] cmono = (np.ascontiguousarray(mono, dtype=np.complex128)
                                      if has_mono else np.empty(0, dtype=np.complex128))
    cdef double complex[::1] cdip = (np.ascontiguousarray(dipstr, dtype=np.complex128)
                                     if has_dip else np.empty(0, dtype=np.complex128))
    cdef double[:, ::1] cvec = (np.ascontiguousarray(dipvec, dtype=np.float64)
                                if has_dip else np.empty((0, 3)))
    cdef double dx, dy, dz, r, ns
    cdef double complex acc, ekr
    with nogil:
        for i in range(m):
            acc = 0
            for j in range(n):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if r <= R_TINY:
                    continue
                ekr = cexp(I_UNIT * kk * r)
                if has_mono:
                    acc = acc + cmono[j] * ekr / (FOUR_PI * r)
                if has_dip:
                    ns = cvec[j, 0] * dx + cvec[j, 1] * dy + cvec[j, 2] * dz
                    acc = acc + (cdip[j] * ns * (1.0 - I_UNIT * kk * r) * ekr
                                 / (FOUR_PI * r * r * r))
            out[i] = acc
    return out_arr


def potential_grad(k, double[:, ::1] targets, double[:, ::1] sources,
                   mono, chunk=0):
    cdef double complex kk = k
    cdef Py_ssize_t m = targets.shape[0], n = sources.shape[0], i, j
    pot_arr = np.zeros(m, dtype=np.complex128)
    grad_arr = np.zeros((m, 3), dtype=np.complex128)
    cdef double complex[::1] pot = pot_arr
    cdef double complex[:, ::1] grad = grad_arr
    cdef double complex[::1] cmono = np.ascontiguousarray(mono, dtype=np.complex128)
    cdef double dx, dy, dz, r
    cdef double complex acc, gx, gy, gz, ekr, fac
    with nogil:
        for i in range(m):
            acc = 0
            gx = 0
            gy = 0
            gz = 0
            for j in range(n):
                dx = targets[i, 0] - sources[j, 0]
                dy = targets[i, 1] - sources[j, 1]
                dz = targets[i, 2] - sources[j, 2]
                r = sqrt(dx * dx + dy * dy + dz * dz)
                if r <= R_TINY:
                    continue
                ekr = cexp(I_UNIT * kk * r)
                acc = acc + cmono[j] * ekr / (FOUR_PI * r)
                fac = cmono[j] * (I_UNIT * kk * r - 1.0) * ekr / (FOUR_PI * r * r * r)
                gx = gx + fac * dx
                gy = gy + fac * dy
                gz = gz + fac * dz
            pot[i] = acc
            grad[i, 0] = gx
            grad[i, 1] = gy
            grad[i, 2] = gz
    return pot_arr, grad_arr
