# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the NumPy reference kernels in softneg.kernels.pure.

Same signatures, same fallback conventions.  Compiled with plain -O3 only:
no fast-math and no threading, so results are bit-stable run to run.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

cdef double TINY = 1e-12


def mlp2_forward(double[:, ::1] x, double[:, ::1] w1, double[::1] b1,
                 double[:, ::1] w2, double[::1] b2):
    cdef Py_ssize_t b = x.shape[0], din = x.shape[1]
    cdef Py_ssize_t h = w1.shape[1], dout = w2.shape[1]
    h1_arr = np.empty((b, h))
    y_arr = np.empty((b, dout))
    yn_arr = np.empty((b, dout))
    norms_arr = np.empty(b)
    cdef double[:, ::1] h1 = h1_arr
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] yn = yn_arr
    cdef double[::1] norms = norms_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, nrm
    for i in range(b):
        for j in range(h):
            acc = b1[j]
            for k in range(din):
                acc += x[i, k] * w1[k, j]
            h1[i, j] = tanh(acc)
        nrm = 0.0
        for j in range(dout):
            acc = b2[j]
            for k in range(h):
                acc += h1[i, k] * w2[k, j]
            acc = tanh(acc)
            y[i, j] = acc
            nrm += acc * acc
        nrm = sqrt(nrm)
        if nrm < TINY:
            for j in range(dout):
                yn[i, j] = 0.0
            yn[i, 0] = 1.0
            norms[i] = 0.0
        else:
            for j in range(dout):
                yn[i, j] = y[i, j] / nrm
            norms[i] = nrm
    return h1_arr, y_arr, yn_arr, norms_arr


def mlp2_backward(double[:, ::1] x, double[:, ::1] h1, double[:, ::1] y,
                  double[:, ::1] yn, double[::1] norms, double[:, ::1] dyn,
                  double[:, ::1] w1, double[:, ::1] w2):
    cdef Py_ssize_t b = x.shape[0], din = x.shape[1]
    cdef Py_ssize_t h = w1.shape[1], dout = w2.shape[1]
    dw1_arr = np.zeros((din, h))
    db1_arr = np.zeros(h)
    dw2_arr = np.zeros((h, dout))
    db2_arr = np.zeros(dout)
    cdef double[:, ::1] dw1 = dw1_arr
    cdef double[::1] db1 = db1_arr
    cdef double[:, ::1] dw2 = dw2_arr
    cdef double[::1] db2 = db2_arr
    dz2_arr = np.empty(dout)
    dz1_arr = np.empty(h)
    cdef double[::1] dz2 = dz2_arr
    cdef double[::1] dz1 = dz1_arr
    cdef Py_ssize_t i, j, k
    cdef double dot, dyv, acc
    for i in range(b):
        if norms[i] <= 0.0:
            continue
        dot = 0.0
        for j in range(dout):
            dot += yn[i, j] * dyn[i, j]
        for j in range(dout):
            dyv = (dyn[i, j] - yn[i, j] * dot) / norms[i]
            dz2[j] = dyv * (1.0 - y[i, j] * y[i, j])
            db2[j] += dz2[j]
        for k in range(h):
            for j in range(dout):
                dw2[k, j] += h1[i, k] * dz2[j]
            acc = 0.0
            for j in range(dout):
                acc += dz2[j] * w2[k, j]
            dz1[k] = acc * (1.0 - h1[i, k] * h1[i, k])
            db1[k] += dz1[k]
        for k in range(din):
            for j in range(h):
                dw1[k, j] += x[i, k] * dz1[j]
    return dw1_arr, db1_arr, dw2_arr, db2_arr


def softmax_xent(double[:, ::1] logits, double[:, ::1] targets):
    cdef Py_ssize_t b = logits.shape[0], n = logits.shape[1]
    dlogits_arr = np.empty((b, n))
    cdef double[:, ::1] dlogits = dlogits_arr
    cdef Py_ssize_t i, j
    cdef double m, z, loss, p
    loss = 0.0
    for i in range(b):
        m = logits[i, 0]
        for j in range(1, n):
            if logits[i, j] > m:
                m = logits[i, j]
        z = 0.0
        for j in range(n):
            z += exp(logits[i, j] - m)
        for j in range(n):
            p = exp(logits[i, j] - m) / z
            dlogits[i, j] = (p - targets[i, j]) / b
            loss -= targets[i, j] * ((logits[i, j] - m) - log(z))
    return loss / b, dlogits_arr


def gcn_forward(double[:, ::1] feats, cnp.int64_t[:, ::1] edges,
                double[:, ::1] w1, double[:, ::1] w2):
    cdef Py_ssize_t n = feats.shape[0], din = feats.shape[1]
    cdef Py_ssize_t h = w1.shape[1], dout = w2.shape[1]
    if n == 0:
        return np.zeros(dout)
    a_arr = np.eye(n)
    cdef double[:, ::1] a = a_arr
    cdef Py_ssize_t e, i, j, k
    for e in range(edges.shape[0]):
        i = <Py_ssize_t> edges[e, 0]
        j = <Py_ssize_t> edges[e, 1]
        a[i, j] = 1.0
        a[j, i] = 1.0
    dinv_arr = np.empty(n)
    cdef double[::1] dinv = dinv_arr
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += a[i, j]
        dinv[i] = 1.0 / sqrt(acc)
    for i in range(n):
        for j in range(n):
            a[i, j] *= dinv[i] * dinv[j]

    xw_arr = np.empty((n, h))
    h1_arr = np.empty((n, h))
    hw_arr = np.empty((n, dout))
    pooled_arr = np.zeros(dout)
    cdef double[:, ::1] xw = xw_arr
    cdef double[:, ::1] h1 = h1_arr
    cdef double[:, ::1] hw = hw_arr
    cdef double[::1] pooled = pooled_arr
    for i in range(n):
        for j in range(h):
            acc = 0.0
            for k in range(din):
                acc += feats[i, k] * w1[k, j]
            xw[i, j] = acc
    for i in range(n):
        for j in range(h):
            acc = 0.0
            for k in range(n):
                acc += a[i, k] * xw[k, j]
            h1[i, j] = acc if acc > 0.0 else 0.0
    for i in range(n):
        for j in range(dout):
            acc = 0.0
            for k in range(h):
                acc += h1[i, k] * w2[k, j]
            hw[i, j] = acc
    for i in range(n):
        for j in range(dout):
            acc = 0.0
            for k in range(n):
                acc += a[i, k] * hw[k, j]
            pooled[j] += acc / n
    cdef double nrm = 0.0
    for j in range(dout):
        nrm += pooled[j] * pooled[j]
    nrm = sqrt(nrm)
    if nrm > TINY:
        for j in range(dout):
            pooled[j] /= nrm
    return pooled_arr
