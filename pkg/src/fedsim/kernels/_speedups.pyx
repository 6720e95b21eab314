# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: same semantics as fedsim.kernels.fallback.

Per-element update sequences match the fallback exactly; reductions (dot
products, batch sums) run sequentially here while numpy may use blocked or
SIMD orders, so results can differ in the last ulps. Tests pin the
cross-backend agreement at tight tolerances.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, log1p, sqrt, tanh

cnp.import_array()

KIND_LINEAR = 0
KIND_LOGISTIC = 1
KIND_MLP = 2
KIND_VOXEL = 3

BACKEND = "compiled"

ctypedef cnp.int64_t i64


cdef inline double _sigmoid(double z) noexcept:
    return 1.0 / (1.0 + exp(-z))


cdef inline double _logloss(double z, double y) noexcept:
    # matches np.logaddexp(0, z) - y * z
    cdef double m = z if z > 0.0 else 0.0
    return m + log1p(exp(-fabs(z))) - y * z


cdef double _acc_linear(const double[::1] w, const double[:, ::1] X, const double[:, ::1] Y,
                        const i64[::1] rows, Py_ssize_t lo, Py_ssize_t hi,
                        double[::1] grad) except? -1.0:
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t t, j
    cdef i64 r
    cdef double z, resid, loss = 0.0
    cdef double inv = 1.0 / (hi - lo)
    for t in range(lo, hi):
        r = rows[t]
        z = 0.0
        for j in range(d):
            z += X[r, j] * w[j]
        resid = z - Y[r, 0]
        loss += 0.5 * resid * resid
        resid *= inv
        for j in range(d):
            grad[j] += resid * X[r, j]
    return loss * inv


cdef double _acc_logistic(const double[::1] w, const double[:, ::1] X, const double[:, ::1] Y,
                          const i64[::1] rows, Py_ssize_t lo, Py_ssize_t hi,
                          double[::1] grad) except? -1.0:
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t t, j
    cdef i64 r
    cdef double z, y, gz, loss = 0.0
    cdef double inv = 1.0 / (hi - lo)
    for t in range(lo, hi):
        r = rows[t]
        z = w[d]
        for j in range(d):
            z += X[r, j] * w[j]
        y = Y[r, 0]
        loss += _logloss(z, y)
        gz = (_sigmoid(z) - y) * inv
        for j in range(d):
            grad[j] += gz * X[r, j]
        grad[d] += gz
    return loss * inv


cdef double _acc_mlp(const double[::1] w, const double[:, ::1] X, const double[:, ::1] Y,
                     const i64[::1] rows, Py_ssize_t lo, Py_ssize_t hi,
                     Py_ssize_t d, Py_ssize_t h, Py_ssize_t o,
                     double[::1] grad, double[::1] hid, double[::1] dz,
                     double[::1] da) except? -1.0:
    cdef Py_ssize_t t, i, j, k
    cdef i64 r
    cdef double z, resid, acc, loss = 0.0
    cdef double inv = 1.0 / (hi - lo)
    cdef Py_ssize_t off_b1 = h * d
    cdef Py_ssize_t off_w2 = h * d + h
    cdef Py_ssize_t off_b2 = h * d + h + o * h
    for t in range(lo, hi):
        r = rows[t]
        for i in range(h):
            z = w[off_b1 + i]
            for j in range(d):
                z += w[i * d + j] * X[r, j]
            hid[i] = tanh(z)
        for k in range(o):
            z = w[off_b2 + k]
            for i in range(h):
                z += w[off_w2 + k * h + i] * hid[i]
            resid = z - Y[r, k]
            loss += 0.5 * resid * resid
            dz[k] = resid * inv
        for i in range(h):
            acc = 0.0
            for k in range(o):
                acc += dz[k] * w[off_w2 + k * h + i]
            da[i] = acc * (1.0 - hid[i] * hid[i])
        for i in range(h):
            for j in range(d):
                grad[i * d + j] += da[i] * X[r, j]
            grad[off_b1 + i] += da[i]
        for k in range(o):
            for i in range(h):
                grad[off_w2 + k * h + i] += dz[k] * hid[i]
            grad[off_b2 + k] += dz[k]
    return loss * inv


cdef double _acc_voxel(const double[::1] w, const double[:, ::1] X, const double[:, ::1] Y,
                       const i64[::1] rows, Py_ssize_t lo, Py_ssize_t hi,
                       Py_ssize_t v, Py_ssize_t f, double eps,
                       double[::1] grad, double[::1] probs) except? -1.0:
    cdef Py_ssize_t t, i, j
    cdef i64 r
    cdef double z, a, sp, sg, num, den, dp, dzv, loss = 0.0
    cdef double inv = 1.0 / (hi - lo)
    for t in range(lo, hi):
        r = rows[t]
        a = 0.0
        sp = 0.0
        sg = 0.0
        for i in range(v):
            z = w[f]
            for j in range(f):
                z += X[r, i * f + j] * w[j]
            probs[i] = _sigmoid(z)
            a += probs[i] * Y[r, i]
            sp += probs[i]
            sg += Y[r, i]
        num = 2.0 * a + eps
        den = sp + sg + eps
        loss += 1.0 - num / den
        for i in range(v):
            dp = (num - 2.0 * Y[r, i] * den) / (den * den)
            dzv = dp * probs[i] * (1.0 - probs[i]) * inv
            for j in range(f):
                grad[j] += dzv * X[r, i * f + j]
            grad[f] += dzv
    return loss * inv


cdef double _dispatch(int kind, tuple dims, const double[::1] w, const double[:, ::1] X,
                      const double[:, ::1] Y, const i64[::1] rows, Py_ssize_t lo,
                      Py_ssize_t hi, double dice_eps, double[::1] grad,
                      dict scratch) except? -1.0:
    cdef Py_ssize_t d = dims[0]
    cdef Py_ssize_t h = dims[1]
    cdef Py_ssize_t o = dims[2]
    cdef Py_ssize_t v = dims[3]
    cdef Py_ssize_t f = dims[4]
    if kind == 0:
        return _acc_linear(w, X, Y, rows, lo, hi, grad)
    if kind == 1:
        return _acc_logistic(w, X, Y, rows, lo, hi, grad)
    if kind == 2:
        return _acc_mlp(w, X, Y, rows, lo, hi, d, h, o, grad,
                        scratch["hid"], scratch["dz"], scratch["da"])
    if kind == 3:
        return _acc_voxel(w, X, Y, rows, lo, hi, v, f, dice_eps, grad,
                          scratch["probs"])
    raise ValueError(f"unknown model kind id {kind}")


cdef dict _make_scratch(int kind, tuple dims):
    if kind == 2:
        return {"hid": np.empty(dims[1]), "dz": np.empty(dims[2]),
                "da": np.empty(dims[1])}
    if kind == 3:
        return {"probs": np.empty(dims[3])}
    return {}


def batch_grad(kind, dims, w, X, Y, dice_eps=1.0):
    """Mean loss over the batch and its gradient as a flat array."""
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef cnp.ndarray grad = np.zeros(wv.shape[0])
    rows_arr = np.arange(Xv.shape[0], dtype=np.int64)
    cdef const i64[::1] rows = rows_arr
    scratch = _make_scratch(int(kind), tuple(dims))
    loss = _dispatch(int(kind), tuple(dims), wv, Xv, Yv, rows, 0,
                     rows.shape[0], float(dice_eps), grad, scratch)
    return float(loss), grad


def eval_losses(kind, dims, w, X, Y, dice_eps=1.0):
    """Per-sample task losses, float64[n]."""
    cdef const double[::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef int k = int(kind)
    cdef Py_ssize_t d = dims[0]
    cdef Py_ssize_t h = dims[1]
    cdef Py_ssize_t o = dims[2]
    cdef Py_ssize_t v = dims[3]
    cdef Py_ssize_t f = dims[4]
    cdef Py_ssize_t n = Xv.shape[0]
    cdef cnp.ndarray out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double[::1] hid
    cdef Py_ssize_t r, i, j, c
    cdef double z, resid, acc, a, sp, sg, eps = float(dice_eps)
    cdef Py_ssize_t off_b1, off_w2, off_b2

    if k == 0:
        for r in range(n):
            z = 0.0
            for j in range(d):
                z += Xv[r, j] * wv[j]
            resid = z - Yv[r, 0]
            out[r] = 0.5 * resid * resid
    elif k == 1:
        for r in range(n):
            z = wv[d]
            for j in range(d):
                z += Xv[r, j] * wv[j]
            out[r] = _logloss(z, Yv[r, 0])
    elif k == 2:
        off_b1 = h * d
        off_w2 = h * d + h
        off_b2 = h * d + h + o * h
        hid = np.empty(h)
        for r in range(n):
            for i in range(h):
                z = wv[off_b1 + i]
                for j in range(d):
                    z += wv[i * d + j] * Xv[r, j]
                hid[i] = tanh(z)
            acc = 0.0
            for c in range(o):
                z = wv[off_b2 + c]
                for i in range(h):
                    z += wv[off_w2 + c * h + i] * hid[i]
                resid = z - Yv[r, c]
                acc += 0.5 * resid * resid
            out[r] = acc
    elif k == 3:
        for r in range(n):
            a = 0.0
            sp = 0.0
            sg = 0.0
            for i in range(v):
                z = wv[f]
                for j in range(f):
                    z += Xv[r, i * f + j] * wv[j]
                z = _sigmoid(z)
                a += z * Yv[r, i]
                sp += z
                sg += Yv[r, i]
            out[r] = 1.0 - (2.0 * a + eps) / (sp + sg + eps)
    else:
        raise ValueError(f"unknown model kind id {kind}")
    return out_arr


def sgd_run(kind, dims, w0, X, Y, idx, offsets, eta, weight_decay,
            prox_lam, anchor, corr, dice_eps=1.0):
    """Run len(offsets)-1 SGD steps; returns (w_final, per-step losses)."""
    w_arr = np.array(w0, dtype=np.float64, copy=True)
    cdef double[::1] w = w_arr
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef const i64[::1] rows = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const i64[::1] offs = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef const double[::1] etas = np.ascontiguousarray(eta, dtype=np.float64)
    cdef double wd = float(weight_decay)
    cdef double lam = float(prox_lam)
    cdef bint has_anchor = anchor is not None
    cdef bint has_corr = corr is not None
    cdef const double[::1] anc = (np.ascontiguousarray(anchor, dtype=np.float64)
                                  if has_anchor else np.empty(0))
    cdef const double[::1] cor = (np.ascontiguousarray(corr, dtype=np.float64)
                                  if has_corr else np.empty(0))
    cdef int k = int(kind)
    cdef tuple dms = tuple(dims)
    cdef Py_ssize_t n_steps = offs.shape[0] - 1
    cdef cnp.ndarray losses_arr = np.empty(n_steps)
    cdef double[::1] losses = losses_arr
    grad_arr = np.zeros(w.shape[0])
    cdef double[::1] grad = grad_arr
    scratch = _make_scratch(k, dms)
    cdef Py_ssize_t t, i
    cdef Py_ssize_t p = w.shape[0]
    cdef double step, e

    for t in range(n_steps):
        for i in range(p):
            grad[i] = 0.0
        losses[t] = _dispatch(k, dms, w, Xv, Yv, rows, offs[t], offs[t + 1],
                              float(dice_eps), grad, scratch)
        e = etas[t]
        for i in range(p):
            step = grad[i]
            if wd != 0.0:
                step = step + wd * w[i]
            if lam != 0.0:
                step = step + lam * (w[i] - anc[i])
            w[i] = w[i] - e * step
            if has_corr:
                w[i] = w[i] + e * cor[i]
    return w_arr, losses_arr
