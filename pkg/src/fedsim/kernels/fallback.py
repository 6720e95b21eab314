"""Pure-numpy kernels: batched loss/gradient and the SGD inner loop.

This module is the reference implementation; `_speedups` (Cython) mirrors it
operation for operation. Both backends use the same parameter layouts:

  linear_regression    w = [weights(d)]
  logistic_regression  w = [weights(d), bias(1)]
  mlp_1hidden          w = [layer1_w(H*d row-major), layer1_b(H),
                            layer2_w(o*H row-major), layer2_b(o)]
  voxel_dice           w = [voxel_w(F), voxel_b(1)]

X is float64 [n, d_in] (voxel task packs per-voxel features voxel-major,
d_in = V*F) and Y is float64 [n, t]. Losses are means over the batch; the
SGD update for a step with learning rate eta is

  w <- w - eta * (grad + weight_decay * w + prox_lam * (w - anchor))
         + eta * corr

where ``corr`` is a precomputed correction vector (control-variate term).
"""

from __future__ import annotations

import numpy as np

KIND_LINEAR = 0
KIND_LOGISTIC = 1
KIND_MLP = 2
KIND_VOXEL = 3

BACKEND = "python"


def _split_mlp(w, d, h, o):
    w1 = w[: h * d].reshape(h, d)
    b1 = w[h * d: h * d + h]
    w2 = w[h * d + h: h * d + h + o * h].reshape(o, h)
    b2 = w[h * d + h + o * h:]
    return w1, b1, w2, b2


def _grad_linear(w, X, Y):
    r = X @ w - Y[:, 0]
    n = X.shape[0]
    loss = 0.5 * float(r @ r) / n
    grad = (X.T @ r) / n
    return loss, grad


def _grad_logistic(w, X, Y):
    d = X.shape[1]
    z = X @ w[:d] + w[d]
    y = Y[:, 0]
    n = X.shape[0]
    loss = float(np.sum(np.logaddexp(0.0, z) - y * z)) / n
    gz = (1.0 / (1.0 + np.exp(-z)) - y) / n
    grad = np.empty(d + 1)
    grad[:d] = X.T @ gz
    grad[d] = np.sum(gz)
    return loss, grad


def _grad_mlp(w, X, Y, d, h, o):
    w1, b1, w2, b2 = _split_mlp(w, d, h, o)
    n = X.shape[0]
    hid = np.tanh(X @ w1.T + b1)
    z = hid @ w2.T + b2
    r = z - Y
    loss = 0.5 * float(np.sum(r * r)) / n
    dz = r / n
    dhid = (dz @ w2) * (1.0 - hid * hid)
    grad = np.empty(w.shape[0])
    grad[: h * d] = (dhid.T @ X).reshape(-1)
    grad[h * d: h * d + h] = dhid.sum(axis=0)
    grad[h * d + h: h * d + h + o * h] = (dz.T @ hid).reshape(-1)
    grad[h * d + h + o * h:] = dz.sum(axis=0)
    return loss, grad


def _voxel_forward(w, X, v, f):
    n = X.shape[0]
    xs = X.reshape(n, v, f)
    z = xs @ w[:f] + w[f]
    p = 1.0 / (1.0 + np.exp(-z))
    return xs, p


def _grad_voxel(w, X, Y, v, f, eps):
    n = X.shape[0]
    xs, p = _voxel_forward(w, X, v, f)
    a = np.sum(p * Y, axis=1)
    denom = np.sum(p, axis=1) + np.sum(Y, axis=1) + eps
    num = 2.0 * a + eps
    loss = float(np.sum(1.0 - num / denom)) / n
    # dL/dp = (num - 2*g*denom) / denom^2, per sample
    dp = (num[:, None] - 2.0 * Y * denom[:, None]) / (denom * denom)[:, None]
    dz = dp * p * (1.0 - p) / n
    grad = np.empty(f + 1)
    grad[:f] = np.einsum("nv,nvf->f", dz, xs)
    grad[f] = np.sum(dz)
    return loss, grad


def batch_grad(kind, dims, w, X, Y, dice_eps=1.0):
    """Mean loss over the batch and its gradient as a flat array."""
    d, h, o, v, f = dims
    if kind == KIND_LINEAR:
        return _grad_linear(w, X, Y)
    if kind == KIND_LOGISTIC:
        return _grad_logistic(w, X, Y)
    if kind == KIND_MLP:
        return _grad_mlp(w, X, Y, d, h, o)
    if kind == KIND_VOXEL:
        return _grad_voxel(w, X, Y, v, f, dice_eps)
    raise ValueError(f"unknown model kind id {kind}")


def eval_losses(kind, dims, w, X, Y, dice_eps=1.0):
    """Per-sample task losses, float64[n]."""
    d, h, o, v, f = dims
    if kind == KIND_LINEAR:
        r = X @ w - Y[:, 0]
        return 0.5 * r * r
    if kind == KIND_LOGISTIC:
        z = X @ w[:d] + w[d]
        return np.logaddexp(0.0, z) - Y[:, 0] * z
    if kind == KIND_MLP:
        w1, b1, w2, b2 = _split_mlp(w, d, h, o)
        hid = np.tanh(X @ w1.T + b1)
        r = hid @ w2.T + b2 - Y
        return 0.5 * np.sum(r * r, axis=1)
    if kind == KIND_VOXEL:
        _, p = _voxel_forward(w, X, v, f)
        a = np.sum(p * Y, axis=1)
        denom = np.sum(p, axis=1) + np.sum(Y, axis=1) + dice_eps
        return 1.0 - (2.0 * a + dice_eps) / denom
    raise ValueError(f"unknown model kind id {kind}")


def sgd_run(kind, dims, w0, X, Y, idx, offsets, eta, weight_decay,
            prox_lam, anchor, corr, dice_eps=1.0):
    """Run ``len(offsets)-1`` SGD steps; returns (w_final, per-step losses).

    idx/offsets describe the batch of each step: step t trains on samples
    X[idx[offsets[t]:offsets[t+1]]]. eta[t] is the step's learning rate.
    """
    w = np.array(w0, dtype=np.float64, copy=True)
    n_steps = offsets.shape[0] - 1
    losses = np.empty(n_steps)
    for t in range(n_steps):
        rows = idx[offsets[t]: offsets[t + 1]]
        loss, grad = batch_grad(kind, dims, w, X[rows], Y[rows], dice_eps)
        losses[t] = loss
        step = grad
        if weight_decay != 0.0:
            step = step + weight_decay * w
        if prox_lam != 0.0:
            step = step + prox_lam * (w - anchor)
        w = w - eta[t] * step
        if corr is not None:
            w = w + eta[t] * corr
    return w, losses
