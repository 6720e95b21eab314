"""Server-side aggregation rules.

All rules consume an UpdateSet (sorted by client id, weights summing to 1)
and are pure: state comes in, new state comes out. Reductions accumulate in
ascending client order so results are reproducible under any scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatchError
from .params import ParamVector, UpdateSet, combine


def fedavg_step(w: ParamVector, u: UpdateSet, mode: str = "weighted") -> ParamVector:
    """w + sum_k p_k dw_k (weighted) or w + (1/K) sum_k dw_k (uniform)."""
    if mode == "weighted":
        weights = u.weights
    elif mode == "uniform":
        weights = (1.0 / len(u),) * len(u)
    else:
        raise ValueError(f"unknown averaging mode {mode!r}")
    return w + combine(weights, u.deltas)


def fednova_gamma(weights: Sequence[float]) -> float:
    """Analytical server rate K * sum p_k^2; 1 exactly for uniform weights."""
    k = len(weights)
    return k * float(sum(p * p for p in weights))


def fednova_step(w: ParamVector, u: UpdateSet) -> ParamVector:
    """Uniform averaging rescaled by gamma = K sum p_k^2 (>= 1)."""
    gamma = fednova_gamma(u.weights)
    k = len(u)
    return w + combine((gamma / k,) * k, u.deltas)


@dataclass(frozen=True)
class FedAdamState:
    """Server momenta for FedAdam: first moment ``delta``, second moment ``v``."""

    delta: ParamVector
    v: ParamVector
    beta1: float = 0.9
    beta2: float = 0.999
    tau: float = 1e-8
    server_lr: float = 0.001

    @classmethod
    def zeros(cls, template: ParamVector, beta1: float = 0.9, beta2: float = 0.999,
              tau: float = 1e-8, server_lr: float = 0.001) -> "FedAdamState":
        z = template.zeros_like()
        return cls(delta=z, v=z, beta1=beta1, beta2=beta2, tau=tau,
                   server_lr=server_lr)


def fedadam_step(state: FedAdamState, w: ParamVector,
                 u: UpdateSet) -> tuple[ParamVector, FedAdamState]:
    """Adam on the server over the weighted mean update.

    The freshly updated momenta are applied (standard Adam order); there is
    no bias correction.
    """
    if state.delta.dim != w.dim or state.v.dim != w.dim:
        raise DimensionMismatchError("FedAdam state does not match the model")
    g = combine(u.weights, u.deltas)
    d_new = state.beta1 * state.delta.values + (1.0 - state.beta1) * g.values
    v_new = state.beta2 * state.v.values + (1.0 - state.beta2) * g.values * g.values
    step = state.server_lr * d_new / (np.sqrt(v_new) + state.tau)
    new_state = replace(state, delta=w.with_values(d_new), v=w.with_values(v_new))
    return w.with_values(w.values + step), new_state


@dataclass(frozen=True)
class ScaffoldState:
    """Global control variate plus the per-client ones, all zero-initialized."""

    c: ParamVector
    c_k: Mapping[int, ParamVector]

    @classmethod
    def zeros(cls, template: ParamVector, client_ids: Sequence[int]) -> "ScaffoldState":
        z = template.zeros_like()
        return cls(c=z, c_k={int(k): z for k in client_ids})

    def with_client_control(self, client_id: int, c_k: ParamVector) -> "ScaffoldState":
        updated = dict(self.c_k)
        updated[int(client_id)] = c_k
        return replace(self, c_k=updated)


def scaffold_client_finalize(c: ParamVector, c_k: ParamVector,
                             delta_w: ParamVector, steps: int,
                             lr: float) -> tuple[ParamVector, ParamVector]:
    """Client-side control update: dc_k = -c + dw/(s_k * eta); c_k' = c_k + dc_k."""
    if steps < 1:
        raise ValueError("steps must be >= 1 to update the control variate")
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    delta_c = ParamVector(-c.values + delta_w.values / (steps * lr), c.blocks)
    return delta_c, c_k + delta_c


def scaffold_server_step(state: ScaffoldState, w: ParamVector,
                         u: UpdateSet) -> tuple[ParamVector, ScaffoldState]:
    """w' = w + sum p_k dw_k; c' = c + sum p_k dc_k."""
    missing = [up.client_id for up in u.updates if up.delta_control is None]
    if missing:
        raise ValueError(f"updates from clients {missing} carry no control delta")
    w_new = w + combine(u.weights, u.deltas)
    c_new = state.c + combine(u.weights, tuple(up.delta_control for up in u.updates))
    return w_new, replace(state, c=c_new)


def qfedavg_step(w: ParamVector, u: UpdateSet, local_losses: Sequence[float],
                 q: float, lr: float) -> ParamVector:
    """Fairness-weighted aggregation.

    d_k = (1/eta) F_k^q dw_k; h_k = q F_k^(q-1) |dw_k|^2 + (1/eta) F_k^q;
    w' = w + (sum d_k) / (sum h_k). F_k is the sum-form loss of the incoming
    global model on client k's training data; q = 0 reduces to uniform
    averaging.
    """
    if len(local_losses) != len(u):
        raise ValueError("need one loss per update")
    if q < 0:
        raise ValueError("q must be >= 0")
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    q_integral = float(q).is_integer()
    numer = np.zeros(w.dim)
    h_sum = 0.0
    for up, f_k in zip(u.updates, local_losses):
        if f_k <= 0 and not q_integral:
            raise ValueError(
                f"client {up.client_id}: loss {f_k!r} <= 0 under fractional q={q}")
        f_q = f_k ** q
        f_qm1 = f_k ** (q - 1.0) if q != 0 else 0.0
        numer += (f_q / lr) * up.delta.values
        h_sum += q * f_qm1 * float(up.delta.values @ up.delta.values) + f_q / lr
    if h_sum == 0.0:
        raise ValueError("degenerate q-FedAvg step: sum of h_k is zero")
    return w.with_values(w.values + numer / h_sum)


@dataclass(frozen=True)
class PidState:
    """Per-client validation-loss history (most recent first, capacity 6)."""

    history: Mapping[int, tuple[float, ...]]
    alpha: float = 0.45
    beta: float = 0.45
    gamma: float = 0.1
    window: int = 6

    def __post_init__(self):
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise ValueError("alpha + beta + gamma must sum to 1")

    @classmethod
    def empty(cls, client_ids: Sequence[int], alpha: float = 0.45,
              beta: float = 0.45, gamma: float = 0.1) -> "PidState":
        return cls(history={int(k): () for k in client_ids},
                   alpha=alpha, beta=beta, gamma=gamma)

    def observe(self, losses: Mapping[int, float]) -> "PidState":
        """Push this round's per-client validation losses."""
        updated = dict(self.history)
        for k, v in losses.items():
            prev = updated.get(int(k), ())
            updated[int(k)] = ((float(v),) + prev)[: self.window]
        return replace(self, history=updated)


def fedpid_weights(state: PidState, p: Sequence[float],
                   current_val_losses: Sequence[float]) -> list[float]:
    """Aggregation weights alpha*p_k + beta*dl_k/L + gamma*m_k/M.

    dl_k = max(0, previous - current) so a worsening client contributes no
    improvement mass; m_k sums the available history (up to 6 entries). When
    L (or M) is zero the beta (or gamma) mass folds back onto p_k so weights
    still sum to 1.
    """
    ids = sorted(state.history)
    if len(p) != len(ids) or len(current_val_losses) != len(ids):
        raise ValueError("need one weight and one current loss per client")
    hists = [state.history[k] for k in ids]
    if any(len(h) == 0 for h in hists):
        raise ValueError("history must be updated with the current losses first")
    for k, h, cur in zip(ids, hists, current_val_losses):
        if h[0] != float(cur):
            raise ValueError(
                f"client {k}: current loss {cur!r} not at the head of the history")
    dl = [max(0.0, h[1] - h[0]) if len(h) > 1 else 0.0 for h in hists]
    m = [float(sum(h)) for h in hists]
    big_l = sum(dl)
    big_m = sum(m)
    out = []
    for pk, dlk, mk in zip(p, dl, m):
        w = state.alpha * pk
        w += state.beta * (dlk / big_l) if big_l > 0 else state.beta * pk
        w += state.gamma * (mk / big_m) if big_m > 0 else state.gamma * pk
        out.append(w)
    return out


def fedpid_step(state: PidState, w: ParamVector, u: UpdateSet,
                current_val_losses: Sequence[float]) -> ParamVector:
    """Apply the PID-weighted aggregation (history must already be updated)."""
    weights = fedpid_weights(state, u.weights, current_val_losses)
    return w + combine(weights, u.deltas)
