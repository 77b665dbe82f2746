"""Discrete-state equivalent-circuit rollout.

The state per cycle is (SOC, RC branch voltages). Each step evaluates the OCV
network at the current SOC, relaxes the RC branches toward ``r * I``, emits the
terminal voltage and then integrates charge for the next step.

``g`` and ``f`` are callables returning values in (0, 1): ``g`` maps a
``(B, 1)`` SOC tensor to the normalized OCV, ``f`` maps a ``(B, 2)``
[SOC, SOH] tensor to normalized branch resistances ``(B, e_rc)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .diffcore import tensor as T


class DomainError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class BatteryConfig:
    """Physical constants of one cell family."""

    C_rated: float
    C_EOL: float
    V0: float
    V_EOD: float
    beta: float = 0.8
    e_rc: int = 2
    n: int = 80
    dt: float = 1.0
    r_min: float = 1e-4
    r_max: float = 1.0

    def __post_init__(self):
        if not self.V0 > self.V_EOD > 0:
            raise ValueError(f"need V0 > V_EOD > 0, got V0={self.V0}, V_EOD={self.V_EOD}")
        if not 0 < self.C_EOL <= self.C_rated:
            raise ValueError(f"need 0 < C_EOL <= C_rated, got {self.C_EOL}, {self.C_rated}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0 < self.r_min < self.r_max:
            raise ValueError("need 0 < r_min < r_max")
        if self.e_rc < 1 or self.n < 1:
            raise ValueError("e_rc and n must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class DecoderState:
    soc: float
    v_rc: np.ndarray
    step: int


@dataclass
class PredictionResult:
    """One predicted cycle.

    ``voltage`` is the measured window followed by the predictions. The state
    trajectories cover the predicted steps only. ``stop_index`` counts the
    predicted steps up to and including the first one below cutoff (or all of
    them when the cutoff is never crossed).
    """

    voltage: np.ndarray
    mask: np.ndarray
    soc_traj: np.ndarray
    v_rc_traj: np.ndarray
    stop_index: int
    n_prefix: int

    @property
    def predicted(self):
        return self.voltage[self.n_prefix:]


def decay_coeff(tau, dt):
    tau = T.as_tensor(tau)
    if dt <= 0 or np.any(tau.data <= 0):
        raise DomainError("decay_coeff needs positive tau and dt")
    return T.exp(T.div(-float(dt), tau))


def ocv(soc, battery, g):
    return T.scale_shift(g(soc), battery.V0 - battery.V_EOD, battery.V_EOD)


def rc_resistance(soc, soh, battery, f):
    x = T.concat([T.as_tensor(soc), T.as_tensor(soh)], axis=-1)
    return T.scale_shift(f(x), battery.r_max - battery.r_min, battery.r_min)


def rc_step(v_prev, alpha, r, current):
    alpha = T.as_tensor(alpha)
    return alpha * v_prev + (1.0 - alpha) * (r * current)


def effective_capacity(soh, battery):
    base = battery.beta * battery.C_EOL
    return base + (battery.C_rated - base) * T.as_tensor(soh)


def soc_step(soc, current, dt, c_eff):
    c = T.as_tensor(c_eff)
    if np.any(c.data <= 0):
        raise DomainError("effective capacity must be positive")
    return T.clip(soc - T.div(current * float(dt), 3600.0 * c), 0.0, 1.0)


def terminal_voltage(ocv_value, R0, current, v_rc):
    v_rc = T.as_tensor(v_rc)
    return ocv_value - R0 * current - T.tsum(v_rc, axis=-1, keepdims=True)


@dataclass
class Rollout:
    voltage: T.Tensor      # (B, L)
    soc: np.ndarray        # (B, L)
    v_rc: np.ndarray       # (B, L, e_rc)
    stop: np.ndarray       # (B,) predicted steps kept per sample


def rollout_batch(params, currents, dt, battery, g, f, stop=False):
    """Roll ``B`` cycles forward over the ``(B, L)`` current plan.

    ``params`` holds batched tensors ``R0 (B,)``, ``tau (B, e)``, ``SOC0 (B,)``,
    ``SOH (B,)`` and ``v_rc0 (B, e)``. With ``stop=True`` the loop ends once
    every sample has crossed the cutoff; later entries of a stopped sample are
    left at zero.
    """
    currents = np.asarray(currents, dtype=np.float64)
    if currents.ndim != 2 or currents.shape[1] == 0:
        raise InputError("rollout needs a non-empty (B, L) current plan")
    B, L = currents.shape
    alpha = decay_coeff(params.tau, dt)
    c_eff = T.reshape(effective_capacity(params.SOH, battery), (B, 1))
    soc = T.reshape(params.SOC0, (B, 1))
    soh = T.reshape(params.SOH, (B, 1))
    r0 = T.reshape(params.R0, (B, 1))
    v = params.v_rc0

    outs, socs, vrcs = [], [], []
    alive = np.ones(B, dtype=bool)
    stop_at = np.full(B, L, dtype=np.int64)
    for m in range(L):
        cur = currents[:, m:m + 1]
        o = ocv(soc, battery, g)
        r = rc_resistance(soc, soh, battery, f)
        v = rc_step(v, alpha, r, cur)
        vt = terminal_voltage(o, r0, cur, v)
        outs.append(vt)
        socs.append(soc.data[:, 0].copy())
        vrcs.append(v.data.copy())
        crossed = alive & (vt.data[:, 0] < battery.V_EOD)
        stop_at[crossed] = m + 1
        alive &= ~crossed
        if stop and not alive.any():
            break
        soc = soc_step(soc, cur, dt, c_eff)

    voltage = T.concat(outs, axis=1)
    soc_arr = np.stack(socs, axis=1)
    vrc_arr = np.stack(vrcs, axis=1)
    if stop:
        steps = voltage.shape[1]
        keep = np.arange(steps)[None, :] < stop_at[:, None]
        voltage = T.scale_mask(voltage, keep)
        soc_arr = soc_arr * keep
        vrc_arr = vrc_arr * keep[:, :, None]
    return Rollout(voltage, soc_arr, vrc_arr, stop_at)


def rollout(params, currents, battery, g, f, mode="train_full", measured_prefix=(), dt=None):
    """Single-cycle rollout assembled as [measured window | predictions]."""
    if mode not in ("train_full", "infer_stop"):
        raise ValueError(f"unknown mode {mode!r}")
    currents = np.asarray(currents, dtype=np.float64).reshape(1, -1)
    if currents.shape[1] == 0:
        raise InputError("empty current sequence")
    dt = battery.dt if dt is None else dt
    ro = rollout_batch(params, currents, dt, battery, g, f, stop=(mode == "infer_stop"))
    k = int(ro.stop[0]) if mode == "infer_stop" else currents.shape[1]
    prefix = np.asarray(measured_prefix, dtype=np.float64)
    pred = ro.voltage.data[0, :k]
    voltage = np.concatenate([prefix, pred])
    return PredictionResult(
        voltage=voltage,
        mask=np.ones_like(voltage),
        soc_traj=ro.soc[0, :k],
        v_rc_traj=ro.v_rc[0, :k],
        stop_index=int(ro.stop[0]),
        n_prefix=len(prefix),
    )


def _net_eval(layers, x, squash):
    out, cache = T.mlp_apply(x, layers)
    return (T._sigmoid(out) if squash else out), cache


def _net_slope(cache, y, col, squash):
    t = T.mlp_jvp(cache, col)
    return t * (y * (1.0 - y)) if squash else t


def _net_vjp(cache, y, gy, squash):
    return T.mlp_vjp(cache, gy * (y * (1.0 - y)) if squash else gy)


def rollout_fused(params, currents, dt, battery, g_params, f_params, stack_sigmoid=False,
                  stop=False):
    """Same rollout as :func:`rollout_batch` recorded as a single tape node.

    ``g_params``/``f_params`` are the OCV and resistance networks. The forward
    pass repeats the step arithmetic of the composed version in the same order,
    so the two agree bit for bit. Once the SOC trajectory is known the backward
    pass re-evaluates both networks on all steps at once to get their input
    slopes and weight gradients, and walks the state recursion in reverse.
    """
    currents = np.asarray(currents, dtype=np.float64)
    if currents.ndim != 2 or currents.shape[1] == 0:
        raise InputError("rollout needs a non-empty (B, L) current plan")
    B, L = currents.shape
    dt = float(dt)
    leaf = [params.R0, params.tau, params.SOC0, params.SOH, params.v_rc0]
    R0_t, tau_t, soc0_t, soh_t, v0_t = (T.as_tensor(x) for x in leaf)
    tau = tau_t.data
    if dt <= 0 or np.any(tau <= 0):
        raise DomainError("decay_coeff needs positive tau and dt")
    alpha = np.exp(-dt / tau)
    base = battery.beta * battery.C_EOL
    soh = soh_t.data.reshape(B, 1)
    c_eff = base + (battery.C_rated - base) * soh
    if np.any(c_eff <= 0):
        raise DomainError("effective capacity must be positive")
    r0 = R0_t.data.reshape(B, 1)
    dV = battery.V0 - battery.V_EOD
    dR = battery.r_max - battery.r_min
    g_layers, f_layers = g_params.layers, f_params.layers

    soc = soc0_t.data.reshape(B, 1)
    v = v0_t.data
    outs, socs, vrcs, rs, inside = [], [], [], [], []
    alive = np.ones(B, dtype=bool)
    stop_at = np.full(B, L, dtype=np.int64)
    for m in range(L):
        cur = currents[:, m:m + 1]
        o = battery.V_EOD + dV * _net_eval(g_layers, soc, stack_sigmoid)[0]
        x = np.concatenate([soc, soh], axis=-1)
        r = battery.r_min + dR * _net_eval(f_layers, x, stack_sigmoid)[0]
        v = alpha * v + (1.0 - alpha) * (r * cur)
        vt = o - r0 * cur - v.sum(axis=-1, keepdims=True)
        outs.append(vt)
        socs.append(soc[:, 0])
        vrcs.append(v)
        rs.append(r)
        crossed = alive & (vt[:, 0] < battery.V_EOD)
        stop_at[crossed] = m + 1
        alive &= ~crossed
        if stop and not alive.any():
            break
        pre = soc - (cur * dt) / (3600.0 * c_eff)
        inside.append((pre >= 0.0) & (pre <= 1.0))
        soc = np.clip(pre, 0.0, 1.0)

    steps = len(outs)
    voltage = np.concatenate(outs, axis=1)
    soc_arr = np.stack(socs, axis=1)
    vrc_arr = np.stack(vrcs, axis=1)

    def rule(gV):
        e = alpha.shape[-1]
        # step-major stacking: row m * B + i is sample i at step m
        s_all = soc_arr.T.reshape(-1, 1)
        x_all = np.concatenate([s_all, np.tile(soh, (steps, 1))], axis=-1)
        gy, gcache = _net_eval(g_layers, s_all, stack_sigmoid)
        fy, fcache = _net_eval(f_layers, x_all, stack_sigmoid)
        slope_g = _net_slope(gcache, gy, 0, stack_sigmoid).reshape(steps, B, 1)
        slope_f = _net_slope(fcache, fy, 0, stack_sigmoid).reshape(steps, B, e)

        gs = np.zeros((B, 1))
        gv = np.zeros_like(v0_t.data)
        g_alpha = np.zeros_like(alpha)
        g_c = np.zeros((B, 1))
        g_gout = gV[:, :steps].T[:, :, None] * dV
        g_fout = np.empty((steps, B, e))
        for m in range(steps - 1, -1, -1):
            cur = currents[:, m:m + 1]
            if m < len(inside):
                gx = gs * inside[m]
                g_c += gx * (cur * dt) / (3600.0 * c_eff * c_eff)
            else:
                gx = 0.0
            gv = gv - gV[:, m:m + 1]
            v_prev = vrc_arr[:, m - 1] if m > 0 else v0_t.data
            g_alpha += gv * (v_prev - rs[m] * cur)
            g_fout[m] = gv * (1.0 - alpha) * cur * dR
            gv = gv * alpha
            gs = gx + (g_fout[m] * slope_f[m]).sum(axis=-1, keepdims=True) + g_gout[m] * slope_g[m]
        gw_g = _net_vjp(gcache, gy, g_gout.reshape(-1, 1), stack_sigmoid)
        gw_f = _net_vjp(fcache, fy, g_fout.reshape(-1, e), stack_sigmoid)
        g_r0 = -(gV[:, :steps] * currents[:, :steps]).sum(axis=1, keepdims=True)
        g_soh = gw_f[0][:, 1].reshape(steps, B).sum(axis=0)[:, None]
        g_soh = g_soh + g_c * (battery.C_rated - base)
        g_tau = g_alpha * alpha * dt / (tau * tau)
        shaped = [g_r0, g_tau, gs, g_soh, gv]
        out = [g.reshape(t.data.shape) for g, t in zip(shaped, (R0_t, tau_t, soc0_t, soh_t, v0_t))]
        return tuple(out) + gw_g[1:] + gw_f[1:]

    parents = [R0_t, tau_t, soc0_t, soh_t, v0_t]
    for W, b, _ in g_layers + f_layers:
        parents.extend((W, b))
    vol = T._node(voltage, tuple(parents), rule)
    if not stop:
        return Rollout(vol, soc_arr, vrc_arr, stop_at)
    keep = np.arange(steps)[None, :] < stop_at[:, None]
    return Rollout(T.scale_mask(vol, keep), soc_arr * keep, vrc_arr * keep[:, :, None], stop_at)
