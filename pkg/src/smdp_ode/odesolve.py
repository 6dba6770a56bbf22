"""Numerical ODE integration over autodiff tensors.

Fixed-step classical RK4 drives the ground-truth environment physics;
adaptive Dormand-Prince 4(5) with FSAL and PI step-size control integrates
the learned latent dynamics. Gradients flow by unrolling the accepted steps;
step-acceptance decisions are non-differentiable control flow computed on
detached values.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import NonFiniteError, Tensor, as_tensor

OdeFunc = Callable[[float, Tensor], Tensor]


class SolverError(RuntimeError):
    """Integration failed (stiffness, step underflow or non-finite values)."""

    def __init__(self, message: str, t: float):
        super().__init__(f"{message} (at t={t!r})")
        self.t = t


@dataclass
class SolverConfig:
    rtol: float = 1e-3
    atol: float = 1e-4
    initial_step: float = 0.1
    max_steps: int = 10_000
    min_step: float = 1e-10

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if not self.min_step < self.initial_step:
            raise ValueError("min_step must be below initial_step")


def rk4_step(f: OdeFunc, z: Tensor, t: float, h: float) -> Tensor:
    """One classical 4th-order Runge-Kutta step of size h."""
    if h <= 0:
        raise ValueError("rk4_step needs h > 0")
    z = as_tensor(z)
    k1 = _eval(f, t, z)
    k2 = _eval(f, t + 0.5 * h, z + (0.5 * h) * k1)
    k3 = _eval(f, t + 0.5 * h, z + (0.5 * h) * k2)
    k4 = _eval(f, t + h, z + h * k3)
    return z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def rk4_solve(f: OdeFunc, z0: Tensor, t0: float, t1: float, substep: float) -> Tensor:
    """Integrate with fixed RK4 substeps of at most ``substep``."""
    if t1 < t0:
        raise ValueError("rk4_solve needs t1 >= t0")
    z = as_tensor(z0)
    n = max(int(np.ceil((t1 - t0) / substep - 1e-12)), 0)
    if n == 0:
        return z
    h = (t1 - t0) / n
    t = t0
    for _ in range(n):
        z = rk4_step(f, z, t, h)
        t += h
    return z


def _eval(f: OdeFunc, t: float, z: Tensor) -> Tensor:
    dz = f(t, z)
    if not np.all(np.isfinite(dz.data)):
        raise SolverError("non-finite derivative", t)
    if dz.shape != z.shape:
        raise SolverError(f"derivative shape {dz.shape} != state shape {z.shape}", t)
    return dz


# Dormand-Prince 5(4) tableau (7 stages, FSAL).
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
# 5th-order minus embedded 4th-order weights -> local error estimate.
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_PI_ALPHA = 0.7 / 5.0
_PI_BETA = 0.4 / 5.0


def _error_norm(err: np.ndarray, z0: np.ndarray, z1: np.ndarray,
                rtol: float, atol: float) -> float:
    scale = atol + rtol * np.maximum(np.abs(z0), np.abs(z1))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def dopri5_solve(f: OdeFunc, z0: Tensor, t0: float, t1: float,
                 cfg: SolverConfig | None = None,
                 record_steps: list | None = None,
                 replay_steps: list | None = None) -> Tensor:
    """Solve dz/dt = f(t, z) from t0 to t1 with the adaptive Dormand-Prince
    embedded pair.

    ``record_steps`` captures the accepted step sizes; ``replay_steps`` runs
    exactly that schedule with error control disabled, which freezes the
    unrolled graph between perturbed evaluations of a gradient check.
    """
    if cfg is None:
        cfg = SolverConfig()
    if t1 < t0:
        raise ValueError("dopri5_solve needs t1 >= t0")
    z = as_tensor(z0)
    if t1 == t0:
        return z

    if replay_steps is not None:
        t = t0
        k_first = _eval(f, t, z)
        for h in replay_steps:
            z, _, k_first = _dp_step(f, z, t, h, k_first)
            t += h
        return z

    span = t1 - t0
    h = min(cfg.initial_step, 0.1 * span, span)
    t = t0
    k_first = _eval(f, t, z)
    prev_norm = 1.0
    for _ in range(cfg.max_steps):
        h = min(h, t1 - t)
        z_new, err, k_last = _dp_step(f, z, t, h, k_first)
        norm = _error_norm(err, z.data, z_new.data, cfg.rtol, cfg.atol)
        if not np.isfinite(norm):
            raise SolverError("non-finite error estimate", t)
        if norm <= 1.0:
            if record_steps is not None:
                record_steps.append(h)
            t += h
            z = z_new
            k_first = k_last  # FSAL
            if t >= t1 - 1e-14 * max(abs(t1), 1.0):
                return z
            if norm == 0.0:
                factor = _MAX_FACTOR
            else:
                factor = _SAFETY * norm ** (-_PI_ALPHA) * prev_norm ** _PI_BETA
            prev_norm = max(norm, 1e-10)
            h *= min(max(factor, _MIN_FACTOR), _MAX_FACTOR)
        else:
            factor = max(_SAFETY * norm ** (-_PI_ALPHA), _MIN_FACTOR)
            h *= factor
            if h < cfg.min_step:
                raise SolverError("step size underflow (stiff problem?)", t)
    raise SolverError(f"exceeded max_steps={cfg.max_steps}", t)


def _dp_step(f: OdeFunc, z: Tensor, t: float, h: float, k1: Tensor):
    """One Dormand-Prince stage evaluation; returns (z_new, err_array, k_last)."""
    ks = [k1]
    for i in range(1, 7):
        acc = None
        row = _DP_A[i]
        for j, a in enumerate(row):
            if a == 0.0:
                continue
            term = (h * a) * ks[j]
            acc = term if acc is None else acc + term
        stage_z = z if acc is None else z + acc
        ks.append(_eval(f, t + _DP_C[i] * h, stage_z))
    z_new = z
    for b, k in zip(_DP_B, ks):
        if b != 0.0:
            z_new = z_new + (h * b) * k
    err = np.zeros_like(z.data)
    for e, k in zip(_DP_E, ks):
        if e != 0.0:
            err = err + (h * e) * k.data
    return z_new, err, ks[6]


def ode_solve_traj(f: OdeFunc, z0: Tensor, times: list[float],
                   cfg: SolverConfig | None = None,
                   t_start: float = 0.0) -> list[Tensor]:
    """Dense output at each requested time, integrating segment by segment
    so the solution at times[k] never depends on later requests."""
    if cfg is None:
        cfg = SolverConfig()
    if len(times) == 0:
        return []
    if times[0] < t_start:
        raise ValueError(f"times must start at or after {t_start}: got {times}")
    for a, b in zip(times, times[1:]):
        if b <= a:
            raise ValueError(f"times must be strictly ascending: got {times}")
    out: list[Tensor] = []
    z = as_tensor(z0)
    t_cur = t_start
    for t in times:
        if t > t_cur:
            z = dopri5_solve(f, z, t_cur, t, cfg)
            t_cur = t
        out.append(z)
    return out
