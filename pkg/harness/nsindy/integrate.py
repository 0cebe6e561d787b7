"""
integrate.py - Initial value problem solvers: adaptive Dormand-Prince 5(4)
and fixed-step classical RK4.

States may carry leading batch dimensions, x0 of shape (..., n); all batch
elements share one step sequence. Step-size control runs on detached values,
so accepted steps are constants for the backward pass and gradients flow
through the arithmetic of the accepted steps only.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn as nn

from nsindy.autodiff import Tape

Velocity = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

METHODS = ("dopri5", "rk4")


class IntegrationError(RuntimeError):
    """Solver failure, reported with the time and step size where it happened."""

    def __init__(self, message, t=None, h=None):
        super().__init__(message)
        self.t = t
        self.h = h


@dataclass(frozen=True)
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-7
    atol: float = 1e-9
    max_steps: int = 100_000
    initial_step: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}, expected one of {METHODS}")
        if not self.rtol > 0 or not self.atol > 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.initial_step is not None and not self.initial_step > 0:
            raise ValueError("initial_step must be positive")


@dataclass
class Rollout:
    times: torch.Tensor
    states: torch.Tensor  # (m, ..., n)
    step_log: List[float] = field(default_factory=list)
    rejected: int = 0

    @property
    def num_steps(self):
        return len(self.step_log)


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B = _A[6]
# difference between the 5th order solution and the embedded 4th order one
_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# dense output coefficients (Hairer, Norsett & Wanner)
_D = (-12715105075 / 11282082432, 0.0, 87487479700 / 32700410799, -10690763975 / 1880347072,
      701980252875 / 199316789632, -1453857185 / 822651844, 69997945 / 29380423)


def _combine(coeffs, ks):
    total = None
    for c, k in zip(coeffs, ks):
        if c == 0.0:
            continue
        total = c * k if total is None else total + c * k
    return total


def _check_state(x, t, h):
    if not bool(torch.isfinite(x).all()):
        raise IntegrationError(f"non-finite state at t={t:.6g} (last step {h:.3g})", t=t, h=h)


def dopri5_step(f: Velocity, t: float, x: torch.Tensor, h: float, k1: Optional[torch.Tensor] = None):
    """One Dormand-Prince step.

    Returns (x_next, error_estimate, stages). The last stage equals f(t + h,
    x_next), which is reused as the first stage of the next step (FSAL).
    """
    if not h > 0:
        raise IntegrationError(f"step size must be positive, got {h}", t=t, h=h)
    ks = [f(torch.as_tensor(t, dtype=torch.float64), x) if k1 is None else k1]
    for i in range(1, 7):
        xi = x + h * _combine(_A[i], ks)
        if i == 6:
            x_next = xi
        ki = f(torch.as_tensor(t + _C[i] * h, dtype=torch.float64), xi)
        if not bool(torch.isfinite(ki).all()):
            raise IntegrationError(f"non-finite stage {i + 1} at t={t:.6g}", t=t, h=h)
        ks.append(ki)
    error = h * _combine(_E, ks)
    return x_next, error, ks


def _dense(x0, x1, ks, h, theta):
    """4th-order continuous extension of an accepted dopri5 step at fraction theta."""
    diff = x1 - x0
    bspl = h * ks[0] - diff
    r4 = diff - h * ks[6] - bspl
    r5 = h * _combine(_D, ks)
    theta1 = 1.0 - theta
    return x0 + theta * (diff + theta1 * (bspl + theta * (r4 + theta1 * r5)))


def _rms(v):
    """RMS over the state axis, maximized over batch elements."""
    if v.dim() == 0:
        return float(v.abs())
    return float(torch.sqrt(torch.mean(v * v, dim=-1)).max())


def _error_norm(error, x0, x1, cfg):
    # every batch element has to pass its own tolerance
    scale = cfg.atol + cfg.rtol * torch.maximum(x0.detach().abs(), x1.detach().abs())
    return _rms(error.detach() / scale)


def initial_step_size(f: Velocity, t0: float, x0: torch.Tensor, cfg: SolverConfig, order: int = 5) -> float:
    """Curvature-based starting step (Hairer, Norsett & Wanner)."""
    with torch.no_grad():
        x0 = x0.detach()
        scale = cfg.atol + cfg.rtol * x0.abs()
        f0 = f(torch.as_tensor(t0, dtype=torch.float64), x0)
        d0, d1 = _rms(x0 / scale), _rms(f0 / scale)
        h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
        f1 = f(torch.as_tensor(t0 + h0, dtype=torch.float64), x0 + h0 * f0)
        d2 = _rms((f1 - f0) / scale) / h0
        if max(d1, d2) <= 1e-15:
            h1 = max(1e-6, h0 * 1e-3)
        else:
            h1 = (0.01 / max(d1, d2)) ** (1.0 / (order + 1))
    return min(100 * h0, h1)


def _integrate_dopri5(f, x0, grid, cfg):
    t_end = grid[-1]
    out = [x0]
    step_log, rejected = [], 0
    t, x = grid[0], x0
    span = t_end - grid[0]
    h = cfg.initial_step if cfg.initial_step is not None else initial_step_size(f, t, x, cfg)
    h = min(h, span)
    k1 = None
    nxt = 1
    attempts = 0
    while nxt < len(grid):
        if attempts >= cfg.max_steps:
            raise IntegrationError(f"max_steps={cfg.max_steps} exceeded at t={t:.6g}", t=t, h=h)
        attempts += 1
        h = min(h, t_end - t)
        if h <= 16 * torch.finfo(torch.float64).eps * max(abs(t), 1.0):
            raise IntegrationError(f"step size underflow at t={t:.6g} (last step {h:.3g})", t=t, h=h)
        x_new, error, ks = dopri5_step(f, t, x, h, k1)
        err = _error_norm(error, x, x_new, cfg)
        if err <= 1.0:
            t_new = t + h if t_end - (t + h) > 1e-12 * max(abs(t_end), 1.0) else t_end
            _check_state(x_new, t_new, h)
            covered = []
            while nxt < len(grid) and grid[nxt] <= t_new:
                covered.append(grid[nxt])
                nxt += 1
            on_step = bool(covered) and covered[-1] == t_new
            interior = covered[:-1] if on_step else covered
            if interior:
                theta = torch.tensor([(s - t) / h for s in interior], dtype=torch.float64)
                theta = theta.reshape((-1,) + (1,) * x.dim())
                out.extend(_dense(x, x_new, ks, h, theta).unbind(0))
            if on_step:
                out.append(x_new)
            step_log.append(h)
            t, x, k1 = t_new, x_new, ks[6]
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        else:
            rejected += 1
            factor = max(0.2, 0.9 * err ** -0.2)
        h = h * factor
    return out, step_log, rejected


def _integrate_rk4(f, x0, grid):
    out = [x0]
    step_log = []
    x = x0
    for t, t_next in zip(grid[:-1], grid[1:]):
        h = t_next - t
        tt = torch.as_tensor(t, dtype=torch.float64)
        k1 = f(tt, x)
        k2 = f(tt + h / 2, x + (h / 2) * k1)
        k3 = f(tt + h / 2, x + (h / 2) * k2)
        k4 = f(torch.as_tensor(t_next, dtype=torch.float64), x + h * k3)
        x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        _check_state(x, t_next, h)
        out.append(x)
        step_log.append(h)
    return out, step_log, 0


def _integrate(f, x0, times, cfg):
    times = torch.as_tensor(times, dtype=torch.float64)
    grid = [float(t) for t in times]
    if len(grid) < 1:
        raise ValueError("time grid is empty")
    if any(b <= a for a, b in zip(grid[:-1], grid[1:])):
        raise ValueError("time grid must be strictly increasing")
    x0 = torch.as_tensor(x0, dtype=torch.float64)
    _check_state(x0, grid[0], 0.0)
    if len(grid) == 1:
        out, step_log, rejected = [x0], [], 0
    elif cfg.method == "rk4":
        out, step_log, rejected = _integrate_rk4(f, x0, grid)
    else:
        out, step_log, rejected = _integrate_dopri5(f, x0, grid, cfg)
    return Rollout(times=times, states=torch.stack(out), step_log=step_log, rejected=rejected)


def solve_ivp(f: Velocity, x0, times, cfg: SolverConfig = SolverConfig()) -> Rollout:
    """Integrate x' = f(t, x) from x0 = x(times[0]); states at every grid point."""
    with torch.no_grad():
        return _integrate(f, x0, times, cfg)


def rollout_with_grad(f: Velocity, x0, times, cfg: SolverConfig = SolverConfig(),
                      tape: Optional[Tape] = None) -> Tuple[Rollout, Tape]:
    """As solve_ivp, but keeps the autograd graph so the tape can differentiate
    a loss over the rollout w.r.t. the parameters of f."""
    if tape is None:
        tape = Tape(f if isinstance(f, nn.Module) else [])
    with torch.enable_grad():
        rollout = _integrate(f, x0, times, cfg)
    tape.watch(rollout.states, "odesolve")
    return rollout, tape
