"""
systems.py - Ground-truth benchmark systems.

Each builder returns a SystemDef for one benchmark; keyword arguments
override the physical parameters (e.g. lorenz(rho=20.0)).
"""
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch


@dataclass(frozen=True)
class SystemDef:
    name: str
    var_names: Tuple[str, ...]
    velocity_fn: Callable
    dt: float
    t_final: float
    ic: Tuple[Tuple[float, float], ...]
    params: Mapping[str, float] = field(default_factory=dict)
    ic_shell: Optional[Tuple[float, float]] = None  # radius range for shell sampling of (q, p)
    dictionary: Mapping = field(default_factory=dict)
    default_kind: str = "plain"
    default_l_batch: int = 50
    plain_truth: Optional[Mapping[str, Mapping[str, float]]] = None
    potential_truth: Optional[Mapping[str, float]] = None
    potential_fn: Optional[Callable] = None       # H or E as a function of x
    potential_grad_fn: Optional[Callable] = None  # its gradient
    poisson: Optional[Tuple[Tuple[float, ...], ...]] = None
    entropy_index: Optional[int] = None
    forcing: Optional[Tuple[float, float]] = None  # (gamma, omega)
    damping: Optional[float] = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"{self.name}: dt must be positive")
        steps = self.t_final / self.dt
        if abs(steps - round(steps)) * self.dt > 1e-9:
            raise ValueError(f"{self.name}: t_final={self.t_final} is not a multiple of dt={self.dt}")
        if len(self.ic) != self.n:
            raise ValueError(f"{self.name}: expected {self.n} initial-condition ranges, got {len(self.ic)}")
        if not all(math.isfinite(lo) and math.isfinite(hi) and lo <= hi for lo, hi in self.ic):
            raise ValueError(f"{self.name}: initial-condition ranges must be finite and ordered")

    @property
    def n(self):
        return len(self.var_names)

    @property
    def num_samples(self):
        return int(round(self.t_final / self.dt)) + 1

    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.num_samples, dtype=np.float64)

    def velocity(self, t, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        return self.velocity_fn(torch.as_tensor(t, dtype=torch.float64), x, self.params)

    def sample_ic(self, rng: np.random.Generator) -> np.ndarray:
        x0 = np.array([rng.uniform(lo, hi) for lo, hi in self.ic], dtype=np.float64)
        if self.ic_shell is not None:
            radius = rng.uniform(*self.ic_shell)
            angle = rng.uniform(0.0, 2.0 * np.pi)
            x0[0], x0[1] = radius * np.cos(angle), radius * np.sin(angle)
        return x0

    def potential(self, x):
        if self.potential_fn is None:
            raise ValueError(f"{self.name} has no ground-truth potential")
        return self.potential_fn(torch.as_tensor(x, dtype=torch.float64), self.params)

    def potential_gradient(self, x):
        if self.potential_grad_fn is None:
            raise ValueError(f"{self.name} has no ground-truth potential")
        return self.potential_grad_fn(torch.as_tensor(x, dtype=torch.float64), self.params)

    def with_overrides(self, dt=None, t_final=None, ic: Optional[Mapping[str, Sequence[float]]] = None):
        changes = {}
        if dt is not None:
            changes["dt"] = float(dt)
        if t_final is not None:
            changes["t_final"] = float(t_final)
        if ic:
            ranges = list(self.ic)
            for var, bounds in ic.items():
                if var not in self.var_names:
                    raise KeyError(var)
                ranges[self.var_names.index(var)] = (float(bounds[0]), float(bounds[1]))
            changes["ic"] = tuple(ranges)
            changes["ic_shell"] = None if any(v in ic for v in self.var_names[:2]) else self.ic_shell
        return dataclasses.replace(self, **changes)


def _stack(*cols):
    return torch.stack(torch.broadcast_tensors(*cols), dim=-1)


def _merge(defaults, overrides):
    unknown = set(overrides) - set(defaults)
    if unknown:
        raise KeyError(f"unknown system parameters: {sorted(unknown)}")
    return {**defaults, **{k: float(v) for k, v in overrides.items()}}


def hyperbolic(**overrides) -> SystemDef:
    params = _merge({"mu": -0.05, "lam": -1.0}, overrides)

    def velocity(t, x, p):
        return _stack(p["mu"] * x[..., 0], -p["lam"] * x[..., 0] ** 2 + p["lam"] * x[..., 1])

    return SystemDef(
        name="hyperbolic", var_names=("x", "y"), velocity_fn=velocity,
        dt=0.01, t_final=51.20, ic=((-2.0, 2.0), (-2.0, 2.0)), params=params,
        dictionary={"poly": {"n": 2, "d": 3}, "trig": []},
        plain_truth={"x": {"x": params["mu"]}, "y": {"x^2": -params["lam"], "y": params["lam"]}},
    )


def cubic_oscillator(**overrides) -> SystemDef:
    params = _merge({"a": -0.1, "b": 2.0}, overrides)

    def velocity(t, x, p):
        x3, y3 = x[..., 0] ** 3, x[..., 1] ** 3
        return _stack(p["a"] * x3 + p["b"] * y3, -p["b"] * x3 + p["a"] * y3)

    return SystemDef(
        name="cubic_oscillator", var_names=("x", "y"), velocity_fn=velocity,
        dt=0.01, t_final=51.20, ic=((-2.0, 2.0), (-2.0, 2.0)), params=params,
        dictionary={"poly": {"n": 2, "d": 3}, "trig": []},
        plain_truth={"x": {"x^3": params["a"], "y^3": params["b"]},
                     "y": {"x^3": -params["b"], "y^3": params["a"]}},
    )


def van_der_pol(**overrides) -> SystemDef:
    params = _merge({"mu": 2.0}, overrides)

    def velocity(t, x, p):
        xx, yy = x[..., 0], x[..., 1]
        return _stack(yy, -xx + p["mu"] * yy - p["mu"] * xx ** 2 * yy)

    return SystemDef(
        name="van_der_pol", var_names=("x", "y"), velocity_fn=velocity,
        dt=0.01, t_final=51.20, ic=((-2.0, 2.0), (-2.0, 2.0)), params=params,
        dictionary={"poly": {"n": 2, "d": 3}, "trig": []},
        plain_truth={"x": {"y": 1.0}, "y": {"x": -1.0, "y": params["mu"], "x^2*y": -params["mu"]}},
    )


def hopf(**overrides) -> SystemDef:
    params = _merge({"omega": 1.0, "a": -1.0}, overrides)

    def velocity(t, x, p):
        xx, yy, mu = x[..., 0], x[..., 1], x[..., 2]
        r2 = xx ** 2 + yy ** 2
        return _stack(mu * xx + p["omega"] * yy + p["a"] * xx * r2,
                      mu * yy - p["omega"] * xx + p["a"] * yy * r2,
                      torch.zeros_like(mu))

    a, w = params["a"], params["omega"]
    return SystemDef(
        name="hopf", var_names=("x", "y", "mu"), velocity_fn=velocity,
        dt=0.01, t_final=51.20, ic=((-1.0, 1.0), (-1.0, 1.0), (-0.2, 0.6)), params=params,
        dictionary={"poly": {"n": 3, "d": 3}, "trig": []},
        plain_truth={"x": {"x*mu": 1.0, "y": w, "x^3": a, "x*y^2": a},
                     "y": {"y*mu": 1.0, "x": -w, "x^2*y": a, "y^3": a},
                     "mu": {}},
    )


def lorenz(**overrides) -> SystemDef:
    params = _merge({"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}, overrides)

    def velocity(t, x, p):
        xx, yy, zz = x[..., 0], x[..., 1], x[..., 2]
        return _stack(p["sigma"] * (yy - xx), xx * (p["rho"] - zz) - yy, xx * yy - p["beta"] * zz)

    return SystemDef(
        name="lorenz", var_names=("x", "y", "z"), velocity_fn=velocity,
        dt=0.0005, t_final=2.56, ic=((-20.0, 20.0), (-20.0, 20.0), (10.0, 40.0)), params=params,
        dictionary={"poly": {"n": 3, "d": 2}, "trig": []},
        plain_truth={"x": {"x": -params["sigma"], "y": params["sigma"]},
                     "y": {"x": params["rho"], "x*z": -1.0, "y": -1.0},
                     "z": {"x*y": 1.0, "z": -params["beta"]}},
    )


def damped_oscillator(**overrides) -> SystemDef:
    """Damped nonlinear oscillator in GENERIC form, state (q, p, S)."""
    params = _merge({"k": 3.0, "friction": 0.04}, overrides)

    def velocity(t, x, p):
        q, mom = x[..., 0], x[..., 1]
        return _stack(mom, -p["k"] * torch.sin(q) - p["friction"] * mom, p["friction"] * mom ** 2)

    def energy(x, p):
        return 0.5 * x[..., 1] ** 2 - p["k"] * torch.cos(x[..., 0]) + x[..., 2]

    def energy_grad(x, p):
        return _stack(p["k"] * torch.sin(x[..., 0]), x[..., 1], torch.ones_like(x[..., 2]))

    k, c = params["k"], params["friction"]
    return SystemDef(
        name="damped_oscillator", var_names=("q", "p", "S"), velocity_fn=velocity,
        dt=0.001, t_final=5.12, ic=((-1.5, 1.5), (-1.5, 1.5), (0.0, 0.0)), params=params,
        dictionary={"poly": {"n": 3, "d": 3}, "trig": [0, 1]},
        default_kind="generic", default_l_batch=20,
        plain_truth={"q": {"p": 1.0}, "p": {"p": -c, "sin(q)": -k}, "S": {"p^2": c}},
        potential_truth={"p^2": 0.5, "S": 1.0, "cos(q)": -k},
        potential_fn=energy, potential_grad_fn=energy_grad,
        poisson=((0.0, 1.0, 0.0), (-1.0, 0.0, 0.0), (0.0, 0.0, 0.0)), entropy_index=2,
    )


def mass_spring(**overrides) -> SystemDef:
    params = _merge({"k": 1.0, "m": 1.0}, overrides)

    def velocity(t, x, p):
        return _stack(x[..., 1] / p["m"], -p["k"] * x[..., 0])

    def hamiltonian(x, p):
        return 0.5 * p["k"] * x[..., 0] ** 2 + 0.5 * x[..., 1] ** 2 / p["m"]

    def hamiltonian_grad(x, p):
        return _stack(p["k"] * x[..., 0], x[..., 1] / p["m"])

    return SystemDef(
        name="mass_spring", var_names=("q", "p"), velocity_fn=velocity,
        dt=0.1, t_final=3.0, ic=((-1.0, 1.0), (-1.0, 1.0)), ic_shell=(0.5, 1.5), params=params,
        dictionary={"poly": {"n": 2, "d": 3}, "trig": []},
        default_kind="hamiltonian", default_l_batch=20,
        plain_truth={"q": {"p": 1.0 / params["m"]}, "p": {"q": -params["k"]}},
        potential_truth={"q^2": 0.5 * params["k"], "p^2": 0.5 / params["m"]},
        potential_fn=hamiltonian, potential_grad_fn=hamiltonian_grad,
    )


def pendulum(**overrides) -> SystemDef:
    params = _merge({"k": 6.0}, overrides)

    def velocity(t, x, p):
        return _stack(x[..., 1], -p["k"] * torch.sin(x[..., 0]))

    def hamiltonian(x, p):
        return 0.5 * x[..., 1] ** 2 + p["k"] * (1.0 - torch.cos(x[..., 0]))

    def hamiltonian_grad(x, p):
        return _stack(p["k"] * torch.sin(x[..., 0]), x[..., 1])

    return SystemDef(
        name="pendulum", var_names=("q", "p"), velocity_fn=velocity,
        dt=1.0 / 15.0, t_final=9.0, ic=((-1.0, 1.0), (-1.0, 1.0)), params=params,
        dictionary={"poly": {"n": 2, "d": 3}, "trig": [0, 1]},
        default_kind="hamiltonian", default_l_batch=20,
        plain_truth={"q": {"p": 1.0}, "p": {"sin(q)": -params["k"]}},
        potential_truth={"p^2": 0.5, "cos(q)": -params["k"]},
        potential_fn=hamiltonian, potential_grad_fn=hamiltonian_grad,
    )


def _duffing(name, defaults, overrides) -> SystemDef:
    params = _merge(defaults, overrides)

    def velocity(t, x, p):
        q, mom = x[..., 0], x[..., 1]
        force = p["gamma"] * torch.sin(p["omega"] * t)
        return _stack(mom / p["m"],
                      -p["alpha"] * q - p["beta"] * q ** 3 - p["delta"] * mom / p["m"] + force)

    def hamiltonian(x, p):
        q, mom = x[..., 0], x[..., 1]
        return mom ** 2 / (2 * p["m"]) + p["alpha"] * q ** 2 / 2 + p["beta"] * q ** 4 / 4

    def hamiltonian_grad(x, p):
        q, mom = x[..., 0], x[..., 1]
        return _stack(p["alpha"] * q + p["beta"] * q ** 3, mom / p["m"])

    return SystemDef(
        name=name, var_names=("q", "p"), velocity_fn=velocity,
        dt=0.05, t_final=10.0, ic=((-1.0, 1.0), (-1.0, 1.0)), params=params,
        dictionary={"poly": {"n": 2, "d": 4}, "trig": []},
        default_kind="port_hamiltonian",
        potential_truth={"p^2": 0.5 / params["m"], "q^2": params["alpha"] / 2, "q^4": params["beta"] / 4},
        potential_fn=hamiltonian, potential_grad_fn=hamiltonian_grad,
        forcing=(params["gamma"], params["omega"]), damping=params["delta"],
    )


def duffing(**overrides) -> SystemDef:
    return _duffing("duffing", {"alpha": -1.0, "beta": 1.0, "m": 1.0,
                                "gamma": 0.3, "delta": 0.3, "omega": 1.2}, overrides)


def duffing_chaotic(**overrides) -> SystemDef:
    return _duffing("duffing_chaotic", {"alpha": -1.0, "beta": 1.0, "m": 1.0,
                                        "gamma": 0.1, "delta": 0.39, "omega": 1.4}, overrides)


BUILTIN: Dict[str, Callable[..., SystemDef]] = {
    "hyperbolic": hyperbolic,
    "cubic_oscillator": cubic_oscillator,
    "van_der_pol": van_der_pol,
    "hopf": hopf,
    "lorenz": lorenz,
    "damped_oscillator": damped_oscillator,
    "mass_spring": mass_spring,
    "pendulum": pendulum,
    "duffing": duffing,
    "duffing_chaotic": duffing_chaotic,
}


def builtin_systems():
    return [builder() for builder in BUILTIN.values()]


def get_system(name: str, **params) -> SystemDef:
    if name not in BUILTIN:
        raise KeyError(f"unknown system {name!r}, expected one of {sorted(BUILTIN)}")
    return BUILTIN[name](**params)
