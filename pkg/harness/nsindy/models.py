"""
models.py - Velocity parameterizations f_Theta(t, x) built on a dictionary.

Every model is a torch.nn.Module whose parameters form the ParameterStore.
Dictionary coefficient matrices are the only parameters subject to the L1
penalty and pruning; they are listed by `coefficient_names()`.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn as nn

from nsindy.dictionary import Dictionary

KINDS = ("plain", "hamiltonian", "generic", "port_hamiltonian", "mlp")


class ModelError(ValueError):
    pass


class StructureError(ModelError):
    """A structure invariant (skew Lambda, PSD D, masked zeros) does not hold."""


def _check_state(x, n):
    if x.shape[-1] != n:
        raise ModelError(f"state has {x.shape[-1]} coordinates, model expects {n}")


def _potential_gradient(xi: torch.Tensor, dictionary: Dictionary, x: torch.Tensor) -> torch.Tensor:
    """Gradient of the scalar potential Phi(x) xi w.r.t. x, shape (..., n)."""
    if xi.shape != (dictionary.size, 1):
        raise ModelError(f"potential coefficients must be ({dictionary.size}, 1), got {tuple(xi.shape)}")
    jac = dictionary.eval_jacobian(x)                     # (..., p, n)
    return torch.einsum("...pn,p->...n", jac, xi[:, 0])


def potential(xi: torch.Tensor, dictionary: Dictionary, x: torch.Tensor) -> torch.Tensor:
    return (dictionary.eval(x) @ xi)[..., 0]


def plain_velocity(xi: torch.Tensor, dictionary: Dictionary, x: torch.Tensor) -> torch.Tensor:
    """x' = (Phi(x)^T Xi)^T."""
    if xi.shape != (dictionary.size, dictionary.arity):
        raise ModelError(f"coefficients must be ({dictionary.size}, {dictionary.arity}), got {tuple(xi.shape)}")
    _check_state(x, dictionary.arity)
    return dictionary.eval(x) @ xi


def hamiltonian_velocity(xi_h: torch.Tensor, dictionary: Dictionary, x: torch.Tensor) -> torch.Tensor:
    """Canonical equations q' = dH/dp, p' = -dH/dq."""
    if dictionary.arity != 2:
        raise ModelError(f"hamiltonian models need a canonical pair, got n={dictionary.arity}")
    _check_state(x, 2)
    grad = _potential_gradient(xi_h, dictionary, x)
    return torch.stack([grad[..., 1], -grad[..., 0]], dim=-1)


@dataclass
class GenericParams:
    energy: torch.Tensor        # (p, 1)
    lambda_seeds: torch.Tensor  # (m, n, n)
    d_seed: torch.Tensor        # (m, m)
    poisson: torch.Tensor       # (n, n), fixed
    entropy_index: int

    def lambdas(self):
        return 0.5 * (self.lambda_seeds - self.lambda_seeds.transpose(-1, -2))

    def friction(self):
        return self.d_seed @ self.d_seed.T


def validate_poisson(poisson: torch.Tensor, entropy_index: int):
    n = poisson.shape[0]
    if poisson.shape != (n, n):
        raise ModelError(f"Poisson matrix must be square, got {tuple(poisson.shape)}")
    if not 0 <= entropy_index < n:
        raise ModelError(f"entropy index {entropy_index} out of range for n={n}")
    if not torch.allclose(poisson, -poisson.T, atol=0.0, rtol=0.0):
        raise ModelError("Poisson matrix must be skew-symmetric")
    if bool(poisson[entropy_index].any()) or bool(poisson[:, entropy_index].any()):
        raise ModelError("Poisson matrix must vanish on the entropy row and column")


def generic_velocity(gp: GenericParams, dictionary: Dictionary, x: torch.Tensor) -> torch.Tensor:
    """x' = L dE/dx + M dS/dx with M built from zeta = Lambda^m D_mn Lambda^n.

    With dS/dx the unit vector at the entropy index, the irreversible part is
    sum_mn (Lambda^m dE)_a D_mn (Lambda^n dE)_s.
    """
    n = dictionary.arity
    _check_state(x, n)
    if gp.poisson.shape != (n, n):
        raise ModelError(f"Poisson matrix must be ({n}, {n}), got {tuple(gp.poisson.shape)}")
    if not 0 <= gp.entropy_index < n:
        raise ModelError(f"entropy index {gp.entropy_index} out of range for n={n}")
    grad_e = _potential_gradient(gp.energy, dictionary, x)             # (..., n)
    reversible = grad_e @ gp.poisson.T
    v = torch.einsum("mab,...b->...ma", gp.lambdas(), grad_e)           # (..., m, n)
    weights = v[..., gp.entropy_index] @ gp.friction()                  # (..., m)
    irreversible = torch.einsum("...m,...ma->...a", weights, v)
    return reversible + irreversible


@dataclass
class PortParams:
    hamiltonian: torch.Tensor  # (p, 1)
    damping: torch.Tensor      # scalar N
    gamma: float
    omega: float

    def forcing(self, t):
        return self.gamma * torch.sin(self.omega * torch.as_tensor(t, dtype=torch.float64))


def port_velocity(pp: PortParams, dictionary: Dictionary, t, x: torch.Tensor) -> torch.Tensor:
    """q' = dH/dp, p' = -dH/dq + N dH/dp + F(t)."""
    if dictionary.arity != 2:
        raise ModelError(f"port-Hamiltonian models need a canonical pair, got n={dictionary.arity}")
    _check_state(x, 2)
    grad = _potential_gradient(pp.hamiltonian, dictionary, x)
    q_dot = grad[..., 1]
    p_dot = -grad[..., 0] + pp.damping * grad[..., 1] + pp.forcing(t)
    return torch.stack(torch.broadcast_tensors(q_dot, p_dot), dim=-1)


def mlp_velocity(net: nn.Module, x: torch.Tensor) -> torch.Tensor:
    return net(x)


def _uniform(shape, bound, generator):
    return torch.empty(shape, dtype=torch.float64).uniform_(-bound, bound, generator=generator)


class VelocityModel(nn.Module):
    """Base class: forward(t, x) returns x' for x of shape (..., n)."""

    kind = "abstract"

    def __init__(self, dictionary: Optional[Dictionary], n: int):
        super().__init__()
        self.dictionary = dictionary
        self.n = n

    def coefficient_names(self) -> List[str]:
        return []

    def coefficients(self):
        params = dict(self.named_parameters())
        return [(name, params[name]) for name in self.coefficient_names()]

    def check_structure(self):
        for name, coeff in self.coefficients():
            mask = getattr(self, f"{name}_mask", None)
            if mask is not None and bool((coeff[~mask] != 0).any()):
                raise StructureError(f"masked entries of {name} are not zero")


class PlainModel(VelocityModel):
    kind = "plain"

    def __init__(self, dictionary: Dictionary, generator=None):
        super().__init__(dictionary, dictionary.arity)
        self.xi = nn.Parameter(_uniform((dictionary.size, dictionary.arity), 0.5, generator))
        self.register_buffer("xi_mask", torch.ones_like(self.xi, dtype=torch.bool))

    def coefficient_names(self):
        return ["xi"]

    def forward(self, t, x):
        return plain_velocity(self.xi, self.dictionary, x)


class _PotentialModel(VelocityModel):
    """Shared setup for models driven by a scalar potential Phi(x) xi."""

    def __init__(self, dictionary: Dictionary, generator=None):
        super().__init__(dictionary, dictionary.arity)
        xi = _uniform((dictionary.size, 1), 0.5, generator)
        const = dictionary.constant_index()
        if const is not None:
            # a constant shift of the potential leaves the dynamics unchanged
            xi[const] = 0.0
        self.xi = nn.Parameter(xi)
        self.register_buffer("xi_mask", torch.ones_like(self.xi, dtype=torch.bool))

    def coefficient_names(self):
        return ["xi"]

    def potential(self, x):
        return potential(self.xi, self.dictionary, x)

    def potential_gradient(self, x):
        return _potential_gradient(self.xi, self.dictionary, x)


class HamiltonianModel(_PotentialModel):
    kind = "hamiltonian"

    def __init__(self, dictionary: Dictionary, generator=None):
        if dictionary.arity != 2:
            raise ModelError(f"hamiltonian models need n=2, got {dictionary.arity}")
        super().__init__(dictionary, generator)

    def forward(self, t, x):
        return hamiltonian_velocity(self.xi, self.dictionary, x)


class GenericModel(_PotentialModel):
    kind = "generic"

    def __init__(self, dictionary: Dictionary, poisson: Sequence, entropy_index: int,
                 num_lambda: Optional[int] = None, generator=None):
        super().__init__(dictionary, generator)
        n = dictionary.arity
        poisson = torch.as_tensor(poisson, dtype=torch.float64)
        validate_poisson(poisson, entropy_index)
        if poisson.shape[0] != n:
            raise ModelError(f"Poisson matrix is {poisson.shape[0]}x{poisson.shape[0]}, state dimension is {n}")
        m = num_lambda if num_lambda is not None else n * (n - 1) // 2
        if m < 1:
            raise ModelError(f"need at least one Lambda matrix, got {m}")
        self.entropy_index = entropy_index
        self.register_buffer("poisson", poisson)
        self.lambda_seeds = nn.Parameter(_uniform((m, n, n), 0.1, generator))
        self.d_seed = nn.Parameter(_uniform((m, m), 0.1, generator))

    def params(self) -> GenericParams:
        return GenericParams(self.xi, self.lambda_seeds, self.d_seed, self.poisson, self.entropy_index)

    def forward(self, t, x):
        return generic_velocity(self.params(), self.dictionary, x)

    def check_structure(self):
        super().check_structure()
        with torch.no_grad():
            gp = self.params()
            lam = gp.lambdas()
            if bool((lam + lam.transpose(-1, -2)).abs().max() > 0):
                raise StructureError("assembled Lambda is not skew-symmetric")
            friction = gp.friction()
            scale = float(torch.linalg.matrix_norm(friction, ord=2))
            if bool((friction - friction.T).abs().max() > 1e-14 * scale):
                raise StructureError("assembled D is not symmetric")
            min_eig = float(torch.linalg.eigvalsh(friction).min())
            if min_eig < -1e-12 * scale:
                raise StructureError(f"assembled D is not PSD (min eigenvalue {min_eig:.3g})")


class PortHamiltonianModel(_PotentialModel):
    kind = "port_hamiltonian"

    def __init__(self, dictionary: Dictionary, gamma: float, omega: float, generator=None):
        if dictionary.arity != 2:
            raise ModelError(f"port-Hamiltonian models need n=2, got {dictionary.arity}")
        super().__init__(dictionary, generator)
        self.gamma = float(gamma)
        self.omega = float(omega)
        self.damping = nn.Parameter(_uniform((), 0.1, generator))

    def params(self) -> PortParams:
        return PortParams(self.xi, self.damping, self.gamma, self.omega)

    @property
    def delta(self):
        """Identified damping coefficient, reported as -N."""
        return -float(self.damping)

    def forward(self, t, x):
        return port_velocity(self.params(), self.dictionary, t, x)


class MlpModel(VelocityModel):
    """Black-box baseline: affine layers with tanh in between."""

    kind = "mlp"

    def __init__(self, n: int, width: int = 100, layers: int = 4, generator=None):
        super().__init__(None, n)
        dims = [n] + [width] * (layers - 1) + [n]
        modules: List[nn.Module] = []
        for i in range(len(dims) - 1):
            linear = nn.Linear(dims[i], dims[i + 1], dtype=torch.float64)
            bound = 1.0 / dims[i] ** 0.5
            with torch.no_grad():
                linear.weight.copy_(_uniform(linear.weight.shape, bound, generator))
                linear.bias.copy_(_uniform(linear.bias.shape, bound, generator))
            modules.append(linear)
            if i < len(dims) - 2:
                modules.append(nn.Tanh())
        self.net = nn.Sequential(*modules)

    def forward(self, t, x):
        _check_state(x, self.n)
        return mlp_velocity(self.net, x)


def build_model(kind: str, dictionary: Optional[Dictionary], n: int, *, generator=None,
                poisson=None, entropy_index=None, num_lambda=None,
                gamma=None, omega=None, width=100, layers=4) -> VelocityModel:
    if kind == "plain":
        return PlainModel(dictionary, generator)
    if kind == "hamiltonian":
        return HamiltonianModel(dictionary, generator)
    if kind == "generic":
        if poisson is None or entropy_index is None:
            raise ModelError("generic models need a Poisson matrix and an entropy index")
        return GenericModel(dictionary, poisson, entropy_index, num_lambda, generator)
    if kind == "port_hamiltonian":
        if gamma is None or omega is None:
            raise ModelError("port-Hamiltonian models need the forcing gamma and omega")
        return PortHamiltonianModel(dictionary, gamma, omega, generator)
    if kind == "mlp":
        return MlpModel(n, width, layers, generator)
    raise ModelError(f"unknown model kind {kind!r}, expected one of {KINDS}")
