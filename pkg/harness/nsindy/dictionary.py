"""
dictionary.py - Libraries of candidate functions and their analytic Jacobians.

A Dictionary is an ordered, immutable list of terms. Monomials come first in
graded-lexicographic order (degree 0..d, lexicographic in variable indices
within a degree), trigonometric terms follow in declaration order.
"""
import itertools
import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Tuple

import torch


class DictionaryError(ValueError):
    """Raised for malformed dictionaries or bad evaluation inputs."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Monomial:
    exponents: Tuple[int, ...]

    @property
    def degree(self):
        return sum(self.exponents)

    def name(self, var_names):
        factors = []
        for var, power in zip(var_names, self.exponents):
            if power == 1:
                factors.append(var)
            elif power > 1:
                factors.append(f"{var}^{power}")
        return "*".join(factors) if factors else "1"


@dataclass(frozen=True)
class Trig:
    index: int
    func: str  # "sin" or "cos"

    def name(self, var_names):
        return f"{self.func}({var_names[self.index]})"


def default_var_names(n):
    return tuple(f"x{i + 1}" for i in range(n))


def _check_finite(x):
    bad = ~torch.isfinite(x)
    if bool(bad.any()):
        # report the state coordinate of the first offending entry
        flat = int(torch.nonzero(bad.reshape(-1))[0])
        index = flat % x.shape[-1]
        raise DictionaryError(f"non-finite value in state coordinate {index}", index=index)


class Dictionary:
    """An ordered library of candidate functions over an n-dimensional state."""

    def __init__(self, arity: int, terms: Sequence, var_names: Optional[Sequence[str]] = None):
        if arity < 1:
            raise DictionaryError(f"arity must be >= 1, got {arity}")
        self.arity = arity
        self.var_names = tuple(var_names) if var_names else default_var_names(arity)
        if len(self.var_names) != arity:
            raise DictionaryError(f"expected {arity} variable names, got {len(self.var_names)}")
        if len(set(terms)) != len(terms):
            dup = next(t for t in terms if terms.count(t) > 1)
            raise DictionaryError(f"duplicate term {dup.name(self.var_names)}")
        for term in terms:
            if isinstance(term, Trig) and not 0 <= term.index < arity:
                raise DictionaryError(f"trig term references variable {term.index}, arity is {arity}",
                                      index=term.index)
            if isinstance(term, Monomial) and len(term.exponents) != arity:
                raise DictionaryError(f"monomial {term.exponents} does not match arity {arity}")
        self.terms = tuple(terms)

        monomials = [t for t in self.terms if isinstance(t, Monomial)]
        if any(isinstance(t, Monomial) for t in self.terms[len(monomials):]):
            raise DictionaryError("monomials must precede trigonometric terms")
        self.max_degree = max((m.degree for m in monomials), default=0)
        self._exponents = torch.tensor([m.exponents for m in monomials], dtype=torch.float64).reshape(-1, arity)
        self._trig = [t for t in self.terms if isinstance(t, Trig)]

    @property
    def size(self):
        return len(self.terms)

    def __len__(self):
        return len(self.terms)

    def __eq__(self, other):
        return isinstance(other, Dictionary) and self.terms == other.terms and self.arity == other.arity

    def __hash__(self):
        return hash((self.arity, self.terms))

    def __repr__(self):
        return f"Dictionary(n={self.arity}, p={self.size}, terms=[{', '.join(self.names())}])"

    def with_var_names(self, var_names):
        return Dictionary(self.arity, self.terms, var_names)

    def term_name(self, k: int) -> str:
        if not 0 <= k < self.size:
            raise DictionaryError(f"term index {k} out of range for p={self.size}", index=k)
        return self.terms[k].name(self.var_names)

    def names(self):
        return [self.term_name(k) for k in range(self.size)]

    def index_of(self, name: str) -> int:
        names = self.names()
        if name not in names:
            raise DictionaryError(f"no term named {name!r} in {names}")
        return names.index(name)

    def constant_index(self) -> Optional[int]:
        zero = tuple([0] * self.arity)
        for k, term in enumerate(self.terms):
            if isinstance(term, Monomial) and term.exponents == zero:
                return k
        return None

    def eval(self, x: torch.Tensor) -> torch.Tensor:
        """Evaluate every term at x of shape (..., n); returns (..., p)."""
        x = self._check_input(x)
        cols = []
        if self._exponents.shape[0]:
            powers = x.unsqueeze(-2) ** self._exponents.to(x.dtype)
            cols.append(powers.prod(dim=-1))
        for term in self._trig:
            xi = x[..., term.index:term.index + 1]
            cols.append(torch.cos(xi) if term.func == "cos" else torch.sin(xi))
        return torch.cat(cols, dim=-1)

    def eval_jacobian(self, x: torch.Tensor) -> torch.Tensor:
        """Analytic Jacobian of eval: (..., p, n) with entry (k, j) = d term_k / d x_j."""
        x = self._check_input(x)
        n = self.arity
        blocks = []
        if self._exponents.shape[0]:
            expo = self._exponents.to(x.dtype)
            xs = x.unsqueeze(-2)
            powers = xs ** expo                                   # (..., pm, n)
            lowered = expo * xs ** torch.clamp(expo - 1, min=0)   # d/dx_j of x_j^e_j
            eye = torch.eye(n, dtype=torch.bool)
            # factors[..., k, j, i] is x_i^e_ki for i != j and the derivative for i == j
            factors = torch.where(eye, lowered.unsqueeze(-1), powers.unsqueeze(-2))
            blocks.append(factors.prod(dim=-1))
        for term in self._trig:
            xi = x[..., term.index]
            deriv = -torch.sin(xi) if term.func == "cos" else torch.cos(xi)
            onehot = torch.zeros(n, dtype=x.dtype)
            onehot[term.index] = 1.0
            blocks.append(deriv[..., None, None] * onehot)
        return torch.cat(blocks, dim=-2)

    def _check_input(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        if x.shape[-1] != self.arity:
            raise DictionaryError(f"state has {x.shape[-1]} coordinates, dictionary arity is {self.arity}")
        _check_finite(x)
        return x


def build_poly_library(n: int, d: int, var_names=None) -> Dictionary:
    """All monomials of total degree <= d in n variables, graded-lex ordered."""
    if n < 1 or d < 0:
        raise DictionaryError(f"need n >= 1 and d >= 0, got n={n}, d={d}")
    terms = []
    for degree in range(d + 1):
        for combo in itertools.combinations_with_replacement(range(n), degree):
            exponents = [0] * n
            for i in combo:
                exponents[i] += 1
            terms.append(Monomial(tuple(exponents)))
    assert len(terms) == math.comb(n + d, d)
    return Dictionary(n, terms, var_names)


def augment_trig(dictionary: Dictionary, indices: Sequence[int]) -> Dictionary:
    """Append cos(x_i), sin(x_i) for each listed index, in listed order."""
    terms = list(dictionary.terms)
    for i in indices:
        if not 0 <= i < dictionary.arity:
            raise DictionaryError(f"trig index {i} out of range for arity {dictionary.arity}", index=i)
        terms.extend([Trig(i, "cos"), Trig(i, "sin")])
    return Dictionary(dictionary.arity, terms, dictionary.var_names)


def from_spec(spec: Mapping, var_names=None) -> Dictionary:
    """Build from a config mapping {poly: {n, d}, trig: [indices]}."""
    poly = spec["poly"]
    library = build_poly_library(int(poly["n"]), int(poly["d"]), var_names)
    return augment_trig(library, [int(i) for i in spec.get("trig", [])])
