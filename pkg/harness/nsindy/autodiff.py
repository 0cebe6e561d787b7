"""
autodiff.py - Reverse-accumulation gradients of a scalar loss w.r.t. the
ParameterStore, built on torch.autograd.

A Tape is created per training step. Operations are recorded eagerly under an
op tag so that a non-finite value can be traced back to the op that produced
it when the backward pass runs. The tape holds no graph references after
backward, so memory is reclaimed between iterations.
"""
import operator
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import torch
import torch.nn as nn


class AutodiffError(RuntimeError):
    """Raised for an invalid root or a non-finite value on the tape."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


def _power_by_integer(a, k):
    if int(k) != k:
        raise AutodiffError(f"exponent must be an integer, got {k}", op="powi")
    return a ** int(k)


# Minimum primitive set, keyed by op tag.
PRIMITIVES: Dict[str, Callable] = {
    "add": operator.add,
    "sub": operator.sub,
    "mul": operator.mul,
    "div": operator.truediv,
    "neg": operator.neg,
    "powi": _power_by_integer,
    "sin": torch.sin,
    "cos": torch.cos,
    "tanh": torch.tanh,
    "abs": torch.abs,
    "dot": torch.dot,
    "matvec": torch.mv,
    "broadcast": lambda a, shape: torch.broadcast_to(torch.as_tensor(a, dtype=torch.float64), shape),
    "sum": torch.sum,
}


@dataclass(frozen=True)
class Node:
    id: int
    op: str
    shape: Tuple[int, ...]
    finite: bool


@dataclass
class GradientMap:
    """Adjoints of the loss, keyed by parameter name, shaped like the parameters."""
    grads: Dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.grads[name]

    def __contains__(self, name):
        return name in self.grads

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def is_finite(self):
        return all(bool(torch.isfinite(g).all()) for g in self.grads.values())

    def norm(self):
        total = sum(float((g * g).sum()) for g in self.grads.values())
        return total ** 0.5


def merge_gradient_maps(maps: Iterable[GradientMap]) -> GradientMap:
    """Sum gradient maps in the given order so the reduction is deterministic."""
    merged: Dict[str, torch.Tensor] = {}
    for gmap in maps:
        for name, grad in gmap.items():
            merged[name] = grad.clone() if name not in merged else merged[name] + grad
    return GradientMap(merged)


ParameterSource = Union[nn.Module, Mapping[str, torch.Tensor], Iterable[Tuple[str, torch.Tensor]]]


class Tape:
    """Records one forward computation over a set of named parameters."""

    def __init__(self, parameters: ParameterSource):
        if isinstance(parameters, nn.Module):
            named = list(parameters.named_parameters())
        elif isinstance(parameters, Mapping):
            named = list(parameters.items())
        else:
            named = list(parameters)
        self.parameters: List[Tuple[str, torch.Tensor]] = named
        self.nodes: List[Node] = []
        self._consumed = False

    def record(self, op: Union[str, Callable], *operands, tag: Optional[str] = None):
        """Evaluate op on operands eagerly and append a node to the tape.

        `op` is either a tag from PRIMITIVES or a callable; in the latter case
        `tag` names the node.
        """
        if isinstance(op, str):
            if op not in PRIMITIVES:
                raise AutodiffError(f"unknown primitive {op!r}", op=op)
            fn, name = PRIMITIVES[op], op
        else:
            fn, name = op, tag or getattr(op, "__name__", "call")
        value = fn(*operands)
        return self.watch(value, name)

    def watch(self, value: torch.Tensor, op: str):
        """Append an externally computed value to the tape under op tag."""
        finite = bool(torch.isfinite(value).all())
        self.nodes.append(Node(len(self.nodes), op, tuple(value.shape), finite))
        return value

    def backward(self, loss: torch.Tensor) -> GradientMap:
        if loss.numel() != 1:
            raise AutodiffError(f"backward needs a scalar root, got shape {tuple(loss.shape)}", op="backward")
        if self._consumed:
            raise AutodiffError("tape already consumed by a backward pass", op="backward")
        for node in self.nodes:
            if not node.finite:
                raise AutodiffError(f"non-finite value recorded by op {node.op!r} (node {node.id})", op=node.op)

        tensors = [p for _, p in self.parameters]
        if loss.requires_grad and tensors:
            adjoints = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
        else:
            adjoints = [None] * len(tensors)
        self._consumed = True

        grads = {}
        for (name, param), adj in zip(self.parameters, adjoints):
            adj = torch.zeros_like(param) if adj is None else adj.detach()
            if not bool(torch.isfinite(adj).all()):
                raise AutodiffError(f"non-finite adjoint for parameter {name!r}", op="backward")
            grads[name] = adj
        return GradientMap(grads)
