"""
evaluate.py - Metrics and reporting for fitted models.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from absl import logging

from nsindy.dictionary import Dictionary
from nsindy.integrate import IntegrationError, SolverConfig, solve_ivp
from nsindy.models import GenericModel, ModelError, VelocityModel
from nsindy.systems import SystemDef

POTENTIAL_KINDS = ("hamiltonian", "generic", "port_hamiltonian")


@dataclass
class MetricSeries:
    times: np.ndarray
    values: np.ndarray
    partial: bool = False
    failures: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.times.shape != self.values.shape:
            raise ValueError(f"times {self.times.shape} and values {self.values.shape} differ in length")

    def __len__(self):
        return len(self.times)


@dataclass
class CoefficientScore:
    support_exact: bool
    max_abs_err: float
    rows: List[dict] = field(default_factory=list)


@dataclass
class FitReport:
    system: str
    model_kind: str
    var_names: List[str]
    equations: List[str]
    support: List[List[bool]] = field(default_factory=list)
    parameters: Dict[str, list] = field(default_factory=dict)
    loss_history: List[float] = field(default_factory=list)
    val_history: List[Tuple[int, float]] = field(default_factory=list)
    lr_history: List[float] = field(default_factory=list)
    nnz_history: List[int] = field(default_factory=list)
    score: Optional[dict] = None
    damping: Optional[float] = None
    dictionary: Optional[dict] = None
    config: Optional[dict] = None
    metrics: Dict[str, float] = field(default_factory=dict)

    @property
    def nnz(self):
        return sum(sum(1 for s in row if s) for row in self.support)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "FitReport":
        raw = json.loads(text)
        raw["val_history"] = [tuple(v) for v in raw.get("val_history", [])]
        return cls(**raw)


def _format_terms(coeffs: Sequence[float], names: Sequence[str]) -> str:
    parts = []
    for c, name in zip(coeffs, names):
        if c == 0.0:
            continue
        parts.append(f"{c:.6f}" if name == "1" else f"{c:.6f}*{name}")
    return " + ".join(parts) if parts else "0"


def render_equations(xi, dictionary: Dictionary, var_names: Sequence[str]) -> List[str]:
    """One line per state, nonzero terms in dictionary order at 6 decimals."""
    xi = np.asarray(torch.as_tensor(xi).detach(), dtype=np.float64)
    names = dictionary.with_var_names(var_names).names()
    return [f"d{var}/dt = {_format_terms(xi[:, j], names)}" for j, var in enumerate(var_names)]


def render_potential(xi, dictionary: Dictionary, var_names: Sequence[str], symbol: str = "H") -> str:
    xi = np.asarray(torch.as_tensor(xi).detach(), dtype=np.float64)
    names = dictionary.with_var_names(var_names).names()
    return f"{symbol} = {_format_terms(xi[:, 0], names)}"


def render_model(model: VelocityModel, var_names: Sequence[str]) -> List[str]:
    if model.kind == "plain":
        return render_equations(model.xi, model.dictionary, var_names)
    if model.kind in POTENTIAL_KINDS:
        symbol = "E" if model.kind == "generic" else "H"
        lines = [render_potential(model.xi, model.dictionary, var_names, symbol)]
        if model.kind == "port_hamiltonian":
            lines.append(f"delta = {model.delta:.6f}")
        return lines
    return [f"mlp: {sum(p.numel() for p in model.parameters())} parameters"]


def truth_matrix(system: SystemDef, dictionary: Dictionary, kind: str) -> Optional[np.ndarray]:
    """Ground-truth coefficients laid out against `dictionary`, or None if unknown."""
    named = dictionary.with_var_names(system.var_names)
    if kind == "plain":
        if system.plain_truth is None:
            return None
        truth = np.zeros((named.size, named.arity))
        for j, var in enumerate(system.var_names):
            for term, c in system.plain_truth.get(var, {}).items():
                truth[named.index_of(term), j] = c
        return truth
    if kind in POTENTIAL_KINDS:
        if system.potential_truth is None:
            return None
        truth = np.zeros((named.size, 1))
        for term, c in system.potential_truth.items():
            truth[named.index_of(term), 0] = c
        return truth
    return None


def score_coefficients(learned, truth, names: Optional[Sequence[str]] = None) -> CoefficientScore:
    learned = np.asarray(torch.as_tensor(learned).detach(), dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if learned.shape != truth.shape:
        raise ValueError(f"dictionary mismatch: learned {learned.shape} vs truth {truth.shape}")
    union = (learned != 0) | (truth != 0)
    support_exact = bool(np.array_equal(learned != 0, truth != 0))
    errors = np.abs(learned - truth)
    max_abs_err = float(errors[union].max()) if union.any() else 0.0
    rows = []
    for k, j in zip(*np.nonzero(union)):
        rows.append({
            "term": names[k] if names is not None else int(k),
            "column": int(j),
            "learned": float(learned[k, j]),
            "truth": float(truth[k, j]),
            "error": float(errors[k, j]),
        })
    return CoefficientScore(support_exact, max_abs_err, rows)


def rollout_states(model: VelocityModel, x0, times, cfg: SolverConfig) -> torch.Tensor:
    return solve_ivp(model, x0, times, cfg).states


def time_instant_mse(model: VelocityModel, states: torch.Tensor, times, cfg: SolverConfig) -> MetricSeries:
    """Mean over trajectories of ||x_model(t_i) - x(t_i)||^2 / n, rolled out from x(0)."""
    states = torch.as_tensor(states, dtype=torch.float64)
    times = torch.as_tensor(times, dtype=torch.float64)
    if states.shape[-1] != model.n:
        raise ModelError(f"dataset has state dimension {states.shape[-1]}, model expects {model.n}")
    total = torch.zeros(len(times), dtype=torch.float64)
    failures = []
    for i, target in enumerate(states):
        try:
            predicted = rollout_states(model, target[0], times, cfg)
        except IntegrationError as e:
            logging.warning("mse rollout of trajectory %d failed: %s", i, e)
            failures.append(i)
            continue
        total += ((predicted - target) ** 2).mean(dim=-1)
    ok = len(states) - len(failures)
    values = total / ok if ok else torch.full_like(total, float("nan"))
    return MetricSeries(times.numpy(), values.numpy(), partial=bool(failures), failures=failures)


def _require_kind(model, kinds):
    if model.kind not in kinds:
        raise ModelError(f"metric needs a model of kind {kinds}, got {model.kind!r}")


def energy_entropy_rates(model: GenericModel, states: torch.Tensor, times) -> Tuple[MetricSeries, MetricSeries]:
    """dE/dt = grad E . f and dS/dt = f_S along a rollout, computed analytically."""
    _require_kind(model, ("generic",))
    with torch.no_grad():
        f = model(torch.as_tensor(times, dtype=torch.float64), states)
        de = (model.potential_gradient(states) * f).sum(dim=-1)
        ds = f[..., model.entropy_index]
    return MetricSeries(times, de.numpy()), MetricSeries(times, ds.numpy())


def reference_energy_entropy_rates(system: SystemDef, model: VelocityModel, states: torch.Tensor,
                                   times) -> Tuple[MetricSeries, MetricSeries]:
    """Rates of the ground-truth E and S along a rollout of any model."""
    if system.entropy_index is None:
        raise ModelError(f"system {system.name!r} has no entropy coordinate")
    with torch.no_grad():
        f = model(torch.as_tensor(times, dtype=torch.float64), states)
        de = (system.potential_gradient(states) * f).sum(dim=-1)
        ds = f[..., system.entropy_index]
    return MetricSeries(times, de.numpy()), MetricSeries(times, ds.numpy())


def hamiltonian_trace(model: VelocityModel, states: torch.Tensor, times) -> MetricSeries:
    _require_kind(model, ("hamiltonian", "port_hamiltonian"))
    with torch.no_grad():
        return MetricSeries(times, model.potential(states).numpy())


def true_hamiltonian_trace(system: SystemDef, states: torch.Tensor, times) -> MetricSeries:
    with torch.no_grad():
        return MetricSeries(times, system.potential(states).numpy())


def relative_drift(series: MetricSeries) -> float:
    h0 = series.values[0]
    return float(np.max(np.abs(series.values - h0)) / max(abs(h0), 1e-300))


def write_series(path, series: MetricSeries):
    path = Path(path)
    with open(path, "w") as f:
        f.write("# time\tvalue\n")
        for t, v in zip(series.times, series.values):
            f.write(f"{float(t)!r}\t{float(v)!r}\n")
    return path


def write_report(report: FitReport, outdir) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "report.json").write_text(report.to_json())
    (outdir / "equations.txt").write_text("\n".join(report.equations) + "\n")
    return outdir


def read_report(outdir) -> FitReport:
    path = Path(outdir) / "report.json"
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    return FitReport.from_json(path.read_text())
