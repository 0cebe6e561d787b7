#!/usr/bin/env python3
"""
params.py - Run configuration, scales and directory structure.
"""
# Copyright 2025 Google LLC
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import torch

from nsindy.dictionary import Dictionary, DictionaryError, from_spec
from nsindy.integrate import METHODS, SolverConfig
from nsindy.models import KINDS, ModelError, VelocityModel, build_model, validate_poisson
from nsindy.systems import BUILTIN, SystemDef, get_system
from nsindy.train import TrainConfig

# Enum for run scale
DESK = 0
FULL = 1

OUTPUT_ROOT_ENV = "NSINDY_OUTPUT_ROOT"
STRUCTURED_KINDS = ("hamiltonian", "generic", "port_hamiltonian")


def scale_name(scale):
    """Return the string name of the run scale."""
    if scale > FULL:
        return "unknown"
    names = ["desk", "full"]
    return names[scale]


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


class ScaleParams:
    """Parameters that differ between the desk and full scales."""

    def __init__(self, scale, structured=False, rootdir=None):
        """Constructor."""
        if scale > FULL:
            raise ValueError("Invalid scale")
        self.scale = scale
        self.rootdir = Path(rootdir) if rootdir else output_root()

        train_count = [200, 800 if structured else 1600]
        val_count =   [40, 160 if structured else 320]
        test_count =  [40, 160 if structured else 320]

        self.counts = {"train": train_count[scale], "val": val_count[scale], "test": test_count[scale]}

    def get_scale(self):
        return self.scale

    # Directory structure methods
    def datadir(self, system: str):
        """Return the dataset directory of a system."""
        return self.rootdir / "datasets" / scale_name(self.scale) / system

    def reportdir(self, system: str, kind: str):
        """Return the report directory of a (system, model kind) fit."""
        return self.rootdir / "reports" / scale_name(self.scale) / f"{system}-{kind}"

    def reprodir(self, label: str):
        return self.rootdir / "repro" / scale_name(self.scale) / label

    def measuredir(self):
        """Return the measurements directory path."""
        return self.rootdir / "measurements" / scale_name(self.scale)


class ConfigError(ValueError):
    """Malformed run configuration; `key` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    num_lambda: Optional[int] = None
    poisson: Optional[Tuple[Tuple[float, ...], ...]] = None
    entropy_index: Optional[int] = None
    gamma: Optional[float] = None
    omega: Optional[float] = None
    width: int = 100
    layers: int = 4


@dataclass
class RunConfig:
    system: SystemDef
    dataset: Path
    counts: Dict[str, int]
    dictionary: Optional[Dict[str, Any]]
    model: ModelSpec
    train: TrainConfig
    solver: SolverConfig
    output_dir: Path
    seed: int
    raw: Dict[str, Any] = field(default_factory=dict)

    def build_dictionary(self) -> Optional[Dictionary]:
        if self.dictionary is None:
            return None
        return from_spec(self.dictionary, self.system.var_names)

    def build_model(self) -> VelocityModel:
        """Initial model; the initialization stream is derived from the run seed."""
        generator = torch.Generator().manual_seed(self.seed)
        spec = self.model
        return build_model(spec.kind, self.build_dictionary(), self.system.n, generator=generator,
                           poisson=spec.poisson, entropy_index=spec.entropy_index,
                           num_lambda=spec.num_lambda, gamma=spec.gamma, omega=spec.omega,
                           width=spec.width, layers=spec.layers)

    def to_dict(self) -> Dict[str, Any]:
        """Resolved configuration, in the same schema the parser accepts."""
        system = self.system
        model: Dict[str, Any] = {"kind": self.model.kind}
        if self.model.kind == "generic":
            model["generic"] = {"num_lambda": self.model.num_lambda,
                                "L": [list(row) for row in self.model.poisson],
                                "entropy_index": self.model.entropy_index}
        elif self.model.kind == "port_hamiltonian":
            model["port"] = {"gamma": self.model.gamma, "omega": self.model.omega}
        elif self.model.kind == "mlp":
            model["mlp"] = {"width": self.model.width, "layers": self.model.layers}
        train = asdict(self.train)
        train.pop("seed")
        train.pop("solver")
        out = {
            "system": {"name": system.name, "params": dict(system.params), "dt": system.dt,
                       "t_final": system.t_final,
                       "ic": {v: list(r) for v, r in zip(system.var_names, system.ic)}},
            "dataset": str(self.dataset),
            "counts": dict(self.counts),
            "model": model,
            "train": train,
            "solver": asdict(self.solver),
            "output_dir": str(self.output_dir),
            "seed": self.seed,
        }
        if self.dictionary is not None:
            out["dictionary"] = copy.deepcopy(self.dictionary)
        return out


def _join(prefix, key):
    return f"{prefix}.{key}" if prefix else key


def _section(raw, prefix: str, allowed: Sequence[str]) -> Dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigError(prefix, f"expected an object, got {type(raw).__name__}")
    unknown = sorted(set(raw) - set(allowed))
    if unknown:
        raise ConfigError(_join(prefix, unknown[0]), "unknown key")
    return dict(raw)


def _int(section, prefix, key, default, lo=None):
    value = section.get(key, default)
    path = _join(prefix, key)
    if value is None and default is None:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(path, f"expected an integer, got {value!r}")
    if lo is not None and value < lo:
        raise ConfigError(path, f"must be >= {lo}, got {value}")
    return value


def _float(section, prefix, key, default, lo=None, hi=None, positive=False, optional=False):
    value = section.get(key, default)
    path = _join(prefix, key)
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    value = float(value)
    if value != value or value in (float("inf"), float("-inf")):
        raise ConfigError(path, "must be finite")
    if positive and not value > 0:
        raise ConfigError(path, f"must be positive, got {value}")
    if lo is not None and value < lo:
        raise ConfigError(path, f"must be >= {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(path, f"must be <= {hi}, got {value}")
    return value


def _bool(section, prefix, key, default):
    value = section.get(key, default)
    if not isinstance(value, bool):
        raise ConfigError(_join(prefix, key), f"expected true or false, got {value!r}")
    return value


def _choice(section, prefix, key, default, choices):
    value = section.get(key, default)
    if value not in choices:
        raise ConfigError(_join(prefix, key), f"expected one of {list(choices)}, got {value!r}")
    return value


def _parse_system(raw) -> SystemDef:
    if isinstance(raw, str):
        raw = {"name": raw}
    sec = _section(raw, "system", ("name", "params", "dt", "t_final", "ic"))
    name = sec.get("name")
    if name not in BUILTIN:
        raise ConfigError("system.name", f"unknown system {name!r}, expected one of {sorted(BUILTIN)}")
    params = _section(sec.get("params"), "system.params", tuple(get_system(name).params))
    for key in params:
        _float(params, "system.params", key, None)
    system = get_system(name, **params)
    dt = _float(sec, "system", "dt", None, positive=True, optional=True)
    t_final = _float(sec, "system", "t_final", None, positive=True, optional=True)
    ic = _section(sec.get("ic"), "system.ic", system.var_names)
    for var, bounds in ic.items():
        ok = (isinstance(bounds, (list, tuple)) and len(bounds) == 2
              and all(isinstance(b, (int, float)) and not isinstance(b, bool) for b in bounds))
        if not ok or bounds[0] > bounds[1]:
            raise ConfigError(f"system.ic.{var}", f"expected [lo, hi] with lo <= hi, got {bounds!r}")
    try:
        return system.with_overrides(dt=dt, t_final=t_final, ic=ic)
    except ValueError as e:
        raise ConfigError("system.t_final", str(e)) from e


def _parse_dictionary(raw, prefix, system: SystemDef) -> Dict[str, Any]:
    sec = _section(raw, prefix, ("poly", "trig"))
    poly = _section(sec.get("poly"), _join(prefix, "poly"), ("n", "d"))
    n = _int(poly, _join(prefix, "poly"), "n", None, lo=1)
    d = _int(poly, _join(prefix, "poly"), "d", None, lo=0)
    if n is None or d is None:
        raise ConfigError(_join(prefix, "poly"), "needs both n and d")
    if n != system.n:
        raise ConfigError(_join(prefix, "poly.n"), f"dictionary arity {n} differs from state dimension {system.n}")
    trig = sec.get("trig", [])
    if not isinstance(trig, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in trig):
        raise ConfigError(_join(prefix, "trig"), f"expected a list of state indices, got {trig!r}")
    spec = {"poly": {"n": n, "d": d}, "trig": list(trig)}
    try:
        from_spec(spec, system.var_names)
    except DictionaryError as e:
        raise ConfigError(_join(prefix, "trig"), str(e)) from e
    return spec


def _parse_poisson(raw, n) -> Tuple[Tuple[float, ...], ...]:
    ok = (isinstance(raw, list) and len(raw) == n
          and all(isinstance(row, list) and len(row) == n for row in raw)
          and all(isinstance(v, (int, float)) and not isinstance(v, bool) for row in raw for v in row))
    if not ok:
        raise ConfigError("model.generic.L", f"expected a {n}x{n} matrix of numbers")
    return tuple(tuple(float(v) for v in row) for row in raw)


def _parse_model(raw, top_dictionary, system: SystemDef) -> Tuple[ModelSpec, Optional[Dict[str, Any]]]:
    sec = _section(raw, "model", ("kind", "dictionary", "generic", "port", "mlp"))
    kind = _choice(sec, "model", "kind", system.default_kind, KINDS)
    if kind in ("hamiltonian", "port_hamiltonian") and system.n != 2:
        raise ConfigError("model.kind", f"{kind} models need a canonical pair, {system.name} has n={system.n}")
    if top_dictionary is not None and "dictionary" in sec:
        raise ConfigError("model.dictionary", "dictionary given both at top level and under model")
    dict_raw = sec.get("dictionary", top_dictionary)
    dict_prefix = "model.dictionary" if "dictionary" in sec else "dictionary"
    if kind == "mlp":
        dictionary = None
    else:
        dictionary = _parse_dictionary(dict_raw if dict_raw is not None else system.dictionary,
                                       dict_prefix, system)

    generic = _section(sec.get("generic"), "model.generic", ("num_lambda", "L", "entropy_index"))
    port = _section(sec.get("port"), "model.port", ("gamma", "omega"))
    mlp = _section(sec.get("mlp"), "model.mlp", ("width", "layers"))
    spec = ModelSpec(kind=kind, width=_int(mlp, "model.mlp", "width", 100, lo=1),
                     layers=_int(mlp, "model.mlp", "layers", 4, lo=2))
    if kind == "generic":
        poisson = generic.get("L")
        if poisson is None:
            if system.poisson is None:
                raise ConfigError("model.generic.L", f"required, {system.name} defines no Poisson matrix")
            poisson = [list(row) for row in system.poisson]
        poisson = _parse_poisson(poisson, system.n)
        entropy_index = _int(generic, "model.generic", "entropy_index", system.entropy_index, lo=0)
        if entropy_index is None:
            raise ConfigError("model.generic.entropy_index", f"required, {system.name} defines none")
        try:
            validate_poisson(torch.tensor(poisson, dtype=torch.float64), entropy_index)
        except ModelError as e:
            raise ConfigError("model.generic.L", str(e)) from e
        n = system.n
        num_lambda = _int(generic, "model.generic", "num_lambda", n * (n - 1) // 2, lo=1)
        spec = ModelSpec(kind=kind, num_lambda=num_lambda, poisson=poisson, entropy_index=entropy_index)
    elif kind == "port_hamiltonian":
        gamma, omega = system.forcing if system.forcing is not None else (None, None)
        gamma = _float(port, "model.port", "gamma", gamma, optional=True)
        omega = _float(port, "model.port", "omega", omega, optional=True)
        if gamma is None or omega is None:
            raise ConfigError("model.port", f"gamma and omega are required, {system.name} defines no forcing")
        spec = ModelSpec(kind=kind, gamma=gamma, omega=omega)
    return spec, dictionary


def _parse_solver(raw) -> SolverConfig:
    sec = _section(raw, "solver", ("method", "rtol", "atol", "max_steps", "initial_step"))
    d = SolverConfig()
    return SolverConfig(
        method=_choice(sec, "solver", "method", d.method, METHODS),
        rtol=_float(sec, "solver", "rtol", d.rtol, positive=True),
        atol=_float(sec, "solver", "atol", d.atol, positive=True),
        max_steps=_int(sec, "solver", "max_steps", d.max_steps, lo=1),
        initial_step=_float(sec, "solver", "initial_step", d.initial_step, positive=True, optional=True),
    )


def _parse_train(raw, system: SystemDef, counts, seed, solver) -> TrainConfig:
    sec = _section(raw, "train", ("n_max", "n_batch", "l_batch", "lr0", "lr_decay", "lambda_l1", "tau",
                                  "prune_enabled", "hard_prune", "val_every", "log_every", "check_structure"))
    d = TrainConfig()
    n_batch = _int(sec, "train", "n_batch", min(d.n_batch, counts["train"]), lo=1)
    if n_batch > counts["train"]:
        raise ConfigError("train.n_batch", f"{n_batch} exceeds the {counts['train']} training trajectories")
    l_batch = _int(sec, "train", "l_batch", system.default_l_batch, lo=2)
    if l_batch + 1 > system.num_samples:
        raise ConfigError("train.l_batch", f"{l_batch} needs {l_batch + 1} samples, trajectories have "
                                           f"{system.num_samples}")
    return TrainConfig(
        n_max=_int(sec, "train", "n_max", d.n_max, lo=0),
        n_batch=n_batch,
        l_batch=l_batch,
        lr0=_float(sec, "train", "lr0", d.lr0, positive=True),
        lr_decay=_float(sec, "train", "lr_decay", d.lr_decay, positive=True, hi=1.0),
        lambda_l1=_float(sec, "train", "lambda_l1", d.lambda_l1, lo=0.0),
        tau=_float(sec, "train", "tau", d.tau, lo=0.0),
        prune_enabled=_bool(sec, "train", "prune_enabled", d.prune_enabled),
        hard_prune=_bool(sec, "train", "hard_prune", d.hard_prune),
        seed=seed,
        solver=solver,
        val_every=_int(sec, "train", "val_every", d.val_every, lo=0),
        log_every=_int(sec, "train", "log_every", d.log_every, lo=0),
        check_structure=_bool(sec, "train", "check_structure", d.check_structure),
    )


def _path(sec, key, default) -> Path:
    value = sec.get(key)
    if value is None:
        return default
    if not isinstance(value, str) or not value:
        raise ConfigError(key, f"expected a path string, got {value!r}")
    return Path(value)


def parse_config(raw: Mapping, overrides: Sequence[Tuple[str, Any]] = (), scale: int = DESK) -> RunConfig:
    """Validate a raw config mapping (plus dotted-key overrides) into a RunConfig."""
    raw = copy.deepcopy(dict(raw)) if isinstance(raw, Mapping) else raw
    for key, value in overrides:
        raw = set_by_path(raw, key, value)
    sec = _section(raw, "", ("system", "dataset", "counts", "dictionary", "model", "train", "solver",
                             "output_dir", "seed"))
    if "system" not in sec:
        raise ConfigError("system", "required")
    system = _parse_system(sec["system"])
    seed = _int(sec, "", "seed", 0, lo=0)
    model, dictionary = _parse_model(sec.get("model"), sec.get("dictionary"), system)

    scale_params = ScaleParams(scale, structured=model.kind in STRUCTURED_KINDS)
    counts_sec = _section(sec.get("counts"), "counts", ("train", "val", "test"))
    counts = {split: _int(counts_sec, "counts", split, default, lo=1)
              for split, default in scale_params.counts.items()}
    solver = _parse_solver(sec.get("solver"))
    train = _parse_train(sec.get("train"), system, counts, seed, solver)
    return RunConfig(
        system=system,
        dataset=_path(sec, "dataset", scale_params.datadir(system.name)),
        counts=counts,
        dictionary=dictionary,
        model=model,
        train=train,
        solver=solver,
        output_dir=_path(sec, "output_dir", scale_params.reportdir(system.name, model.kind)),
        seed=seed,
        raw=raw,
    )


def load_config(path, overrides: Sequence[Tuple[str, Any]] = (), scale: int = DESK) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ConfigError("", f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError("", f"{path} is not valid JSON: {e}") from e
    return parse_config(raw, overrides, scale)


def parse_override(text: str) -> Tuple[str, Any]:
    """'train.n_max=50' -> ('train.n_max', 50); values parse as JSON, else as strings."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(text, "expected key.path=value")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def set_by_path(raw, dotted: str, value):
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    keys = dotted.split(".")
    node = raw
    for i, key in enumerate(keys[:-1]):
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        elif key == "system" and i == 0 and isinstance(child, str):
            child = node[key] = {"name": child}
        elif not isinstance(child, dict):
            raise ConfigError(".".join(keys[:i + 1]), "cannot set a key below a non-object value")
        node = child
    node[keys[-1]] = value
    return raw


@dataclass(frozen=True)
class ReproRow:
    """One row of a reproduced results table with its acceptance tolerances."""
    label: str
    system: str
    kind: str
    n_max: int
    coeff_tol: float
    relative: bool = False
    paired_plain: bool = False
    drift_tol: Optional[float] = None
    horizon: float = 100.0
    delta_tol: Optional[float] = None
    full_n_max: Optional[int] = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def config(self, scale: int = DESK, kind: Optional[str] = None, rootdir=None) -> Dict[str, Any]:
        kind = kind or self.kind
        dirs = ScaleParams(scale, rootdir=rootdir)
        n_max = self.full_n_max if scale == FULL and self.full_n_max else self.n_max
        raw = {
            "system": self.system,
            "dataset": str(dirs.datadir(self.system)),
            "model": {"kind": kind},
            "train": {"n_max": n_max},
            "output_dir": str(dirs.reprodir(f"{self.label}-{kind}")),
            "seed": 0,
        }
        for key, value in self.extra.items():
            set_by_path(raw, key, value)
        return raw


REPRO_TABLES: Dict[str, List[ReproRow]] = {
    "table1": [
        ReproRow("hyperbolic", "hyperbolic", "plain", n_max=200, coeff_tol=0.02, full_n_max=500),
        ReproRow("cubic_oscillator", "cubic_oscillator", "plain", n_max=200, coeff_tol=0.05, full_n_max=500),
        ReproRow("van_der_pol", "van_der_pol", "plain", n_max=200, coeff_tol=0.05, full_n_max=500),
        ReproRow("hopf", "hopf", "plain", n_max=200, coeff_tol=0.05, full_n_max=500),
        ReproRow("lorenz", "lorenz", "plain", n_max=300, coeff_tol=0.02, relative=True, full_n_max=2000),
    ],
    "table2": [
        ReproRow("mass_spring", "mass_spring", "hamiltonian", n_max=200, coeff_tol=0.02,
                 paired_plain=True, drift_tol=1e-4),
        ReproRow("pendulum", "pendulum", "hamiltonian", n_max=300, coeff_tol=0.05, paired_plain=True),
    ],
    "table3": [
        ReproRow("damped_oscillator", "damped_oscillator", "generic", n_max=300, coeff_tol=0.05,
                 paired_plain=True, full_n_max=300),
    ],
    "duffing": [
        ReproRow("duffing", "duffing", "port_hamiltonian", n_max=300, coeff_tol=0.02, delta_tol=0.005),
        ReproRow("duffing_chaotic", "duffing_chaotic", "port_hamiltonian", n_max=300, coeff_tol=0.05),
    ],
}
