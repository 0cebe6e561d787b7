"""
train.py - Mini-batched sub-trajectory training with an L1 penalty on the
dictionary coefficients, Adamax, exponential learning-rate decay and
magnitude pruning.

One iteration: sample n_batch windows of l_batch steps, roll the model out
from each window's first state, take the mean absolute error against the
window plus lambda * sum|Xi|, backpropagate through the solver steps, update
with Adamax at lr0 * lr_decay**k, then prune small coefficients.
"""
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from absl import logging

from nsindy.autodiff import PRIMITIVES, AutodiffError, GradientMap, Tape
from nsindy.data import DataError, Dataset
from nsindy.evaluate import FitReport, render_model
from nsindy.integrate import IntegrationError, SolverConfig, rollout_with_grad, solve_ivp
from nsindy.models import VelocityModel

RETRY_HINT = "numerical underflow can occur in long rollouts; re-run with another seed or a smaller l_batch"


class TrainingError(RuntimeError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class TrainConfig:
    n_max: int = 200
    n_batch: int = 100
    l_batch: int = 50
    lr0: float = 0.01
    lr_decay: float = 0.9987
    lambda_l1: float = 1e-4
    tau: float = 1e-6
    prune_enabled: bool = True
    hard_prune: bool = False
    seed: int = 0
    solver: SolverConfig = SolverConfig()
    val_every: int = 0
    log_every: int = 10
    check_structure: bool = False

    def __post_init__(self):
        if self.n_max < 0:
            raise ValueError("n_max must be >= 0")
        if self.n_batch < 1:
            raise ValueError("n_batch must be >= 1")
        if self.l_batch < 2:
            raise ValueError("l_batch must be >= 2")
        if not self.lr0 > 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("lr0 must be positive and lr_decay in (0, 1]")
        if self.lambda_l1 < 0 or self.tau < 0:
            raise ValueError("lambda_l1 and tau must be >= 0")
        if self.val_every < 0 or self.log_every < 0:
            raise ValueError("val_every and log_every must be >= 0")


@dataclass
class Batch:
    x0: torch.Tensor        # (B, n)
    targets: torch.Tensor   # (B, l_batch + 1, n)
    times: torch.Tensor     # (l_batch + 1,), relative to each window start
    offsets: torch.Tensor   # (B,), absolute start time of each window
    indices: np.ndarray
    starts: np.ndarray

    def __len__(self):
        return len(self.indices)

    def __iter__(self) -> Iterator[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
        for r in range(len(self)):
            yield self.x0[r], self.targets[r], self.times + self.offsets[r]


def sample_batch(states, times, n_batch: int, l_batch: int, rng: np.random.Generator) -> Batch:
    """Pick n_batch distinct trajectories and a random window of l_batch steps in each."""
    states = np.asarray(states, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    count, m = states.shape[0], states.shape[1]
    if m < l_batch + 1:
        raise DataError(f"trajectories have {m} samples, need at least l_batch + 1 = {l_batch + 1}")
    if n_batch > count:
        raise DataError(f"n_batch={n_batch} exceeds the {count} training trajectories")
    indices = rng.choice(count, size=n_batch, replace=False)
    starts = rng.integers(0, m - l_batch, size=n_batch)
    window = starts[:, None] + np.arange(l_batch + 1)
    targets = torch.from_numpy(states[indices[:, None], window])
    return Batch(
        x0=targets[:, 0].clone(),
        targets=targets,
        times=torch.from_numpy(times[:l_batch + 1] - times[0]),
        offsets=torch.from_numpy(times[starts]),
        indices=indices,
        starts=starts,
    )


def l1_penalty(coefficients: Sequence[torch.Tensor], lam: float) -> torch.Tensor:
    total = torch.zeros((), dtype=torch.float64)
    for c in coefficients:
        total = total + c.abs().sum()
    return lam * total


def loss(predicted: torch.Tensor, targets: torch.Tensor, coefficients: Sequence[torch.Tensor], lam: float,
         tape: Optional[Tape] = None) -> torch.Tensor:
    """(1 / n_batch) * sum_r sum_i ||pred - target||_1 + lam * sum |Xi|.

    predicted and targets are (n_batch, ..., n); only the dictionary
    coefficient matrices enter the penalty.
    """
    if predicted.shape != targets.shape:
        raise ValueError(f"prediction {tuple(predicted.shape)} and target {tuple(targets.shape)} differ")

    def op(tag, *args):
        return tape.record(tag, *args) if tape is not None else PRIMITIVES[tag](*args)

    data = op("sum", op("abs", op("sub", predicted, targets))) / predicted.shape[0]
    penalty = l1_penalty(coefficients, lam)
    if tape is not None:
        tape.watch(penalty, "l1")
    return op("add", data, penalty)


class OptimizerState:
    """Adamax state for the named parameters of a model."""

    def __init__(self, parameters: Sequence[Tuple[str, torch.Tensor]], lr: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.names = [name for name, _ in parameters]
        self.params = dict(parameters)
        self.optimizer = torch.optim.Adamax(list(self.params.values()), lr=lr, betas=betas, eps=eps,
                                            foreach=False)

    @property
    def step(self) -> int:
        for p in self.params.values():
            st = self.optimizer.state.get(p)
            if st:
                return int(st["step"])
        return 0

    def moments(self, name: str):
        """(first moment, infinity-norm accumulator) of a parameter, or None before the first step."""
        st = self.optimizer.state.get(self.params[name])
        return (st["exp_avg"], st["exp_inf"]) if st else None

    def set_lr(self, lr: float):
        for group in self.optimizer.param_groups:
            group["lr"] = lr


def adamax_step(params: Dict[str, torch.Tensor], grads: GradientMap, state: OptimizerState, lr: float):
    for name, param in params.items():
        grad = grads[name] if name in grads else torch.zeros_like(param)
        if grad.shape != param.shape:
            raise ValueError(f"gradient for {name!r} has shape {tuple(grad.shape)}, parameter {tuple(param.shape)}")
        param.grad = grad.detach().clone()
    state.set_lr(lr)
    state.optimizer.step()
    for param in params.values():
        param.grad = None
    return params


def count_nonzero(model: VelocityModel) -> int:
    return sum(int((c != 0).sum()) for _, c in model.coefficients())


def prune(model: VelocityModel, tau: float, hard: bool = False) -> int:
    """Zero dictionary coefficients with |value| < tau; returns the nonzero count.

    Soft pruning lets zeroed entries regrow on later steps. With `hard`, a
    pruned entry stays masked for the rest of the run.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    with torch.no_grad():
        for name, coeff in model.coefficients():
            mask = getattr(model, f"{name}_mask")
            small = coeff.abs() < tau
            if hard:
                mask.logical_and_(~small)
                coeff[~mask] = 0.0
            else:
                coeff[small] = 0.0
                mask.copy_(coeff != 0)
    return count_nonzero(model)


def _batch_gradients(model: VelocityModel, batch: Batch, cfg: TrainConfig) -> Tuple[float, GradientMap]:
    tape = Tape(model)
    offsets = batch.offsets

    def velocity(t, x):
        return model(offsets + t, x)

    rollout, tape = rollout_with_grad(velocity, batch.x0, batch.times, cfg.solver, tape)
    predicted = rollout.states.transpose(0, 1)
    value = loss(predicted, batch.targets, [c for _, c in model.coefficients()], cfg.lambda_l1, tape)
    grads = tape.backward(value)
    return float(value.detach()), grads


def validation_mse(model: VelocityModel, states, times, l_batch: int, solver: SolverConfig) -> float:
    """Mean squared error over the first l_batch steps of every validation trajectory."""
    states = torch.as_tensor(np.asarray(states), dtype=torch.float64)
    window = torch.as_tensor(np.asarray(times)[:l_batch + 1], dtype=torch.float64)
    predicted = solve_ivp(model, states[:, 0], window, solver).states.transpose(0, 1)
    return float(((predicted - states[:, :l_batch + 1]) ** 2).mean())


def _support(model: VelocityModel) -> List[List[bool]]:
    coefficients = model.coefficients()
    if not coefficients:
        return []
    return (coefficients[0][1] != 0).tolist()


def build_report(dataset: Dataset, model: VelocityModel, cfg: TrainConfig, history: Dict[str, list]) -> FitReport:
    report = FitReport(
        system=dataset.system,
        model_kind=model.kind,
        var_names=list(dataset.var_names),
        equations=render_model(model, dataset.var_names),
        support=_support(model),
        parameters={name: p.detach().tolist() for name, p in model.named_parameters()},
        loss_history=history["loss"],
        val_history=history["val"],
        lr_history=history["lr"],
        nnz_history=history["nnz"],
        config=asdict(cfg),
    )
    if model.dictionary is not None:
        report.dictionary = {"names": model.dictionary.with_var_names(dataset.var_names).names()}
    if model.kind == "port_hamiltonian":
        report.damping = model.delta
    return report


def train_loop(dataset: Dataset, model: VelocityModel, cfg: TrainConfig, report_dir=None,
               callback: Optional[Callable[[int, dict], None]] = None) -> FitReport:
    dataset.check_dimension(model.n)
    train = dataset.splits["train"]
    if train.shape[1] < cfg.l_batch + 1:
        raise DataError(f"trajectories have {train.shape[1]} samples, need at least l_batch + 1 = {cfg.l_batch + 1}")
    if cfg.n_batch > train.shape[0]:
        raise DataError(f"n_batch={cfg.n_batch} exceeds the {train.shape[0]} training trajectories")

    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    state = OptimizerState(list(params.items()), cfg.lr0)
    history = {"loss": [], "lr": [], "nnz": [], "val": []}
    progress = None
    if report_dir is not None:
        Path(report_dir).mkdir(parents=True, exist_ok=True)
        progress = open(Path(report_dir) / "progress.jsonl", "w")

    logging.info("training %s model on %s: %d parameters, %d iterations",
                 model.kind, dataset.system, sum(p.numel() for p in params.values()), cfg.n_max)
    try:
        for k in range(cfg.n_max):
            lr = cfg.lr0 * cfg.lr_decay ** k
            batch = sample_batch(train, dataset.times, cfg.n_batch, cfg.l_batch, rng)
            try:
                value, grads = _batch_gradients(model, batch, cfg)
            except IntegrationError as e:
                raise TrainingError(f"iteration {k}: solver failed at t={e.t}, h={e.h}: {e}; {RETRY_HINT}",
                                    iteration=k) from e
            except AutodiffError as e:
                raise TrainingError(f"iteration {k}: non-finite loss (op {e.op!r}): {e}; {RETRY_HINT}",
                                    iteration=k) from e
            if not math.isfinite(value):
                raise TrainingError(f"iteration {k}: loss is {value}; {RETRY_HINT}", iteration=k)

            adamax_step(params, grads, state, lr)
            nnz = prune(model, cfg.tau, cfg.hard_prune) if cfg.prune_enabled else count_nonzero(model)
            if cfg.check_structure:
                model.check_structure()

            record = {"iteration": k, "loss": value, "lr": lr, "nnz": nnz}
            last = k == cfg.n_max - 1
            if "val" in dataset.splits and cfg.val_every and (k % cfg.val_every == 0 or last):
                try:
                    record["val_mse"] = validation_mse(model, dataset.splits["val"], dataset.times,
                                                       cfg.l_batch, cfg.solver)
                except IntegrationError as e:
                    logging.warning("iteration %d: validation rollout failed: %s", k, e)
                    record["val_mse"] = float("nan")
                history["val"].append((k, record["val_mse"]))
            history["loss"].append(value)
            history["lr"].append(lr)
            history["nnz"].append(nnz)

            if progress is not None:
                progress.write(json.dumps(record) + "\n")
            if cfg.log_every and (k % cfg.log_every == 0 or last):
                logging.info("iter %d loss %.6g lr %.6g nnz %d%s", k, value, lr, nnz,
                             f" val_mse {record['val_mse']:.6g}" if "val_mse" in record else "")
            if callback is not None:
                callback(k, record)
    finally:
        if progress is not None:
            progress.close()

    return build_report(dataset, model, cfg, history)
