"""
data.py - Trajectory datasets: generation from ground-truth systems and a
versioned on-disk format.

On disk a dataset is a directory holding meta.json, times.bin and one
<split>.bin per split. Binary files are little-endian float64 in row-major
[trajectory, time, state] order.
"""
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Mapping, Optional, Sequence

import numpy as np
import torch
from absl import logging

from nsindy.integrate import IntegrationError, SolverConfig, solve_ivp
from nsindy.systems import SystemDef

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
MAX_CONSECUTIVE_FAILURES = 100
GENERATION_SOLVER = SolverConfig(method="dopri5", rtol=1e-9, atol=1e-11)


class DataError(ValueError):
    pass


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (m, n)
    seed: Sequence[int] = ()


@dataclass
class Dataset:
    system: str
    var_names: Sequence[str]
    dt: float
    times: np.ndarray
    splits: Dict[str, np.ndarray]  # split -> (count, m, n)
    seed: int
    params: Mapping[str, float] = field(default_factory=dict)

    @property
    def n(self):
        return len(self.var_names)

    @property
    def num_samples(self):
        return len(self.times)

    def counts(self):
        return {name: int(arr.shape[0]) for name, arr in self.splits.items()}

    def split(self, name: str) -> torch.Tensor:
        if name not in self.splits:
            raise DataError(f"dataset has no split {name!r}")
        return torch.from_numpy(self.splits[name])

    def trajectories(self, name: str) -> Iterator[Trajectory]:
        offset = 0
        for split in SPLITS:
            if split == name:
                break
            offset += self.splits.get(split, np.empty((0,))).shape[0]
        for i, states in enumerate(self.splits[name]):
            yield Trajectory(self.times, states, (self.seed, offset + i))

    def check_dimension(self, n: int):
        if n != self.n:
            raise DataError(f"dataset {self.system!r} has state dimension {self.n}, model expects {n}")

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.system == other.system and tuple(self.var_names) == tuple(other.var_names)
                and self.dt == other.dt and self.seed == other.seed
                and np.array_equal(self.times, other.times)
                and self.splits.keys() == other.splits.keys()
                and all(np.array_equal(self.splits[k], other.splits[k]) for k in self.splits))


def _generate_one(system: SystemDef, index: int, seed: int, times: np.ndarray) -> np.ndarray:
    """Integrate one trajectory; the IC stream is derived from (seed, index)."""
    rng = np.random.default_rng([seed, index])
    failures = 0
    while True:
        x0 = system.sample_ic(rng)
        try:
            rollout = solve_ivp(system.velocity, torch.from_numpy(x0), torch.from_numpy(times), GENERATION_SOLVER)
            return rollout.states.numpy()
        except IntegrationError as e:
            failures += 1
            logging.warning("%s trajectory %d: resampling initial condition %s (%s)",
                            system.name, index, np.array2string(x0, precision=4), e)
            if failures >= MAX_CONSECUTIVE_FAILURES:
                raise DataError(f"{system.name} trajectory {index}: {failures} consecutive solver failures") from e


def generate(system: SystemDef, counts: Mapping[str, int], seed: int, workers: int = 1) -> Dataset:
    """Generate train/val/test splits by integrating the true velocity."""
    for split in SPLITS:
        if counts.get(split, 0) < 1:
            raise DataError(f"count for split {split!r} must be >= 1, got {counts.get(split)}")
    times = system.times()
    total = sum(counts[s] for s in SPLITS)

    def job(index):
        return _generate_one(system, index, seed, times)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            states = list(pool.map(job, range(total)))
    else:
        states = [job(i) for i in range(total)]

    splits, start = {}, 0
    for split in SPLITS:
        stop = start + counts[split]
        splits[split] = np.stack(states[start:stop])
        start = stop
    logging.info("generated %s: %s trajectories of %d samples", system.name,
                 {s: counts[s] for s in SPLITS}, len(times))
    return Dataset(system.name, tuple(system.var_names), system.dt, times, splits, seed, dict(system.params))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dataset.times.astype("<f8").tofile(path / "times.bin")
    checksums = {"times": _sha256(path / "times.bin")}
    for split, arr in dataset.splits.items():
        np.ascontiguousarray(arr, dtype="<f8").tofile(path / f"{split}.bin")
        checksums[split] = _sha256(path / f"{split}.bin")
    meta = {
        "format_version": FORMAT_VERSION,
        "system": dataset.system,
        "n": dataset.n,
        "var_names": list(dataset.var_names),
        "dt": dataset.dt,
        "num_samples": dataset.num_samples,
        "counts": dataset.counts(),
        "seed": dataset.seed,
        "params": dict(dataset.params),
        "checksums": checksums,
    }
    with open(path / "meta.json", "w") as f:
        json.dump(meta, f, indent=2)
    return path


def _read_array(path: Path, shape, checksum: Optional[str]) -> np.ndarray:
    if not path.exists():
        raise DataError(f"missing dataset file {path}")
    expected = int(np.prod(shape)) * 8
    size = path.stat().st_size
    if size != expected:
        raise DataError(f"corrupt dataset file {path}: {size} bytes, expected {expected}")
    if checksum is not None and _sha256(path) != checksum:
        raise DataError(f"corrupt dataset file {path}: checksum mismatch")
    return np.fromfile(path, dtype="<f8").astype(np.float64).reshape(shape)


def load(path) -> Dataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no dataset at {path} (meta.json missing)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt meta.json in {path}: {e}") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise DataError(f"dataset format version {meta.get('format_version')!r}, expected {FORMAT_VERSION}")
    try:
        n, m = int(meta["n"]), int(meta["num_samples"])
        checksums = meta.get("checksums", {})
        if len(meta["var_names"]) != n:
            raise DataError(f"meta.json lists {len(meta['var_names'])} variables for n={n}")
        times = _read_array(path / "times.bin", (m,), checksums.get("times"))
        splits = {split: _read_array(path / f"{split}.bin", (int(count), m, n), checksums.get(split))
                  for split, count in meta["counts"].items()}
        return Dataset(meta["system"], tuple(meta["var_names"]), float(meta["dt"]), times, splits,
                       int(meta["seed"]), meta.get("params", {}))
    except KeyError as e:
        raise DataError(f"meta.json in {path} is missing key {e}") from e
