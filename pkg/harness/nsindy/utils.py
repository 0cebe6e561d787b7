#!/usr/bin/env python3
"""
utils.py - Run records for the generate/train/eval/repro commands: stage
latencies, artifact sizes and fit quality, written next to the outputs.
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

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import torch
from absl import logging

_BLUE, _YELLOW, _GREEN, _RED, _RESET = "\033[34m", "\033[33m", "\033[32m", "\033[31m", "\033[0m"

# Files a dataset or report directory may hold, in listing order
ARTIFACTS = (
    "meta.json", "times.bin", "train.bin", "val.bin", "test.bin",
    "report.json", "equations.txt", "model.pt", "config.json", "progress.jsonl",
    "mse.tsv", "hamiltonian.tsv", "dEdt.tsv", "dSdt.tsv",
)


@dataclass
class RunRecord:
    """What one command measured: seconds per stage, bytes per artifact, fit quality."""
    stages: Dict[str, float] = field(default_factory=dict)
    artifacts: Dict[str, Dict[str, int]] = field(default_factory=dict)
    fit_quality: Dict[str, dict] = field(default_factory=dict)
    last_mark: Optional[float] = None

    @property
    def total_latency(self) -> float:
        return sum(self.stages.values())

    def to_dict(self):
        record = {
            "total_latency_s": round(self.total_latency, 4),
            "per_stage": {name: round(seconds, 4) for name, seconds in self.stages.items()},
        }
        if self.artifacts:
            record["artifacts"] = self.artifacts
        if self.fit_quality:
            record["fit_quality"] = self.fit_quality
        return record


_run = RunRecord()


def current_run() -> RunRecord:
    return _run


def reset_run():
    global _run
    _run = RunRecord()


def set_threads(threads: int):
    """One thread makes every run bit-reproducible."""
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(threads == 1)


def log_step(step_num: int, step_name: str, start: bool = False):
    """Close a stage: print it with the time since the previous mark and record it."""
    now = time.perf_counter()
    elapsed = 0.0 if _run.last_mark is None else now - _run.last_mark
    _run.last_mark = now
    if start:
        return
    _run.stages[step_name] = elapsed
    print(f"{_BLUE}{time.strftime('%H:%M:%S')} [nsindy] {step_num}: {step_name} completed "
          f"(elapsed: {elapsed:.4f}s){_RESET}")


def format_bytes(n: int) -> str:
    if n < 1024:
        return f"{n}B"
    for unit in ("KiB", "MiB", "GiB"):
        n /= 1024
        if n < 1024 or unit == "GiB":
            return f"{n:.1f}{unit}"


def log_artifacts(directory, label: str) -> Dict[str, int]:
    """Record the size of every known artifact in `directory` under `label`."""
    directory = Path(directory)
    sizes = {name: (directory / name).stat().st_size for name in ARTIFACTS if (directory / name).is_file()}
    _run.artifacts[label] = sizes
    if not sizes:
        logging.warning("%s: no artifacts in %s", label, directory)
        return sizes
    listing = ", ".join(f"{name} {format_bytes(size)}" for name, size in sizes.items())
    print(f"{_YELLOW}         [nsindy] {label} ({format_bytes(sum(sizes.values()))}): {listing}{_RESET}")
    return sizes


def log_quality(tag: str, record: dict):
    _run.fit_quality[tag] = record


def log_result(tag: str, passed: bool, detail: str = ""):
    color, verdict = (_GREEN, "PASS") if passed else (_RED, "FAIL")
    print(f"{color}[nsindy] {tag}: {verdict}{_RESET}{' ' + detail if detail else ''}")


def save_run(path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(_run.to_dict(), f, indent=2, default=str)
    print("[total latency]", f"{_run.total_latency:.4f}s")
    return path
