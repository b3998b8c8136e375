"""Selection observation operator and synthetic observations of a truth run."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class ObsSpec:
    observed_indices: tuple[int, ...]
    noise_sigma: tuple[float, ...]

    def __init__(self, observed_indices: Sequence[int], noise_sigma: float | Sequence[float]):
        idx = tuple(int(i) for i in observed_indices)
        if not idx:
            raise ValueError("at least one observed index is required")
        if any(b <= a for a, b in zip(idx, idx[1:])) or idx[0] < 0:
            raise ValueError("observed_indices must be non-negative and strictly increasing")
        sig = np.broadcast_to(np.asarray(noise_sigma, dtype=float), (len(idx),))
        if not np.all(sig > 0):
            raise ValueError("noise_sigma must be positive")
        object.__setattr__(self, "observed_indices", idx)
        object.__setattr__(self, "noise_sigma", tuple(float(s) for s in sig))

    @property
    def size(self) -> int:
        return len(self.observed_indices)

    @property
    def index_array(self) -> np.ndarray:
        return np.asarray(self.observed_indices)

    @property
    def variances(self) -> np.ndarray:
        return np.asarray(self.noise_sigma) ** 2

    @classmethod
    def spaced(cls, n: int, spacing: int, noise_sigma, extra: Sequence[int] = ()) -> "ObsSpec":
        """Every ``spacing``-th index of ``range(n)`` plus ``extra`` indices."""
        return cls(list(range(0, n, spacing)) + list(extra), noise_sigma)

    def selection_matrix(self, dim: int) -> np.ndarray:
        H = np.zeros((self.size, dim))
        H[np.arange(self.size), self.index_array] = 1.0
        return H


@dataclass(frozen=True)
class ObservationBatch:
    time: float
    values: np.ndarray
    spec: ObsSpec

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.spec.size,):
            raise ValueError(f"expected {self.spec.size} values, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("observation values must be finite")
        object.__setattr__(self, "values", v)


def apply_h(spec: ObsSpec, x: np.ndarray) -> np.ndarray:
    """Gather the observed components (works on batches along the last axis)."""
    x = np.asarray(x)
    if spec.observed_indices[-1] >= x.shape[-1]:
        raise IndexError(f"observed index {spec.observed_indices[-1]} out of range for state of size {x.shape[-1]}")
    return x[..., spec.index_array]


def r_matrix(spec: ObsSpec) -> np.ndarray:
    return np.diag(spec.variances)


def r_inverse(spec: ObsSpec) -> np.ndarray:
    return np.diag(1.0 / spec.variances)


def synthesize_obs(spec: ObsSpec, truth: np.ndarray, rng: np.random.Generator, time: float = 0.0) -> ObservationBatch:
    """Observe ``truth`` with independent N(0, sigma^2) errors drawn from ``rng``."""
    clean = apply_h(spec, truth)
    noise = rng.standard_normal(spec.size) * np.asarray(spec.noise_sigma)
    return ObservationBatch(time, clean + noise, spec)


def write_obs_csv(path: str | Path, batches: Iterable[ObservationBatch]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "index", "value"])
        for b in batches:
            for i, v in zip(b.spec.observed_indices, b.values):
                w.writerow([repr(float(b.time)), i, repr(float(v))])


def read_obs_csv(path: str | Path, noise_sigma) -> list[ObservationBatch]:
    """Read batches back; rows sharing a time form one batch. The error
    model is not stored in the stream, so ``noise_sigma`` is supplied again
    (scalar, or a mapping index -> sigma)."""
    rows: dict[float, list[tuple[int, float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(float(r["time"]), []).append((int(r["index"]), float(r["value"])))
    out = []
    for t, items in rows.items():
        items.sort()
        idx = [i for i, _ in items]
        sig = [noise_sigma[i] for i in idx] if isinstance(noise_sigma, dict) else noise_sigma
        out.append(ObservationBatch(t, np.array([v for _, v in items]), ObsSpec(idx, sig)))
    return out
