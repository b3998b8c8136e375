"""Uniform access to the three models plus their climatologies."""
from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Callable

import numpy as np

from .. import numkernel as nk
from ..models import (RingParams, em3_jac, em3_rhs, lorenz_jac, lorenz_rhs, ring_flux_batch, ring_jac,
                      ring_rhs)
from ..rng import stream
from .config import ModelConfig, RunConfig

DEFAULT_DT = {"lorenz63": 0.01, "em3": 0.01, "ring": 0.04}

# free-run length used for the climatology, in model time units: (transient, sampled, sample spacing)
CLIMATE_SPAN = {"lorenz63": (10.0, 200.0, 0.1), "em3": (10.0, 200.0, 0.1), "ring": (300.0, 1500.0, 10.0)}
CLIMATE_TRAJECTORIES = 8


@dataclass(frozen=True, eq=False)
class ModelSystem:
    kind: str
    dim: int
    rhs: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    spec: nk.StepperSpec
    flow_index: int  # component whose sign is the loop's flow direction
    params: object  # the model's parameter dataclass

    @property
    def ring(self) -> RingParams | None:
        return self.params if self.kind == "ring" else None

    @property
    def n_cells(self) -> int:
        return self.ring.n_cells if self.ring is not None else 0

    def flux(self, X: np.ndarray) -> np.ndarray:
        """Slice mass flux for the ring; the flow component for the ODEs."""
        if self.ring is not None:
            return ring_flux_batch(self.ring, X)
        return np.asarray(X)[..., self.flow_index]

    def key(self) -> tuple:
        return (self.kind, self.params, self.spec)


def build_system(model: ModelConfig, run: RunConfig) -> ModelSystem:
    dt = run.dt if run.dt is not None else DEFAULT_DT[model.kind]
    spec = nk.StepperSpec(run.scheme, dt)
    if model.kind == "lorenz63":
        p = model.lorenz
        return ModelSystem("lorenz63", 3, partial(lorenz_rhs, p), partial(lorenz_jac, p), spec, 0, p)
    if model.kind == "em3":
        p = model.em3
        return ModelSystem("em3", 3, partial(em3_rhs, p), partial(em3_jac, p), spec, 0, p)
    p = model.ring
    return ModelSystem("ring", p.dim, partial(ring_rhs, p), partial(ring_jac, p), spec, p.n_cells, p)


@dataclass(frozen=True, eq=False)
class Climatology:
    samples: np.ndarray  # (N, dim) states from long free runs
    flux: np.ndarray  # (N,)

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.samples.std(axis=0, ddof=1)

    @property
    def cov(self) -> np.ndarray:
        return np.cov(self.samples, rowvar=False)

    @property
    def flux_std(self) -> float:
        return float(self.flux.std(ddof=1))

    def draw(self, rng: np.random.Generator, k: int) -> np.ndarray:
        """``k`` independent states picked from the climatological sample."""
        return self.samples[rng.integers(0, len(self.samples), size=k)].copy()


def _initial_states(system: ModelSystem, rng: np.random.Generator, k: int) -> np.ndarray:
    if system.ring is not None:
        p = system.ring
        T = 0.5 * (p.T_hot + p.T_cold) + rng.uniform(-1.0, 1.0, (k, p.n_cells))
        u = rng.uniform(-0.05, 0.05, (k, 1))
        return np.hstack([T, u])
    return rng.normal(0.0, 5.0, (k, 3)) + np.array([0.0, 0.0, 20.0])


_climate_cache: dict[tuple, Climatology] = {}


def climatology(system: ModelSystem) -> Climatology:
    """Samples of the attractor from a fixed set of free runs. Depends on the
    model configuration only, never on the experiment seed."""
    key = system.key()
    clim = _climate_cache.get(key)
    if clim is not None:
        return clim
    transient, span, every = CLIMATE_SPAN[system.kind]
    spec = system.spec
    x = _initial_states(system, stream(0, "climatology", system.kind), CLIMATE_TRAJECTORIES)
    x = nk.integrate(system.rhs, spec, x, spec.steps_for(transient))
    stride = spec.steps_for(every)
    n = int(round(span / every))
    out = np.empty((n, CLIMATE_TRAJECTORIES, system.dim))
    for i in range(n):
        x = nk.integrate(system.rhs, spec, x, stride)
        out[i] = x
    samples = out.reshape(-1, system.dim)
    clim = Climatology(samples, system.flux(samples))
    _climate_cache[key] = clim
    return clim
