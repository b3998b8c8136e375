"""Dynamical models of the convection loop.

* Lorenz '63.
* The Ehrhard-Mueller three-variable loop ODE (``em3``).
* A 1-D ring discretisation of the loop PDEs: ``n_cells`` cell temperatures
  advected around the loop by a single mean velocity ``u``, relaxed toward the
  wall temperature, with ``u`` driven by the buoyancy integral of T sin(phi).

The angle phi is measured from the 6 o'clock position and increases in the
direction of positive ``u``. Positive ``u`` is clockwise flow.

Every ``*_rhs`` function broadcasts over leading batch dimensions of ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np


# --- Lorenz '63 -----------------------------------------------------------

@dataclass(frozen=True)
class Lorenz63Params:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0


def lorenz_rhs(p: Lorenz63Params, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([p.sigma * (x2 - x1), x1 * (p.rho - x3) - x2, x1 * x2 - p.beta * x3], axis=-1)


def lorenz_jac(p: Lorenz63Params, x: np.ndarray) -> np.ndarray:
    x1, x2, x3 = x
    return np.array([
        [-p.sigma, p.sigma, 0.0],
        [p.rho - x3, -1.0, -x1],
        [x2, x1, -p.beta],
    ])


# --- Ehrhard-Mueller -----------------------------------------------------

def h_eval(x):
    """Wall heat-transfer enhancement: x**(1/3) for x >= 1, else the quartic
    (44x^2 - 55x^3 + 20x^4)/9, which meets the cube root with matching value
    and slope at x = 1."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("h is defined for non-negative arguments; pass |x1|")
    low = (44.0 * x**2 - 55.0 * x**3 + 20.0 * x**4) / 9.0
    out = np.where(x >= 1.0, np.cbrt(x), low)
    return out if out.ndim else float(out)


def h_prime(x):
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("h is defined for non-negative arguments; pass |x1|")
    low = (88.0 * x - 165.0 * x**2 + 80.0 * x**3) / 9.0
    with np.errstate(divide="ignore"):
        high = np.where(x > 0, np.cbrt(x) / (3.0 * np.where(x > 0, x, 1.0)), 0.0)
    out = np.where(x >= 1.0, high, low)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class EmParams:
    alpha: float = 10.0
    beta_em: float = 28.0
    K: float = 0.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.K < 0:
            raise ValueError("K must be non-negative")


def em3_rhs(p: EmParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    damp = 1.0 + p.K * h_eval(np.abs(x1)) if p.K else 1.0
    return np.stack([
        p.alpha * (x2 - x1),
        p.beta_em * x1 - x2 * damp - x1 * x3,
        x1 * x2 - x3 * damp,
    ], axis=-1)


def em3_jac(p: EmParams, x: np.ndarray) -> np.ndarray:
    x1, x2, x3 = (float(v) for v in x)
    damp = 1.0 + p.K * h_eval(abs(x1))
    ddamp = p.K * h_prime(abs(x1)) * np.sign(x1)
    return np.array([
        [-p.alpha, p.alpha, 0.0],
        [p.beta_em - x2 * ddamp - x3, -damp, -x1],
        [x2 - x3 * ddamp, x1, -damp],
    ])


# --- 1-D ring -----------------------------------------------------------

class RingBlowUpError(FloatingPointError):
    def __init__(self, cell: int, value: float):
        self.cell = cell
        self.value = value
        super().__init__(f"ring temperature left the guard band at cell {cell} (T={value:.6g})")


GUARD_BAND = 50.0


@dataclass(frozen=True)
class RingParams:
    """Ring-model coefficients.

    ``alpha_w`` is the wall relaxation rate, ``friction`` the wall friction
    coefficient (du/dt gets -friction/2 * u), ``buoyancy`` multiplies the
    loop average of T sin(phi). The wall is ``T_hot`` on the bottom half and
    ``T_cold`` on the top half. ``u`` is measured in loop radii per unit time.
    """

    n_cells: int = 200
    alpha_w: float = 0.025
    friction: float = 0.5
    buoyancy: float = 0.010995574287564275
    T_hot: float = 340.0
    T_cold: float = 290.0
    K: float = 0.0

    def __post_init__(self):
        if self.n_cells < 16 or self.n_cells % 2:
            raise ValueError(f"n_cells must be even and >= 16, got {self.n_cells}")
        for name in ("alpha_w", "friction", "buoyancy"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.T_hot <= self.T_cold:
            raise ValueError("T_hot must exceed T_cold")
        if self.K < 0:
            raise ValueError("K must be non-negative")

    @property
    def dim(self) -> int:
        return self.n_cells + 1

    @property
    def dphi(self) -> float:
        return 2.0 * np.pi / self.n_cells

    @property
    def phi(self) -> np.ndarray:
        return 2.0 * np.pi * (np.arange(self.n_cells) + 0.5) / self.n_cells

    @property
    def wall_profile(self) -> np.ndarray:
        return np.where(np.cos(self.phi) > 0, self.T_hot, self.T_cold)

    def equivalent_em(self) -> EmParams:
        """EM3 parameters of the ring's first Fourier harmonic (exact up to the
        numerical diffusion of the upwind scheme)."""
        f = 0.5 * self.friction
        tw1 = 2.0 * (self.T_hot - self.T_cold) / np.pi
        return EmParams(alpha=f / self.alpha_w,
                        beta_em=self.buoyancy * tw1 / (2.0 * self.alpha_w * f),
                        K=self.K)

    @classmethod
    def from_em(cls, alpha: float, beta_em: float, **kw) -> "RingParams":
        base = cls(**kw)
        f = alpha * base.alpha_w
        tw1 = 2.0 * (base.T_hot - base.T_cold) / np.pi
        buoyancy = beta_em * 2.0 * base.alpha_w * f / tw1
        return cls(**{**kw, "friction": 2.0 * f, "buoyancy": buoyancy})


class RingState(NamedTuple):
    T: np.ndarray
    u: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.T, dtype=float), [float(self.u)]])

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "RingState":
        x = np.asarray(x, dtype=float)
        return cls(x[:-1].copy(), float(x[-1]))


class _RingCache:
    """Per-parameter constants reused on every rhs call."""

    def __init__(self, p: RingParams):
        self.tw = p.wall_profile
        self.sin_w = np.sin(p.phi) * p.dphi * p.buoyancy / (2.0 * np.pi)
        self.lo = self.tw.min() - GUARD_BAND
        self.hi = self.tw.max() + GUARD_BAND


_cache: dict[RingParams, _RingCache] = {}


def _ring_consts(p: RingParams) -> _RingCache:
    c = _cache.get(p)
    if c is None:
        c = _cache[p] = _RingCache(p)
    return c


def ring_rhs(p: RingParams, s) -> np.ndarray:
    """Time derivative of a ring state (flat ``[T_0..T_{n-1}, u]`` vector, a
    batch of them, or a :class:`RingState`). Returns the flat tangent."""
    if isinstance(s, RingState):
        s = s.to_vector()
    s = np.asarray(s, dtype=float)
    c = _ring_consts(p)
    n = p.n_cells
    T = s[..., :n]
    u = s[..., n:n + 1]
    if T.size and (T.min() < c.lo or T.max() > c.hi):
        bad = np.argwhere((T < c.lo) | (T > c.hi))[0]
        raise RingBlowUpError(int(bad[-1]), float(T[tuple(bad)]))
    # backward differences; the forward difference at i is the backward one at i+1
    D = np.empty_like(T)
    np.subtract(T[..., 1:], T[..., :-1], out=D[..., 1:])
    np.subtract(T[..., :1], T[..., -1:], out=D[..., :1])
    pos = u > 0
    if pos.all():
        grad = D
    else:
        F = np.empty_like(D)
        F[..., :-1] = D[..., 1:]
        F[..., -1:] = D[..., :1]
        grad = F if not pos.any() else np.where(pos, D, F)
    out = np.empty_like(s)
    dT = out[..., :n]
    np.multiply(grad, -u / p.dphi, out=dT)
    if p.K:
        rate = p.alpha_w * (1.0 + p.K * h_eval(np.abs(u) / p.alpha_w))
        dT -= rate * (T - c.tw)
    else:
        dT -= p.alpha_w * (T - c.tw)
    out[..., n] = -0.5 * p.friction * s[..., n] + T @ c.sin_w
    return out


def ring_jac(p: RingParams, x: np.ndarray) -> np.ndarray:
    """Jacobian of ``ring_rhs`` at a single state (valid away from u = 0,
    where the upwind direction switches)."""
    n = p.n_cells
    x = np.asarray(x, dtype=float)
    T, u = x[:n], x[n]
    c = _ring_consts(p)
    J = np.zeros((n + 1, n + 1))
    idx = np.arange(n)
    rate = p.alpha_w
    drate = 0.0
    if p.K:
        us = abs(u) / p.alpha_w
        rate = p.alpha_w * (1.0 + p.K * h_eval(us))
        drate = p.K * h_prime(us) * np.sign(u)
    if u > 0:
        J[idx, idx] = -u / p.dphi - rate
        J[idx, (idx - 1) % n] = u / p.dphi
        grad = (T - np.roll(T, 1)) / p.dphi
    else:
        J[idx, idx] = u / p.dphi - rate
        J[idx, (idx + 1) % n] = -u / p.dphi
        grad = (np.roll(T, -1) - T) / p.dphi
    J[idx, n] = -grad - drate * (T - c.tw)
    J[n, :n] = c.sin_w
    J[n, n] = -0.5 * p.friction
    return J


def ring_flux(p: RingParams, s, rho_ref: float = 1000.0, beta_th: float = 2.1e-4,
              T_ref: float = 315.0, slice_cells: Sequence[int] | None = None) -> float:
    """Signed mass flux through a slice: u times the mean Boussinesq density
    of the slice cells. The default slice is the cell at 9 o'clock."""
    if not isinstance(s, RingState):
        s = RingState.from_vector(s)
    if slice_cells is None:
        slice_cells = [(3 * p.n_cells) // 4]
    T = np.asarray(s.T, dtype=float)[list(slice_cells)]
    rho = rho_ref * (1.0 - beta_th * (T - T_ref))
    return float(s.u * rho.mean())


def ring_flux_batch(p: RingParams, X: np.ndarray, rho_ref: float = 1000.0, beta_th: float = 2.1e-4,
                    T_ref: float = 315.0) -> np.ndarray:
    """``ring_flux`` over a ``(..., n+1)`` batch of state vectors (default slice)."""
    cell = (3 * p.n_cells) // 4
    return X[..., p.n_cells] * rho_ref * (1.0 - beta_th * (X[..., cell] - T_ref))


# --- reversals --------------------------------------------------------

class Direction(str, Enum):
    TO_CLOCKWISE = "ToClockwise"
    TO_COUNTERCLOCKWISE = "ToCounterclockwise"


class ReversalEvent(NamedTuple):
    time: float
    direction: Direction


def detect_reversals(times: Sequence[float], values: Sequence[float], hold: float) -> list[ReversalEvent]:
    """Persistent sign changes of a flow-direction series.

    A reversal is logged at the first sample of a run of the opposite sign
    whose duration is at least ``hold``. A run lasts from its first sample to
    the first sample of the next run; the final run is credited with one more
    sample spacing. Zero values keep the current sign. Positive is clockwise.
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if t.shape != v.shape:
        raise ValueError("times and values must have the same length")
    if t.size == 0:
        return []
    if t.size > 1 and np.any(np.diff(t) <= 0):
        raise ValueError("times must be strictly increasing")
    sign = np.sign(v)
    # zeros inherit the previous sign
    for i in range(1, sign.size):
        if sign[i] == 0:
            sign[i] = sign[i - 1]
    nz = np.flatnonzero(sign)
    if nz.size == 0:
        return []
    # run boundaries
    starts = [int(nz[0])]
    for i in range(int(nz[0]) + 1, sign.size):
        if sign[i] != sign[i - 1]:
            starts.append(i)
    last_dt = t[-1] - t[-2] if t.size > 1 else 0.0
    ends = [t[s] for s in starts[1:]] + [t[-1] + last_dt]
    events: list[ReversalEvent] = []
    current = sign[starts[0]]
    eps = 1e-9 * max(1.0, abs(hold))
    for s, end in zip(starts[1:], ends[1:]):
        new = sign[s]
        if new == current:
            continue
        if end - t[s] + eps >= hold:
            direction = Direction.TO_CLOCKWISE if new > 0 else Direction.TO_COUNTERCLOCKWISE
            events.append(ReversalEvent(float(t[s]), direction))
            current = new
    return events
