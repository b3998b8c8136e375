"""Assimilation algorithms: 3D-Var, EKF, perturbed-observation EnKF, ETKF,
serial EnSRF and LETKF, plus ensemble inflation.

Ensembles are stored member-major: ``members`` has shape ``(K, n)``.
The perturbation matrix ``Z`` used in the formulas is the transpose of the
member-major anomalies, columns being members.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .localization import ZoneLayout
from .observing import ObservationBatch, ObsSpec, apply_h

log = logging.getLogger(__name__)


class FilterError(np.linalg.LinAlgError):
    pass


class IllConditionedError(FilterError):
    pass


class FilterDivergence(FloatingPointError):
    def __init__(self, trace: float, cap: float):
        self.trace = trace
        self.cap = cap
        super().__init__(f"covariance trace {trace:.4g} exceeded cap {cap:.4g}")


class CovMode(str, Enum):
    STANDARD = "standard"
    LEAVE_ONE_OUT = "leave_one_out"


@dataclass(frozen=True)
class Ensemble:
    members: np.ndarray

    def __post_init__(self):
        m = np.array(self.members, dtype=float)
        if m.ndim != 2 or m.shape[0] < 2:
            raise ValueError(f"ensemble needs shape (K>=2, n), got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "members", m)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def dim(self) -> int:
        return self.members.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def anomalies(self) -> np.ndarray:
        """Member-major anomalies, shape (K, n)."""
        return self.members - self.mean

    @property
    def Z(self) -> np.ndarray:
        """Perturbation matrix, columns = member minus mean, shape (n, K)."""
        return self.anomalies.T

    def spread(self) -> np.ndarray:
        return self.members.std(axis=0, ddof=1)


@dataclass(frozen=True)
class InflationParams:
    delta: float = 1.0
    mu: float = 0.0
    letkf_rho: float = 1.0

    def __post_init__(self):
        if self.delta < 1.0:
            raise ValueError("multiplicative inflation delta must be >= 1")
        if self.mu < 0.0:
            raise ValueError("additive inflation mu must be >= 0")
        if self.letkf_rho < 1.0:
            raise ValueError("letkf_rho must be >= 1")


NO_INFLATION = InflationParams()


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("covariance shape does not match mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))


# --- inflation ------------------------------------------------------------

def inflate_members(X: np.ndarray, infl: InflationParams, rng: np.random.Generator | None) -> np.ndarray:
    """Array form of :func:`inflate`; ``X`` may carry leading batch axes (..., K, n)."""
    if infl.delta != 1.0:
        mean = X.mean(axis=-2, keepdims=True)
        X = mean + infl.delta * (X - mean)
    if infl.mu > 0.0:
        if rng is None:
            raise ValueError("additive inflation needs a random generator")
        X = X + infl.mu * rng.standard_normal(X.shape)
    return X


def inflate(e: Ensemble, infl: InflationParams, rng: np.random.Generator | None = None) -> Ensemble:
    """Scale anomalies by ``delta`` about the mean, then add N(0, mu^2) noise."""
    if infl.delta == 1.0 and infl.mu == 0.0:
        return e
    return Ensemble(inflate_members(e.members, infl, rng))


# --- covariance -------------------------------------------------------------

def ensemble_cov(e: Ensemble, mode: CovMode | str = CovMode.STANDARD) -> np.ndarray:
    mode = CovMode(mode)
    X = e.members
    K = e.size
    if mode is CovMode.STANDARD:
        A = e.anomalies
        return A.T @ A / (K - 1)
    if K < 3:
        raise ValueError("leave-one-out covariance needs at least 3 members")
    # mean of the other K-1 members, for each member
    loo_mean = (X.sum(axis=0) - X) / (K - 1)
    D = X - loo_mean
    return D.T @ D / (K - 2)


# --- 3D-Var / EKF ---------------------------------------------------------

def _innovation_solve(S: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e14:
        raise IllConditionedError(f"innovation covariance is singular (cond={cond:.3g})")
    return np.linalg.solve(S, rhs)


def threedvar_analysis(background: np.ndarray, B: np.ndarray, obs: ObservationBatch) -> np.ndarray:
    """Minimiser of the 3D-Var cost, via x_a = x_b + B H^T (H B H^T + R)^-1 (y - H x_b)."""
    xb = np.asarray(background, dtype=float)
    idx = obs.spec.index_array
    BHt = B[:, idx]
    S = BHt[idx, :] + np.diag(obs.spec.variances)
    d = obs.values - apply_h(obs.spec, xb)
    return xb + BHt @ _innovation_solve(S, d)


def threedvar_cost(x: np.ndarray, background: np.ndarray, B: np.ndarray, obs: ObservationBatch) -> float:
    """J(x) = (x-x_b)^T B^-1 (x-x_b) + (y-Hx)^T R^-1 (y-Hx)."""
    dx = x - background
    d = obs.values - apply_h(obs.spec, x)
    return float(dx @ np.linalg.solve(B, dx) + d @ (d / obs.spec.variances))


def kalman_analysis(belief: GaussianBelief, obs: ObservationBatch) -> GaussianBelief:
    """Linear-Gaussian analysis with gain K = P H^T (R + H P H^T)^-1."""
    P = belief.cov
    idx = obs.spec.index_array
    PHt = P[:, idx]
    S = PHt[idx, :] + np.diag(obs.spec.variances)
    gain = _innovation_solve(S, PHt.T).T
    d = obs.values - apply_h(obs.spec, belief.mean)
    mean = belief.mean + gain @ d
    KH = np.zeros_like(P)
    KH[:, idx] = gain
    cov = (np.eye(P.shape[0]) - KH) @ P
    return GaussianBelief(mean, cov)


def ekf_forecast(belief: GaussianBelief, rhs, jac, spec: nk.StepperSpec, nsteps: int,
                 Q: np.ndarray | None = None) -> GaussianBelief:
    """Nonlinear mean forecast; covariance P <- L P L^T through the
    differentiated RK step, one step at a time."""
    x = belief.mean
    P = belief.cov
    for _ in range(nsteps):
        LP = nk.tlm_step(rhs, jac, spec, x, P)
        P = nk.tlm_step(rhs, jac, spec, x, LP.T)
        x = nk.step(rhs, spec, x)
    if Q is not None:
        P = P + Q
    return GaussianBelief(x, P)


def ekf_cycle(belief: GaussianBelief, rhs, jac, spec: nk.StepperSpec, window: float,
              obs: ObservationBatch, Q: np.ndarray | None = None,
              trace_cap: float = np.inf) -> tuple[GaussianBelief, GaussianBelief]:
    """One forecast + analysis cycle. Returns (forecast, analysis).

    ``Q`` defaults to zero (perfect model). Raises :class:`FilterDivergence`
    when the forecast covariance trace exceeds ``trace_cap`` or stops being
    finite.
    """
    nsteps = spec.steps_for(window)
    with np.errstate(over="ignore", invalid="ignore"):
        forecast = ekf_forecast(belief, rhs, jac, spec, nsteps, Q)
    tr = float(np.trace(forecast.cov))
    if not np.isfinite(tr) or tr > trace_cap:
        raise FilterDivergence(tr, trace_cap)
    return forecast, kalman_analysis(forecast, obs)


# --- ensemble filters ---------------------------------------------------------

def _prepare(e: Ensemble, infl: InflationParams, rng) -> np.ndarray:
    return inflate_members(e.members, infl, rng)


def enkf_analysis(e: Ensemble, obs: ObservationBatch, infl: InflationParams = NO_INFLATION,
                  rng: np.random.Generator | None = None,
                  cov_mode: CovMode | str = CovMode.STANDARD) -> Ensemble:
    """Perturbed-observation EnKF: member k assimilates y + eta_k, eta_k ~ N(0, R)."""
    if e.size < 3:
        raise ValueError("EnKF needs at least 3 members")
    if rng is None:
        raise ValueError("EnKF needs a random generator for the observation perturbations")
    X = _prepare(e, infl, rng)
    P = ensemble_cov(Ensemble(X), cov_mode)
    idx = obs.spec.index_array
    PHt = P[:, idx]
    S = PHt[idx, :] + np.diag(obs.spec.variances)
    eta = rng.standard_normal((X.shape[0], obs.spec.size)) * np.asarray(obs.spec.noise_sigma)
    D = obs.values + eta - X[:, idx]
    return Ensemble(X + _innovation_solve(S, D.T).T @ PHt.T)


def etkf_update(X: np.ndarray, y: np.ndarray, idx: np.ndarray, r_var: np.ndarray) -> np.ndarray:
    """ETKF on member-major arrays ``(..., K, n)``.

    Forms Z^T H^T R^-1 H Z in ensemble space, eigendecomposes it, and applies
    the symmetric transform (I + Lambda)^-1/2 to the anomalies; the mean moves
    by Z (I + Z^T H^T R^-1 H Z)^-1 (HZ)^T R^-1 d.
    """
    K = X.shape[-2]
    xm = X.mean(axis=-2)
    Zr = (X - xm[..., None, :]) / np.sqrt(K - 1)  # rows = members
    HZ = Zr[..., idx]
    A = HZ @ np.swapaxes(HZ / r_var, -1, -2)
    lam, Q = nk.sym_eig(A)
    lam = np.clip(lam, 0.0, None)
    Qt = np.swapaxes(Q, -1, -2)
    d = y - xm[..., idx]
    b = HZ @ (d / r_var)[..., None]
    w = Q @ ((Qt @ b) / (1.0 + lam)[..., None])
    T = (Q / np.sqrt(1.0 + lam)[..., None, :]) @ Qt
    xa = xm + (np.swapaxes(w, -1, -2) @ Zr)[..., 0, :]
    return xa[..., None, :] + np.sqrt(K - 1) * (T @ Zr)


def etkf_analysis(e: Ensemble, obs: ObservationBatch, infl: InflationParams = NO_INFLATION,
                  rng: np.random.Generator | None = None) -> Ensemble:
    X = _prepare(e, infl, rng)
    return Ensemble(etkf_update(X, obs.values, obs.spec.index_array, obs.spec.variances))


def ensrf_update(X: np.ndarray, y: np.ndarray, idx: np.ndarray, r_var: np.ndarray) -> np.ndarray:
    """Serial square-root update, one scalar observation at a time."""
    K = X.shape[0]
    xm = X.mean(axis=0)
    A = X - xm
    for j, (i, r) in enumerate(zip(idx, r_var)):
        hx = A[:, i]
        hpht = hx @ hx / (K - 1)
        denom = hpht + r
        gain = (A.T @ hx) / (K - 1) / denom
        xm = xm + gain * (y[j] - xm[i])
        beta = 1.0 / (1.0 + np.sqrt(r / denom))
        A = A - beta * np.outer(hx, gain)
    return xm + A


def ensrf_analysis(e: Ensemble, obs: ObservationBatch, infl: InflationParams = NO_INFLATION,
                   rng: np.random.Generator | None = None) -> Ensemble:
    """Serial EnSRF. Requires a diagonal observation error covariance, which
    :class:`ObsSpec` guarantees by construction."""
    X = _prepare(e, infl, rng)
    return Ensemble(ensrf_update(X, obs.values, obs.spec.index_array, obs.spec.variances))


def _letkf_weights(Yb: np.ndarray, d: np.ndarray, r_var: np.ndarray, rho: float) -> np.ndarray:
    """Ensemble weights (K, K) for one local region; column i = w_a(i)."""
    K = Yb.shape[1]
    C = Yb.T / r_var
    Pt = np.linalg.inv((K - 1) * np.eye(K) / rho + C @ Yb)
    Pt = 0.5 * (Pt + Pt.T)
    Wa = nk.sym_sqrt((K - 1) * Pt)
    wbar = Pt @ (C @ d)
    return Wa + wbar[:, None]


def letkf_update(X: np.ndarray, obs: ObservationBatch, layout: ZoneLayout, rho: float = 1.0,
                 global_indices: Sequence[int] = ()) -> tuple[np.ndarray, list[int]]:
    """LETKF on a member-major array.

    Ring cells ``0..ring_size-1`` are analysed zone by zone from observations
    that fall in each zone's window. Observations at state indices outside the
    ring (e.g. the loop velocity) count as local to every zone. Each index in
    ``global_indices`` is analysed with all observations. Returns the analysis
    and the zones that had no observations (left at background).
    """
    K, n = X.shape
    xm = X.mean(axis=0)
    Xb = (X - xm).T  # (n, K)
    idx = obs.spec.index_array
    r_var = obs.spec.variances
    Yall = Xb[idx, :]
    dall = obs.values - xm[idx]
    ring = layout.ring_size
    on_ring = idx < ring
    out = X.copy()
    empty: list[int] = []

    def analyse(rows, sel):
        W = _letkf_weights(Yall[sel], dall[sel], r_var[sel], rho)
        out[:, rows] = (xm[rows, None] + Xb[rows] @ W).T

    member = np.zeros(ring, dtype=bool)
    for z_i, zone in enumerate(layout.zones):
        member[:] = False
        member[list(zone.window)] = True
        sel = np.flatnonzero(~on_ring | member[np.where(on_ring, idx, 0)])
        rows = list(zone.center)
        if sel.size == 0:
            empty.append(z_i)
            continue
        analyse(rows, sel)
    if len(global_indices):
        analyse(list(global_indices), np.arange(idx.size))
    if empty:
        log.info("LETKF: %d zone(s) without observations kept the background", len(empty))
    return out, empty


def letkf_analysis(e: Ensemble, obs: ObservationBatch, layout: ZoneLayout,
                   infl: InflationParams = NO_INFLATION, rng: np.random.Generator | None = None,
                   global_indices: Sequence[int] = ()) -> Ensemble:
    X = _prepare(e, infl, rng)
    Xa, _ = letkf_update(X, obs, layout, infl.letkf_rho, global_indices)
    return Ensemble(Xa)
