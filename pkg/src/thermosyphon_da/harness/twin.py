"""Twin experiments: a truth run observed with noise, assimilated by one of
the filters, scored window by window.

Several independent runs can share one cycling loop (``run_twin_batch``);
model integration, ETKF analyses and the diagnostics are vectorised across
runs, while every random draw still comes from the run's own stream, so a
run's output does not depend on which batch it was placed in.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import numkernel as nk
from ..filters import (Ensemble, FilterDivergence, GaussianBelief, InflationParams, ekf_forecast, enkf_analysis,
                       ensrf_analysis, etkf_update, kalman_analysis, letkf_analysis, threedvar_analysis)
from ..localization import ZoneLayout, adaptive_shift, apply_shift, build_zones
from ..models import RingBlowUpError, detect_reversals
from ..observing import ObservationBatch, ObsSpec
from ..rng import stream
from .config import ExperimentConfig
from .systems import Climatology, ModelSystem, build_system, climatology

log = logging.getLogger(__name__)

ENSEMBLE_FILTERS = ("enkf", "etkf", "ensrf", "letkf")

# failures that make a run reinitialise its filter instead of aborting
_RECOVERABLE = (FilterDivergence, nk.IntegrationError, RingBlowUpError, np.linalg.LinAlgError)

WINDOW_COLUMNS = ("window", "time", "rmse_forecast", "rmse_analysis", "rmse_forecast_state", "rmse_analysis_state",
                  "spread_forecast", "spread_analysis", "innovation_norm", "flux_truth", "flux_forecast",
                  "flux_analysis", "flux_spread_forecast", "flux_spread_analysis", "flow_truth", "flow_forecast",
                  "flow_analysis", "shift", "reversal", "predicted", "reinitialised")


@dataclass
class SkillReport:
    """Scores of one twin run. RMSEs and confusion counts cover the windows
    after spin-up only; ``windows`` holds per-window diagnostics of every
    window as columns named in ``WINDOW_COLUMNS``."""

    label: str
    observed: tuple[int, ...]
    spinup: int
    windows: dict[str, np.ndarray]
    rmse_forecast: np.ndarray  # per observed component
    rmse_analysis: np.ndarray
    spread: float
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int
    divergences: list[int]  # windows at which the filter was reinitialised

    @property
    def n_scored(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    @property
    def n_reversals(self) -> int:
        return self.hits + self.misses

    @property
    def skill(self) -> float:
        """Fraction of true reversals that were predicted (NaN without reversals)."""
        n = self.hits + self.misses
        return self.hits / n if n else float("nan")

    @property
    def rmse(self) -> float:
        """Forecast RMSE over all observed components and scored windows."""
        return float(np.sqrt(np.mean(self.rmse_forecast ** 2)))

    def window_rows(self) -> list[dict]:
        cols = self.windows
        return [{c: cols[c][i].item() for c in WINDOW_COLUMNS} for i in range(len(cols["window"]))]

    def summary(self) -> dict:
        return {"label": self.label, "rmse_forecast": self.rmse,
                "rmse_analysis": float(np.sqrt(np.mean(self.rmse_analysis ** 2))),
                "spread": self.spread, "hits": self.hits, "misses": self.misses,
                "false_alarms": self.false_alarms, "correct_negatives": self.correct_negatives,
                "skill": self.skill, "divergences": len(self.divergences), "scored_windows": self.n_scored}


def obs_spec_for(cfg: ExperimentConfig, system: ModelSystem, clim: Climatology) -> ObsSpec:
    o = cfg.obs
    if o.indices is not None:
        idx = list(o.indices)
    else:
        field_size = system.n_cells if system.ring is not None else system.dim
        idx = list(range(0, field_size, o.spacing))
        if o.velocity and system.ring is not None:
            idx.append(system.n_cells)
    if max(idx) >= system.dim:
        raise ValueError(f"observed index {max(idx)} outside state of size {system.dim}")
    sigma = o.noise_sigma if o.noise_sigma is not None else o.noise_frac * clim.std[idx]
    return ObsSpec(idx, sigma)


def zone_layout_for(cfg: ExperimentConfig, system: ModelSystem) -> tuple[ZoneLayout, tuple[int, ...]]:
    """Zones and the indices analysed with all observations (the ring velocity)."""
    if system.ring is None:
        return build_zones(system.dim, system.dim, 0), ()
    loc = cfg.localization
    return build_zones(system.n_cells, loc.center, loc.halo), (system.n_cells,)


def zone_shift(mode: str, u_local: float, u_max: float, z_max: int) -> int:
    """Cells to slide the observation windows downstream: a fixed magnitude in
    the direction of the local flow, or the speed-proportional adaptive shift."""
    if mode == "adaptive":
        return adaptive_shift(u_local, u_max, z_max)
    return int(mode) * int(np.sign(u_local))


def _rms(e: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean(np.square(e), axis=-1))


class _Cycler:
    def __init__(self, cfg: ExperimentConfig, run_ids: Sequence[int], clim: Climatology | None,
                 inflation: Sequence[InflationParams] | None):
        self.cfg = cfg
        self.kind = cfg.filter.kind
        self.ensemble = self.kind in ENSEMBLE_FILTERS
        self.system = sysm = build_system(cfg.model, cfg.run)
        self.clim = clim if clim is not None else climatology(sysm)
        self.spec = obs_spec_for(cfg, sysm, self.clim)
        self.nsteps = sysm.spec.steps_for(cfg.run.window)
        self.base_layout, self.global_idx = zone_layout_for(cfg, sysm)
        f = cfg.filter
        self.run_ids = [int(r) for r in run_ids]
        B = len(self.run_ids)
        if inflation is None:
            inflation = [InflationParams(f.delta, f.mu, f.rho)] * B
        if len(inflation) != B:
            raise ValueError("need one InflationParams per run")
        self.infl = list(inflation)
        self.delta = np.array([p.delta for p in self.infl])
        self.mu = np.array([p.mu for p in self.infl])
        seed = cfg.seed
        self.obs_rng = [stream(seed, "obs", r) for r in self.run_ids]
        self.filter_rng = [stream(seed, "filter", r) for r in self.run_ids]
        self.reinit_rng = [stream(seed, "reinit", r) for r in self.run_ids]
        self.truth = np.stack([self.clim.draw(stream(seed, "truth", r), 1)[0] for r in self.run_ids])
        self.divergences: list[list[int]] = [[] for _ in range(B)]
        if self.ensemble:
            self.X = np.stack([self.clim.draw(stream(seed, "ensemble", r), f.members) for r in self.run_ids])
            self.cap = f.ekf_cap_factor * self.X.var(axis=1, ddof=1).sum(axis=-1)
        else:
            self.x = np.stack([self.clim.draw(stream(seed, "ensemble", r), 1)[0] for r in self.run_ids])
            self.P0 = np.diag((f.ekf_p0_frac * self.clim.std) ** 2)
            self.P = np.repeat(self.P0[None], B, axis=0)
            self.cap = np.full(B, f.ekf_cap_factor * np.trace(self.P0) if self.kind == "ekf" else np.inf)
            self.B3 = self.clim.cov if self.kind == "3dvar" else None
        if sysm.ring is None and cfg.localization.shift != "0" and self.kind == "letkf":
            log.info("zone shifts only apply to the ring model; ignoring shift=%s", cfg.localization.shift)

    # -- state views -----------------------------------------------------
    def means(self) -> np.ndarray:
        return self.X.mean(axis=1) if self.ensemble else self.x

    def spreads(self) -> np.ndarray:
        if self.ensemble:
            return np.sqrt(self.X.var(axis=1, ddof=1).mean(axis=-1))
        if self.kind == "ekf":
            return np.sqrt(np.trace(self.P, axis1=1, axis2=2) / self.system.dim)
        return np.full(len(self.run_ids), np.nan)

    def flux_spreads(self) -> np.ndarray:
        if self.ensemble:
            return self.system.flux(self.X).std(axis=1, ddof=1)
        return np.full(len(self.run_ids), np.nan)

    def reinitialise(self, b: int, k: int, why: Exception) -> None:
        log.warning("run %d window %d: %s; reinitialising the filter", self.run_ids[b], k, why)
        self.divergences[b].append(k)
        rng = self.reinit_rng[b]
        if self.ensemble:
            self.X[b] = self.clim.draw(rng, self.cfg.filter.members)
        else:
            self.x[b] = self.clim.draw(rng, 1)[0]
            self.P[b] = self.P0

    # -- forecasts -------------------------------------------------------
    def _integrate(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Final states and the (ensemble-mean) flow at every step."""
        sysm = self.system
        flow = np.empty(X.shape[:1] + (self.nsteps,))
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(self.nsteps):
                X = nk.step(sysm.rhs, sysm.spec, X)
                f = X[..., sysm.flow_index]
                flow[:, i] = f.mean(axis=-1) if self.ensemble else f
        return X, flow

    def _forecast_model(self, k: int) -> np.ndarray:
        state = self.X if self.ensemble else self.x
        try:
            out, flow = self._integrate(state)
        except _RECOVERABLE:
            # isolate the failing run(s); the others repeat the same arithmetic alone
            out = np.empty_like(state)
            flow = np.empty((len(state), self.nsteps))
            for b in range(len(state)):
                try:
                    ob, fb = self._integrate(state[b:b + 1])
                    out[b], flow[b] = ob[0], fb[0]
                except _RECOVERABLE as exc:
                    self.reinitialise(b, k, exc)
                    out[b] = state[b]
                    flow[b] = self._flow_now(b)
        if self.ensemble:
            self.X = out
            tr = out.var(axis=1, ddof=1).sum(axis=-1)
            for b in np.flatnonzero(~(tr <= self.cap)):
                self.reinitialise(b, k, FilterDivergence(float(tr[b]), float(self.cap[b])))
                flow[b] = self._flow_now(b)
        else:
            self.x = out
        return flow

    def _flow_now(self, b: int) -> float:
        return float(self.means()[b, self.system.flow_index])

    def _forecast_ekf(self, k: int) -> np.ndarray:
        sysm = self.system
        flow = np.empty((len(self.run_ids), self.nsteps))
        for b in range(len(self.run_ids)):
            x, P = self.x[b], self.P[b]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    for i in range(self.nsteps):
                        g = ekf_forecast(GaussianBelief(x, P), sysm.rhs, sysm.jac, sysm.spec, 1)
                        x, P = g.mean, g.cov
                        flow[b, i] = x[sysm.flow_index]
                tr = float(np.trace(P))
                if not tr <= self.cap[b]:
                    raise FilterDivergence(tr, float(self.cap[b]))
                self.x[b], self.P[b] = x, P
            except _RECOVERABLE as exc:
                self.reinitialise(b, k, exc)
                flow[b] = self._flow_now(b)
        return flow

    # -- analyses --------------------------------------------------------
    def _inflated(self, b: int) -> np.ndarray:
        X = self.X[b]
        d, mu = self.delta[b], self.mu[b]
        if d != 1.0:
            m = X.mean(axis=0)
            X = m + d * (X - m)
        if mu > 0.0:
            X = X + mu * self.filter_rng[b].standard_normal(X.shape)
        return X

    def _shift(self, b: int, flow: np.ndarray) -> int:
        if self.system.ring is None:
            return 0
        return zone_shift(self.cfg.localization.shift, self._flow_now(b), float(np.max(np.abs(flow))),
                          self.base_layout.center_width)

    def _analyse(self, Y: np.ndarray, t: float, flows: np.ndarray, k: int) -> np.ndarray:
        kind = self.kind
        B = len(self.run_ids)
        shifts = np.zeros(B, dtype=int)
        idx, r_var = self.spec.index_array, self.spec.variances
        if kind == "etkf":
            Xi = np.stack([self._inflated(b) for b in range(B)])
            try:
                Xa = etkf_update(Xi, Y, idx, r_var)
                bad = ~np.all(np.isfinite(Xa), axis=(1, 2))
            except _RECOVERABLE:
                Xa, bad = Xi.copy(), np.ones(B, dtype=bool)
            for b in np.flatnonzero(bad):
                try:
                    Xa[b] = etkf_update(Xi[b], Y[b], idx, r_var)
                    if not np.all(np.isfinite(Xa[b])):
                        raise FilterDivergence(float("nan"), float(self.cap[b]))
                except _RECOVERABLE as exc:
                    self.reinitialise(b, k, exc)
                    Xa[b] = self.X[b]
            self.X = Xa
            return shifts
        for b in range(B):
            obs = ObservationBatch(t, Y[b], self.spec)
            infl = self.infl[b]
            try:
                if kind == "enkf":
                    xa = enkf_analysis(Ensemble(self.X[b]), obs, infl, self.filter_rng[b],
                                       self.cfg.filter.cov_mode).members
                elif kind == "ensrf":
                    xa = ensrf_analysis(Ensemble(self.X[b]), obs, infl, self.filter_rng[b]).members
                elif kind == "letkf":
                    shifts[b] = self._shift(b, flows[b])
                    layout = apply_shift(self.base_layout, [int(shifts[b])] * len(self.base_layout))
                    xa = letkf_analysis(Ensemble(self.X[b]), obs, layout, infl, self.filter_rng[b],
                                        self.global_idx).members
                elif kind == "ekf":
                    P = infl.delta ** 2 * self.P[b] + infl.mu ** 2 * np.eye(self.system.dim)
                    g = kalman_analysis(GaussianBelief(self.x[b], P), obs)
                    xa = g.mean
                    self.P[b] = g.cov
                else:
                    xa = threedvar_analysis(self.x[b], self.B3, obs)
                if not np.all(np.isfinite(xa)):
                    raise FilterDivergence(float("nan"), float(self.cap[b]))
                if self.ensemble:
                    self.X[b] = xa
                else:
                    self.x[b] = xa
            except _RECOVERABLE as exc:
                self.reinitialise(b, k, exc)
        return shifts

    # -- cycling ---------------------------------------------------------
    def run(self) -> list[SkillReport]:
        cfg = self.cfg
        sysm = self.system
        fi = sysm.flow_index
        idx = self.spec.index_array
        sigma = np.asarray(self.spec.noise_sigma)
        C, B = cfg.run.cycles, len(self.run_ids)
        col = {c: np.zeros((C, B)) for c in WINDOW_COLUMNS}
        err_f = np.empty((C, B, idx.size))
        err_a = np.empty((C, B, idx.size))
        truth_flow = np.empty((C + 1, B))
        analysis_flow = np.empty((C + 1, B))
        truth_flow[0] = self.truth[:, fi]
        analysis_flow[0] = self.means()[:, fi]
        truth = self.truth
        for k in range(1, C + 1):
            i = k - 1
            t = k * cfg.run.window
            truth = nk.integrate(sysm.rhs, sysm.spec, truth, self.nsteps)
            Y = truth[:, idx] + np.stack([g.standard_normal(idx.size) for g in self.obs_rng]) * sigma
            n_div = [len(d) for d in self.divergences]
            flows = self._forecast_ekf(k) if self.kind == "ekf" else self._forecast_model(k)
            xf = self.means().copy()
            col["spread_forecast"][i] = self.spreads()
            col["flux_spread_forecast"][i] = self.flux_spreads()
            col["shift"][i] = self._analyse(Y, t, flows, k)
            xa = self.means()
            err_f[i] = xf[:, idx] - truth[:, idx]
            err_a[i] = xa[:, idx] - truth[:, idx]
            col["window"][i] = k
            col["time"][i] = t
            col["rmse_forecast"][i] = _rms(err_f[i])
            col["rmse_analysis"][i] = _rms(err_a[i])
            col["rmse_forecast_state"][i] = _rms(xf - truth)
            col["rmse_analysis_state"][i] = _rms(xa - truth)
            col["spread_analysis"][i] = self.spreads()
            col["innovation_norm"][i] = np.linalg.norm(Y - xf[:, idx], axis=-1)
            col["flux_truth"][i] = sysm.flux(truth)
            col["flux_forecast"][i] = sysm.flux(xf)
            col["flux_analysis"][i] = sysm.flux(xa)
            col["flux_spread_analysis"][i] = self.flux_spreads()
            col["flow_truth"][i] = truth_flow[k] = truth[:, fi]
            col["flow_forecast"][i] = xf[:, fi]
            col["flow_analysis"][i] = analysis_flow[k] = xa[:, fi]
            col["reinitialised"][i] = [len(d) > n for d, n in zip(self.divergences, n_div)]
        return [self._report(b, col, err_f[:, b], err_a[:, b], truth_flow[:, b], analysis_flow[:, b])
                for b in range(B)]

    def _report(self, b: int, col: dict, err_f, err_a, truth_flow, analysis_flow) -> SkillReport:
        cfg = self.cfg
        C, S = cfg.run.cycles, cfg.run.spinup
        w = cfg.run.window
        times = w * np.arange(C + 1)
        hold = cfg.run.hold_windows * w * (1.0 - 1e-9)
        actual = np.zeros(C + 1, dtype=bool)
        for ev in detect_reversals(times, truth_flow, hold):
            actual[int(round(ev.time / w))] = True
        actual = actual[1:]
        a = np.sign(analysis_flow[:-1])
        f = np.sign(col["flow_forecast"][:, b])
        # exact zeros are "no reversal"
        predicted = (a != 0) & (f != 0) & (a != f)
        windows = {c: col[c][:, b].copy() for c in WINDOW_COLUMNS}
        windows["window"] = windows["window"].astype(int)
        windows["shift"] = windows["shift"].astype(int)
        windows["reinitialised"] = windows["reinitialised"].astype(bool)
        windows["reversal"] = actual
        windows["predicted"] = predicted
        act, pred = actual[S:], predicted[S:]
        return SkillReport(
            label=f"{self.kind}-run{self.run_ids[b]}", observed=tuple(int(i) for i in self.spec.index_array),
            spinup=S, windows=windows,
            rmse_forecast=np.sqrt(np.mean(np.square(err_f[S:]), axis=0)),
            rmse_analysis=np.sqrt(np.mean(np.square(err_a[S:]), axis=0)),
            spread=float(np.mean(windows["spread_forecast"][S:])),
            hits=int(np.sum(act & pred)), misses=int(np.sum(act & ~pred)),
            false_alarms=int(np.sum(~act & pred)), correct_negatives=int(np.sum(~act & ~pred)),
            divergences=list(self.divergences[b]))


def run_twin_batch(cfg: ExperimentConfig, run_ids: Sequence[int], clim: Climatology | None = None,
                   inflation: Sequence[InflationParams] | None = None) -> list[SkillReport]:
    """Independent twin runs cycled together. Run ``i`` draws all its
    randomness from streams keyed by ``(cfg.seed, i)``; ``inflation``
    optionally gives each run its own inflation factors."""
    return _Cycler(cfg, run_ids, clim, inflation).run()


def run_twin(cfg: ExperimentConfig, run_id: int = 0, clim: Climatology | None = None) -> SkillReport:
    return run_twin_batch(cfg, [run_id], clim)[0]
