"""The experiment drivers behind the CLI subcommands.

Each driver returns an :class:`ExperimentResult` (tables plus a results
summary). Independent runs are fanned out over ``jobs`` worker processes;
task lists are built from the configuration alone and results are gathered
in task order, so outputs never depend on ``jobs``.
"""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .. import dmd as dmdmod
from .. import numkernel as nk
from ..filters import InflationParams
from ..models import RingParams, detect_reversals
from ..rng import stream
from .config import ExperimentConfig
from .report import Table
from .systems import build_system, climatology
from .twin import WINDOW_COLUMNS, SkillReport, run_twin_batch

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("run", "rmse_forecast", "rmse_analysis", "spread", "hits", "misses", "false_alarms",
                   "correct_negatives", "skill", "divergences", "scored_windows")


@dataclass
class ExperimentResult:
    tables: dict[str, Table]
    results: dict
    # extra (non-CSV) outputs: file name -> writer taking the destination path
    files: dict[str, Callable[[Path], None]] = field(default_factory=dict)


def parallel_map(fn, tasks: Sequence, jobs: int = 1) -> list:
    """``[fn(*t) for t in tasks]``, optionally across processes, in task order."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as ex:
        return list(ex.map(fn, *zip(*tasks)))


def _batch(cfg: ExperimentConfig, run_ids: Sequence[int], inflation: Sequence[InflationParams] | None = None,
           keep_windows: bool = False) -> list[SkillReport]:
    reports = run_twin_batch(cfg, run_ids, inflation=inflation)
    if not keep_windows:
        for r in reports:
            r.windows = {}
    return reports


def _summary_row(r: SkillReport, run_id: int) -> dict:
    row = r.summary()
    row["run"] = run_id
    return row


# --- twin -------------------------------------------------------------------

def twin_experiment(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """``cfg.run.runs`` twin runs of one configuration, with per-window diagnostics."""
    ids = list(range(cfg.run.runs))
    chunks = _run_chunks(cfg, ids)
    reports = [r for rs in parallel_map(_batch, [(cfg, c, None, True) for c in chunks], jobs) for r in rs]
    tables = {"summary": Table(SUMMARY_COLUMNS, [_summary_row(r, i) for r, i in zip(reports, ids)])}
    for r, i in zip(reports, ids):
        tables[f"windows_run{i}"] = Table(WINDOW_COLUMNS, r.window_rows())
    hits = sum(r.hits for r in reports)
    rev = sum(r.n_reversals for r in reports)
    results = {"rmse_forecast": float(np.mean([r.rmse for r in reports])),
               "skill": hits / rev if rev else None,
               "divergences": sum(len(r.divergences) for r in reports)}
    return ExperimentResult(tables, results)


def _run_chunks(cfg: ExperimentConfig, ids: list[int]) -> list[list[int]]:
    """Ring runs go one per task (vectorising them gains nothing); the small
    ODE models are cycled as one batch."""
    if cfg.model.kind == "ring":
        return [[i] for i in ids]
    return [ids]


# --- window sweep ---------------------------------------------------------

def sweep_window(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Forecast RMSE in the observed variables against window length for each filter."""
    windows = list(cfg.sweep.windows)
    filters = list(cfg.sweep.filters)
    ids = list(range(cfg.run.runs))
    cells = [(f, w) for f in filters for w in windows]
    tasks = [(cfg.with_(**{"filter.kind": f, "run.window": w}), ids) for f, w in cells]
    out = parallel_map(_batch, tasks, jobs)
    rows, run_rows = [], []
    for (f, w), reports in zip(cells, out):
        div = [len(r.divergences) for r in reports]
        rows.append({"filter": f, "window": w, "rmse_forecast": float(np.mean([r.rmse for r in reports])),
                     "rmse_analysis": float(np.mean([r.summary()["rmse_analysis"] for r in reports])),
                     "spread": float(np.mean([r.spread for r in reports])),
                     "divergences": int(sum(div)), "runs": len(reports)})
        for r, i in zip(reports, ids):
            run_rows.append({"filter": f, "window": w, **_summary_row(r, i),
                             "first_divergence": r.divergences[0] if r.divergences else ""})
    trend_rows = []
    longest = max(windows)
    for f in filters:
        sub = [r for r in rows if r["filter"] == f]
        rho = _spearman([r["window"] for r in sub], [r["rmse_forecast"] for r in sub])
        at_longest = next(r for r in sub if r["window"] == longest)
        trend_rows.append({"filter": f, "spearman": rho, "diverged_at_longest": at_longest["divergences"] > 0,
                           "divergences_total": sum(r["divergences"] for r in sub)})
    tables = {
        "window_sweep": Table(("filter", "window", "rmse_forecast", "rmse_analysis", "spread", "divergences",
                               "runs"), rows),
        "window_sweep_runs": Table(("filter", "window") + SUMMARY_COLUMNS + ("first_divergence",), run_rows),
        "window_trend": Table(("filter", "spearman", "diverged_at_longest", "divergences_total"), trend_rows),
    }
    return ExperimentResult(tables, {"trend": {r["filter"]: r for r in trend_rows}})


def _spearman(x, y) -> float:
    if len(x) < 2 or not np.all(np.isfinite(y)):
        return float("nan")
    return float(spearmanr(x, y).statistic)


# --- inflation grid ---------------------------------------------------------

def inflation_grid(cfg: ExperimentConfig) -> tuple[np.ndarray, np.ndarray]:
    g = cfg.sweep.grid_points
    return np.linspace(1.0, cfg.sweep.delta_max, g), np.linspace(0.0, cfg.sweep.mu_max, g)


def _inflation_row(cfg: ExperimentConfig, delta: float, mus: Sequence[float]) -> list[float]:
    ids = list(range(cfg.run.runs))
    infl = [InflationParams(float(delta), float(m), cfg.filter.rho) for m in mus for _ in ids]
    reports = _batch(cfg, ids * len(mus), infl)
    n = len(ids)
    return [(float(np.mean([r.rmse for r in reports[j * n:(j + 1) * n]])),
             int(sum(len(r.divergences) for r in reports[j * n:(j + 1) * n]))) for j in range(len(mus))]


def pick_argmin(deltas: np.ndarray, mus: np.ndarray, surface: np.ndarray) -> tuple[int, int]:
    """Lowest mean RMSE; ties go to the smaller delta, then the smaller mu."""
    best = (0, 0)
    for i in range(len(deltas)):
        for j in range(len(mus)):
            if surface[i, j] < surface[best]:
                best = (i, j)
    return best


def sweep_inflation(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Mean forecast RMSE over ``run.runs`` runs on the (delta, mu) grid.

    All grid points see the same truths, observations and initial ensembles
    (streams are keyed by run id only), so the surface compares inflation
    settings on common random numbers.
    """
    deltas, mus = inflation_grid(cfg)
    out = parallel_map(_inflation_row, [(cfg, d, mus) for d in deltas], jobs)
    surface = np.array([[v for v, _ in row] for row in out])
    rows = [{"delta": float(d), "mu": float(m), "rmse_forecast": out[i][j][0], "divergences": out[i][j][1]}
            for i, d in enumerate(deltas) for j, m in enumerate(mus)]
    i, j = pick_argmin(deltas, mus, surface)
    g = len(deltas)
    interior = 0 < i < g - 1 and 0 < j < len(mus) - 1
    best = {"delta": float(deltas[i]), "mu": float(mus[j]), "rmse_forecast": float(surface[i, j]),
            "interior": interior, "corner_rmse": float(surface[0, 0])}
    tables = {"inflation_surface": Table(("delta", "mu", "rmse_forecast", "divergences"), rows),
              "inflation_argmin": Table(("delta", "mu", "rmse_forecast", "interior", "corner_rmse"), [best])}
    return ExperimentResult(tables, {"argmin": best})


# --- reversal skill matrix ----------------------------------------------------

def _skill_cell(cfg: ExperimentConfig, spacing: int, shift: str, run_id: int) -> SkillReport:
    c = cfg.with_(**{"obs.spacing": spacing, "localization.shift": shift, "filter.kind": "letkf"})
    return _batch(c, [run_id])[0]


def skill_matrix(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """LETKF reversal-prediction skill over observation spacing x zone shift."""
    if cfg.model.kind != "ring":
        raise ValueError("the skill matrix runs on the ring model (model.kind = ring)")
    ids = list(range(cfg.run.runs))
    cells = [(sp, sh) for sp in cfg.sweep.spacings for sh in cfg.sweep.shifts]
    tasks = [(cfg, sp, sh, i) for sp, sh in cells for i in ids]
    out = parallel_map(_skill_cell, tasks, jobs)
    rows, run_rows = [], []
    n = len(ids)
    for c, (sp, sh) in enumerate(cells):
        reports = out[c * n:(c + 1) * n]
        counts = {k: sum(getattr(r, k) for r in reports)
                  for k in ("hits", "misses", "false_alarms", "correct_negatives")}
        rev = counts["hits"] + counts["misses"]
        rows.append({"spacing": sp, "shift": sh, "observations": len(reports[0].observed), **counts,
                     "skill": counts["hits"] / rev if rev else float("nan"),
                     "rmse_forecast": float(np.mean([r.rmse for r in reports])),
                     "divergences": sum(len(r.divergences) for r in reports), "runs": n})
        for r, i in zip(reports, ids):
            run_rows.append({"spacing": sp, "shift": sh, **_summary_row(r, i)})
    cols = ("spacing", "shift", "observations", "hits", "misses", "false_alarms", "correct_negatives", "skill",
            "rmse_forecast", "divergences", "runs")
    tables = {"skill_matrix": Table(cols, rows),
              "skill_matrix_runs": Table(("spacing", "shift") + SUMMARY_COLUMNS, run_rows)}
    return ExperimentResult(tables, {"cells": {f"{r['spacing']}/{r['shift']}": r["skill"] for r in rows}})


# --- DMD precursor pipeline ---------------------------------------------------

def _ring_truth(cfg: ExperimentConfig, span: float, interval: float) -> tuple[np.ndarray, np.ndarray]:
    system = build_system(cfg.model, cfg.run)
    clim = climatology(system)
    x = clim.draw(stream(cfg.seed, "dmd-truth"), 1)[0]
    every = system.spec.steps_for(interval)
    nsteps = system.spec.steps_for(span)
    states = nk.trajectory(system.rhs, system.spec, x, nsteps, every)
    return interval * np.arange(len(states)), states


def dmd_pipeline(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Truth run -> snapshot DMD -> pre-reversal mode scores -> phase plane of
    the two best precursor modes."""
    if cfg.model.kind != "ring":
        raise ValueError("the DMD pipeline runs on the ring model (model.kind = ring)")
    d = cfg.dmd
    p: RingParams = cfg.model.ring
    span = max(d.state_span, d.snapshot_span)
    times, states = _ring_truth(cfg, span, d.state_interval)
    stride = int(round(d.snapshot_interval / d.state_interval))
    n_snap = int(round(d.snapshot_span / d.snapshot_interval)) + 1
    snaps = dmdmod.SnapshotMatrix.from_states(states[::stride][:n_snap], d.snapshot_interval)
    basis = dmdmod.dmd_standard(snaps, d.rank_tol)
    keep = times <= d.state_span + 1e-9
    times, states = times[keep], states[keep]
    reversals = detect_reversals(times, states[:, p.n_cells], d.hold * (1.0 - 1e-9))
    # conjugate modes share a real part; project on one of each pair
    proj, kept = dmdmod.drop_conjugates(basis)
    scores = dmdmod.prereversal_scores(proj, times, states, reversals, d.lags)
    tables = {
        "eigenvalues": Table(("mode", "re", "im", "abs", "arg", "log10_re", "log10_im", "defined", "unstable"),
                             [{"mode": m, "abs": float(abs(lam)), "arg": float(np.angle(lam)), **row}
                              for m, (lam, row) in enumerate(zip(basis.eigenvalues,
                                                                 dmdmod.eigenvalue_map(basis)))]),
        "reversals": Table(("time", "direction"), [{"time": ev.time, "direction": ev.direction.value}
                                                   for ev in reversals]),
    }
    score_cols = (["mode", "abs_lambda", "arg_lambda", "log10_mean_all"]
                  + [f"log10_mean_lag_{L:g}" for L in d.lags] + ["score", "precursor_rank"])
    tables["precursor_scores"] = Table(score_cols, scores.rows(proj, kept) if scores.n_reversals else [])
    results = {"rank": basis.rank, "n_snapshots": basis.n_snapshots, "n_reversals": len(reversals),
               "projected_modes": proj.rank, "projection_cond": proj.projection_cond}
    plane_cols = ("t", "c_i", "c_j", "pre_reversal", "direction")
    if scores.n_reversals:
        mi, mj = scores.top(2)
        plane = dmdmod.phase_plane(proj, times, states, mi, mj, reversals, d.pre_window)
        pre = [r for r in plane if r["pre_reversal"]]
        acc = dmdmod.linear_separation_accuracy([(r["c_i"], r["c_j"]) for r in pre], [r["direction"] for r in pre])
        results.update({"top_modes": [int(kept[mi]), int(kept[mj])], "separation_accuracy": acc,
                        "top_mode_eigenvalues": [[float(proj.eigenvalues[m].real), float(proj.eigenvalues[m].imag)]
                                                 for m in (mi, mj)]})
    else:
        plane = []
        results.update({"top_modes": [], "separation_accuracy": None})
    tables["phase_plane"] = Table(plane_cols, plane)
    files = {"snapshots.csv": lambda path: dmdmod.write_snapshots_csv(path, snaps),
             "snapshots.bin": lambda path: dmdmod.write_snapshots_binary(path, snaps)}
    return ExperimentResult(tables, results, files)


# --- ring parameter sweep -----------------------------------------------------

def _ring_stats(cfg: ExperimentConfig, beta_em: float) -> dict:
    base = cfg.model.ring
    kw = {k: getattr(base, k) for k in ("n_cells", "alpha_w", "T_hot", "T_cold", "K")}
    p = RingParams.from_em(cfg.sweep.alpha_em, beta_em, **kw)
    system = build_system(cfg.model.__class__(kind="ring", ring=p), cfg.run)
    rng = stream(cfg.seed, "ring-sweep")
    T = 0.5 * (p.T_hot + p.T_cold) + rng.uniform(-1.0, 1.0, p.n_cells)
    x = np.concatenate([T, [0.01]])
    transient = 200.0
    x = nk.integrate(system.rhs, system.spec, x, system.spec.steps_for(transient))
    traj = nk.trajectory(system.rhs, system.spec, x, system.spec.steps_for(cfg.sweep.span),
                         system.spec.steps_for(1.0))
    t = np.arange(len(traj), dtype=float)
    u = traj[:, p.n_cells]
    rev = detect_reversals(t, u, cfg.dmd.hold * (1.0 - 1e-9))
    umax = float(np.max(np.abs(u)))
    return {"alpha_em": cfg.sweep.alpha_em, "beta_em": beta_em, "friction": p.friction, "buoyancy": p.buoyancy,
            "reversals": len(rev), "max_abs_u": umax, "courant": umax * system.spec.dt / p.dphi,
            "T_min": float(traj[:, :p.n_cells].min()), "T_max": float(traj[:, :p.n_cells].max()),
            "mean_residence": cfg.sweep.span / len(rev) if rev else float("nan")}


def ring_param_sweep(cfg: ExperimentConfig, jobs: int = 1) -> ExperimentResult:
    """Reversal statistics of free ring runs over the first-harmonic beta."""
    rows = parallel_map(_ring_stats, [(cfg, b) for b in cfg.sweep.beta_em], jobs)
    cols = ("alpha_em", "beta_em", "friction", "buoyancy", "reversals", "max_abs_u", "courant", "T_min", "T_max",
            "mean_residence")
    return ExperimentResult({"ring_sweep": Table(cols, rows)},
                            {"reversals": {f"{r['beta_em']:g}": r["reversals"] for r in rows}})


EXPERIMENTS = {
    "twin": twin_experiment,
    "sweep-window": sweep_window,
    "sweep-inflation": sweep_inflation,
    "skill-matrix": skill_matrix,
    "dmd": dmd_pipeline,
    "ring-sweep": ring_param_sweep,
}

__all__ = ["ExperimentResult", "EXPERIMENTS", "parallel_map", "twin_experiment", "sweep_window",
           "sweep_inflation", "skill_matrix", "dmd_pipeline", "ring_param_sweep", "pick_argmin"]
