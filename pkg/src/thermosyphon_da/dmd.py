"""Dynamic mode decomposition (Tu's standard algorithm) and the reversal
precursor analysis built on it."""
from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .models import Direction, ReversalEvent

log = logging.getLogger(__name__)

MAGIC = b"DMD1"


class DmdError(ValueError):
    pass


@dataclass(frozen=True)
class SnapshotMatrix:
    columns: np.ndarray  # (dim, N), one snapshot per column
    interval: float
    t0: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.columns, dtype=float)
        if c.ndim != 2 or c.shape[1] < 3:
            raise DmdError(f"need a 2-D snapshot matrix with at least 3 columns, got {c.shape}")
        if not self.interval > 0:
            raise DmdError("snapshot interval must be positive")
        object.__setattr__(self, "columns", c)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.interval * np.arange(self.columns.shape[1])

    @classmethod
    def from_states(cls, states: np.ndarray, interval: float, t0: float = 0.0) -> "SnapshotMatrix":
        """From row-major states (N, dim)."""
        return cls(np.asarray(states, dtype=float).T, interval, t0)


@dataclass(frozen=True, eq=False)
class DmdBasis:
    modes: np.ndarray  # (dim, r) complex
    eigenvalues: np.ndarray  # (r,) complex
    rank: int
    interval: float
    n_snapshots: int
    singular_values: np.ndarray = field(repr=False, default=None)

    @cached_property
    def real_modes(self) -> np.ndarray:
        return self.modes.real

    @cached_property
    def projection_cond(self) -> float:
        s = np.linalg.svd(self.real_modes, compute_uv=False)
        return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")

    @cached_property
    def projector(self) -> np.ndarray:
        if self.projection_cond > 1e10:
            log.info("real mode matrix is rank deficient (cond=%.3g); using the pseudoinverse", self.projection_cond)
        return nk.pinv(self.real_modes, rcond=1e-10)


def _order(eigenvalues: np.ndarray) -> np.ndarray:
    mag = np.round(np.abs(eigenvalues), 12)
    ang = np.angle(eigenvalues)
    # descending |lambda|, then ascending |arg|, positive imaginary part first
    return np.lexsort((-ang, np.round(np.abs(ang), 12), -mag))


def dmd_standard(d: SnapshotMatrix, rank_tol: float = 1e-10) -> DmdBasis:
    D = d.columns
    X, Y = D[:, :-1], D[:, 1:]
    U, S, V = nk.svd(X)
    if S.size == 0 or S[0] == 0:
        raise DmdError("snapshot matrix has rank 0")
    r = int(np.sum(S / S[0] >= rank_tol))
    if r == 0:
        raise DmdError("rank 0 after truncation")
    U, S, V = U[:, :r], S[:r], V[:, :r]
    A = U.T @ Y @ V / S
    lam, W = np.linalg.eig(A)
    modes = U @ W
    # fix each mode's phase: largest-magnitude component real and positive
    k = np.argmax(np.abs(modes), axis=0)
    ph = modes[k, np.arange(r)]
    modes = modes * (np.abs(ph) / ph)
    o = _order(lam)
    return DmdBasis(modes[:, o], lam[o], r, d.interval, D.shape[1], S)


def drop_conjugates(basis: DmdBasis) -> tuple[DmdBasis, np.ndarray]:
    """Keep one mode of each complex-conjugate pair (the one with positive
    imaginary part). Both members of a pair have the same real part, so the
    full real mode matrix is rank deficient; this basis is not. Returns the
    reduced basis and the kept indices into ``basis``."""
    lam = basis.eigenvalues
    keep = np.flatnonzero(lam.imag >= -1e-12 * np.maximum(1.0, np.abs(lam)))
    reduced = DmdBasis(basis.modes[:, keep], lam[keep], int(keep.size), basis.interval, basis.n_snapshots,
                       basis.singular_values)
    return reduced, keep


def dmd_project(basis: DmdBasis, x: np.ndarray) -> np.ndarray:
    """Least-squares coefficients of state(s) on the real parts of the modes."""
    x = np.asarray(x, dtype=float)
    return (basis.projector @ x.T).T if x.ndim > 1 else basis.projector @ x


def _lag_steps(times: np.ndarray, lags: Sequence[float]) -> list[int]:
    dt = np.diff(times)
    if dt.size and np.ptp(dt) > 1e-9 * max(1.0, dt.mean()):
        raise DmdError("state times must be uniformly spaced")
    step = dt[0] if dt.size else 1.0
    steps = [int(round(L / step)) for L in lags]
    if any(s <= 0 for s in steps):
        raise DmdError("lags must be positive")
    return steps


def _reversal_indices(times: np.ndarray, reversals: Sequence[ReversalEvent]) -> np.ndarray:
    return np.searchsorted(times, [ev.time for ev in reversals], side="left")


@dataclass
class PrecursorScores:
    lags: list[float]
    all_log_mean: np.ndarray  # (r,)
    lag_log_mean: np.ndarray  # (len(lags), r)
    score: np.ndarray  # (r,)
    n_reversals: int

    def ranking(self) -> np.ndarray:
        """Mode indices ordered by descending precursor score (stable)."""
        return np.argsort(-self.score, kind="stable")

    def top(self, k: int) -> list[int]:
        return [int(i) for i in self.ranking()[:k]]

    def rows(self, basis: DmdBasis, mode_ids: Sequence[int] | None = None) -> list[dict]:
        """One row per mode; ``mode_ids`` relabels modes (e.g. with their
        index in the full basis)."""
        out = []
        rank_of = np.empty(self.score.size, dtype=int)
        rank_of[self.ranking()] = np.arange(self.score.size)
        for m in range(self.score.size):
            lam = basis.eigenvalues[m]
            row = {"mode": int(mode_ids[m]) if mode_ids is not None else m, "abs_lambda": float(abs(lam)), "arg_lambda": float(np.angle(lam)),
                   "log10_mean_all": float(self.all_log_mean[m])}
            for L, v in zip(self.lags, self.lag_log_mean[:, m]):
                row[f"log10_mean_lag_{L:g}"] = float(v)
            row["score"] = float(self.score[m])
            row["precursor_rank"] = int(rank_of[m])
            out.append(row)
        return out


def prereversal_scores(basis: DmdBasis, times: np.ndarray, states: np.ndarray,
                       reversals: Sequence[ReversalEvent], lags: Sequence[float]) -> PrecursorScores:
    """Compare the log10 mean |projection| of all states with that of the
    states ``lag`` before each reversal; a mode's score is the largest gap
    over the lags."""
    times = np.asarray(times, dtype=float)
    steps = _lag_steps(times, lags)
    coef = np.abs(dmd_project(basis, states))
    r = coef.shape[1]
    with np.errstate(divide="ignore"):
        all_log = np.log10(coef.mean(axis=0))
    rev = _reversal_indices(times, reversals)
    rev = rev[rev < len(times)]
    lag_log = np.full((len(steps), r), np.nan)
    if rev.size == 0:
        log.warning("no reversals in the projected span; precursor table is empty")
        return PrecursorScores(list(lags), all_log, lag_log, np.zeros(0), 0)
    for i, s in enumerate(steps):
        j = rev - s
        j = j[j >= 0]
        if j.size:
            with np.errstate(divide="ignore"):
                lag_log[i] = np.log10(coef[j].mean(axis=0))
    gap = np.abs(lag_log - all_log)
    score = np.where(np.isnan(gap), 0.0, gap).max(axis=0)
    return PrecursorScores(list(lags), all_log, lag_log, score, int(rev.size))


def phase_plane(basis: DmdBasis, times: np.ndarray, states: np.ndarray, mode_i: int, mode_j: int,
                reversals: Sequence[ReversalEvent], pre_window: float) -> list[dict]:
    """Coefficients on two modes for every state, flagging states within
    ``pre_window`` before a reversal with that reversal's direction."""
    r = basis.eigenvalues.size
    if not (0 <= mode_i < r and 0 <= mode_j < r):
        raise DmdError(f"modes ({mode_i}, {mode_j}) not in basis of rank {r}")
    times = np.asarray(times, dtype=float)
    coef = dmd_project(basis, states)
    direction = [""] * len(times)
    for ev in reversals:
        sel = np.flatnonzero((times >= ev.time - pre_window - 1e-9) & (times < ev.time - 1e-9))
        for k in sel:
            direction[k] = ev.direction.value
    return [{"t": float(t), "c_i": float(coef[k, mode_i]), "c_j": float(coef[k, mode_j]),
             "pre_reversal": bool(direction[k]), "direction": direction[k]}
            for k, t in enumerate(times)]


def eigenvalue_map(basis: DmdBasis) -> list[dict]:
    rows = []
    for lam in basis.eigenvalues:
        defined = lam != 0
        mapped = np.log(lam) / np.log(10.0) if defined else complex(np.nan, np.nan)
        rows.append({"re": float(lam.real), "im": float(lam.imag),
                     "log10_re": float(mapped.real), "log10_im": float(mapped.imag),
                     "defined": bool(defined), "unstable": bool(abs(lam) > 1.0)})
    return rows


def linear_separation_accuracy(points: np.ndarray, labels: Sequence) -> float:
    """Training accuracy of a least-squares linear discriminant (with
    intercept) separating two label classes."""
    P = np.asarray(points, dtype=float)
    labs = list(labels)
    classes = sorted(set(labs))
    if len(classes) < 2:
        return 1.0
    if len(classes) > 2:
        raise ValueError("two classes expected")
    t = np.array([1.0 if c == classes[0] else -1.0 for c in labs])
    scale = P.std(axis=0)
    scale[scale == 0] = 1.0
    A = np.column_stack([(P - P.mean(axis=0)) / scale, np.ones(len(P))])
    w, *_ = np.linalg.lstsq(A, t, rcond=None)
    pred = np.where(A @ w >= 0, 1.0, -1.0)
    return float(np.mean(pred == t))


# --- snapshot IO --------------------------------------------------------

def write_snapshots_csv(path: str | Path, d: SnapshotMatrix) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component"] + [repr(float(t)) for t in d.times])
        for i, row in enumerate(d.columns):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_snapshots_csv(path: str | Path) -> SnapshotMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    times = np.array([float(t) for t in rows[0][1:]])
    data = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    interval = float(times[1] - times[0]) if times.size > 1 else 1.0
    return SnapshotMatrix(data, interval, float(times[0]))


def write_snapshots_binary(path: str | Path, d: SnapshotMatrix) -> None:
    """``DMD1`` | uint64 rows | uint64 cols | float64 interval | float64 data,
    column-major, all little-endian."""
    rows, cols = d.columns.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQd", rows, cols, d.interval))
        fh.write(np.asfortranarray(d.columns).astype("<f8").tobytes(order="F"))


def read_snapshots_binary(path: str | Path, t0: float = 0.0) -> SnapshotMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise DmdError(f"{path}: not a DMD1 snapshot file")
    rows, cols, interval = struct.unpack("<QQd", raw[4:28])
    data = np.frombuffer(raw[28:], dtype="<f8")
    if data.size != rows * cols:
        raise DmdError(f"{path}: expected {rows * cols} values, found {data.size}")
    return SnapshotMatrix(data.reshape((rows, cols), order="F").astype(float), interval, t0)
