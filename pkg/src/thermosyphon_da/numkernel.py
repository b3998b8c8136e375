"""Fixed-step Runge-Kutta integrators, their exact discrete derivatives, and
the dense linear algebra used by the filters and DMD.

All routines are pure functions of their inputs. State arrays may carry
leading batch dimensions (``(..., n)``); the model right-hand side is expected
to broadcast over them.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, NamedTuple

import numpy as np

Rhs = Callable[[np.ndarray], np.ndarray]
Jacobian = Callable[[np.ndarray], np.ndarray]

SYMMETRY_RTOL = 1e-12
PSD_CLIP = -1e-10


class IntegrationError(FloatingPointError):
    """Raised when the vector field returns non-finite values."""

    def __init__(self, component: int, stage: int):
        self.component = component
        self.stage = stage
        super().__init__(f"non-finite rhs output in state component {component} (RK stage {stage})")


class NotPSDError(np.linalg.LinAlgError):
    pass


class NotSymmetricError(np.linalg.LinAlgError):
    pass


class Scheme(str, Enum):
    RK2 = "RK2"
    RK4 = "RK4"


@dataclass(frozen=True)
class StepperSpec:
    scheme: Scheme = Scheme.RK4
    dt: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if not (self.dt > 0 and np.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt}")

    def steps_for(self, duration: float) -> int:
        """Number of steps covering ``duration``; it must be an integer multiple of dt."""
        n = duration / self.dt
        k = int(round(n))
        if k < 1 or abs(n - k) > 1e-9 * max(1.0, n):
            raise ValueError(f"duration {duration} is not an integer number of steps of dt={self.dt}")
        return k


def _checked(rhs: Rhs, x: np.ndarray, stage: int) -> np.ndarray:
    k = rhs(x)
    if not np.all(np.isfinite(k)):
        bad = np.argwhere(~np.isfinite(k))[0]
        raise IntegrationError(int(bad[-1]), stage)
    return k


def step(rhs: Rhs, spec: StepperSpec, x: np.ndarray) -> np.ndarray:
    """Advance ``x`` by one fixed RK2 (Heun) or RK4 step."""
    x = np.asarray(x, dtype=float)
    dt = spec.dt
    if spec.scheme is Scheme.RK2:
        k1 = _checked(rhs, x, 1)
        k2 = _checked(rhs, x + dt * k1, 2)
        return x + 0.5 * dt * (k1 + k2)
    k1 = _checked(rhs, x, 1)
    k2 = _checked(rhs, x + 0.5 * dt * k1, 2)
    k3 = _checked(rhs, x + 0.5 * dt * k2, 3)
    k4 = _checked(rhs, x + dt * k3, 4)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(rhs: Rhs, spec: StepperSpec, x: np.ndarray, nsteps: int) -> np.ndarray:
    for _ in range(nsteps):
        x = step(rhs, spec, x)
    return x


def trajectory(rhs: Rhs, spec: StepperSpec, x: np.ndarray, nsteps: int, every: int = 1) -> np.ndarray:
    """States at steps 0, every, 2*every, ... up to nsteps (inclusive when divisible)."""
    x = np.asarray(x, dtype=float)
    out = [x]
    for i in range(1, nsteps + 1):
        x = step(rhs, spec, x)
        if i % every == 0:
            out.append(x)
    return np.stack(out)


def _jv(J: np.ndarray, v: np.ndarray) -> np.ndarray:
    return J @ v


def tlm_step(rhs: Rhs, jac: Jacobian, spec: StepperSpec, x: np.ndarray, pert: np.ndarray) -> np.ndarray:
    """Propagate a perturbation (vector, or matrix of column perturbations)
    through the exact derivative of one discrete RK step taken from ``x``.

    This differentiates the stage recursion itself, so the result is the
    Jacobian of ``step`` rather than an RK solve of the variational equation.
    ``rhs`` is needed to rebuild the intermediate stage states.
    """
    x = np.asarray(x, dtype=float)
    pert = np.asarray(pert, dtype=float)
    if x.ndim != 1:
        raise ValueError("tlm_step expects a single state vector")
    if pert.ndim not in (1, 2) or pert.shape[0] != x.shape[0]:
        raise ValueError(f"perturbation shape {pert.shape} does not match state dimension {x.shape[0]}")
    dt = spec.dt
    if spec.scheme is Scheme.RK2:
        k1 = _checked(rhs, x, 1)
        dk1 = _jv(jac(x), pert)
        dk2 = _jv(jac(x + dt * k1), pert + dt * dk1)
        return pert + 0.5 * dt * (dk1 + dk2)
    k1 = _checked(rhs, x, 1)
    x2 = x + 0.5 * dt * k1
    k2 = _checked(rhs, x2, 2)
    x3 = x + 0.5 * dt * k2
    k3 = _checked(rhs, x3, 3)
    x4 = x + dt * k3
    dk1 = _jv(jac(x), pert)
    dk2 = _jv(jac(x2), pert + 0.5 * dt * dk1)
    dk3 = _jv(jac(x3), pert + 0.5 * dt * dk2)
    dk4 = _jv(jac(x4), pert + dt * dk3)
    return pert + (dt / 6.0) * (dk1 + 2.0 * dk2 + 2.0 * dk3 + dk4)


def tlm_window(rhs: Rhs, jac: Jacobian, spec: StepperSpec, x: np.ndarray,
               pert: np.ndarray, nsteps: int) -> tuple[np.ndarray, np.ndarray]:
    """Advance state and perturbation together over ``nsteps``; returns (x_end, pert_end)."""
    for _ in range(nsteps):
        pert = tlm_step(rhs, jac, spec, x, pert)
        x = step(rhs, spec, x)
    return x, pert


# --- dense linear algebra -------------------------------------------------

class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


class SymEig(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def svd(X: np.ndarray) -> SvdResult:
    """Thin SVD, X = U diag(S) V^T with S descending."""
    U, S, Vt = np.linalg.svd(np.asarray(X, dtype=float), full_matrices=False)
    return SvdResult(U, S, np.swapaxes(Vt, -1, -2))


def _check_symmetric(A: np.ndarray) -> None:
    asym = np.max(np.abs(A - np.swapaxes(A, -1, -2)), initial=0.0)
    scale = max(np.max(np.abs(A), initial=0.0), 1e-300)
    if asym > SYMMETRY_RTOL * scale:
        raise NotSymmetricError(f"matrix not symmetric: max asymmetry {asym:.3e} (scale {scale:.3e})")


def sym_eig(A: np.ndarray) -> SymEig:
    """Eigendecomposition of a symmetric matrix (or stack), eigenvalues ascending."""
    A = np.asarray(A, dtype=float)
    _check_symmetric(A)
    w, V = np.linalg.eigh(0.5 * (A + np.swapaxes(A, -1, -2)))
    return SymEig(w, V)


def sym_sqrt(A: np.ndarray) -> np.ndarray:
    """Unique symmetric PSD square root.

    Eigenvalues down to ``PSD_CLIP`` (scaled by the largest magnitude when that
    exceeds one) are treated as rounding noise and clipped to zero.
    """
    w, V = sym_eig(A)
    scale = np.maximum(1.0, np.max(np.abs(w), axis=-1, keepdims=True))
    if np.any(w < PSD_CLIP * scale):
        raise NotPSDError(f"matrix not positive semidefinite: min eigenvalue {w.min():.3e}")
    r = np.sqrt(np.clip(w, 0.0, None))
    return (V * r[..., None, :]) @ np.swapaxes(V, -1, -2)


def pinv(A: np.ndarray, rcond: float = 1e-12) -> np.ndarray:
    return np.linalg.pinv(np.asarray(A, dtype=float), rcond=rcond)
