import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from thermosyphon_da import numkernel as nk
from thermosyphon_da.models import EmParams, Lorenz63Params, em3_jac, em3_rhs, lorenz_jac, lorenz_rhs

L63 = Lorenz63Params()
EM = EmParams(alpha=10.0, beta_em=28.0, K=0.0)


def attractor_points(rhs, n, seed=0, dt=0.01):
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 5.0, (n, 3)) + [0.0, 0.0, 20.0]
    return nk.integrate(rhs, nk.StepperSpec("RK4", dt), x, 1000)


def taylor_ratio(rhs, jac, spec, x, dx):
    """|M(x+d)-M(x)-Ld| / |M(x+d/2)-M(x)-Ld/2|; about 4 for a correct TLM."""
    Mx = nk.step(rhs, spec, x)
    rem = []
    for d in (dx, 0.5 * dx):
        lin = nk.tlm_step(rhs, jac, spec, x, d)
        rem.append(np.linalg.norm(nk.step(rhs, spec, x + d) - Mx - lin))
    return rem[0] / rem[1]


@pytest.mark.parametrize("scheme", ["RK2", "RK4"])
def test_zero_field_leaves_state(scheme):
    x = np.array([1.5, -2.0, 3.0])
    out = nk.step(lambda y: np.zeros_like(y), nk.StepperSpec(scheme, 0.3), x)
    assert np.array_equal(out, x)


def test_rk4_linear_growth_matches_series():
    out = nk.step(lambda y: y, nk.StepperSpec("RK4", 0.1), np.array([1.0]))
    series = 1 + 0.1 + 0.1**2 / 2 + 0.1**3 / 6 + 0.1**4 / 24
    assert out[0] == pytest.approx(series, abs=1e-15)
    assert out[0] == pytest.approx(1.10517083, abs=5e-9)


def test_rk2_is_heun():
    out = nk.step(lambda y: y, nk.StepperSpec("RK2", 0.1), np.array([1.0]))
    assert out[0] == pytest.approx(1 + 0.1 + 0.005, abs=1e-15)


def test_fixed_point_preserved():
    x = np.zeros(3)
    assert np.array_equal(nk.integrate(lambda y: lorenz_rhs(L63, y), nk.StepperSpec(), x, 50), x)


def test_nonfinite_rhs_raises():
    def rhs(y):
        out = np.zeros_like(y)
        out[1] = np.nan
        return out
    with pytest.raises(nk.IntegrationError) as info:
        nk.step(rhs, nk.StepperSpec(), np.ones(3))
    assert info.value.component == 1 and info.value.stage == 1


def test_bad_dt_and_steps():
    with pytest.raises(ValueError):
        nk.StepperSpec("RK4", 0.0)
    spec = nk.StepperSpec("RK4", 0.01)
    assert spec.steps_for(0.25) == 25
    with pytest.raises(ValueError):
        spec.steps_for(0.255)


def test_trajectory_sampling():
    spec = nk.StepperSpec("RK4", 0.01)
    rhs = lambda y: lorenz_rhs(L63, y)
    x0 = np.array([1.0, 1.0, 1.0])
    traj = nk.trajectory(rhs, spec, x0, 10, every=5)
    assert traj.shape == (3, 3)
    assert np.array_equal(traj[-1], nk.integrate(rhs, spec, x0, 10))


def test_batched_step_equals_single():
    spec = nk.StepperSpec("RK4", 0.01)
    rhs = lambda y: lorenz_rhs(L63, y)
    X = attractor_points(rhs, 4)
    batched = nk.step(rhs, spec, X)
    for k in range(4):
        assert np.array_equal(batched[k], nk.step(rhs, spec, X[k]))


@pytest.mark.parametrize("scheme", ["RK2", "RK4"])
def test_tlm_of_linear_model_is_propagator(scheme):
    rng = np.random.default_rng(1)
    A = rng.normal(size=(3, 3))
    spec = nk.StepperSpec(scheme, 0.05)
    rhs = lambda y: (A @ y.T).T if y.ndim > 1 else A @ y
    jac = lambda y: A
    x = rng.normal(size=3)
    v = rng.normal(size=3)
    assert np.allclose(nk.tlm_step(rhs, jac, spec, x, v), nk.step(rhs, spec, v), atol=1e-14, rtol=0)


def test_tlm_finite_difference_lorenz():
    spec = nk.StepperSpec("RK4", 0.01)
    rhs = lambda y: lorenz_rhs(L63, y)
    jac = lambda y: lorenz_jac(L63, y)
    x = attractor_points(rhs, 1)[0]
    d = 1e-6 * np.eye(3)[0]
    err = nk.step(rhs, spec, x + d) - nk.step(rhs, spec, x) - nk.tlm_step(rhs, jac, spec, x, d)
    assert np.linalg.norm(err) <= 1e-10


def test_tlm_matrix_columns():
    spec = nk.StepperSpec("RK4", 0.01)
    rhs = lambda y: lorenz_rhs(L63, y)
    jac = lambda y: lorenz_jac(L63, y)
    x = attractor_points(rhs, 1)[0]
    P = np.random.default_rng(2).normal(size=(3, 3))
    LP = nk.tlm_step(rhs, jac, spec, x, P)
    for j in range(3):
        assert np.allclose(LP[:, j], nk.tlm_step(rhs, jac, spec, x, P[:, j]), atol=1e-14)
    with pytest.raises(ValueError):
        nk.tlm_step(rhs, jac, spec, x, np.ones(4))


@pytest.mark.parametrize("model", ["lorenz63", "em3"])
@pytest.mark.parametrize("scheme", ["RK2", "RK4"])
def test_taylor_remainder_ratio(model, scheme):
    if model == "lorenz63":
        rhs, jac = (lambda y: lorenz_rhs(L63, y)), (lambda y: lorenz_jac(L63, y))
    else:
        rhs, jac = (lambda y: em3_rhs(EM, y)), (lambda y: em3_jac(EM, y))
    spec = nk.StepperSpec(scheme, 0.01)
    rng = np.random.default_rng(3)
    ratios = [taylor_ratio(rhs, jac, spec, x, 1e-3 * rng.normal(size=3)) for x in attractor_points(rhs, 20)]
    assert 3.5 <= np.mean(ratios) <= 4.5


def test_tlm_window_chains_steps():
    spec = nk.StepperSpec("RK4", 0.01)
    rhs = lambda y: lorenz_rhs(L63, y)
    jac = lambda y: lorenz_jac(L63, y)
    x = attractor_points(rhs, 1)[0]
    v = np.array([1.0, 0.0, 0.0])
    xe, ve = nk.tlm_window(rhs, jac, spec, x, v, 3)
    x1 = nk.step(rhs, spec, x)
    x2 = nk.step(rhs, spec, x1)
    expected = nk.tlm_step(rhs, jac, spec, x2, nk.tlm_step(rhs, jac, spec, x1, nk.tlm_step(rhs, jac, spec, x, v)))
    assert np.array_equal(ve, expected)
    assert np.array_equal(xe, nk.integrate(rhs, spec, x, 3))


def test_sym_sqrt_examples():
    assert np.allclose(nk.sym_sqrt(np.eye(3)), np.eye(3), atol=1e-15)
    assert np.allclose(nk.sym_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_sym_sqrt_rejects_bad_input():
    with pytest.raises(nk.NotPSDError):
        nk.sym_sqrt(np.diag([1.0, -1e-3]))
    with pytest.raises(nk.NotSymmetricError):
        nk.sym_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))
    # rounding-level negatives are clipped
    assert np.allclose(nk.sym_sqrt(np.diag([1.0, -1e-12])), np.diag([1.0, 0.0]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)))
def test_sym_sqrt_squares_back(G):
    A = G @ G.T
    R = nk.sym_sqrt(A)
    assert np.allclose(R, R.T, atol=1e-12 * max(1.0, np.abs(A).max()))
    assert np.allclose(R @ R, A, rtol=0, atol=1e-8 * max(1.0, np.abs(A).max()))


def test_pinv_penrose_identities():
    A = np.random.default_rng(4).normal(size=(5, 3))
    P = nk.pinv(A)
    assert np.allclose(A @ P @ A, A, atol=1e-12)
    assert np.allclose(P @ A @ P, P, atol=1e-12)
    assert np.allclose((A @ P).T, A @ P, atol=1e-12)
    assert np.allclose((P @ A).T, P @ A, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-1e3, 1e3)))
def test_svd_descending_nonnegative(X):
    U, S, V = nk.svd(X)
    assert np.all(S >= 0) and np.all(np.diff(S) <= 0)
    assert np.allclose((U * S) @ V.T, X, atol=1e-9 * max(1.0, np.abs(X).max()))


def test_sym_eig_ascending_and_deterministic():
    G = np.random.default_rng(5).normal(size=(4, 4))
    A = G + G.T
    w, V = nk.sym_eig(A)
    assert np.all(np.diff(w) >= 0)
    assert np.allclose(V @ np.diag(w) @ V.T, A, atol=1e-12)
    w2, V2 = nk.sym_eig(A)
    assert np.array_equal(w, w2) and np.array_equal(V, V2)
