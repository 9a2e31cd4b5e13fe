import math

import numpy as np
import pytest

from depthsr import grid, tgv
from depthsr.tgv import SolverParams
from oracles import energy_loop, solve_loop, tensor_loop


def planes(t2x2):
    return np.stack([t2x2[0, 0], t2x2[0, 1], t2x2[1, 1]])


def as_matrix(t, i, j):
    return np.array([[t[0, i, j], t[1, i, j]], [t[1, i, j], t[2, i, j]]])


# parameters


def test_defaults():
    p = SolverParams()
    assert (p.alpha0, p.alpha1, p.beta, p.gamma, p.w_lambda) == (1.2, 17.0, 9.0, 0.85, 0.01)
    assert p.iters == 10 and p.theta == 1.0
    assert p.data_weight == pytest.approx(math.exp(0.01))


def test_default_steps_follow_the_weights():
    p = SolverParams(alpha0=2.0, alpha1=5.0)
    assert p.sigma_p == pytest.approx(1 / 15)
    assert p.sigma_q == pytest.approx(1 / 4)
    assert p.tau_u == pytest.approx(1 / 20)
    assert p.tau_v == pytest.approx(1 / 13)


@pytest.mark.parametrize(
    "bad",
    [
        dict(alpha0=0),
        dict(alpha1=-1),
        dict(gamma=0),
        dict(beta=-1),
        dict(theta=1.5),
        dict(iters=-1),
        dict(iters=2.5),
        dict(tau_u=0.0),
        dict(w_lambda=float("nan")),
    ],
)
def test_invalid_params_rejected(bad):
    with pytest.raises(ValueError):
        SolverParams(**bad)


def test_scalar_round_trip():
    p = SolverParams()
    s = p.scalars()
    assert tuple(s) == tgv.SCALAR_NAMES
    assert p.with_scalars(s) == p
    assert SolverParams.from_dict(p.to_dict()) == p


# tensor


@pytest.mark.parametrize("seed", range(5))
def test_tensor_matches_eigen_oracle(seed):
    r = np.random.default_rng(seed)
    h = r.normal(size=(2, 6, 7)) * 3
    h[:, 0, 0] = 0
    t = tgv.diffusion_tensor(h, 9.0, 0.85)
    np.testing.assert_allclose(t, planes(tensor_loop(h, 9.0, 0.85)), atol=1e-12)


def test_tensor_of_zero_is_identity():
    t = tgv.diffusion_tensor(np.zeros((2, 3, 3)), 9.0, 0.85)
    np.testing.assert_array_equal(t[0], 1)
    np.testing.assert_array_equal(t[1], 0)
    np.testing.assert_array_equal(t[2], 1)


def test_tensor_axis_aligned_edge():
    h = np.zeros((2, 1, 1))
    h[0] = 0.5
    t = tgv.diffusion_tensor(h, 9.0, 0.85)
    lam = math.exp(-9.0 * 0.5**0.85)
    np.testing.assert_allclose(as_matrix(t, 0, 0), [[lam, 0], [0, 1]], atol=1e-15)


def test_tensor_beta_zero_is_identity(rng):
    t = tgv.diffusion_tensor(rng.normal(size=(2, 4, 4)), 0.0, 0.85)
    np.testing.assert_allclose(t[0], 1, atol=1e-15)
    np.testing.assert_allclose(t[1], 0, atol=1e-15)
    np.testing.assert_allclose(t[2], 1, atol=1e-15)


def test_tensor_spectrum(rng):
    h = rng.normal(size=(2, 1, 200)) * rng.uniform(0, 5, size=(1, 1, 200))
    t = tgv.diffusion_tensor(h, 9.0, 0.85)
    for j in range(200):
        m = as_matrix(t, 0, j)
        ev = np.sort(np.linalg.eigvalsh(m))
        lam = math.exp(-9.0 * np.hypot(*h[:, 0, j]) ** 0.85)
        np.testing.assert_allclose(ev, sorted([lam, 1.0]), atol=1e-12)
        assert ev[0] >= -1e-12


def test_tensor_apply_matches_matrix_product(rng):
    t = tgv.diffusion_tensor(rng.normal(size=(2, 3, 4)), 2.0, 1.0)
    w = rng.normal(size=(2, 3, 4))
    out = tgv.tensor_apply(t, w)
    for i in range(3):
        for j in range(4):
            np.testing.assert_allclose(out[:, i, j], as_matrix(t, i, j) @ w[:, i, j], atol=1e-14)


def test_project_unit_ball(rng):
    d = rng.normal(size=(4, 10, 10)) * 2
    out = tgv.project_unit_ball(d)
    n_in = np.sqrt(np.sum(d * d, axis=0))
    n_out = np.sqrt(np.sum(out * out, axis=0))
    assert np.all(n_out <= 1 + 1e-12)
    inside = n_in <= 1
    np.testing.assert_array_equal(out[:, inside], d[:, inside])
    np.testing.assert_allclose(n_out[~inside], 1.0, atol=1e-12)


# solver


def test_solver_matches_loop_oracle(rng):
    g = rng.normal(size=(1, 5, 6)) * 10
    h = rng.normal(size=(2, 5, 6))
    p = SolverParams(iters=6, alpha1=3.0, alpha0=0.7, theta=0.8)
    np.testing.assert_allclose(tgv.solve(g, h, p), solve_loop(g, h, p), rtol=1e-10, atol=1e-10)


def test_zero_iterations_return_input(rng):
    g = rng.normal(size=(1, 4, 4))
    out = tgv.solve(g, np.zeros((2, 4, 4)), SolverParams(iters=0))
    np.testing.assert_array_equal(out, g)


def test_energy_matches_loop_oracle(rng):
    u = rng.normal(size=(1, 5, 5))
    v = rng.normal(size=(2, 5, 5))
    g = rng.normal(size=(1, 5, 5))
    h = rng.normal(size=(2, 5, 5))
    p = SolverParams()
    t = tgv.diffusion_tensor(h, p.beta, p.gamma)
    expected = energy_loop(u, v, tensor_loop(h, p.beta, p.gamma), g, p.alpha0, p.alpha1, p.w_lambda)
    assert tgv.energy(u, v, t, g, p) == pytest.approx(expected, rel=1e-12)


def affine(n=12, a=0.3, b=-0.7, c=5.0):
    ys, xs = np.mgrid[0:n, 0:n].astype(float)
    return (a * xs + b * ys + c)[None]


def test_affine_single_iteration_keeps_u_and_p():
    g = affine()
    p = SolverParams()
    state = tgv.initial_state(g)
    state.v = grid.grad(g)
    state.v_bar = state.v.copy()
    t = tgv.diffusion_tensor(np.random.default_rng(0).normal(size=(2, 12, 12)), p.beta, p.gamma)
    out = tgv.pd_iteration(state, t, g, p)
    assert np.max(np.abs(out.u - g)) <= 1e-12
    assert np.max(np.abs(out.p)) <= 1e-12


def test_constant_is_a_fixed_point_for_many_iterations():
    g = np.full((1, 10, 10), 3.25)
    h = np.random.default_rng(1).normal(size=(2, 10, 10))
    out = tgv.solve(g, h, SolverParams(iters=200))
    assert np.max(np.abs(out - g)) <= 1e-12


def test_dual_feasibility_every_iteration(rng):
    g = rng.normal(size=(1, 16, 16)) * 50
    h = rng.normal(size=(2, 16, 16))
    worst = []

    def cb(n, st):
        worst.append(max(np.max(np.sqrt(np.sum(st.p**2, axis=0))), np.max(np.sqrt(np.sum(st.q**2, axis=0)))))

    tgv.solve(g, h, SolverParams(iters=50), callback=cb)
    assert len(worst) == 50
    assert max(worst) <= 1 + 1e-12


def noisy_plane(seed, n=32):
    r = np.random.default_rng(seed)
    clean = affine(n, 0.4, -0.25, 10.0)
    return clean, clean + r.standard_normal(clean.shape)


@pytest.mark.parametrize("seed", range(3))
def test_denoises_noisy_plane(seed):
    clean, noisy = noisy_plane(seed)
    out = tgv.solve(noisy, np.zeros((2, 32, 32)), SolverParams(iters=200))
    before = np.sqrt(np.mean((noisy - clean) ** 2))
    after = np.sqrt(np.mean((out - clean) ** 2))
    assert after < 0.5 * before


def test_energy_settles_in_the_final_window():
    clean, noisy = noisy_plane(7)
    p = SolverParams(iters=200)
    t = tgv.diffusion_tensor(np.zeros((2, 32, 32)), p.beta, p.gamma)
    es = []
    tgv.solve(noisy, np.zeros((2, 32, 32)), p, callback=lambda n, st: es.append(tgv.energy(st.u, st.v, t, noisy, p)))
    tail = np.array(es[-20:])
    assert np.all(np.diff(tail) <= 1e-9 * abs(tail[0]))
    assert es[-1] < tgv.energy(noisy, np.zeros((2, 32, 32)), t, noisy, p)


def test_batched_solve_matches_single(rng):
    g = rng.normal(size=(3, 1, 8, 8))
    h = rng.normal(size=(3, 2, 8, 8))
    p = SolverParams(iters=5)
    out = tgv.solve(g, h, p)
    for b in range(3):
        np.testing.assert_array_equal(out[b], tgv.solve(g[b], h[b], p))


def test_divergence_detected(rng):
    g = rng.normal(size=(1, 8, 8))
    g[0, 3, 3] = np.inf
    with pytest.raises(tgv.SolverDiverged) as info:
        with np.errstate(invalid="ignore"):
            tgv.solve(g, rng.normal(size=(2, 8, 8)), SolverParams())
    assert info.value.iteration == 0


def test_size_mismatch_rejected():
    with pytest.raises(ValueError):
        tgv.solve(np.zeros((1, 4, 4)), np.zeros((2, 4, 5)), SolverParams())
