import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from delaybsde.backward import (GeneratorSpec, PolynomialBasis, RegressionWarning, TerminalSpec,
                                UncertifiedDelayWarning, backward_induction, call_terminal, constant_terminal,
                                delay_generator, discount_generator, identity_terminal, linear_generator,
                                picard_solve, regress_conditional, restart_prolong, u_tilde_from_measure,
                                zero_generator)
from delaybsde.delay import contraction_constants, best_chi
from delaybsde.errors import ConfigurationError, NonConvergenceError, NumericError
from delaybsde.forward import constant_coefficients, simulate_ensemble
from delaybsde.levy import LevyModel
from delaybsde.paths import CadlagPath


def brownian(n=20_000, T=1.0, dt=0.02, seed=1, sigma=1.0, t=0.0, model=None, jump_scale=0.0):
    phi = CadlagPath.constant(0.0, 0.0, t, dt)
    return simulate_ensemble(constant_coefficients(sigma=sigma, jump_scale=jump_scale), model or LevyModel.no_jumps(),
                             t, phi, T, dt, n, seed)


def frozen(n=4, T=1.0, dt=0.01):
    return simulate_ensemble(constant_coefficients(), LevyModel.no_jumps(), 0.0, CadlagPath(0.0, dt, [[0.0]]),
                             T, dt, n, 0)


def delayed_ode_oracle(c, delta, T, dt):
    """y_N = c, y_i = y_{i+1} + dt * y_{max(i - m, 0)}: solve the triangular system directly."""
    N, m = round(T / dt), round(delta / dt)
    A = np.eye(N + 1)
    b = np.zeros(N + 1)
    for i in range(N):
        A[i, i + 1] -= 1.0
        A[i, max(i - m, 0)] -= dt
    b[N] = c
    return np.linalg.solve(A, b)


# ---------------------------------------------------------------- regression


def test_constant_targets_are_reproduced(rng):
    x = rng.normal(size=(500, 2))
    fit = regress_conditional(np.full(500, 3.25), x, degree=3)
    assert np.all(fit.fitted == 3.25)


def test_linear_targets_are_fitted_exactly(rng):
    x = rng.normal(size=(400, 2))
    y = 1.5 - 2.0 * x[:, 0] + 0.25 * x[:, 1]
    fit = regress_conditional(y, x, degree=1)
    np.testing.assert_allclose(fit.fitted, y, atol=1e-8)


def test_martingale_regression_oracle():
    ens = brownian(n=20_000, dt=0.05)
    i = 10
    fit = regress_conditional(ens.paths[:, -1, 0], ens.paths[:, i, :], degree=3)
    err = fit.fitted - ens.paths[:, i, 0]
    # residual variance T - t_i, the fit error should be a few standard errors of it
    assert np.sqrt(np.mean(err**2)) < 3 * math.sqrt(0.5 * 4 / 20_000) * 3


def test_too_few_paths_warns(rng):
    with pytest.warns(RegressionWarning):
        regress_conditional(rng.normal(size=30), rng.normal(size=(30, 1)), degree=3)


def test_degenerate_features_fall_back_to_mean():
    fit = regress_conditional(np.arange(100.0), np.ones((100, 1)), degree=3)
    assert np.allclose(fit.fitted, 49.5)


# ---------------------------------------------------------------- generators


def test_delay_measure_validation():
    with pytest.raises(ConfigurationError):
        GeneratorSpec(lambda *a: 0, delta=0.1, alpha_theta=(-0.1, 0.0), alpha_weights=(0.5, 0.6))
    with pytest.raises(ConfigurationError):
        GeneratorSpec(lambda *a: 0, delta=0.1, alpha_theta=(-0.2,), alpha_weights=(1.0,))
    g = GeneratorSpec(lambda *a: 0, delta=0.1)
    assert g.alpha_theta == (-0.1,) and g.alpha_weights == (1.0,)


def test_delay_integral_reads_the_atoms():
    g = GeneratorSpec(lambda *a: 0, delta=0.1, alpha_theta=(-0.1, -0.05), alpha_weights=(0.25, 0.75))
    seg = np.arange(11.0)[None, :]
    assert g.delay_integral(seg)[0] == pytest.approx(0.25 * 0 + 0.75 * 5)


def test_linear_generator_constants():
    g = linear_generator(rho=0.3, theta=[-0.7], eta=0.2, kappa=-0.4, delta=0.1)
    assert g.L == 0.7 and g.K == 0.4


def test_terminal_growth_check():
    paths = np.array([[[0.0], [3.0]]])
    assert constant_terminal(1.0).growth_violations(paths) == 0
    bad = TerminalSpec(lambda p: p[:, -1, 0] ** 3, M=1.0, p=1.0)
    assert bad.growth_violations(paths) == 1


# ---------------------------------------------------------------- backward induction


def test_constant_terminal_gives_constant_solution():
    ens = brownian(n=2_000)
    sol = backward_induction(ens, zero_generator(), constant_terminal(1.0), None)
    assert np.all(sol.y == 1.0) and np.all(sol.z == 0.0) and np.all(sol.u_tilde == 0.0)


def test_martingale_representation_for_linear_claim():
    ens = brownian(n=20_000, sigma=0.7)
    sol = backward_induction(ens, zero_generator(), identity_terminal(), None, PolynomialBasis(3, False))
    X = ens.paths[:, :, 0]
    rms = np.sqrt(np.mean((sol.y - X) ** 2, axis=0))
    assert rms.max() < 0.02 * X[:, -1].std()
    z_rms = np.sqrt(np.mean((sol.z[:, :-1, 0] - 0.7) ** 2, axis=0))
    assert z_rms.max() < 0.05


def test_terminal_node_is_bitwise_h(two_atoms):
    ens = brownian(n=3_000, model=two_atoms, jump_scale=1.0)
    term = call_terminal(0.1)
    sol = picard_solve(ens, discount_generator(0.2), term)
    assert np.array_equal(sol.y[:, -1], term(ens.paths))


def test_discounting_within_one_percent():
    ens = brownian(n=20_000, dt=0.01)
    sol = picard_solve(ens, discount_generator(0.5), constant_terminal(1.0))
    expected = np.exp(-0.5 * (1.0 - ens.times))
    np.testing.assert_allclose(sol.y.mean(axis=0), expected, rtol=0.01)


def test_zero_generator_mean_is_constant_in_time():
    ens = brownian(n=20_000)
    sol = picard_solve(ens, zero_generator(), call_terminal(0.0))
    means = sol.y.mean(axis=0)
    se = sol.y[:, -1].std() / math.sqrt(sol.n_paths)
    assert np.all(np.abs(means - means[-1]) < 3 * se)


def test_comparison_for_ordered_claims():
    """h1 <= h2 pathwise. Node means must be ordered; pathwise, polynomial regression can cross in the
    tails, so violations beyond three prediction standard errors are counted and must stay rare."""
    ens = brownian(n=10_000)
    gen = linear_generator(rho=0.2, theta=0.3)
    a = picard_solve(ens, gen, call_terminal(0.2), with_se=True)
    b = picard_solve(ens, gen, call_terminal(0.0), with_se=True)
    assert np.all(a.y.mean(axis=0) <= b.y.mean(axis=0))
    violations = np.mean(a.y - b.y > 3 * np.hypot(a.y_se, b.y_se))
    assert violations < 0.02


def test_nodes_before_start_are_zero_for_z_and_u(two_atoms):
    ens = brownian(n=2_000, t=0.2, model=two_atoms, jump_scale=1.0)
    sol = picard_solve(ens, linear_generator(rho=0.1, eta=0.2), identity_terminal())
    assert np.all(sol.z[:, :10] == 0.0) and np.all(sol.u_tilde[:, :10] == 0.0)
    assert np.all(sol.y[:, :10] == sol.y[:, 10:11])


def test_u_tilde_estimates_the_jump_aggregate():
    """h = X(T) with γ = z: U(t, z) = z, so Ũ = ∫ z λ(z) ν(dz) for any weight λ."""
    model = LevyModel.from_atoms([(0.5, 2.0), (-0.25, 4.0)], weight=[1.0, 3.0])
    ens = brownian(n=20_000, sigma=0.0, model=model, jump_scale=1.0)
    sol = picard_solve(ens, zero_generator(), identity_terminal(), PolynomialBasis(1, False))
    expected = u_tilde_from_measure(lambda z: z, model)
    assert expected == pytest.approx(0.5 * 1 * 2 - 0.25 * 3 * 4)
    assert np.mean(sol.u_tilde[:, :-1]) == pytest.approx(expected, abs=0.05)


def test_driver_reads_u_tilde():
    """f = η Ũ with Ũ = m constant gives Y(0) = x0 + η m T."""
    model = LevyModel.from_atoms([(0.5, 2.0)], weight="one")
    ens = brownian(n=20_000, sigma=0.0, model=model, jump_scale=1.0)
    sol = picard_solve(ens, linear_generator(eta=0.4), identity_terminal(), PolynomialBasis(1, False))
    assert sol.value == pytest.approx(0.4 * 1.0 * 1.0, abs=0.02)


def test_non_finite_terminal_is_reported():
    ens = frozen()
    with pytest.raises(NumericError):
        backward_induction(ens, zero_generator(), TerminalSpec(lambda p: np.full(p.shape[0], np.nan)), None)


def test_mismatched_delay_source_rejected():
    ens = frozen()
    with pytest.raises(ConfigurationError):
        backward_induction(ens, zero_generator(), constant_terminal(1.0), np.zeros((4, 3)))


# ---------------------------------------------------------------- Picard


def test_no_delay_stops_after_two_sweeps():
    ens = brownian(n=4_000)
    sol = picard_solve(ens, linear_generator(rho=0.3, theta=0.1), call_terminal(0.0))
    assert len(sol.picard_history) == 2 and sol.picard_history[1] == 0.0


def test_delayed_deterministic_oracle():
    ens = frozen(n=8)
    with pytest.warns(UncertifiedDelayWarning):
        sol = picard_solve(ens, delay_generator(1.0, 0.1), constant_terminal(1.0), tol=1e-12, max_iter=100)
    oracle = delayed_ode_oracle(1.0, 0.1, 1.0, 0.01)
    assert np.max(np.abs(sol.y - oracle)) < 1e-6
    h = sol.picard_history
    ratios = [b / a for a, b in zip(h[1:], h[2:]) if a > 0]
    assert all(r < 1 for r in ratios[1:])


def test_delay_measure_with_two_atoms_matches_oracle():
    dt, delta = 0.01, 0.1
    ens = frozen(n=2)
    gen = delay_generator(0.5, delta, alpha_theta=(-0.1, -0.03), alpha_weights=(0.4, 0.6))
    with pytest.warns(UncertifiedDelayWarning):
        sol = picard_solve(ens, gen, constant_terminal(2.0), tol=1e-13, max_iter=100)
    N = 100
    y = np.zeros(N + 1)
    y[N] = 2.0
    # the explicit scheme reads the previous iterate, whose fixed point solves this recursion backwards
    A = np.eye(N + 1)
    for i in range(N):
        A[i, i + 1] -= 1.0
        A[i, max(i - 10, 0)] -= dt * 0.5 * 0.4
        A[i, max(i - 3, 0)] -= dt * 0.5 * 0.6
    b = np.zeros(N + 1)
    b[N] = 2.0
    np.testing.assert_allclose(sol.y[0], np.linalg.solve(A, b), atol=1e-9)


def test_certified_contraction_ratios():
    ens = brownian(n=4_000, dt=0.01, sigma=0.3)
    gen = linear_generator(rho=1.0, kappa=1e-4, delta=0.05)
    chi, value, ok = best_chi(gen.K, gen.L, gen.delta, 1.0)
    assert ok
    modulus = contraction_constants(gen.L, chi, gen.delta, gen.K, 1.0).gamma_mod
    with warnings.catch_warnings():
        warnings.simplefilter("error", UncertifiedDelayWarning)
        sol = picard_solve(ens, gen, call_terminal(0.0), tol=1e-12, max_iter=20)
    h = sol.picard_history
    ratios = [b / a for a, b in zip(h[1:], h[2:]) if a > 0]
    assert ratios and all(r <= modulus + 0.1 for r in ratios)


def test_non_convergence_carries_history():
    ens = frozen()
    with pytest.raises(NonConvergenceError) as info:
        picard_solve(ens, delay_generator(1.0, 0.1), constant_terminal(1.0), tol=1e-14, max_iter=3,
                     check_certificate=False)
    assert len(info.value.history) == 3 and info.value.exit_code == 4


def test_prediction_standard_errors_are_reported():
    ens = brownian(n=5_000)
    sol = picard_solve(ens, zero_generator(), identity_terminal(), with_se=True)
    assert sol.y_se.shape == sol.y.shape
    assert np.all(sol.y_se[:, 1:-1] > 0) and np.all(sol.y_se[:, -1] == 0)


# ---------------------------------------------------------------- helpers


def test_u_tilde_from_measure_examples():
    assert u_tilde_from_measure(lambda z: 0 * z, LevyModel.from_atoms([(1.0, 2.0)])) == 0.0
    assert u_tilde_from_measure(lambda z: z, LevyModel.from_atoms([(1.0, 2.0)])) == 2.0
    model = LevyModel.from_atoms([(1.0, 1.0), (2.0, 1.0)], weight=lambda z: z)
    assert u_tilde_from_measure(lambda z: 1.0, model) == 3.0


def test_restart_prolong_is_identity_at_zero():
    ens = brownian(n=500)
    sol = picard_solve(ens, zero_generator(), constant_terminal(2.0))
    assert restart_prolong({0.0: sol}, 0.0) is sol


def _solutions_by_start(gen, term, starts, dt=0.05, n=4_000):
    out = {}
    for s in starts:
        out[s] = picard_solve(brownian(n=n, dt=dt, t=s), gen, term)
    return out


def test_restart_prolong_constant_claim():
    starts = [0.0, 0.05, 0.1, 0.15]
    sols = _solutions_by_start(zero_generator(), constant_terminal(1.5), starts)
    full = restart_prolong(sols, 0.15)
    assert np.all(full.y[:, :3] == 1.5) and np.all(full.z[:, :3] == 0.0)


def test_restart_prolong_discounted_diagonal():
    starts = [round(0.05 * k, 10) for k in range(5)]
    sols = _solutions_by_start(discount_generator(0.5), constant_terminal(1.0), starts)
    full = restart_prolong(sols, starts[-1])
    diag = full.y[0, :4]
    np.testing.assert_allclose(diag, np.exp(-0.5 * (1 - 0.05 * np.arange(4))), rtol=0.01)


def test_restart_prolong_missing_entry():
    sols = _solutions_by_start(zero_generator(), constant_terminal(1.0), [0.0, 0.1], n=500)
    with pytest.raises(ConfigurationError):
        restart_prolong(sols, 0.1)


def test_solution_csv_layout():
    sol = picard_solve(brownian(n=300, dt=0.25), zero_generator(), identity_terminal(), PolynomialBasis(1, False))
    lines = sol.to_csv().splitlines()
    assert lines[0] == "path_id,t,y,z1,u_tilde" and len(lines) == 1 + 300 * 5
    assert sol.history_csv().splitlines()[0] == "iter,sup_gap"


@given(st.floats(-2, 2), st.floats(0.0, 1.0), st.integers(0, 3))
@settings(max_examples=15, deadline=None)
def test_deterministic_y_has_zero_z(c, rho, degree):
    """With a deterministic solution the centred estimators give exactly zero Z and Ũ."""
    model = LevyModel.from_atoms([(0.3, 1.0)])
    ens = brownian(n=200, dt=0.1, model=model, jump_scale=1.0)
    sol = picard_solve(ens, discount_generator(rho), constant_terminal(c), PolynomialBasis(degree, True))
    assert np.all(sol.z == 0.0) and np.all(sol.u_tilde == 0.0)
    assert np.all(sol.y == sol.y[0])
