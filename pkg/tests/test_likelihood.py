"""Tests for the joint likelihood machinery."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from msjoint import _kernels
from msjoint.domain import (
    BaselineGroup,
    NumericalError,
    ParameterVector,
    SpecError,
    d_cholesky_from_matrix,
    pack,
    packed_length,
    unpack,
)
from msjoint._optutil import central_diff_grad
from msjoint.likelihood import (
    WorkspaceSet,
    build_workspace,
    build_workspaces,
    conditional_longit_logdensity,
    conditional_mstate_logdensity,
    empirical_bayes_mode,
    random_effects_logdensity,
    subject_loglik,
    subject_logliks,
    total_loglik,
    total_loglik_and_score,
    transition_intensity,
    true_level,
    true_slope,
)
from msjoint.lmm import lmm_marginal_loglik
from msjoint.simulate import simulate_dataset, validation_design

from conftest import make_history, make_records
from oracles import (
    longit_logdensity_gaussian,
    mstate_logdensity_dense,
    subject_loglik_trapezoid,
)
from test_numerics import deboor_oracle


@pytest.fixture(scope="module")
def design():
    return validation_design(n_subjects=8, seed=11)


@pytest.fixture(scope="module")
def small_sim(design):
    dataset, truth = simulate_dataset(design)
    wset = build_workspaces(dataset, design.spec)
    return dataset, truth, wset


def flat_theta(design, level=0.0, gamma=0.0, eta=0.0):
    """Constant-intensity parameters: every spline coefficient equal makes
    the log baseline flat at that level (partition of unity)."""
    spec = design.spec
    return ParameterVector(
        beta=design.theta.beta, log_sigma=design.theta.log_sigma,
        d_cholesky=design.theta.d_cholesky,
        gamma=np.full(spec.n_gamma, gamma), zeta=np.zeros(0),
        eta_level=np.full(3, eta), eta_slope=np.full(3, eta),
        spline_coefs=tuple(np.full(g.n_coef, level)
                           for g in spec.baseline_groups))


# ---------------------------------------------------------------------------
# Pointwise model evaluation
# ---------------------------------------------------------------------------

class TestTrueLevelSlope:
    def test_zero_parameters(self, design):
        theta = unpack(np.zeros(packed_length(design.spec)), design.spec)
        for t in (0.0, 1.7, 9.4):
            assert true_level([0.0, 0.0], theta, t, {"X": 2.0}, design.spec) == 0.0

    def test_reported_intercept_value(self, design):
        val = true_level([0.0, 0.0], design.theta, 0.0, {"X": 2.04}, design.spec)
        np.testing.assert_allclose(val, -0.793 + 0.543 * 2.04, atol=1e-12)

    def test_intercept_linearity(self, design):
        covs = {"X": 1.3}
        for t in (0.0, 2.0, 11.0):
            base = true_level([0.1, -0.2], design.theta, t, covs, design.spec)
            shifted = true_level([0.1 + 0.7, -0.2], design.theta, t, covs,
                                 design.spec)
            np.testing.assert_allclose(shifted - base, 0.7, atol=1e-12)

    def test_slope_constant_in_time(self, design):
        covs = {"X": 2.04}
        b = np.array([0.3, -0.1])
        vals = [true_slope(b, design.theta, t, covs, design.spec)
                for t in (0.0, 3.0, 12.0)]
        expected = -0.096 + 0.027 * 2.04 + b[1]
        np.testing.assert_allclose(vals, expected, atol=1e-12)

    def test_slope_matches_finite_difference(self, design):
        covs = {"X": 1.1}
        b = np.array([0.05, 0.2])
        h = 1e-6
        for t in (0.5, 4.0, 10.0):
            fd = (true_level(b, design.theta, t + h, covs, design.spec)
                  - true_level(b, design.theta, t - h, covs, design.spec)) / (2 * h)
            sl = true_slope(b, design.theta, t, covs, design.spec)
            np.testing.assert_allclose(sl, fd, rtol=1e-6, atol=1e-6)

    def test_slope_cancellation(self, design):
        covs = {"X": 2.04}
        b1 = -(-0.096 + 0.027 * 2.04)
        val = true_slope([0.0, b1], design.theta, 5.0, covs, design.spec)
        np.testing.assert_allclose(val, 0.0, atol=1e-12)


class TestTransitionIntensity:
    def test_all_zero_parameters_give_unit_intensity(self, design):
        theta = flat_theta(design, level=0.0)
        for t in (0.5, 5.0, 15.0):
            val = transition_intensity(0, 1, t, [0.0, 0.0], theta,
                                       {"X": 2.0}, design.spec)
            np.testing.assert_allclose(val, 1.0, atol=1e-12)

    def test_pure_baseline(self, design):
        theta = design.theta
        zeroed = ParameterVector(
            theta.beta, theta.log_sigma, theta.d_cholesky,
            np.zeros(3), theta.zeta, np.zeros(3), np.zeros(3),
            theta.spline_coefs)
        basis = design.spec.baseline_groups[0].basis()
        for t in (1.0, 7.455, 16.0):
            val = transition_intensity(0, 1, t, [0.4, 0.1], zeroed,
                                       {"X": 2.04}, design.spec)
            expected = np.exp(deboor_oracle(basis, t) @ theta.spline_coefs[0])
            np.testing.assert_allclose(val, expected, rtol=1e-12)

    def test_independent_recomputation_at_truth(self, design):
        # Direct scalar recomputation of the log intensity at the left
        # boundary knot, with the basis from the recursive oracle.
        theta, spec = design.theta, design.spec
        covs = {"X": 2.04}
        t = 0.004
        basis = spec.baseline_groups[0].basis()
        level = (-0.793 + 0.543 * 2.04) + (-0.096 + 0.027 * 2.04) * t
        slope = -0.096 + 0.027 * 2.04
        expected = (deboor_oracle(basis, t) @ theta.spline_coefs[0]
                    + 0.281 * 2.04 + 0.925 * level + 1.344 * slope)
        val = transition_intensity(0, 1, t, [0.0, 0.0], theta, covs, spec)
        np.testing.assert_allclose(np.log(val), expected, atol=1e-10)

    def test_disallowed_transition(self, design):
        with pytest.raises(SpecError, match="not allowed"):
            transition_intensity(2, 0, 1.0, [0.0, 0.0], design.theta,
                                 {"X": 0.0}, design.spec)

    def test_monotone_in_level_association(self, design):
        # With positive marker level, increasing eta_level increases the
        # intensity.
        theta = design.theta
        covs = {"X": 2.04}
        b = np.array([0.5, 0.0])
        for bump in (0.1, 0.5):
            eta = theta.eta_level.copy()
            eta[0] += bump
            bumped = ParameterVector(theta.beta, theta.log_sigma,
                                     theta.d_cholesky, theta.gamma, theta.zeta,
                                     eta, theta.eta_slope, theta.spline_coefs)
            t = 2.0
            assert true_level(b, theta, t, covs, design.spec) > 0
            assert (transition_intensity(0, 1, t, b, bumped, covs, design.spec)
                    > transition_intensity(0, 1, t, b, theta, covs, design.spec))


# ---------------------------------------------------------------------------
# Conditional densities
# ---------------------------------------------------------------------------

class TestConditionalDensities:
    def test_single_obs_zero_residual(self, design, topo3):
        from msjoint.domain import validate_dataset
        hist = make_history("u", [], censor=2.0)
        recs = make_records("u", [0.0], ys=[0.0], X=0.0)
        ds = validate_dataset(recs, [hist], design.spec.topology)
        ws, _ = build_workspace(ds.subjects[0], design.spec)
        theta = flat_theta(design)
        theta = ParameterVector(np.zeros(4), 0.0, theta.d_cholesky,
                                theta.gamma, theta.zeta, theta.eta_level,
                                theta.eta_slope, theta.spline_coefs)
        val = conditional_longit_logdensity([0.0, 0.0], theta, ws)
        np.testing.assert_allclose(val, -0.5 * np.log(2 * np.pi), atol=1e-12)
        doubled = ParameterVector(np.zeros(4), np.log(2.0), theta.d_cholesky,
                                  theta.gamma, theta.zeta, theta.eta_level,
                                  theta.eta_slope, theta.spline_coefs)
        np.testing.assert_allclose(
            conditional_longit_logdensity([0.0, 0.0], doubled, ws),
            val - np.log(2.0), atol=1e-12)

    def test_longit_matches_gaussian_oracle(self, small_sim, design):
        dataset, _, wset = small_sim
        rng = np.random.default_rng(3)
        for i in (0, 3, 5):
            b = rng.standard_normal(2) * 0.3
            mine = conditional_longit_logdensity(b, design.theta,
                                                 wset.subjects[i])
            oracle = longit_logdensity_gaussian(dataset.subjects[i],
                                                design.theta, design.spec, b)
            np.testing.assert_allclose(mine, oracle, atol=1e-10)

    def test_mstate_constant_intensity_closed_form(self, design):
        from msjoint.domain import validate_dataset
        level = -1.2           # lambda = exp(-1.2) per transition
        theta = flat_theta(design, level=level)
        hist = make_history("c", [], censor=5.0)
        ds = validate_dataset(make_records("c", [0.0], X=0.0), [hist],
                              design.spec.topology)
        ws, _ = build_workspace(ds.subjects[0], design.spec)
        val = conditional_mstate_logdensity([0.0, 0.0], theta, ws)
        np.testing.assert_allclose(val, -5.0 * 2 * np.exp(level), atol=1e-10)

    def test_mstate_event_adds_log_intensity(self, design):
        from msjoint.domain import validate_dataset
        level = -1.2
        theta = flat_theta(design, level=level)
        hist_event = make_history("e", [(5.0, 2)])
        ds = validate_dataset(make_records("e", [0.0], X=0.0), [hist_event],
                              design.spec.topology)
        ws, _ = build_workspace(ds.subjects[0], design.spec)
        val = conditional_mstate_logdensity([0.0, 0.0], theta, ws)
        np.testing.assert_allclose(val, -5.0 * 2 * np.exp(level) + level,
                                   atol=1e-10)

    def test_mstate_matches_dense_oracle(self, small_sim, design):
        # Sub-panelled quadrature so the comparison isolates the density
        # formula rather than the one-panel default's integration error.
        from dataclasses import replace
        dataset, _, _ = small_sim
        spec4 = replace(design.spec, gk_panels=4)
        rng = np.random.default_rng(5)
        for i in range(4):
            b = rng.standard_normal(2) * 0.3
            ws, _ = build_workspace(dataset.subjects[i], spec4)
            mine = conditional_mstate_logdensity(b, design.theta, ws)
            oracle = mstate_logdensity_dense(dataset.subjects[i], design.theta,
                                             design.spec, b, n_grid=4000)
            np.testing.assert_allclose(mine, oracle, rtol=2e-6, atol=2e-6)

    def test_random_effects_density(self, design):
        theta_i = ParameterVector(design.theta.beta, 0.0,
                                  d_cholesky_from_matrix(np.eye(2)),
                                  design.theta.gamma, design.theta.zeta,
                                  design.theta.eta_level, design.theta.eta_slope,
                                  design.theta.spline_coefs)
        np.testing.assert_allclose(
            random_effects_logdensity([0.0, 0.0], theta_i),
            -np.log(2 * np.pi), atol=1e-12)
        rng = np.random.default_rng(9)
        for _ in range(5):
            a = rng.standard_normal((2, 2))
            d = a @ a.T + 0.5 * np.eye(2)
            theta_d = ParameterVector(design.theta.beta, 0.0,
                                      d_cholesky_from_matrix(d),
                                      design.theta.gamma, design.theta.zeta,
                                      design.theta.eta_level,
                                      design.theta.eta_slope,
                                      design.theta.spline_coefs)
            b = rng.standard_normal(2)
            np.testing.assert_allclose(
                random_effects_logdensity(b, theta_d),
                multivariate_normal(mean=np.zeros(2), cov=d).logpdf(b),
                atol=1e-12)

    def test_random_effects_univariate_value(self, design, topo3):
        from msjoint.domain import GammaTerm, ModelSpec
        spec1 = ModelSpec(topology=topo3, fixed=("1",), random=("1",),
                          baseline_groups=tuple(
                              BaselineGroup((hk,), hk, knots=(0.0, 10.0))
                              for hk in topo3.allowed))
        theta = unpack(np.zeros(packed_length(spec1)), spec1)
        theta = ParameterVector(theta.beta, theta.log_sigma, np.array([2.0]),
                                theta.gamma, theta.zeta, theta.eta_level,
                                theta.eta_slope, theta.spline_coefs)
        val = random_effects_logdensity([2.0], theta)
        np.testing.assert_allclose(
            val, -0.5 * np.log(2 * np.pi) - 0.5 * np.log(4.0) - 0.5, atol=1e-12)

    def test_singular_covariance_rejected(self, design):
        theta = ParameterVector(design.theta.beta, 0.0, np.zeros(3),
                                design.theta.gamma, design.theta.zeta,
                                design.theta.eta_level, design.theta.eta_slope,
                                design.theta.spline_coefs)
        with pytest.raises(NumericalError):
            random_effects_logdensity([0.0, 0.0], theta)


# ---------------------------------------------------------------------------
# Empirical-Bayes modes
# ---------------------------------------------------------------------------

class TestEmpiricalBayes:
    def test_no_data_gives_prior_mode(self, design):
        ws = _empty_workspace(design.spec)
        eb = empirical_bayes_mode(design.theta, ws)
        np.testing.assert_allclose(eb.mode, np.zeros(2), atol=1e-12)
        np.testing.assert_allclose(eb.scale, design.theta.chol_matrix(),
                                   atol=1e-10)

    def test_recovers_generating_effects_with_tiny_noise(self, design):
        from msjoint.domain import validate_dataset
        rng = np.random.default_rng(21)
        b_true = np.array([0.8, -0.3])
        covs = {"X": 2.0}
        times = np.linspace(0.0, 10.0, 60)
        theta = ParameterVector(design.theta.beta, np.log(1e-4),
                                design.theta.d_cholesky, design.theta.gamma,
                                design.theta.zeta, design.theta.eta_level,
                                design.theta.eta_slope, design.theta.spline_coefs)
        level = np.array([true_level(b_true, theta, t, covs, design.spec)
                          for t in times])
        y = level + 1e-4 * rng.standard_normal(times.size)
        recs = [rec for t, v in zip(times, y)
                for rec in make_records("r", [t], ys=[v], X=2.0)]
        hist = make_history("r", [], censor=10.0)
        ds = validate_dataset(recs, [hist], design.spec.topology)
        ws, _ = build_workspace(ds.subjects[0], design.spec)
        eb = empirical_bayes_mode(theta, ws)
        np.testing.assert_allclose(eb.mode, b_true, atol=1e-3)

    def test_gradient_stationarity(self, small_sim, design):
        _, _, wset = small_sim
        for ws in wset.subjects[:4]:
            eb = empirical_bayes_mode(design.theta, ws)
            assert eb.converged

            def obj(b):
                return (conditional_longit_logdensity(b, design.theta, ws)
                        + conditional_mstate_logdensity(b, design.theta, ws)
                        + random_effects_logdensity(b, design.theta))

            grad = central_diff_grad(obj, eb.mode, rel_step=1e-6, abs_step=1e-6)
            assert np.max(np.abs(grad)) < 1e-4


def _empty_workspace(spec):
    from msjoint.likelihood import SubjectWorkspace
    q, p = spec.q, spec.p
    n_spl = sum(g.n_coef for g in spec.baseline_groups)
    z = lambda *shape: np.zeros(shape)
    return SubjectWorkspace(
        id="empty", spec=spec, covariates={"X": 0.0},
        x_long=z(0, p), z_long=z(0, q), y=z(0), sojourns=(),
        node_time=z(0), node_w=z(0), node_trans=np.zeros(0, dtype=np.int64),
        node_spl=z(0, n_spl), node_gam=z(0, spec.n_gamma), node_xl=z(0, p),
        node_dxl=z(0, p), node_z=z(0, q), node_dz=z(0, q),
        ev_trans=np.zeros(0, dtype=np.int64), ev_spl=z(0, n_spl),
        ev_gam=z(0, spec.n_gamma), ev_xl=z(0, p), ev_dxl=z(0, p),
        ev_z=z(0, q), ev_dz=z(0, q))


# ---------------------------------------------------------------------------
# Marginal likelihood by quadrature
# ---------------------------------------------------------------------------

class TestSubjectLoglik:
    def test_factorises_without_association(self, small_sim, design):
        dataset, _, _ = small_sim
        spec = design.spec
        theta = design.theta
        free = ParameterVector(theta.beta, theta.log_sigma, theta.d_cholesky,
                               theta.gamma, theta.zeta, np.zeros(3),
                               np.zeros(3), theta.spline_coefs)
        for i in (0, 2, 4):
            subject = dataset.subjects[i]
            ws, _ = build_workspace(subject, spec)
            joint = subject_loglik(free, ws, gh_order=9)
            from msjoint.domain import JointDataset
            single = JointDataset(spec.topology, (subject,),
                                  dataset.covariate_names)
            lmm_part = lmm_marginal_loglik(free.beta, free.log_sigma,
                                           free.d_cholesky, single, spec)
            ms_part = conditional_mstate_logdensity(np.zeros(2), free, ws)
            np.testing.assert_allclose(joint, lmm_part + ms_part, rtol=1e-8)

    def test_quadrature_order_stability(self, small_sim, design):
        _, _, wset = small_sim
        for ws in wset.subjects[:4]:
            v9 = subject_loglik(design.theta, ws, gh_order=9)
            v15 = subject_loglik(design.theta, ws, gh_order=15)
            assert abs(v9 - v15) < 1e-4

    def test_matches_trapezoid_oracle(self, small_sim, design):
        dataset, _, wset = small_sim
        for i in range(4):
            mine = subject_loglik(design.theta, wset.subjects[i], gh_order=9)
            oracle = subject_loglik_trapezoid(dataset.subjects[i],
                                              design.theta, design.spec)
            np.testing.assert_allclose(mine, oracle, atol=1e-4)


class TestTotalLoglik:
    def test_single_subject_consistency(self, small_sim, design):
        _, _, wset = small_sim
        single = WorkspaceSet([wset.subjects[0]], design.spec)
        total = total_loglik(design.theta, single, gh_order=9)
        per = subject_loglik(design.theta, wset.subjects[0], gh_order=9)
        np.testing.assert_allclose(total, per, rtol=1e-12)

    def test_additivity_over_halves(self, small_sim, design):
        _, _, wset = small_sim
        full = total_loglik(design.theta, wset, gh_order=9)
        first = WorkspaceSet(wset.subjects[:4], design.spec)
        second = WorkspaceSet(wset.subjects[4:], design.spec)
        split = (total_loglik(design.theta, first, gh_order=9)
                 + total_loglik(design.theta, second, gh_order=9))
        np.testing.assert_allclose(full, split, rtol=1e-12)

    def test_subject_order_invariance(self, small_sim, design):
        _, _, wset = small_sim
        perm = [5, 2, 7, 0, 4, 1, 6, 3]
        shuffled = WorkspaceSet([wset.subjects[i] for i in perm], design.spec)
        np.testing.assert_allclose(
            total_loglik(design.theta, wset, gh_order=9),
            total_loglik(design.theta, shuffled, gh_order=9), rtol=1e-10)

    def test_sojourn_row_order_invariance(self, small_sim, design):
        # Reversing the node rows of a workspace leaves its loglik unchanged.
        _, _, wset = small_sim
        ws = wset.subjects[1]
        import copy
        flipped = copy.copy(ws)
        for name in ("node_time", "node_w", "node_trans", "node_spl",
                     "node_gam", "node_xl", "node_dxl", "node_z", "node_dz"):
            setattr(flipped, name, np.ascontiguousarray(getattr(ws, name)[::-1]))
        np.testing.assert_allclose(subject_loglik(design.theta, ws, 9),
                                   subject_loglik(design.theta, flipped, 9),
                                   rtol=1e-10)


class TestAnalyticScore:
    def test_matches_central_differences(self, small_sim, design):
        _, _, wset = small_sim
        spec = design.spec
        rng = np.random.default_rng(17)
        x0 = pack(design.theta, spec)
        for trial in range(2):
            x = x0 + 0.05 * rng.standard_normal(x0.size)
            wset.refresh_adaptive(unpack(x, spec), 9)
            _, analytic = total_loglik_and_score(unpack(x, spec), wset, 9)

            def f(v):
                return total_loglik(unpack(v, spec), wset, 9)

            numeric = central_diff_grad(f, x, rel_step=1e-6, abs_step=1e-6)
            scale = np.maximum(1.0, np.abs(numeric))
            np.testing.assert_allclose(analytic / scale, numeric / scale,
                                       atol=2e-5)


class TestKernelBackends:
    def test_numba_and_numpy_agree(self, small_sim, design):
        _, _, wset = small_sim
        wset.refresh_adaptive(design.theta, 9)
        from msjoint.likelihood import _linear_parts, _theta_parts
        parts = _theta_parts(design.theta, design.spec)
        node_c, node_a, ev_c, ev_a, resid, *_ = _linear_parts(parts, wset)
        args = (node_c, np.ascontiguousarray(node_a), wset.node_w,
                wset.node_off, ev_c, np.ascontiguousarray(ev_a), wset.ev_off,
                resid, wset.z_long, wset.obs_off, wset.bgrid, parts.sigma2,
                parts.logdet_d, parts.d_inv)
        fallback = _kernels._grid_loglik_numpy(*args)
        active = _kernels.grid_loglik(*args)
        np.testing.assert_allclose(active, fallback, rtol=1e-10, atol=1e-10)

        wpost = np.exp(wset.logw + active
                       - (wset.logw + active).max(axis=1, keepdims=True))
        wpost /= wpost.sum(axis=1, keepdims=True)
        out_a = _kernels.posterior_pass(node_c, np.ascontiguousarray(node_a),
                                        wset.node_off, resid, wset.z_long,
                                        wset.obs_off, wset.bgrid, wpost)
        out_b = _kernels._posterior_pass_numpy(node_c,
                                               np.ascontiguousarray(node_a),
                                               wset.node_off, resid,
                                               wset.z_long, wset.obs_off,
                                               wset.bgrid, wpost)
        for a, b in zip(out_a, out_b):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
