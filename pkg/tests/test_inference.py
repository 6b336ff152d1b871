import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import chi2

from funcox.data import build_design, build_time_grid
from funcox.em import fit
from funcox.inference import (
    Constraint,
    alpha_covariance,
    chisq_pvalue,
    constrained_fit,
    global_beta_test,
    make_alpha_constraint,
    make_beta_functional_constraint,
    profile_hessian,
    profile_loglik,
    second_difference_hessian,
    wald_statistic,
)
from funcox.kernel import KernelContext, compute_gram

from conftest import constant_curve, make_curve
from oracles import brute_force_fit
from test_em import coarse_design, coarse_obs


class TestConstraints:
    def test_alpha_constraint_shape_and_rank(self):
        con = make_alpha_constraint(2, 2, 3)
        assert con.A.shape == (2, 7)
        assert np.array_equal(con.A[:, :2], np.eye(2))
        assert np.all(con.A[:, 2:] == 0.0)
        assert np.linalg.matrix_rank(con.A) == 2

    def test_alpha_null_basis_exact(self):
        con = make_alpha_constraint(2, 2, 3)
        assert np.all(con.A @ con.A0 == 0.0)

    def test_beta_constraint_null_block(self):
        ctx = KernelContext.for_grid(2, np.linspace(0, 1, 101))
        curves = [constant_curve(1.0)]
        b1 = constant_curve(1.0)
        con = make_beta_functional_constraint(ctx, curves, [b1], p=2)
        # int xi_1 b = 1, int xi_2 b = 1/2 for b == 1
        assert con.A[0, :2] == pytest.approx([0.0, 0.0])
        assert con.A[0, 2:4] == pytest.approx([1.0, 0.5], abs=1e-12)

    def test_beta_constraint_kernel_block(self):
        ctx = KernelContext.for_grid(2, np.linspace(0, 1, 101))
        curves = [constant_curve(1.0)]
        con = make_beta_functional_constraint(ctx, curves, [constant_curve(1.0)], p=1)
        # equals the Q entry for two constant curves: 1/20
        assert con.A[0, 3] == pytest.approx(0.05, abs=1e-4)

    def test_zero_test_function_rejected(self):
        ctx = KernelContext.for_grid(2, np.linspace(0, 1, 101))
        curves = [constant_curve(1.0)]
        with pytest.raises(ValueError, match="collinear"):
            make_beta_functional_constraint(ctx, curves, [constant_curve(0.0)], p=1)

    def test_invalid_null_basis_rejected(self):
        with pytest.raises(ValueError, match="annihilate"):
            Constraint(A=np.array([[1.0, 0.0]]), A0=np.array([[1.0], [0.0]]))


class TestConstrainedFit:
    def test_inactive_constraint_recovers_unconstrained(self):
        design, ctx, obs = coarse_design(15, seed=21)
        state = fit(design, 1e-3)
        con = make_alpha_constraint(design.p, design.m, design.n_curves)
        rho = con.A @ state.zeta
        cstate = constrained_fit(design, 1e-3, con, rho, init=state)
        assert cstate.converged
        assert np.max(np.abs(cstate.zeta[:2] - state.zeta[:2])) <= 5e-3

    def test_feasibility_along_iterates(self):
        design, ctx, obs = coarse_design(15, seed=22)
        state = fit(design, 1e-3)
        con = make_alpha_constraint(design.p, design.m, design.n_curves)
        rho = con.A @ state.zeta + np.array([0.2, -0.1])
        cstate = constrained_fit(design, 1e-3, con, rho, init=state)
        assert cstate.max_constraint_violation <= 1e-10

    def test_matches_constrained_brute_force(self):
        design, ctx, obs = coarse_design(20, seed=23)
        con = make_alpha_constraint(design.p, design.m, design.n_curves)
        rho = np.array([0.0, 0.3])
        cstate = constrained_fit(design, 1e-3, con, rho, tol=1e-5, max_iter=20000)
        oracle, _ = brute_force_fit(design, 1e-3, constraint=con, rho=rho)
        assert cstate.penalized == pytest.approx(oracle, abs=1e-3)


class TestProfile:
    def test_profile_at_optimum_equals_maximum(self):
        design, ctx, obs = coarse_design(15, seed=24)
        state = fit(design, 1e-3)
        con = make_alpha_constraint(design.p, design.m, design.n_curves)
        pl = profile_loglik(design, 1e-3, con, con.A @ state.zeta, init=state)
        assert pl >= state.penalized - 1e-9
        assert pl == pytest.approx(state.penalized, abs=1e-3)

    def test_profile_maximality(self):
        design, ctx, obs = coarse_design(15, seed=25)
        state = fit(design, 1e-3)
        con = make_alpha_constraint(design.p, design.m, design.n_curves)
        rho_hat = con.A @ state.zeta
        pl_max = profile_loglik(design, 1e-3, con, rho_hat, init=state)
        rng = np.random.default_rng(0)
        for _ in range(5):
            rho = rho_hat + rng.uniform(-0.5, 0.5, rho_hat.size)
            assert profile_loglik(design, 1e-3, con, rho, init=state) <= pl_max + 1e-6

    def test_local_concavity_probe(self):
        design, ctx, obs = coarse_design(15, seed=26)
        state = fit(design, 1e-3)
        con = make_alpha_constraint(design.p, design.m, design.n_curves)
        rho_hat = con.A @ state.zeta
        h = 0.3
        e1 = np.array([1.0, 0.0])
        plus = profile_loglik(design, 1e-3, con, rho_hat + h * e1, init=state)
        minus = profile_loglik(design, 1e-3, con, rho_hat - h * e1, init=state)
        center = profile_loglik(design, 1e-3, con, rho_hat, init=state)
        assert plus - 2 * center + minus < 0.0


class TestSecondDifferenceHessian:
    def test_exact_on_quadratic_surface(self):
        M = np.array([[2.0, 0.4], [0.4, 1.1]])
        x0 = np.array([0.3, -0.2])

        def f(x):
            d = x - x0
            return 5.0 - 0.5 * d @ M @ d

        H = second_difference_hessian(f, x0, h=0.05)
        assert H == pytest.approx(-M, abs=1e-9)

    def test_symmetry_by_construction(self):
        rng = np.random.default_rng(4)
        A = rng.standard_normal((3, 3))
        M = A @ A.T + np.eye(3)

        def f(x):
            return -0.5 * x @ M @ x + x[0] * 0.3

        H = second_difference_hessian(f, np.zeros(3), h=0.1)
        assert np.max(np.abs(H - H.T)) == 0.0

    def test_wald_invariant_to_test_function_recombination(self):
        # algebraic invariance of the Wald form on an exact quadratic
        # profile surface, under an invertible recombination of the targets
        rng = np.random.default_rng(11)
        A = rng.standard_normal((3, 3))
        M = A @ A.T + 2 * np.eye(3)
        rho_hat = rng.standard_normal(3)
        n = 150

        def pl(rho):
            d = rho - rho_hat
            return -0.5 * d @ M @ d

        H = second_difference_hessian(pl, rho_hat, h=0.07)
        stat, _, _ = wald_statistic(rho_hat, -H, n)

        T = rng.standard_normal((3, 3)) + 3 * np.eye(3)
        Tinv = np.linalg.inv(T)

        def pl2(rho2):
            return pl(Tinv @ rho2)

        rho2_hat = T @ rho_hat
        H2 = second_difference_hessian(pl2, rho2_hat, h=0.07)
        stat2, _, _ = wald_statistic(rho2_hat, -H2, n)
        assert stat2 == pytest.approx(stat, rel=1e-6)


class TestAlphaCovariance:
    def test_duplicated_data_shrinks_errors_by_sqrt2(self):
        obs = coarse_obs(20, seed=30)
        ctx = KernelContext.for_grid(2, obs[0].z.grid)

        def report_for(subjects):
            import copy
            from funcox.data import Observation

            relabeled = [
                Observation(id=f"{j}", L=o.L, R=o.R, x=o.x, z=o.z)
                for j, o in enumerate(subjects)
            ]
            gram = compute_gram(ctx, [o.z for o in relabeled])
            design = build_design(relabeled, gram, build_time_grid(relabeled))
            state = fit(design, 1e-3, tol=1e-4, max_iter=10000)
            return alpha_covariance(design, 1e-3, state, tol=1e-4, max_iter=10000)

        single = report_for(obs)
        double = report_for(obs + obs)
        ratio = double.se / single.se
        assert ratio == pytest.approx(np.full(2, 1.0 / math.sqrt(2.0)), rel=0.10)

    def test_report_shapes_and_flags(self):
        design, ctx, obs = coarse_design(15, seed=31)
        state = fit(design, 1e-3)
        rep = alpha_covariance(design, 1e-3, state)
        assert rep.rho_hat.shape == (2,)
        assert rep.hessian.shape == (2, 2)
        assert rep.covariance == pytest.approx(rep.cov_sqrt_n / design.n_subjects)
        if rep.positive_definite:
            assert np.all(rep.se > 0.0)


class TestGlobalBetaTest:
    def test_statistic_nonnegative_and_dof(self):
        design, ctx, obs = coarse_design(20, seed=32)
        state = fit(design, 1e-3)
        grid = obs[0].z.grid
        from funcox.simulation import cosine_basis

        fns = [make_curve(cosine_basis(l, grid), grid) for l in (1, 2)]
        rep = global_beta_test(
            design, 1e-3, state, fns, ctx=ctx, curves=[o.z for o in obs]
        )
        assert rep.wald.dof == 2
        assert 0.0 <= rep.wald.p_value <= 1.0
        if rep.positive_definite:
            assert rep.wald.statistic >= 0.0


class TestChisqPvalue:
    def test_zero_statistic(self):
        assert chisq_pvalue(0.0, 3) == 1.0

    def test_standard_quantile(self):
        assert chisq_pvalue(3.841, 1) == pytest.approx(0.05, abs=5e-4)

    def test_dof_equal_statistic_against_quadrature(self):
        oracle = quad(lambda u: chi2.pdf(u, 10), 10.0, np.inf)[0]
        assert oracle == pytest.approx(0.4405, abs=1e-3)
        assert chisq_pvalue(10.0, 10) == pytest.approx(oracle, abs=1e-10)

    def test_validation(self):
        with pytest.raises(ValueError):
            chisq_pvalue(-1.0, 2)
        with pytest.raises(ValueError):
            chisq_pvalue(1.0, 0)
