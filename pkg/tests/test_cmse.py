import math

import numpy as np
import pytest

from saecmse.cmse import (
    central_difference,
    cmse_analytical,
    conditional_bias,
    eb_gradient,
    mse_unconditional,
    relative_difference,
    t1_conditional,
    t1_derivatives,
    t2_conditional,
)
from saecmse.families import DomainError, FamilyKind, marginal_pmf_lattice, mean_link
from saecmse.model import AreaObservation, Hyperparameters, estimating_blocks
from saecmse.util import rng_stream

from conftest import ALL_FAMILIES, make_dataset, random_valid_params

GA, PG, BB = FamilyKind.GAUSSIAN, FamilyKind.POISSON_GAMMA, FamilyKind.BINOMIAL_BETA


def _pg_blocks(m=25, nu=15.0, y1=1.0):
    n = np.full(m, 10.0)
    y = np.full(m, y1)
    ds = make_dataset(PG, y, n, np.ones((m, 1)))
    eta = Hyperparameters([0.0], nu)
    return ds, eta, estimating_blocks(ds, eta)


class TestT1:
    def test_examples(self):
        assert t1_conditional(PG, 2.0, 10.0, 1.0, 15.0) == pytest.approx(0.056, rel=1e-12)
        assert t1_conditional(BB, 0.3, 10.0, 0.5, 15.0) == pytest.approx(0.0093692, abs=1e-7)
        for y in (-3.0, 0.0, 4.2):
            assert t1_conditional(GA, y, 10.0, 0.0, 1.0) == pytest.approx(1 / 11, rel=1e-12)

    def test_poisson_increasing_in_y(self):
        ys = np.arange(0, 30) / 10.0
        vals = [t1_conditional(PG, y, 10.0, 1.0, 15.0) for y in ys]
        assert np.all(np.diff(vals) > 0)

    def test_binomial_concave_with_vertex(self):
        n, nu, m = 10.0, 15.0, 0.5
        y_star = (n + nu) / (2 * n) - nu * m / n
        assert y_star == pytest.approx(0.5, rel=1e-12)
        f = lambda y: t1_conditional(BB, y, n, m, nu)
        assert f(y_star) > f(y_star - 0.2) and f(y_star) > f(y_star + 0.2)
        # quadratic: second difference constant and negative
        d2 = f(0.2) - 2 * f(0.3) + f(0.4)
        d2b = f(0.5) - 2 * f(0.6) + f(0.7)
        assert d2 < 0 and d2 == pytest.approx(d2b, rel=1e-9)

    @pytest.mark.parametrize("family", ALL_FAMILIES)
    def test_matches_posterior_variance(self, family):
        from saecmse.families import posterior_params

        rng = np.random.default_rng(771 + family.code)
        for _ in range(500):
            y, n, m, nu = random_valid_params(family, rng)
            assert t1_conditional(family, y, n, m, nu) == pytest.approx(
                posterior_params(family, y, n, m, nu).variance, rel=1e-12, abs=1e-15
            )


class TestT2:
    def test_outer_product_rebuild(self):
        ds, eta, blocks = _pg_blocks()
        rng = np.random.default_rng(8)
        u_inv = blocks.u_inv
        for _ in range(100):
            y = rng.integers(0, 30) / 10.0
            obs = AreaObservation("t", y, 10.0, [1.0])
            grad = eb_gradient(PG, obs, eta)
            p_mat = np.outer(grad, grad)
            t2 = float(np.trace(p_mat @ u_inv))
            obs_in = ds.areas[0]
            obs_probe = AreaObservation(obs_in.area_id, y, obs_in.n, obs_in.x)
            assert t2 == pytest.approx(
                grad @ blocks.solve_u(grad), rel=1e-12
            )
            assert t2 >= 0.0

    def test_nu_entry_zero_at_g1_zero(self):
        _, eta, _ = _pg_blocks()
        obs = AreaObservation("t", 1.0, 10.0, [1.0])  # y == m
        grad = eb_gradient(PG, obs, eta)
        assert grad[-1] == 0.0

    @pytest.mark.slow
    def test_conditional_mc_oracle(self):
        # T2(y1) vs MC E[{xi(y1,eta_hat)-xi(y1,eta)}^2 | y1], 2000 replications
        import saecmse.fitting as fitting
        from saecmse.families import sample_dataset
        from saecmse.prediction import bayes_estimate

        m, nu, y1 = 25, 15.0, 1.0
        ds, eta, blocks = _pg_blocks(m, nu, y1)
        t2 = t2_conditional(ds.areas[0], eta, blocks)
        n_vec = np.full(m, 10.0)
        X = np.ones((m, 1))
        theta = np.array([0.0, math.log(nu)])
        xi_true = bayes_estimate(y1, 10.0, 1.0, nu)
        sq = []
        for r in range(2000):
            rng = rng_stream(2024, 9, r)
            _, y_rest = sample_dataset(PG, n_vec[1:], np.ones(m - 1), nu, rng)
            y_vec = np.concatenate(([y1], y_rest))
            raw = fitting.fit_arrays(1, y_vec, n_vec, X, "gt", theta, warm_only=True)
            if raw["converged"]:
                m_hat = mean_link(PG, raw["beta"][0])
                sq.append((bayes_estimate(y1, 10.0, m_hat, raw["nu"]) - xi_true) ** 2)
        assert abs(np.mean(sq) - t2) / t2 < 0.25


class TestCentralDifference:
    def test_step_size(self):
        from saecmse.cmse import _z_step

        assert _z_step(25) == pytest.approx(0.0178885438, abs=1e-9)

    def test_quadratic_exact(self):
        eta = Hyperparameters([0.0], 2.0)
        f = lambda e: np.array([e.nu**2])
        d = central_difference(f, eta, 1, 25)
        assert d[0] == pytest.approx(4.0, rel=1e-10)

    def test_gaussian_d_matrix_derivative(self):
        # analytic d/dnu of the gaussian D entries: only the kappa entry moves,
        # d(-kappa)/dnu = 2/nu^3 (evaluated where the O(z^2) truncation of the
        # m^(-5/4) step stays below the 1e-6 tolerance)
        eta = Hyperparameters([0.3], 5.0)
        obs_n = 5.0

        def d_entries(e):
            blocks = estimating_blocks(
                make_dataset(GA, np.zeros(4), np.full(4, obs_n), np.ones((4, 1))), e
            )
            return blocks.D[0].ravel()

        got = central_difference(d_entries, eta, 1, 25)
        expect = np.array([0.0, 0.0, 0.0, 2.0 / eta.nu**3])
        assert np.max(np.abs(got - expect)) < 1e-6

    def test_propagates_domain_error(self):
        eta = Hyperparameters([0.0], 1e-6)  # nu - z goes negative
        f = lambda e: np.array([e.nu])
        with pytest.raises(DomainError):
            central_difference(f, eta, 1, 25)


class TestT1Derivatives:
    @pytest.mark.parametrize("family", ALL_FAMILIES)
    def test_gradient_vs_central_difference(self, family):
        rng = np.random.default_rng(17 + family.code)
        for _ in range(20):
            y, n, m, nu = random_valid_params(family, rng)
            if family is GA:
                lp = m
            elif family is PG:
                lp = math.log(m)
            else:
                lp = math.log(m / (1 - m))
            obs = AreaObservation("t", y, n, [1.0])
            eta = Hyperparameters([lp], nu)
            r, big_r = t1_derivatives(family, obs, eta)

            def t1f(e):
                mm = mean_link(family, float(obs.x @ e.beta))
                return np.array([t1_conditional(family, y, n, mm, e.nu)])

            fd = np.array([central_difference(t1f, eta, k, 100)[0] for k in range(2)])
            assert np.max(np.abs(r - fd)) < 1e-6
            fd_h = np.column_stack(
                [central_difference(lambda e: t1_derivatives(family, obs, e)[0], eta, k, 100)
                 for k in range(2)]
            )
            assert np.max(np.abs(big_r - fd_h)) < 1e-4
            assert np.max(np.abs(big_r - big_r.T)) < 1e-10

    def test_gaussian_beta_block_zero(self):
        obs = AreaObservation("t", 1.3, 10.0, [1.0, 0.5])
        eta = Hyperparameters([0.2, -0.1], 1.0)
        r, big_r = t1_derivatives(GA, obs, eta)
        assert np.all(r[:-1] == 0.0)  # Q' == 0 kills the beta block
        # T1 is y-free for gaussian
        obs2 = AreaObservation("t", -2.0, 10.0, [1.0, 0.5])
        r2, _ = t1_derivatives(GA, obs2, eta)
        assert r[-1] == pytest.approx(r2[-1], rel=1e-12)


class TestConditionalBias:
    def test_dimensions(self):
        ds, eta, blocks = _pg_blocks()
        bias = conditional_bias(0, eta, blocks)
        q = 2
        assert bias.a1.shape == (q,)
        assert bias.a2.shape == (q,)
        assert bias.b.shape == (q,)
        assert bias.Z.shape == (2 * q, q)
        assert bias.bigR.shape == (q, q)
        assert np.max(np.abs(bias.bigR - bias.bigR.T)) < 1e-10
        assert bias.lambda_shrink == pytest.approx(1.0 / 25.0, rel=1e-12)
        assert np.allclose(bias.cond_cov, blocks.u_inv)

    @pytest.mark.slow
    def test_a1_a2_match_defining_expectations(self):
        # a1 = E[W U^-1 s_m] and a2_l = tr(E[d^2 S_ml] U^-1) at true eta,
        # estimated by MC with finite-difference derivatives of the score.
        # This is the sharp lock on the stacking/sign conventions: flipped
        # variants sit 10-25 SEs away.
        from saecmse import kernels
        from saecmse.cmse import _bias_terms
        from saecmse.families import sample_dataset

        m, nu = 40, 9.0
        n_vec = np.full(m, 10.0)
        X = np.ones((m, 1))
        eta = Hyperparameters([0.0], nu)
        theta = np.array([0.0, nu])
        ds = make_dataset(PG, np.full(m, 1.0), n_vec, X)
        blocks = estimating_blocks(ds, eta)
        a1_closed, a2_closed = _bias_terms(blocks)
        u_inv = blocks.u_inv

        def score(y, vec):
            return kernels.gt_score(1, y, n_vec, X, np.array([vec[0]]), vec[1])

        h = np.array([1e-5, 1e-3])
        reps = 8000
        rng = rng_stream(314159, 0)
        a1_draws = np.empty((reps, 2))
        h_sum = np.zeros((2, 2, 2))
        for r in range(reps):
            _, y = sample_dataset(PG, n_vec, np.ones(m), nu, rng)
            s0 = score(y, theta)
            J = np.empty((2, 2))
            for k in range(2):
                tp, tm = theta.copy(), theta.copy()
                tp[k] += h[k]
                tm[k] -= h[k]
                J[:, k] = (score(y, tp) - score(y, tm)) / (2 * h[k])
            a1_draws[r] = (J + blocks.U) @ (u_inv @ s0)
            for ell in range(2):
                hl = np.empty((2, 2))
                for i in range(2):
                    tp, tm = theta.copy(), theta.copy()
                    tp[i] += h[i]
                    tm[i] -= h[i]
                    hl[i, i] = (score(y, tp)[ell] - 2 * s0[ell] + score(y, tm)[ell]) / h[i] ** 2
                tpp, tpm, tmp, tmm = (theta.copy() for _ in range(4))
                tpp += h
                tpm[0] += h[0]; tpm[1] -= h[1]
                tmp[0] -= h[0]; tmp[1] += h[1]
                tmm -= h
                cross = (
                    score(y, tpp)[ell] - score(y, tpm)[ell]
                    - score(y, tmp)[ell] + score(y, tmm)[ell]
                ) / (4 * h[0] * h[1])
                hl[0, 1] = hl[1, 0] = cross
                h_sum[ell] += hl
        a1_mc = a1_draws.mean(axis=0)
        a1_se = a1_draws.std(axis=0, ddof=1) / math.sqrt(reps)
        assert np.all(np.abs(a1_closed - a1_mc) < 4 * a1_se)
        a2_mc = np.array([np.sum((h_sum[ell] / reps) * u_inv) for ell in range(2)])
        # the Hessian MC is an average of smooth quantities; its SE is tiny,
        # so compare at a small relative tolerance instead
        assert np.max(np.abs(a2_closed - a2_mc)) < 0.05 * max(1.0, np.max(np.abs(a2_closed)))

    def test_marginal_average_identity(self):
        # averaging b over the target's marginal leaves U^-1(a1 + a2/2)
        m, nu = 12, 9.0
        n = np.full(m, 8.0)
        ds = make_dataset(PG, np.full(m, 0.5), n, np.ones((m, 1)))
        eta = Hyperparameters([0.0], nu)
        blocks = estimating_blocks(ds, eta)
        y_lat, pmf = marginal_pmf_lattice(PG, 8.0, 1.0, nu, tail=1e-13)
        acc = np.zeros(2)
        for yv, pv in zip(y_lat, pmf):
            ds2 = ds.with_y(np.concatenate(([yv], ds.y[1:])))
            blocks2 = estimating_blocks(ds2, eta)
            acc += pv * conditional_bias(0, eta, blocks2).b
        from saecmse.cmse import _bias_terms

        a1, a2 = _bias_terms(blocks)
        direct = blocks.solve_u(a1 + 0.5 * a2)
        assert np.max(np.abs(acc - direct)) < 1e-6 * max(1.0, np.max(np.abs(direct)))


class TestCmseAnalytical:
    def test_breakdown_identity(self, pg_dataset):
        from saecmse.fitting import solve_gt

        fit = solve_gt(pg_dataset)
        blocks = estimating_blocks(pg_dataset, fit.eta_hat)
        bd = cmse_analytical(0, fit.eta_hat, blocks)
        assert bd.cmse_hat == pytest.approx(bd.t1 + bd.t2 - bd.t11 - bd.t12, rel=1e-12)
        assert bd.t1 > 0 and bd.t2 >= 0
        assert bd.cmse_floor == max(bd.cmse_hat, bd.t2)
        assert bd.mode == "analytical"
        assert bd.rd_percent == pytest.approx(
            100 * (bd.cmse_hat - bd.mse_hat) / bd.mse_hat, rel=1e-12
        )

    def test_corrections_scale_as_one_over_m(self):
        # iid-replicated areas: doubling m approximately halves |t11|+|t12|
        rng = rng_stream(62, 0)
        ratios = []
        from saecmse.families import sample_dataset

        for trial in range(60):
            m = 20
            n = np.full(m, 10.0)
            _, y = sample_dataset(PG, n, np.ones(m), 15.0, rng)
            if np.all(y == y[0]):
                continue
            eta = Hyperparameters([0.0], 15.0)
            ds1 = make_dataset(PG, y, n, np.ones((m, 1)))
            ds2 = make_dataset(PG, np.tile(y, 2), np.tile(n, 2), np.ones((2 * m, 1)))
            b1 = estimating_blocks(ds1, eta)
            b2 = estimating_blocks(ds2, eta)
            c1 = cmse_analytical(0, eta, b1)
            c2 = cmse_analytical(0, eta, b2)
            s1 = abs(c1.t11) + abs(c1.t12)
            s2 = abs(c2.t11) + abs(c2.t12)
            if s1 > 1e-12:
                ratios.append(s2 / s1)
        assert 0.3 < np.mean(ratios) < 0.7

    def test_fay_herriot_closed_forms(self, fh_dataset):
        # T1 and T2 reduce to the Datta-style Fay-Herriot expressions
        rng = np.random.default_rng(9)
        for _ in range(5):
            beta = rng.normal(size=2, scale=0.3)
            nu = float(rng.uniform(0.5, 3.0))
            eta = Hyperparameters(beta, nu)
            blocks = estimating_blocks(fh_dataset, eta)
            A = 1.0 / nu
            D = 1.0 / fh_dataset.n
            s_b = sum(
                np.outer(x, x) / (A + d) for x, d in zip(fh_dataset.X, D)
            )
            s_n = float(np.sum(1.0 / (2.0 * (A + D) ** 2)))
            for i in (0, 3, 7):
                obs = fh_dataset.areas[i]
                m_i = float(obs.x @ beta)
                t1 = t1_conditional(GA, obs.y, obs.n, m_i, nu)
                assert t1 == pytest.approx(A * D[i] / (A + D[i]), rel=1e-8)
                g1 = obs.y - m_i
                t2_fh = (D[i] / (A + D[i])) ** 2 * float(
                    obs.x @ np.linalg.solve(s_b, obs.x)
                ) + D[i] ** 2 * g1**2 / (A + D[i]) ** 4 / s_n
                assert t2_conditional(obs, eta, blocks) == pytest.approx(t2_fh, rel=1e-8)


class TestMseUnconditional:
    def test_leading_term_example(self):
        ds, eta, blocks = _pg_blocks()
        mse = mse_unconditional(0, eta, blocks)
        # T1bar = nu Q(m)/((n+nu)(nu-v2)) = 15/(25*15) = 0.04, T2bar = O(1/m) > 0
        assert 0.04 < mse < 0.05
        assert mse - 0.04 < 0.01

    def test_y_free(self):
        ds, eta, blocks = _pg_blocks()
        ds2 = ds.with_y(np.concatenate(([2.5], ds.y[1:])))
        blocks2 = estimating_blocks(ds2, eta)
        assert mse_unconditional(0, eta, blocks) == pytest.approx(
            mse_unconditional(0, eta, blocks2), rel=1e-12
        )

    def test_expected_t1_lattice_equals_leading_term(self):
        n, nu, m = 10.0, 15.0, 1.0
        y, pmf = marginal_pmf_lattice(PG, n, m, nu, tail=1e-15)
        t1 = np.array([t1_conditional(PG, yi, n, m, nu) for yi in y])
        lead = nu * m / ((n + nu) * nu)
        assert float(t1 @ pmf) == pytest.approx(lead, abs=1e-8)

    def test_gaussian_leading_terms_equal(self):
        for y in (-1.0, 0.0, 2.0):
            t1 = t1_conditional(GA, y, 10.0, 0.0, 1.0)
            assert t1 == pytest.approx(1.0 / 11.0, rel=1e-12)  # == T1bar for all y


class TestRelativeDifference:
    def test_published_pairs(self):
        assert relative_difference(7.384, 5.819) == pytest.approx(26.895, abs=0.05)
        assert relative_difference(8.631, 18.858) == pytest.approx(-54.23, abs=0.05)

    def test_equal_inputs(self):
        assert relative_difference(3.3, 3.3) == 0.0

    def test_domain(self):
        with pytest.raises(DomainError):
            relative_difference(1.0, 0.0)
