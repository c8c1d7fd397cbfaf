"""Full-conditional oracles for the Gibbs sweep components.

Each conjugate update is checked against an independent evaluation of
prior x likelihood: on grids (normalized pointwise agreement) and through
the proportionality-constant trick (the log difference between the claimed
posterior density and prior x likelihood must be flat over random points).
"""

import math

import numpy as np
import pytest
from scipy import stats

from staphmm.base_measure import PriorConfig
from staphmm.hmm import Trajectory
from staphmm.sampler import (
    EmissionAssignments,
    McmcConfig,
    escobar_west_mixture_odds,
    eta_atom_posterior,
    init_state,
    missing_location_log_target,
    mu_atom_posterior,
    n_recorded_draws,
    rho_log_target,
    run_sweep,
    sample_aux_tables,
    sample_beta_vectors,
    sample_concentration_total,
    sample_eta_atom,
    sample_gamma,
    sample_missing_location,
    sample_mu_atom,
    sample_rho_atom,
    sample_sigma_atom,
    sample_sticky_fraction,
    sample_tau_atom,
    sigma_atom_posterior,
    table_count,
    tau_atom_posterior,
)
from staphmm.stap import StapParams, stap_logpdf


def random_assignments(rng, n, rho=None, tau=None):
    """A bundle of synthetic emission assignments with valid components."""
    sig = []
    for _ in range(n):
        a = rng.uniform(0.2, 1.0, size=2)
        c = rng.uniform(-0.5, 0.5)
        sig.append([[a[0], c * np.sqrt(a[0] * a[1])], [c * np.sqrt(a[0] * a[1]), a[1]]])
    return EmissionAssignments(
        s_next=rng.normal(size=(n, 2)),
        s_curr=rng.normal(size=(n, 2)),
        phi=rng.uniform(-np.pi, np.pi, size=n),
        mu=rng.normal(size=(n, 2)),
        eta=rng.normal(size=(n, 2)),
        sigma=np.array(sig),
        tau=np.full(n, tau) if tau is not None else rng.uniform(0.1, 0.9, size=n),
        rho=np.full(n, rho) if rho is not None else rng.uniform(0.0, 1.0, size=n),
    )


def loglik_of_atom(assign, family, value):
    """Independent likelihood oracle: scalar STAP log densities with the
    candidate atom substituted into each assigned emission."""
    total = 0.0
    for i in range(assign.n):
        parts = dict(
            mu=assign.mu[i], eta=assign.eta[i], sigma=assign.sigma[i],
            tau=float(assign.tau[i]), rho=float(assign.rho[i]),
        )
        parts[family] = value
        theta = StapParams(**parts)
        total += stap_logpdf(theta, assign.s_next[i], assign.s_curr[i], float(assign.phi[i]))
    return total


class TestTableCount:
    def test_zero_and_one(self):
        rng = np.random.default_rng(0)
        assert table_count(0, 1.0, rng) == 0
        assert all(table_count(1, c, rng) == 1 for c in (0.0, 0.5, 10.0))

    def test_two_customers_enumeration(self):
        # with n=2: P(b=2) = c/(1+c), the only other outcome is b=1
        rng = np.random.default_rng(1)
        c = 0.7
        n = 100_000
        draws = np.array([table_count(2, c, rng) for _ in range(n)])
        want = c / (1 + c)
        assert np.mean(draws == 2) == pytest.approx(want, abs=3 * np.sqrt(want * (1 - want) / n))
        assert set(np.unique(draws)) == {1, 2}

    def test_zero_concentration(self):
        rng = np.random.default_rng(2)
        assert table_count(50, 0.0, rng) == 1


class TestBetaVectors:
    def test_prior_symmetric_mean(self):
        rng = np.random.default_rng(3)
        L = 6
        bbar = np.zeros((2, L))
        acc = np.zeros((2, L))
        n = 20_000
        for _ in range(n):
            acc += sample_beta_vectors(bbar, np.array([1.5, 0.7]), L, rng)
        np.testing.assert_allclose(acc / n, 1.0 / L, atol=0.01)

    def test_posterior_concentration(self):
        rng = np.random.default_rng(4)
        bbar = np.zeros((1, 4))
        bbar[0, 2] = 10_000
        b = sample_beta_vectors(bbar, np.array([1.0]), 4, rng)
        assert b[0, 2] > 0.995

    def test_moments_match_dirichlet(self):
        rng = np.random.default_rng(5)
        gam = 2.0
        L = 3
        bbar = np.array([[3.0, 1.0, 0.0]])
        conc = gam / L + bbar[0]
        tot = conc.sum()
        want_mean = conc / tot
        want_var = conc * (tot - conc) / (tot**2 * (tot + 1))
        draws = np.array([sample_beta_vectors(bbar, np.array([gam]), L, rng)[0] for _ in range(60_000)])
        np.testing.assert_allclose(draws.mean(axis=0), want_mean, atol=0.005)
        np.testing.assert_allclose(draws.var(axis=0), want_var, atol=0.002)


class TestGamma:
    def test_mixture_odds_example(self):
        # a=2, K=3, b - log(xi) = 1, total = 4: stated ratio is exactly 1
        assert escobar_west_mixture_odds(2.0, 3, 1.0, 4.0) == pytest.approx(1.0)

    def test_prior_only_regime(self):
        rng = np.random.default_rng(6)
        a, b = 3.0, 2.0
        for method in ("exact", "escobar_west"):
            draws = np.array(
                [sample_gamma(np.zeros(5), 1.0, (a, b), 5, rng, method) for _ in range(40_000)]
            )
            assert draws.mean() == pytest.approx(a / b, abs=0.02)
            assert draws.var() == pytest.approx(a / b**2, abs=0.05)

    def test_exact_matches_grid_posterior(self):
        # histogram of the slice-sampled chain vs the collapsed density on a grid
        rng = np.random.default_rng(7)
        a, b, L = 2.0, 1.0, 4
        bbar = np.array([3.0, 1.0, 2.0, 0.0])
        from staphmm.sampler import _gamma_log_posterior

        occ = bbar[bbar > 0]
        total = bbar.sum()
        grid = np.linspace(1e-3, 25, 4000)
        logd = np.array([_gamma_log_posterior(g, a, b, occ, total, L) for g in grid])
        d = np.exp(logd - logd.max())
        d /= d.sum() * (grid[1] - grid[0])
        cur = 1.0
        draws = []
        for _ in range(20_000):
            cur = sample_gamma(bbar, cur, (a, b), L, rng, "exact")
            draws.append(cur)
        draws = np.array(draws[2_000:])
        want_mean = float(np.sum(grid * d) * (grid[1] - grid[0]))
        want_sd = math.sqrt(float(np.sum(grid**2 * d) * (grid[1] - grid[0])) - want_mean**2)
        assert draws.mean() == pytest.approx(want_mean, abs=4 * want_sd / math.sqrt(800))

    def test_escobar_west_concentrates_below_prior_mean(self):
        # many customers at few tables: the infinite-limit posterior for the
        # concentration sits well below the prior mean; compare against a
        # grid evaluation of p(gamma) * gamma^K * Gamma(gamma)/Gamma(gamma+n)
        rng = np.random.default_rng(8)
        a, b = 2.0, 1.0
        bbar = np.zeros(50)
        bbar[:2] = [700.0, 300.0]
        from scipy.special import gammaln

        grid = np.linspace(1e-4, 8, 6000)
        logd = (
            (a - 1) * np.log(grid) - b * grid + 2 * np.log(grid)
            + gammaln(grid) - gammaln(grid + 1000.0)
        )
        d = np.exp(logd - logd.max())
        d /= d.sum() * (grid[1] - grid[0])
        want_mean = float(np.sum(grid * d) * (grid[1] - grid[0]))
        draws = []
        cur = 1.0
        for _ in range(30_000):
            cur = sample_gamma(bbar, cur, (a, b), 50, rng, "escobar_west")
            draws.append(cur)
        draws = np.array(draws[5_000:])
        assert draws.mean() < a / b
        assert draws.mean() == pytest.approx(want_mean, rel=0.08)


class TestStickyFraction:
    def test_prior_case(self):
        rng = np.random.default_rng(9)
        draws = np.array([sample_sticky_fraction(0, 0, (2.0, 5.0), rng) for _ in range(50_000)])
        assert draws.mean() == pytest.approx(2 / 7, abs=0.005)

    def test_all_overrides(self):
        rng = np.random.default_rng(10)
        draws = np.array(
            [sample_sticky_fraction(500, 500, (1.0, 1.0), rng) for _ in range(200)]
        )
        assert draws.min() > 0.98

    def test_moments(self):
        rng = np.random.default_rng(11)
        w, btot, (a, b) = 12.0, 40.0, (1.0, 1.0)
        alpha, beta = w + a, btot - w + b
        draws = np.array(
            [sample_sticky_fraction(w, btot, (a, b), rng) for _ in range(60_000)]
        )
        assert draws.mean() == pytest.approx(alpha / (alpha + beta), abs=0.003)
        want_var = alpha * beta / ((alpha + beta) ** 2 * (alpha + beta + 1))
        assert draws.var() == pytest.approx(want_var, abs=0.001)


class TestConcentrationTotal:
    def test_prior_case(self):
        rng = np.random.default_rng(12)
        from staphmm.sampler import AuxiliaryVars

        aux = AuxiliaryVars([], [], [], 0.0, 0.0, [])
        draws = np.array(
            [sample_concentration_total(aux, 1.0, (3.0, 2.0), rng) for _ in range(40_000)]
        )
        assert draws.mean() == pytest.approx(1.5, abs=0.02)

    def test_posterior_positive_and_finite(self):
        rng = np.random.default_rng(13)
        from staphmm.sampler import AuxiliaryVars

        aux = AuxiliaryVars([], [], [], 25.0, 0.0, [{0: 40, 1: 15}, {0: 30}])
        for _ in range(200):
            v = sample_concentration_total(aux, 2.0, (0.01, 0.01), rng)
            assert np.isfinite(v) and v > 0


def grid_posterior_agreement_2d(post_mean, post_cov, prior_logpdf, loglik, span=4.0, n=50):
    """Normalize both the claimed posterior and prior x likelihood on one
    grid; return the max pointwise difference of the normalized masses."""
    sd = np.sqrt(np.diag(post_cov))
    xs = np.linspace(post_mean[0] - span * sd[0], post_mean[0] + span * sd[0], n)
    ys = np.linspace(post_mean[1] - span * sd[1], post_mean[1] + span * sd[1], n)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    claimed = stats.multivariate_normal.logpdf(pts, post_mean, post_cov)
    direct = np.array([prior_logpdf(p) + loglik(p) for p in pts])
    a = np.exp(claimed - claimed.max())
    a /= a.sum()
    b = np.exp(direct - direct.max())
    b /= b.sum()
    return np.abs(a - b).max()


class TestMuAtom:
    def test_empty_assignment_is_prior(self):
        prior = PriorConfig()
        rng = np.random.default_rng(14)
        draws = np.array([sample_mu_atom(None, prior, rng) for _ in range(40_000)])
        np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.1)
        np.testing.assert_allclose(np.cov(draws.T), 20 * np.eye(2), rtol=0.05, atol=0.4)

    def test_single_transition_interpolates(self):
        # rho=0, tau=1: the next location observes mu directly
        prior = PriorConfig()
        rng = np.random.default_rng(15)
        assign = random_assignments(rng, 1, rho=0.0, tau=1.0)
        assign.sigma[0] = np.eye(2)
        assign.s_curr[0] = [0.0, 0.0]
        assign.s_next[0] = [4.0, -2.0]
        mean, cov = mu_atom_posterior(assign, prior)
        prior_prec = np.linalg.inv(prior.mu_cov)
        want_cov = np.linalg.inv(prior_prec + np.eye(2))
        want_mean = want_cov @ (np.eye(2) @ np.array([4.0, -2.0]))
        np.testing.assert_allclose(mean, want_mean, atol=1e-10)
        np.testing.assert_allclose(cov, want_cov, atol=1e-10)

    def test_grid_proportionality(self):
        prior = PriorConfig()
        rng = np.random.default_rng(16)
        for _ in range(20):
            assign = random_assignments(rng, 1)
            mean, cov = mu_atom_posterior(assign, prior)
            gap = grid_posterior_agreement_2d(
                mean, cov,
                lambda p: stats.multivariate_normal.logpdf(p, prior.mu_mean, prior.mu_cov),
                lambda p: loglik_of_atom(assign, "mu", p),
            )
            assert gap < 1e-6


class TestEtaAtom:
    def test_empty_assignment_is_prior(self):
        prior = PriorConfig()
        rng = np.random.default_rng(17)
        draws = np.array([sample_eta_atom(None, prior, rng) for _ in range(30_000)])
        np.testing.assert_allclose(np.cov(draws.T), 20 * np.eye(2), rtol=0.06, atol=0.45)

    def test_crw_single_transition_centers_on_displacement(self):
        prior = PriorConfig(eta_cov=1e6 * np.eye(2))  # flat prior isolates the data term
        rng = np.random.default_rng(18)
        assign = random_assignments(rng, 1, rho=1.0)
        assign.phi[0] = 0.0
        assign.sigma[0] = np.eye(2)
        assign.s_curr[0] = [1.0, 1.0]
        assign.s_next[0] = [2.5, 0.5]
        mean, _ = eta_atom_posterior(assign, prior)
        np.testing.assert_allclose(mean, [1.5, -0.5], atol=1e-3)

    def test_grid_proportionality(self):
        prior = PriorConfig()
        rng = np.random.default_rng(19)
        for _ in range(20):
            assign = random_assignments(rng, 1, rho=float(rng.uniform(0.2, 1.0)))
            mean, cov = eta_atom_posterior(assign, prior)
            gap = grid_posterior_agreement_2d(
                mean, cov,
                lambda p: stats.multivariate_normal.logpdf(p, prior.eta_mean, prior.eta_cov),
                lambda p: loglik_of_atom(assign, "eta", p),
            )
            assert gap < 1e-6


class TestTauAtom:
    def test_empty_assignment_uniform(self):
        prior = PriorConfig()
        rng = np.random.default_rng(20)
        draws = np.array([sample_tau_atom(None, prior, rng) for _ in range(50_000)])
        assert draws.mean() == pytest.approx(0.5, abs=0.01)
        assert draws.min() > 0.0 and draws.max() < 1.0

    def test_degenerate_when_all_crw(self):
        prior = PriorConfig()
        rng = np.random.default_rng(21)
        assign = random_assignments(rng, 5, rho=1.0)
        assert tau_atom_posterior(assign, prior) is None
        draws = np.array([sample_tau_atom(assign, prior, rng) for _ in range(20_000)])
        assert draws.mean() == pytest.approx(0.5, abs=0.02)

    def test_support_respected(self):
        prior = PriorConfig()
        rng = np.random.default_rng(22)
        assign = random_assignments(rng, 3)
        draws = np.array([sample_tau_atom(assign, prior, rng) for _ in range(100_000)])
        assert draws.min() > 0.0 and draws.max() < 1.0

    def test_grid_agreement_1d(self):
        prior = PriorConfig()
        rng = np.random.default_rng(23)
        for _ in range(20):
            assign = random_assignments(rng, 2, rho=float(rng.uniform(0.0, 0.7)))
            post = tau_atom_posterior(assign, prior)
            assert post is not None
            mean, var = post
            sd = math.sqrt(var)
            grid = np.linspace(1e-6, 1 - 1e-6, 2001)
            claimed = stats.norm.logpdf(grid, mean, sd)
            direct = np.array([loglik_of_atom(assign, "tau", float(t)) for t in grid])
            a = np.exp(claimed - claimed.max())
            a /= a.sum()
            b = np.exp(direct - direct.max())
            b /= b.sum()
            assert np.abs(a - b).max() < 1e-8

    def test_recovery_of_known_tau(self):
        # strongly informative synthetic data generated at tau = 0.25
        rng = np.random.default_rng(24)
        n = 400
        mu = np.array([1.0, -0.5])
        sigma = 0.02 * np.eye(2)
        s_curr = rng.normal(size=(n, 2), scale=2.0)
        mean = s_curr + 0.25 * (mu - s_curr)
        s_next = mean + rng.standard_normal((n, 2)) @ np.linalg.cholesky(sigma).T
        assign = EmissionAssignments(
            s_next=s_next, s_curr=s_curr, phi=np.zeros(n),
            mu=np.tile(mu, (n, 1)), eta=np.zeros((n, 2)),
            sigma=np.tile(sigma, (n, 1, 1)), tau=np.full(n, 0.25), rho=np.zeros(n),
        )
        prior = PriorConfig()
        post_mean, post_var = tau_atom_posterior(assign, prior)
        assert abs(post_mean - 0.25) < 4 * math.sqrt(post_var)


class TestSigmaAtom:
    def test_empty_assignment_prior_draw(self):
        prior = PriorConfig()
        rng = np.random.default_rng(25)
        for _ in range(100):
            s = sample_sigma_atom(None, prior, rng)
            assert np.linalg.eigvalsh(s).min() > 0

    def test_posterior_params_proportionality(self):
        # density ratio posterior / (prior x likelihood) must be constant
        prior = PriorConfig()
        rng = np.random.default_rng(26)
        for _ in range(20):
            assign = random_assignments(rng, 3)
            df, scale = sigma_atom_posterior(assign, prior)
            consts = []
            for _ in range(6):
                a = rng.uniform(0.3, 1.5, size=2)
                c = rng.uniform(-0.4, 0.4)
                x = np.array(
                    [[a[0], c * np.sqrt(a[0] * a[1])], [c * np.sqrt(a[0] * a[1]), a[1]]]
                )
                lhs = stats.invwishart.logpdf(x, df=df, scale=scale)
                rhs = stats.invwishart.logpdf(
                    x, df=prior.sigma_df, scale=prior.sigma_scale
                ) + loglik_of_atom(assign, "sigma", x)
                consts.append(lhs - rhs)
            assert np.ptp(consts) < 1e-8

    def test_recovery_of_known_sigma(self):
        rng = np.random.default_rng(27)
        n = 2000
        sig0 = np.array([[0.5, 0.2], [0.2, 0.8]])
        chol = np.linalg.cholesky(sig0)
        s_curr = rng.normal(size=(n, 2))
        s_next = s_curr + rng.standard_normal((n, 2)) @ chol.T
        assign = EmissionAssignments(
            s_next=s_next, s_curr=s_curr, phi=rng.uniform(-np.pi, np.pi, n),
            mu=np.zeros((n, 2)), eta=np.zeros((n, 2)),
            sigma=np.tile(np.eye(2), (n, 1, 1)), tau=np.full(n, 1e-12), rho=np.zeros(n),
        )
        df, scale = sigma_atom_posterior(assign, PriorConfig())
        post_mean = scale / (df - 3)
        np.testing.assert_allclose(post_mean, sig0, rtol=0.1)

    def test_back_rotation_reduces_at_rho_zero(self):
        rng = np.random.default_rng(28)
        assign = random_assignments(rng, 4, rho=0.0)
        df, scale = sigma_atom_posterior(assign, PriorConfig())
        resid = (
            assign.s_next - assign.s_curr
            - (assign.tau[:, None]) * (assign.mu - assign.s_curr)
        )
        want = PriorConfig().sigma_scale + resid.T @ resid
        np.testing.assert_allclose(scale, want, atol=1e-10)


class TestRhoAtom:
    def test_flat_likelihood_recovers_prior_mixture(self):
        prior = PriorConfig()
        rng = np.random.default_rng(29)
        cur = 0.5
        draws = []
        for _ in range(60_000):
            cur = sample_rho_atom(None, cur, prior, 0.1, rng)
            draws.append(cur)
        draws = np.array(draws[5_000:])
        assert np.mean(draws == 0.0) == pytest.approx(1 / 3, abs=0.02)
        assert np.mean(draws == 1.0) == pytest.approx(1 / 3, abs=0.02)
        inside = draws[(draws > 0) & (draws < 1)]
        assert len(inside) / len(draws) == pytest.approx(1 / 3, abs=0.02)
        assert inside.mean() == pytest.approx(0.5, abs=0.02)

    def test_crw_data_occupies_unit_spike(self):
        rng = np.random.default_rng(30)
        n = 300
        eta = np.array([0.8, 0.2])
        phi = rng.uniform(-np.pi, np.pi, n)
        s_curr = rng.normal(size=(n, 2))
        drift = np.stack(
            [np.cos(phi) * eta[0] - np.sin(phi) * eta[1],
             np.sin(phi) * eta[0] + np.cos(phi) * eta[1]], axis=1,
        )
        s_next = s_curr + drift + 0.05 * rng.standard_normal((n, 2))
        assign = EmissionAssignments(
            s_next=s_next, s_curr=s_curr, phi=phi,
            mu=np.zeros((n, 2)), eta=np.tile(eta, (n, 1)),
            sigma=np.tile(0.0025 * np.eye(2), (n, 1, 1)),
            tau=np.full(n, 0.5), rho=np.ones(n),
        )
        prior = PriorConfig()
        cur = 0.5
        hits = 0
        total = 4000
        rng2 = np.random.default_rng(31)
        for _ in range(total):
            cur = sample_rho_atom(assign, cur, prior, 0.1, rng2)
            hits += cur == 1.0
        assert hits / total > 0.9

    def test_proposing_current_value_accepts(self):
        # spike-to-same-spike proposals return the current value untouched
        prior = PriorConfig()
        rng = np.random.default_rng(32)
        for cur in (0.0, 1.0):
            out = {sample_rho_atom(None, cur, prior, 0.1, rng) for _ in range(50)}
            assert cur in out  # same-value proposals never force a move

    def test_detailed_balance_identity(self):
        # target(x) q(y|x) A(x->y) == target(y) q(x|y) A(y->x)
        from staphmm.sampler import _rho_proposal_logpdf

        prior = PriorConfig()
        rng = np.random.default_rng(33)
        assign = random_assignments(rng, 2)
        for _ in range(50):
            x = float(rng.choice([0.0, 1.0, rng.uniform()]))
            y = float(rng.choice([0.0, 1.0, rng.uniform()]))
            if x == y:
                continue
            fx = rho_log_target(x, assign, prior)
            fy = rho_log_target(y, assign, prior)
            qxy = _rho_proposal_logpdf(y, x, 0.1)
            qyx = _rho_proposal_logpdf(x, y, 0.1)
            r = (fy + qyx) - (fx + qxy)
            a_xy = min(0.0, r)
            a_yx = min(0.0, -r)
            lhs = fx + qxy + a_xy
            rhs = fy + qyx + a_yx
            assert lhs == pytest.approx(rhs, abs=1e-10)


class TestMissingLocation:
    def _thetas(self, T, theta):
        return {t: theta for t in range(1, T)}

    def test_midpoint_concentration(self):
        # tight covariance, pure random walk: the bridge peaks at the midpoint
        theta = StapParams((0, 0), (0, 0), 0.01 * np.eye(2), tau=1e-9, rho=0.0)
        locs = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0], [3.0, 1.0]])
        s0 = np.array([-1.0, 0.0])
        thetas = self._thetas(4, theta)
        rng = np.random.default_rng(34)
        locs[1] = [0.9, 0.4]
        draws = []
        for _ in range(4000):
            locs[1] = sample_missing_location(locs, s0, 1, thetas, 0.15, (-5, 5, -5, 5), rng)
            draws.append(locs[1].copy())
        mean = np.mean(draws[500:], axis=0)
        np.testing.assert_allclose(mean, [1.0, 0.0], atol=0.1)

    def test_grid_target_agreement(self):
        # the MH target must equal the brute-force sum of affected factors
        rng = np.random.default_rng(35)
        theta_a = StapParams((0.5, 0), (0.3, 0.1), 0.3 * np.eye(2), 0.4, 0.6)
        theta_b = StapParams((0, 0.5), (0.1, 0.4), np.diag([0.2, 0.5]), 0.2, 0.3)
        locs = rng.normal(size=(6, 2))
        s0 = rng.normal(size=2)
        thetas = {1: theta_a, 2: theta_b, 3: theta_a, 4: theta_b, 5: theta_a}
        for i in (1, 3, 5):
            val = rng.normal(size=2)
            got = missing_location_log_target(locs, s0, i, val, thetas)
            work = locs.copy()
            work[i] = val
            from staphmm.stap import bearing_angle

            full = 0.0
            for t in range(1, 6):
                phi = bearing_angle(s0 if t == 1 else work[t - 2], work[t - 1])
                full += stap_logpdf(thetas[t], work[t], work[t - 1], phi)
            base = locs.copy()
            ref = 0.0
            for t in range(1, 6):
                phi = bearing_angle(s0 if t == 1 else base[t - 2], base[t - 1])
                ref += stap_logpdf(thetas[t], base[t], base[t - 1], phi)
            untouched = ref - missing_location_log_target(locs, s0, i, locs[i], thetas)
            assert got + untouched == pytest.approx(full, abs=1e-9)

    def test_s0_touches_only_first_emission(self):
        theta = StapParams((0, 0), (0.5, 0.2), np.eye(2), 0.3, 0.7)
        locs = np.random.default_rng(36).normal(size=(5, 2))
        thetas = self._thetas(5, theta)
        v1 = missing_location_log_target(locs, np.array([0.3, 0.4]), -1, np.array([0.3, 0.4]), thetas)
        phi = np.arctan2(locs[0][1] - 0.4, locs[0][0] - 0.3)
        want = stap_logpdf(theta, locs[1], locs[0], phi)
        assert v1 == pytest.approx(want, abs=1e-12)

    def test_s0_domain_constraint(self):
        theta = StapParams((0, 0), (0, 0), np.eye(2), 0.5, 0.0)
        locs = np.zeros((4, 2))
        locs[1:] = [[1, 0], [2, 0], [3, 0]]
        thetas = self._thetas(4, theta)
        rng = np.random.default_rng(37)
        s0 = np.array([4.9, 4.9])
        for _ in range(500):
            s0 = sample_missing_location(locs, s0, -1, thetas, 2.0, (-5, 5, -5, 5), rng)
            assert -5 <= s0[0] <= 5 and -5 <= s0[1] <= 5


class TestAuxTablesIntegration:
    def _mini_state(self, seed=0):
        rng = np.random.default_rng(seed)
        T = 40
        locs = np.cumsum(rng.normal(scale=0.3, size=(T, 2)), axis=0)
        data = [Trajectory("a", np.arange(T) * 60, locs)]
        priors = PriorConfig(L=4, epsilon=0.2, gamma_prior=(1, 1), conc_prior=(1, 1))
        cfg = McmcConfig(iterations=2, burnin=1, thin=1, seed=seed, mode="m1", init_k=3)
        st = init_state(data, priors, cfg)
        run_sweep(st, 1)
        return st

    def test_zero_counts_when_single_state(self):
        st = self._mini_state()
        # force a constant path: only self transitions remain
        an = st.animals[0]
        an.z[:] = an.z[0]
        from staphmm.sampler import _resample_rows

        _resample_rows(st, 2)
        rng = np.random.default_rng(1)
        aux = sample_aux_tables(st, rng)
        assert aux.total_tables >= 1
        assert set(aux.tables[0]) == {(int(an.z[0]), int(an.z[0]))}

    def test_nu_zero_means_no_overrides(self):
        st = self._mini_state()
        st.hyper.sticky_frac = 0.0
        rng = np.random.default_rng(2)
        aux = sample_aux_tables(st, rng)
        assert aux.total_overrides == 0

    def test_bbar_consistent_with_tables(self):
        st = self._mini_state(3)
        rng = np.random.default_rng(3)
        aux = sample_aux_tables(st, rng)
        total_barred = sum(
            b - (aux.overrides[0].get(src, 0) if src == dst else 0)
            for (src, dst), b in aux.tables[0].items()
        )
        # every family column tallies the same barred total
        for f in range(5):
            assert aux.bbar[0][f].sum() == pytest.approx(total_barred)


class TestChainPlumbing:
    def test_recorded_draw_count(self):
        assert n_recorded_draws(15000, 7500, 3) == 2500
        assert n_recorded_draws(15, 7, 3) == 2
        assert n_recorded_draws(10, 0, 1) == 10

    def test_determinism(self):
        rng = np.random.default_rng(38)
        T = 25
        locs = np.cumsum(rng.normal(scale=0.4, size=(T, 2)), axis=0)
        locs[7] = np.nan  # one missing fix exercises imputation
        data = [Trajectory("a", np.arange(T) * 60, locs)]
        priors = PriorConfig(L=3, epsilon=0.3, gamma_prior=(1, 1), conc_prior=(1, 1))
        from staphmm.sampler import run_chain

        cfg = McmcConfig(iterations=12, burnin=4, thin=2, seed=99, mode="m1", init_k=2)
        d1 = run_chain(data, priors, cfg)
        d2 = run_chain(data, priors, cfg)
        assert len(d1) == len(d2) == 4
        for r1, r2 in zip(d1.records, d2.records):
            assert r1.loglik == r2.loglik
            np.testing.assert_array_equal(r1.paths[0], r2.paths[0])
            np.testing.assert_array_equal(r1.betas[0], r2.betas[0])
            np.testing.assert_array_equal(r1.atoms[0]["tau"], r2.atoms[0]["tau"])

    def test_animal_updates_commute(self):
        # same seed-split, different animal processing order: identical states
        rng = np.random.default_rng(39)
        T = 20
        mk = lambda aid: Trajectory(
            aid, np.arange(T) * 60, np.cumsum(rng.normal(scale=0.4, size=(T, 2)), axis=0)
        )
        data = [mk("a"), mk("b")]
        priors = PriorConfig(L=3, epsilon=0.3, gamma_prior=(1, 1), conc_prior=(1, 1))
        cfg = McmcConfig(iterations=2, burnin=1, thin=1, seed=7, mode="m1", init_k=2)
        st1 = init_state(data, priors, cfg)
        st2 = init_state(data, priors, cfg)
        st2.animals = st2.animals[::-1]
        for an in st2.animals:
            pass  # space assignments unchanged; only processing order differs
        run_sweep(st1, 1)
        run_sweep(st2, 1)
        z1 = {an.traj.animal_id: an.z.copy() for an in st1.animals}
        z2 = {an.traj.animal_id: an.z.copy() for an in st2.animals}
        # identical label tuples per animal regardless of order
        lab1 = {a: [tuple(st1.spaces[0].registry.labels[g]) for g in z] for a, z in z1.items()}
        lab2 = {a: [tuple(st2.spaces[0].registry.labels[g]) for g in z] for a, z in z2.items()}
        assert lab1 == lab2
