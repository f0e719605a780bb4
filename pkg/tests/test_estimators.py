import dataclasses
import math

import numpy as np
import pytest
from scipy.integrate import quad

from kspp import estimators as E, simulator as S
from kspp.constants import c0_const, kappa
from kspp.kernels import KernelParams, SourceSpec


def frozen_pair_ensemble(dt=2.0 ** -10, n_steps=1024, distance=1.0, chi=1.0,
                         epsilon=1e-3):
    """Constant-position pair at the given distance; chi recorded in the
    config (estimators read it) but the paths never move."""
    params = KernelParams(theta=1.0, chi=chi, epsilon=epsilon)
    cfg = S.SimConfig(params=params, n_particles=2, dt=dt, n_steps=n_steps,
                      n_replicas=1, seed=0, noise_mode="zero",
                      init=S.InitSpec("point"))
    positions = np.zeros((1, n_steps + 1, 2, 2))
    positions[:, :, 1, 0] = distance
    return S.TrajectoryEnsemble(positions=positions, config=cfg,
                                rng_provenance={"seed": 0, "scheme": "synthetic"})


def brownian_ensemble(n_particles=2, n_steps=64, n_replicas=8, seed=2,
                      dt=1.0 / 64, sigma=1.0, epsilon=0.05, chi=0.0):
    params = KernelParams(theta=1.0, chi=chi, epsilon=epsilon)
    cfg = S.SimConfig(params=params, n_particles=n_particles, dt=dt,
                      n_steps=n_steps, n_replicas=n_replicas, seed=seed,
                      init=S.InitSpec("gaussian", sigma=sigma))
    return S.run(cfg)


EP = E.EstimatorParams(gamma=1.6, alpha=0.05)


class TestEstimatorParams:
    def test_validation(self):
        with pytest.raises(ValueError):
            E.EstimatorParams(gamma=1.4, alpha=0.01)
        with pytest.raises(ValueError):
            E.EstimatorParams(gamma=1.6, alpha=0.9)
        with pytest.raises(ValueError):
            E.EstimatorParams(gamma=1.6, alpha=0.05, delta=-1.0)

    def test_horizon_must_hit_grid(self):
        ens = brownian_ensemble(n_steps=10, n_replicas=1)
        with pytest.raises(ValueError):
            E.paper_moments(ens, E.EstimatorParams(gamma=1.6, alpha=0.05,
                                                   horizon=0.0503))


class TestPaperMoments:
    def test_frozen_e1_is_one(self):
        # dt = 2^-10 makes the trapezoid weights binary-exact
        rep = E.paper_moments(frozen_pair_ensemble(), EP)
        assert rep.estimates["E1"].value == 1.0
        assert rep.divergent_terms == 0

    def test_frozen_e2_closed_form(self):
        rep = E.paper_moments(frozen_pair_ensemble(dt=1e-3, n_steps=1000), EP)
        g = EP.gamma
        exact = (1.0 / (g - 1.0)) * (1.0 - (2 ** (2.0 - g) - 1.0) / (2.0 - g))
        assert rep.estimates["E2"].value == pytest.approx(exact, rel=1e-3)

    def test_frozen_s_closed_form(self):
        rep = E.paper_moments(frozen_pair_ensemble(dt=1e-3, n_steps=1000), EP)
        g, a = EP.gamma, EP.alpha
        exact = (a ** (1 - g) - (1 + a) ** (1 - g)) / (g - 1)
        assert rep.estimates["S"].value == pytest.approx(exact, rel=1e-2)
        # the delta offset lowers S-bar below S
        ep_d = E.EstimatorParams(gamma=g, alpha=a, delta=0.1)
        rep_d = E.paper_moments(frozen_pair_ensemble(dt=1e-3, n_steps=1000), ep_d)
        assert rep_d.estimates["S_bar"].value < rep_d.estimates["S"].value

    def test_brownian_e1_dt_stability(self):
        params = KernelParams(theta=1.0, chi=0.0)
        vals = []
        errs = []
        for steps, seed in ((128, 31), (256, 32)):
            cfg = S.SimConfig(params=params, n_particles=2, dt=1.0 / steps,
                              n_steps=steps, n_replicas=200, seed=seed,
                              init=S.InitSpec("point"))
            init = np.tile(np.array([[-1.0, 0.0], [1.0, 0.0]]), (200, 1, 1))
            rep = E.paper_moments(S.run(cfg, initial=init), EP)
            vals.append(rep.estimates["E1"].value)
            errs.append(rep.estimates["E1"].stderr)
        assert abs(vals[0] - vals[1]) < 2 * math.hypot(*errs)

    def test_e1_increases_with_chi(self):
        # attraction trend on a fixed deterministic grid of sensitivities
        params = [KernelParams(theta=1.0, chi=c, epsilon=0.05)
                  for c in (1e-6, 0.45, 0.9, 1.35)]
        vals = []
        for p in params:
            cfg = S.SimConfig(params=p, n_particles=2, dt=1.0 / 64, n_steps=64,
                              n_replicas=64, seed=6,
                              init=S.InitSpec("gaussian", sigma=1.0))
            ep = E.EstimatorParams(gamma=1.62, alpha=0.045)
            vals.append(E.paper_moments(S.run(cfg), ep).estimates["E1"].value)
        assert vals[-1] >= vals[0]

    def test_relabeling_invariance(self):
        ens = brownian_ensemble(n_particles=4, n_steps=16, n_replicas=2)
        rep_a = E.paper_moments(ens, EP)
        perm = [3, 1, 0, 2]
        ens_b = dataclasses.replace(
            ens, positions=np.ascontiguousarray(ens.positions[:, :, perm, :]))
        rep_b = E.paper_moments(ens_b, EP)
        for name in rep_a.estimates:
            np.testing.assert_array_equal(rep_a.estimates[name].per_replica,
                                          rep_b.estimates[name].per_replica)

    def test_divergent_coincidences_counted(self):
        params = KernelParams(theta=1.0, chi=0.0)
        cfg = S.SimConfig(params=params, n_particles=2, dt=0.25, n_steps=4,
                          n_replicas=1, seed=0, noise_mode="zero",
                          init=S.InitSpec("point"))
        ens = S.run(cfg)  # both particles pinned at the origin
        rep = E.paper_moments(ens, EP)
        assert rep.divergent_terms == 5 * 2  # every grid time, both pairs
        assert rep.estimates["E1"].value == 0.0

    def test_e3_envelope_monotone(self):
        # replacing |grad K| by its envelope termwise can only increase E3
        ens = brownian_ensemble(n_steps=32, n_replicas=2)
        cfg = ens.config
        ep = EP
        from kspp.kernels import grad_envelope
        params0 = dataclasses.replace(cfg.params, epsilon=0.0)
        power = 2 * ep.gamma / 3
        for r in range(ens.n_replicas):
            pos = ens.positions[r]
            raw = env = 0.0
            for m in range(1, 33):
                lag = (m - np.arange(m)) * cfg.dt
                diff = pos[m, 0][None, :] - pos[:m, 1, :]
                sq = np.einsum("lc,lc->l", diff, diff)
                raw += float(np.sum(E._grad_k_mag(lag, sq, cfg) ** power))
                env += float(np.sum(
                    grad_envelope(lag, diff, ep.alpha, params0) ** power))
            assert env >= raw

    def test_report_serializes(self):
        rep = E.paper_moments(brownian_ensemble(n_steps=8, n_replicas=2), EP)
        d = rep.to_json_dict()
        assert set(d["estimates"]) == {"E1", "E2", "E3", "E4", "S", "S_bar"}
        import json
        json.dumps(d)

    def test_e2_richardson_ratio(self):
        # smooth frozen-pair integrand: first-order convergence under
        # dt-halving, so consecutive differences shrink by a factor in [1, 4]
        vals = [E.paper_moments(frozen_pair_ensemble(dt=1.0 / m, n_steps=m),
                                EP).estimates["E2"].value
                for m in (250, 500, 1000)]
        ratio = (vals[0] - vals[1]) / (vals[1] - vals[2])
        assert 1.0 <= ratio <= 4.0


class TestDriftDomination:
    def test_frozen_pair_against_quadrature(self):
        # both sides of the domination inequality vs quadrature oracles
        g, a = 1.62, 0.045
        eps = 0.05
        ens = frozen_pair_ensemble(dt=1e-4, n_steps=10000, epsilon=eps)
        cfg = ens.config
        d_hat = S.pair_drift_at(ens.positions[0], cfg, [(0, 1)], 10000)[0]
        d_oracle = S.frozen_drift_oracle(
            np.array([-1.0, 0.0]), 1.0,
            KernelParams(theta=1.0, chi=1.0, epsilon=eps))
        assert (np.linalg.norm(d_hat - d_oracle) / np.linalg.norm(d_oracle)
                < 1e-3)
        lag = (10000 - np.arange(10000)) * cfg.dt
        s_hat = float(cfg.dt * np.sum((lag + a) ** -g))
        s_oracle, _ = quad(lambda s: (s + a) ** -g, 0.0, 1.0)
        assert abs(s_hat - s_oracle) / s_oracle < 1e-3
        const = math.sqrt(1.0) * c0_const(4 * a) * kappa(0.5, g - 1) / (4 * math.pi)
        bound = const * s_oracle ** (1.0 / (2 * (g - 1)))
        assert np.linalg.norm(d_oracle) < bound  # margin, no slack needed

    def test_brownian_sweep_no_violations(self):
        params = KernelParams(theta=1.0, chi=1.0, epsilon=0.05)
        cfg = S.SimConfig(params=params, n_particles=2, dt=0.01, n_steps=100,
                          n_replicas=100, seed=88,
                          init=S.InitSpec("gaussian", sigma=1.0))
        stats = E.drift_domination_check(S.run(cfg),
                                         E.EstimatorParams(gamma=1.62, alpha=0.045))
        assert stats.violations == 0
        assert stats.checked == 100 * 100 * 2

    def test_bound_power_scaling(self):
        # doubling every S term scales the bound by 2^(1/(2(gamma-1)))
        g = 1.6
        expo = 1.0 / (2 * (g - 1))
        s = 0.37
        assert (2 * s) ** expo == pytest.approx(2 ** expo * s ** expo, rel=1e-14)


class TestHolderModulus:
    def test_zero_drift_zero_modulus(self):
        ens = brownian_ensemble(n_steps=16, n_replicas=2, chi=0.0)
        stats = E.holder_modulus(ens, EP)
        np.testing.assert_array_equal(stats.z_hat, 0.0)
        assert stats.ok

    def test_linear_path_helper(self):
        # a linear path attains its ratio at the full window
        beta = 0.4
        times = np.linspace(0.0, 2.0, 21)
        slope = np.array([0.3, -0.4])
        path = times[:, None] * slope
        z = E.holder_ratio_max(path, times, beta)
        assert z == pytest.approx(np.linalg.norm(slope) * 2.0 ** (1 - beta),
                                  rel=1e-12)

    def test_slack_inequality_random_runs(self):
        ens = brownian_ensemble(n_particles=3, n_steps=48, n_replicas=100,
                                seed=14, chi=1.0)
        stats = E.holder_modulus(ens, E.EstimatorParams(gamma=1.62, alpha=0.045))
        assert stats.ok
        assert np.all(stats.z_hat <= stats.bound)  # exact, slack unused
        assert stats.beta == pytest.approx((2 * 1.62 - 3) / (2 * 0.62))


class TestTestFunctions:
    def test_pair_potential_gradient_fd(self):
        pot = E.PairPotential(1.62)
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-2, 2, 2)
            y = rng.uniform(-2, 2, 2)
            if np.linalg.norm(x - y) < 0.05:
                y = y + 0.1
            h = 1e-6
            fd = np.array([
                (pot.psi(x + [h, 0], y) - pot.psi(x - [h, 0], y)) / (2 * h),
                (pot.psi(x + [0, h], y) - pot.psi(x - [0, h], y)) / (2 * h)])
            g = pot.grad_x(x, y)
            worst = max(worst, np.linalg.norm(fd - g)
                        / max(np.linalg.norm(g), 1e-12))
        assert worst < 1e-5

    def test_pair_potential_laplacian_fd(self):
        # divergence of the (separately FD-verified) closed-form gradient;
        # a plain 5-point second difference drowns in cancellation noise
        pot = E.PairPotential(1.62)
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-2, 2, 2)
            y = rng.uniform(-2, 2, 2)
            if np.linalg.norm(x - y) < 0.3:
                y = y + 0.5
            h = 1e-5
            lap_fd = ((pot.grad_x(x + [h, 0], y)[0]
                       - pot.grad_x(x - [h, 0], y)[0]) / (2 * h)
                      + (pot.grad_x(x + [0, h], y)[1]
                         - pot.grad_x(x - [0, h], y)[1]) / (2 * h))
            lap = pot.lap_x(x, y)
            worst = max(worst, abs(lap_fd - lap) / max(abs(lap), 1e-12))
        assert worst < 1e-5

    def test_psi_laplacian_lower_bound(self):
        gamma, eta = 1.62, 0.1
        nu = 4 - 2 * gamma
        l_eta = E.psi_laplacian_lower_bound(gamma, eta)
        pot = E.PairPotential(gamma)
        # verification scan, 10x finer than the search grid
        r = np.geomspace(1e-4, 1e3, 200001)
        x = np.stack([r, np.zeros_like(r)], axis=-1)
        lap = pot.lap_x(x, np.zeros(2))
        target = (nu ** 2 - eta) * r ** (nu - 2.0) - l_eta
        assert np.all(lap >= target - 1e-9 * (1 + np.abs(target)))

    def test_compact_bump_support_and_fd(self):
        bump = E.CompactBump(radius=2.0)
        assert bump.value(np.array([2.5, 0.0])) == 0.0
        assert bump.value(np.array([0.0, 0.0])) == pytest.approx(1.0)
        rng = np.random.default_rng(5)
        for _ in range(100):
            x = rng.uniform(-1.6, 1.6, 2)
            h = 1e-6
            fd = np.array([
                (bump.value(x + [h, 0]) - bump.value(x - [h, 0])) / (2 * h),
                (bump.value(x + [0, h]) - bump.value(x - [0, h])) / (2 * h)])
            np.testing.assert_allclose(bump.grad(x), fd, rtol=1e-4, atol=1e-9)
            h2 = 1e-5
            lap_fd = (bump.value(x + [h2, 0]) + bump.value(x - [h2, 0])
                      + bump.value(x + [0, h2]) + bump.value(x - [0, h2])
                      - 4 * bump.value(x)) / h2 ** 2
            assert bump.lap(x) == pytest.approx(lap_fd, rel=1e-3, abs=1e-6)

    def test_gaussian_bump_heat_operator(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            u = rng.uniform(0, 2)
            x = rng.uniform(-2, 2, 2)
            h = 1e-5
            dt_fd = (E.GaussianBump.value(u + h, x)
                     - E.GaussianBump.value(u - h, x)) / (2 * h)
            lap_fd = (E.GaussianBump.value(u, x + [h, 0])
                      + E.GaussianBump.value(u, x - [h, 0])
                      + E.GaussianBump.value(u, x + [0, h])
                      + E.GaussianBump.value(u, x - [0, h])
                      - 4 * E.GaussianBump.value(u, x)) / h ** 2
            assert E.GaussianBump.heat(u, x) == pytest.approx(
                dt_fd + lap_fd, rel=1e-4, abs=1e-7)


class TestItoBalance:
    def test_gaussian_chi_zero_residual(self):
        ens = brownian_ensemble(n_steps=128, n_replicas=500, seed=42,
                                dt=1.0 / 128)
        rep = E.ito_balance_check(ens, EP, f_spec="gaussian-bump")
        assert rep.passes
        assert abs(rep.mean) < 5 * max(rep.stderr, 1e-12)

    def test_gaussian_with_drift_and_source(self):
        # exercises the background-field and interaction terms end to end
        params = KernelParams(theta=1.0, chi=0.5, epsilon=0.1)
        source = SourceSpec(components=((1.0, (0.0, 0.0), 1.0),))
        cfg = S.SimConfig(params=params, source=source, n_particles=3,
                          dt=1.0 / 64, n_steps=64, n_replicas=300, seed=10,
                          init=S.InitSpec("gaussian", sigma=1.0))
        rep = E.ito_balance_check(S.run(cfg), EP, f_spec="gaussian-bump")
        assert rep.passes

    def test_pair_potential_balance_smoke(self):
        params = KernelParams(theta=1.0, chi=0.4, epsilon=0.1)
        cfg = S.SimConfig(params=params, n_particles=3, dt=1.0 / 64,
                          n_steps=64, n_replicas=400, seed=11,
                          init=S.InitSpec("gaussian", sigma=1.0))
        ep = E.EstimatorParams(gamma=1.62, alpha=0.045)
        rep = E.ito_balance_check(S.run(cfg), ep, f_spec="pair-potential")
        assert np.isfinite(rep.per_replica).all()
        assert rep.passes

    def test_unknown_spec(self):
        ens = brownian_ensemble(n_steps=8, n_replicas=2)
        with pytest.raises(ValueError):
            E.ito_balance_check(ens, EP, f_spec="mystery")


class TestMartingaleResidual:
    def test_chi_zero_centered(self):
        ens = brownian_ensemble(n_particles=4, n_steps=64, n_replicas=2000,
                                seed=8, dt=1.0 / 64)
        rep = E.martingale_residual(ens, None, ("const",), s=0.5, t=1.0)
        assert rep.passes

    def test_adapted_window_centered(self):
        ens = brownian_ensemble(n_particles=4, n_steps=64, n_replicas=2000,
                                seed=9, dt=1.0 / 64)
        rep = E.martingale_residual(ens, None, ("window", 0.5, -1.0, 1.0),
                                    s=0.5, t=1.0)
        assert rep.passes

    def test_negative_control_detects_misuse(self):
        # a path functional living after s correlates with the increment
        params = KernelParams(theta=1.0, chi=0.5, epsilon=0.05)
        cfg = S.SimConfig(params=params, n_particles=4, dt=1.0 / 32,
                          n_steps=32, n_replicas=3000, seed=12,
                          init=S.InitSpec("gaussian", sigma=0.5))
        ens = S.run(cfg)
        bump = E.CompactBump(radius=2.0)
        rep = E.martingale_residual(ens, bump, ("window", 1.0, -0.5, 0.5),
                                    s=0.5, t=1.0)
        assert abs(rep.mean) > 5 * rep.stderr
        assert not rep.passes

    def test_time_validation(self):
        ens = brownian_ensemble(n_steps=16, n_replicas=2)
        with pytest.raises(ValueError):
            E.martingale_residual(ens, None, ("const",), s=1.0, t=0.5)
        with pytest.raises(ValueError):
            E.martingale_residual(ens, None, ("nope",), s=0.25, t=0.5)


class TestDiscreteFunineqEcho:
    def test_ratios_below_slack(self):
        ens = brownian_ensemble(n_particles=3, n_steps=64, n_replicas=20,
                                seed=15)
        ratios = E.discrete_funineq_ratio(ens, E.EstimatorParams(gamma=1.62,
                                                                 alpha=0.045))
        assert np.all(ratios <= 1.05)
        assert np.all(ratios > 0)


class TestBootstrap:
    def test_shifted_sample_excludes_zero(self):
        rng = np.random.default_rng(0)
        vals = rng.normal(1.0, 0.1, 400)
        lo, hi = E.bootstrap_mean_ci(vals, level=0.99, seed=1)
        assert lo > 0.5
        assert lo < 1.0 < hi
