"""Monte Carlo estimators for the bounded moment functionals.

Given a simulated TrajectoryEnsemble, this module estimates the pairwise
moment functionals (inverse-distance integral E1, space-time double
integrals E2/E3, drift-power integral E4, the Markovianization integrals
S and their offset variant), checks the drift-domination and Hoelder
modulus inequalities in their exact discrete form, and evaluates the
Ito-balance identity and the empirical martingale residual for built-in
test-function families.

Conventions shared with the simulator: double time sums use the
u-exclusive left-endpoint rule in the inner (history) variable where the
integrand is singular on the diagonal, trapezoid weights elsewhere; pair
reductions use exact summation (math.fsum) so every estimator is invariant
under particle relabeling bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from scipy.stats import norm as _norm

from .constants import _golden_max, c0_const, kappa
from .kernels import EXP_CLAMP, background_field
from .simulator import SimConfig, TrajectoryEnsemble, pair_drift_at, pair_drift_series

TEST_FUNCTION_VERSIONS = {
    "gaussian-bump": "gaussian-bump-v1",
    "pair-potential": "pair-potential-v1",
    "compact-bump": "compact-bump-v1",
}


@dataclass(frozen=True)
class EstimatorParams:
    """Exponents and weights for the moment functionals.

    gamma in (3/2, 2), alpha in (0, 1/(4(gamma-1))), delta >= 0 is the
    offset of the S-bar variant, horizon (model time, grid-aligned) defaults
    to the full simulated window.
    """

    gamma: float
    alpha: float
    delta: float = 0.0
    horizon: float | None = None

    def __post_init__(self) -> None:
        if not 1.5 < self.gamma < 2.0:
            raise ValueError(f"gamma must lie in (3/2, 2), got {self.gamma}")
        a_max = 1.0 / (4.0 * (self.gamma - 1.0))
        if not 0.0 < self.alpha < a_max:
            raise ValueError(f"alpha must lie in (0, {a_max:.6g}), got {self.alpha}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.horizon is not None and self.horizon <= 0:
            raise ValueError(f"horizon must be > 0, got {self.horizon}")


@dataclass
class FunctionalEstimate:
    value: float
    stderr: float
    n_replicas: int
    per_replica: np.ndarray


@dataclass
class EstimateReport:
    estimates: dict[str, FunctionalEstimate]
    divergent_terms: int
    config_echo: dict
    notes: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "estimates": {
                name: {
                    "value": est.value,
                    "stderr": est.stderr,
                    "n_replicas": est.n_replicas,
                    "per_replica": [float(v) for v in est.per_replica],
                }
                for name, est in self.estimates.items()
            },
            "divergent_terms": self.divergent_terms,
            "config": self.config_echo,
            "notes": self.notes,
        }


def ordered_pairs(n: int) -> list[tuple[int, int]]:
    return [(i, j) for i in range(n) for j in range(n) if i != j]


def _horizon_index(ensemble: TrajectoryEnsemble, horizon: float | None) -> int:
    dt = ensemble.config.dt
    if horizon is None:
        m_t = ensemble.n_steps
    else:
        m_t = int(round(horizon / dt))
        if abs(m_t * dt - horizon) > 1e-9 * max(1.0, horizon):
            raise ValueError(f"horizon {horizon} is not on the dt={dt} grid")
    if not 1 <= m_t <= ensemble.n_steps:
        raise ValueError(f"horizon index {m_t} outside the simulated window")
    return m_t


def _trap_weights(m_t: int, dt: float) -> np.ndarray:
    w = np.full(m_t + 1, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _grad_k_mag(lag: np.ndarray, sq: np.ndarray, config: SimConfig) -> np.ndarray:
    """|grad K_lag| at squared distance sq (unsmoothed kernel)."""
    p = config.params
    arg = np.minimum(p.theta * sq / (4.0 * lag), EXP_CLAMP)
    return (p.theta / (8.0 * math.pi * lag ** 2)
            * np.exp(-p.lam * lag / p.theta) * np.exp(-arg) * np.sqrt(sq))


def _fsum_mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def paper_moments(ensemble: TrajectoryEnsemble, ep: EstimatorParams) -> EstimateReport:
    """Estimates of E1-E4 and the S functionals by replica averaging.

    E1 integrates the inverse pair distance to the power 2(gamma-1); E2 and
    E3 are the double time sums with the u-exclusive inner rule; E4
    integrates |D|^(2(gamma-1)) using the simulator's discrete pair drift;
    S/S-bar are reported at the horizon. Exact on-grid coincidences are
    excluded from E1 and counted as divergent terms.
    """
    if ensemble.n_particles < 2:
        raise ValueError("need at least 2 particles")
    if ensemble.n_replicas < 1 or ensemble.positions.size == 0:
        raise ValueError("empty ensemble")
    cfg = ensemble.config
    dt = cfg.dt
    m_t = _horizon_index(ensemble, ep.horizon)
    pairs = ordered_pairs(ensemble.n_particles)
    i_idx = np.array([i for i, _ in pairs])
    j_idx = np.array([j for _, j in pairs])
    w_tr = _trap_weights(m_t, dt)
    q = 2.0 * (ep.gamma - 1.0)
    e3_pow = 2.0 * ep.gamma / 3.0
    names = ("E1", "E2", "E3", "E4", "S", "S_bar")
    per_rep = {name: np.zeros(ensemble.n_replicas) for name in names}
    divergent = 0

    for r in range(ensemble.n_replicas):
        pos = ensemble.positions[r, : m_t + 1]

        # E1: same-time inverse distances, trapezoid in time
        d_same = pos[:, i_idx, :] - pos[:, j_idx, :]
        dist = np.sqrt(np.einsum("mkc,mkc->mk", d_same, d_same))
        zero_mask = dist == 0.0
        divergent += int(zero_mask.sum())
        with np.errstate(divide="ignore"):
            integrand = np.where(zero_mask, 0.0, dist ** (-q))
        e1_pairs = w_tr @ integrand
        per_rep["E1"][r] = _fsum_mean(e1_pairs)

        # E2 / E3: double sums, left-endpoint (u-exclusive) inner rule
        e2_pairs = np.zeros(len(pairs))
        e3_pairs = np.zeros(len(pairs))
        for m in range(1, m_t + 1):
            lag = (m - np.arange(m)) * dt
            diff = pos[m, i_idx][None, :, :] - pos[:m][:, j_idx, :]
            sq = np.einsum("lkc,lkc->lk", diff, diff)
            e2_pairs += w_tr[m] * dt * np.sum((lag[:, None] + sq) ** (-ep.gamma), axis=0)
            e3_pairs += w_tr[m] * dt * np.sum(
                _grad_k_mag(lag[:, None], sq, cfg) ** e3_pow, axis=0)
        per_rep["E2"][r] = _fsum_mean(e2_pairs)
        per_rep["E3"][r] = _fsum_mean(e3_pairs)

        # E4: drift-power integral from the simulator's discrete pair drift
        d_series = pair_drift_series(pos, cfg, pairs, m_last=m_t)
        d_mag = np.sqrt(np.einsum("mkc,mkc->mk", d_series, d_series))
        per_rep["E4"][r] = _fsum_mean(w_tr @ d_mag ** q)

        # S and S-bar at the horizon (right-endpoint sum, diagonal excluded)
        lag = (m_t - np.arange(m_t)) * dt
        diff = pos[m_t, i_idx][None, :, :] - pos[:m_t][:, j_idx, :]
        sq = np.einsum("lkc,lkc->lk", diff, diff)
        s_pairs = dt * np.sum((lag[:, None] + ep.alpha * sq) ** (-ep.gamma), axis=0)
        sbar_pairs = dt * np.sum(
            (lag[:, None] + ep.delta + ep.alpha * sq) ** (-ep.gamma), axis=0)
        per_rep["S"][r] = _fsum_mean(s_pairs)
        per_rep["S_bar"][r] = _fsum_mean(sbar_pairs)

    estimates = {}
    for name in names:
        vals = per_rep[name]
        err = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
        estimates[name] = FunctionalEstimate(float(vals.mean()), err, len(vals), vals)
    return EstimateReport(
        estimates=estimates,
        divergent_terms=divergent,
        config_echo=asdict(cfg),
        notes={"gamma": ep.gamma, "alpha": ep.alpha, "delta": ep.delta,
               "horizon": m_t * dt, "pairs": len(pairs)},
    )


@dataclass
class DominationStats:
    checked: int
    violations: int
    worst_margin: float  # max over checks of |D| / bound (<= 1 means clean)
    slack: float


def drift_domination_check(ensemble: TrajectoryEnsemble, ep: EstimatorParams,
                           slack: float = 1.05) -> DominationStats:
    """Discrete drift-domination inequality per (replica, ordered pair, step).

    Checks |D^{i,j}_m| <= slack * C * (S^{i,j}_m)^(1/(2(gamma-1))) with
    C = sqrt(theta) C0(4 alpha/theta) kappa(1/2, gamma-1) / (4 pi), where D
    and S are the simulator-grid discrete sums.
    """
    cfg = ensemble.config
    p = cfg.params
    dt = cfg.dt
    m_t = _horizon_index(ensemble, ep.horizon)
    pairs = ordered_pairs(ensemble.n_particles)
    i_idx = np.array([i for i, _ in pairs])
    j_idx = np.array([j for _, j in pairs])
    const = (math.sqrt(p.theta) * c0_const(4.0 * ep.alpha / p.theta)
             * kappa(0.5, ep.gamma - 1.0) / (4.0 * math.pi))
    expo = 1.0 / (2.0 * (ep.gamma - 1.0))
    checked = violations = 0
    worst = 0.0
    for r in range(ensemble.n_replicas):
        pos = ensemble.positions[r, : m_t + 1]
        for m in range(1, m_t + 1):
            d = pair_drift_at(pos, cfg, pairs, m)
            d_mag = np.sqrt(np.einsum("kc,kc->k", d, d))
            lag = (m - np.arange(m)) * dt
            diff = pos[m, i_idx][None, :, :] - pos[:m][:, j_idx, :]
            sq = np.einsum("lkc,lkc->lk", diff, diff)
            s_vals = dt * np.sum((lag[:, None] + ep.alpha * sq) ** (-ep.gamma), axis=0)
            bound = const * s_vals ** expo
            ratio = d_mag / (slack * bound)
            checked += len(pairs)
            violations += int(np.sum(ratio > 1.0))
            worst = max(worst, float(np.max(d_mag / bound)))
    return DominationStats(checked, violations, worst, slack)


def holder_ratio_max(path: np.ndarray, times: np.ndarray, beta: float) -> float:
    """max over grid pairs s < t of |path_t - path_s| / (t - s)^beta."""
    diff = path[None, :, :] - path[:, None, :]
    gaps = times[None, :] - times[:, None]
    mag = np.sqrt(np.einsum("stc,stc->st", diff, diff))
    upper = gaps > 0
    return float(np.max(mag[upper] / gaps[upper] ** beta))


@dataclass
class HolderStats:
    beta: float
    z_hat: np.ndarray        # per replica
    bound: np.ndarray        # per replica
    slack: float

    @property
    def ok(self) -> bool:
        return bool(np.all(self.z_hat <= self.slack * self.bound))


def holder_modulus(ensemble: TrajectoryEnsemble, ep: EstimatorParams,
                   slack: float = 1.05) -> HolderStats:
    """Hoelder modulus of the integrated interaction drift of particle 1.

    Gamma_t = chi * int_0^t (1/(N-1)) sum_j D^{1,j}_s ds (left-endpoint in
    time), beta = (2 gamma - 3) / (2(gamma - 1)). The empirical modulus is
    compared against chi/(N-1) * sum_j [1 + sum |D|^(2(gamma-1)) dt], which
    dominates it by the exact discrete Hoelder inequality.
    """
    cfg = ensemble.config
    chi, dt = cfg.params.chi, cfg.dt
    m_t = _horizon_index(ensemble, ep.horizon)
    n = ensemble.n_particles
    pairs = [(0, j) for j in range(1, n)]
    beta = (2.0 * ep.gamma - 3.0) / (2.0 * (ep.gamma - 1.0))
    q = 2.0 * (ep.gamma - 1.0)
    times = ensemble.times[: m_t + 1]
    z_hat = np.zeros(ensemble.n_replicas)
    bound = np.zeros(ensemble.n_replicas)
    for r in range(ensemble.n_replicas):
        d_series = pair_drift_series(ensemble.positions[r, : m_t + 1], cfg,
                                     pairs, m_last=m_t)
        mean_d = d_series.mean(axis=1)
        gamma_path = np.zeros((m_t + 1, 2))
        gamma_path[1:] = chi * dt * np.cumsum(mean_d[:-1], axis=0)
        z_hat[r] = holder_ratio_max(gamma_path, times, beta)
        d_mag = np.sqrt(np.einsum("mkc,mkc->mk", d_series, d_series))
        tail = dt * np.sum(d_mag[:-1] ** q, axis=0)
        bound[r] = chi / (n - 1) * math.fsum(1.0 + tail[k] for k in range(len(pairs)))
    return HolderStats(beta, z_hat, bound, slack)


# ---------------------------------------------------------------------------
# Built-in test-function families (fixed and versioned)
# ---------------------------------------------------------------------------


class GaussianBump:
    """F(u, x) = exp(-u - |x|^2) with exact time-plus-Laplace and gradient."""

    name = TEST_FUNCTION_VERSIONS["gaussian-bump"]

    @staticmethod
    def value(u, x):
        sq = np.einsum("...c,...c->...", x, x)
        return np.exp(-np.minimum(u + sq, EXP_CLAMP))

    @staticmethod
    def heat(u, x):
        """(d/dt + Laplacian) F = (4|x|^2 - 5) F."""
        sq = np.einsum("...c,...c->...", x, x)
        return (4.0 * sq - 5.0) * np.exp(-np.minimum(u + sq, EXP_CLAMP))

    @staticmethod
    def grad(u, x):
        return -2.0 * x * GaussianBump.value(u, x)[..., None]


class PairPotential:
    """psi(x, y) = phi(|x-y|^2) with phi(r) = r^(nu/2) / (1 + r^(nu/2)).

    nu = 4 - 2 gamma in (0, 1). The gradient and Laplacian in x are closed
    forms; the Laplacian diverges to +inf as x -> y.
    """

    name = TEST_FUNCTION_VERSIONS["pair-potential"]

    def __init__(self, gamma: float):
        if not 1.5 < gamma < 2.0:
            raise ValueError(f"gamma must lie in (3/2, 2), got {gamma}")
        self.gamma = gamma
        self.nu = 4.0 - 2.0 * gamma

    def psi(self, x, y):
        d = np.asarray(x, float) - np.asarray(y, float)
        rr = np.einsum("...c,...c->...", d, d) ** (self.nu / 2.0)
        return rr / (1.0 + rr)

    def grad_x(self, x, y):
        d = np.asarray(x, float) - np.asarray(y, float)
        dist = np.sqrt(np.einsum("...c,...c->...", d, d))
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = self.nu * dist ** (self.nu - 2.0) / (1.0 + dist ** self.nu) ** 2
        return np.where(dist[..., None] == 0.0, 0.0, coef[..., None] * d)

    def lap_x(self, x, y):
        d = np.asarray(x, float) - np.asarray(y, float)
        dist = np.sqrt(np.einsum("...c,...c->...", d, d))
        with np.errstate(divide="ignore"):
            rnu = dist ** self.nu
            return (self.nu ** 2 * dist ** (self.nu - 2.0) / (1.0 + rnu) ** 2
                    * (1.0 - 2.0 * rnu / (1.0 + rnu)))


def psi_laplacian_lower_bound(gamma: float, eta: float,
                              r_lo: float = 1e-4, r_hi: float = 1e3,
                              n_scan: int = 20001) -> float:
    """Constant L_eta with Lap_x psi >= (nu^2 - eta) r^(nu-2) - L_eta.

    Found by minimizing f_eta(r) = Lap-profile(r) - (nu^2 - eta) r^(nu-2)
    on a log grid with golden-section polish; f_eta tends to +inf at 0 and
    to 0 at infinity, so the scan brackets the global minimum.
    """
    if eta <= 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    pot = PairPotential(gamma)
    nu = pot.nu

    def f_eta(r: np.ndarray) -> np.ndarray:
        rnu = r ** nu
        prof = nu ** 2 * r ** (nu - 2.0) / (1.0 + rnu) ** 2 * (1.0 - 2.0 * rnu / (1.0 + rnu))
        return prof - (nu ** 2 - eta) * r ** (nu - 2.0)

    grid = np.geomspace(r_lo, r_hi, n_scan)
    vals = f_eta(grid)
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, n_scan - 1)]
    _, neg_min = _golden_max(lambda r: -float(f_eta(np.asarray(r))), lo, hi, xtol=1e-12)
    return max(0.0, neg_min)


class CompactBump:
    """C-infinity bump exp(1 - 1/(1 - |x|^2/R^2)) on |x| < R, zero outside."""

    name = TEST_FUNCTION_VERSIONS["compact-bump"]

    def __init__(self, radius: float = 3.0):
        if radius <= 0:
            raise ValueError(f"radius must be > 0, got {radius}")
        self.radius = radius

    def _rho(self, x):
        x = np.asarray(x, float)
        return np.einsum("...c,...c->...", x, x) / self.radius ** 2

    def value(self, x):
        rho = self._rho(x)
        inside = rho < 1.0
        with np.errstate(divide="ignore", over="ignore"):
            out = np.where(inside, np.exp(1.0 - 1.0 / np.where(inside, 1.0 - rho, 1.0)), 0.0)
        return out

    def grad(self, x):
        x = np.asarray(x, float)
        rho = self._rho(x)
        inside = rho < 1.0
        one_m = np.where(inside, 1.0 - rho, 1.0)
        gp = -one_m ** -2.0  # d/drho of the exponent 1 - 1/(1 - rho)
        coef = np.where(inside, self.value(x) * gp * 2.0 / self.radius ** 2, 0.0)
        return coef[..., None] * x

    def lap(self, x):
        x = np.asarray(x, float)
        rho = self._rho(x)
        inside = rho < 1.0
        one_m = np.where(inside, 1.0 - rho, 1.0)
        gp = -one_m ** -2.0
        gpp = -2.0 * one_m ** -3.0
        sq = np.einsum("...c,...c->...", x, x)
        val = self.value(x)
        r2 = self.radius ** 2
        return np.where(inside,
                        val * ((gp ** 2 + gpp) * 4.0 * sq / r2 ** 2 + 4.0 * gp / r2),
                        0.0)


# ---------------------------------------------------------------------------
# Ito balance and martingale residual
# ---------------------------------------------------------------------------


@dataclass
class ResidualReport:
    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    passes: bool
    per_replica: np.ndarray
    level: float

    @property
    def variance(self) -> float:
        return float(self.per_replica.var(ddof=1))


def bootstrap_mean_ci(values: np.ndarray, level: float = 0.99,
                      n_boot: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap confidence interval for the mean."""
    rng = np.random.default_rng(seed)
    values = np.asarray(values, float)
    idx = rng.integers(0, len(values), size=(n_boot, len(values)))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
    return float(lo), float(hi)


def _mean_drift_window(pos: np.ndarray, cfg: SimConfig, m_lo: int,
                       m_hi: int) -> np.ndarray:
    """(1/(N-1)) sum_{j != i} D^{i,j}_m for all i and m in [m_lo, m_hi]."""
    n = pos.shape[1]
    pairs = ordered_pairs(n)
    out = np.zeros((m_hi - m_lo + 1, n, 2))
    for m in range(m_lo, m_hi + 1):
        d = pair_drift_at(pos, cfg, pairs, m)
        for k, (i, _) in enumerate(pairs):
            out[m - m_lo, i] += d[k]
    return out / (n - 1)


def ito_balance_check(ensemble: TrajectoryEnsemble, ep: EstimatorParams,
                      f_spec: str = "gaussian-bump", level: float = 0.99,
                      n_boot: int = 2000, boot_seed: int = 0) -> ResidualReport:
    """Monte Carlo residual of the pathwise Ito-balance identity.

    f_spec "gaussian-bump": four-term identity for the time-lagged pair
    displacement functional of F(u, x) = e^(-u - |x|^2), trapezoid rules on
    both time axes (the integrands are smooth on the diagonal).
    f_spec "pair-potential": the symmetrized same-time identity for
    psi(x, y) built from gamma; its Laplacian integrand is singular at
    coincidence, which Brownian paths avoid almost surely.

    Passes when 0 lies in the bootstrap confidence interval of the mean.
    """
    if f_spec not in ("gaussian-bump", "pair-potential"):
        raise ValueError(f"unknown test function spec {f_spec!r}")
    cfg = ensemble.config
    chi, dt = cfg.params.chi, cfg.dt
    m_t = _horizon_index(ensemble, ep.horizon)
    w_tr = _trap_weights(m_t, dt)
    pairs = ordered_pairs(ensemble.n_particles)
    n = ensemble.n_particles
    res = np.zeros(ensemble.n_replicas)

    times = np.arange(m_t + 1) * dt
    # inner trapezoid weights over s in [0, u], one row per u (zero above diagonal)
    w_inner = np.zeros((m_t + 1, m_t + 1))
    for m in range(1, m_t + 1):
        w_inner[m, : m + 1] = _trap_weights(m, dt)
    lag_mat = times[:, None] - times[None, :]  # u - s, valid on s <= u

    for r in range(ensemble.n_replicas):
        pos = ensemble.positions[r, : m_t + 1]
        per_pair = []
        if f_spec == "gaussian-bump":
            drift = (_mean_drift_window(pos, cfg, 0, m_t) if chi != 0.0
                     else np.zeros((m_t + 1, n, 2)))
            grad_b = np.zeros((m_t + 1, n, 2))
            if chi != 0.0 and not cfg.source.is_zero:
                for m in range(m_t + 1):
                    _, grad_b[m] = background_field(m * dt + cfg.params.epsilon,
                                                    pos[m], cfg.source, cfg.params)
            lag_ut = times[m_t] - times  # t - s
            for i, j in pairs:
                xi, xj = pos[:, i, :], pos[:, j, :]
                lhs = float(w_tr @ GaussianBump.value(lag_ut, xi[m_t][None, :] - xj))
                t1 = float(w_tr @ GaussianBump.value(0.0, xi - xj))
                diff = xi[:, None, :] - xj[None, :, :]  # (u, s, 2)
                t2 = float(w_tr @ np.sum(w_inner * GaussianBump.heat(lag_mat, diff),
                                         axis=1))
                t3 = t4 = 0.0
                if chi != 0.0:
                    grad_int = np.einsum("us,usc->uc", w_inner,
                                         GaussianBump.grad(lag_mat, diff))
                    t3 = chi * float(w_tr @ np.einsum("uc,uc->u", grad_int, grad_b[:, i]))
                    t4 = chi * float(w_tr @ np.einsum("uc,uc->u", grad_int, drift[:, i]))
                per_pair.append(lhs - t1 - t2 - t3 - t4)
        else:
            pot = PairPotential(ep.gamma)
            drift = (_mean_drift_window(pos, cfg, 0, m_t) if chi != 0.0
                     else np.zeros((m_t + 1, n, 2)))
            for i, j in pairs:
                xi, xj = pos[:, i, :], pos[:, j, :]
                j1 = float(pot.psi(xi[m_t], xj[m_t]) - pot.psi(xi[0], xj[0]))
                lap = pot.lap_x(xi, xj)
                lap = np.where(np.isfinite(lap), lap, 0.0)
                j2 = float(w_tr @ lap)
                j3 = 0.0
                j4 = 0.0
                if chi != 0.0:
                    grads = pot.grad_x(xi, xj)
                    if not cfg.source.is_zero:
                        gb = np.stack([background_field(m * dt + cfg.params.epsilon,
                                                        xi[m], cfg.source,
                                                        cfg.params)[1]
                                       for m in range(m_t + 1)])
                        j3 = float(w_tr @ np.einsum("mc,mc->m", grads, gb))
                    j4 = float(w_tr @ np.einsum("mc,mc->m", grads, drift[:, i, :]))
                per_pair.append(j1 - 2.0 * j2 - 2.0 * chi * j3 - 2.0 * chi * j4)
        res[r] = _fsum_mean(per_pair)

    lo, hi = bootstrap_mean_ci(res, level=level, n_boot=n_boot, seed=boot_seed)
    err = float(res.std(ddof=1) / math.sqrt(len(res))) if len(res) > 1 else 0.0
    return ResidualReport(float(res.mean()), err, lo, hi,
                          passes=lo <= 0.0 <= hi, per_replica=res, level=level)


def martingale_residual(ensemble: TrajectoryEnsemble,
                        phi: CompactBump | None,
                        phi_path_spec: tuple,
                        s: float, t: float,
                        level: float = 0.99) -> ResidualReport:
    """Empirical martingale-problem residual between times s and t.

    Replaces the limit law by the empirical path measure and the
    interaction by the pairwise empirical sum with the simulated (smoothed)
    kernel. phi is a compactly supported C^2 test function;
    phi_path_spec selects the bounded path functional: ("const",) or
    ("window", tau, lo, hi) which is the indicator that both coordinates at
    time tau lie in [lo, hi]. tau <= s keeps the functional adapted; larger
    tau is a deliberate misuse that breaks the martingale property.
    """
    if phi is None:
        phi = CompactBump()
    cfg = ensemble.config
    dt, chi = cfg.dt, cfg.params.chi
    if not 0 < s < t:
        raise ValueError(f"need 0 < s < t, got s={s}, t={t}")
    m_s = int(round(s / dt))
    m_e = _horizon_index(ensemble, t)
    if not 0 < m_s < m_e:
        raise ValueError(f"need grid indices 0 < {m_s} < {m_e}")

    kind = phi_path_spec[0]
    if kind == "const":
        def path_fn(traj: np.ndarray) -> float:
            return 1.0
    elif kind == "window":
        _, tau, lo_w, hi_w = phi_path_spec
        m_tau = int(round(tau / dt))
        if not 0 <= m_tau <= m_e:
            raise ValueError(f"window time {tau} outside the simulated grid")

        def path_fn(traj: np.ndarray) -> float:
            pt = traj[m_tau]
            return float(lo_w <= pt[0] <= hi_w and lo_w <= pt[1] <= hi_w)
    else:
        raise ValueError(f"unknown path functional spec {phi_path_spec!r}")

    n = ensemble.n_particles
    w_in = np.full(m_e - m_s + 1, dt)
    w_in[0] = w_in[-1] = 0.5 * dt
    theta_vals = np.zeros(ensemble.n_replicas)
    for r in range(ensemble.n_replicas):
        pos = ensemble.positions[r]
        window = pos[m_s: m_e + 1]
        lap = phi.lap(window)                       # (w, N)
        gen = lap.copy()
        if chi != 0.0:
            grads = phi.grad(window)                # (w, N, 2)
            drift = _mean_drift_window(pos, cfg, m_s, m_e)
            if not cfg.source.is_zero:
                for k, m in enumerate(range(m_s, m_e + 1)):
                    _, gb = background_field(m * dt + cfg.params.epsilon,
                                             pos[m], cfg.source, cfg.params)
                    drift[k] += gb
            gen = gen + chi * np.einsum("wnc,wnc->wn", grads, drift)
        integral = w_in @ gen                       # (N,)
        vals = [path_fn(pos[:, i, :])
                * (float(phi.value(pos[m_e, i]) - phi.value(pos[m_s, i]))
                   - float(integral[i]))
                for i in range(n)]
        theta_vals[r] = _fsum_mean(vals)

    err = (float(theta_vals.std(ddof=1) / math.sqrt(len(theta_vals)))
           if len(theta_vals) > 1 else 0.0)
    z = float(_norm.ppf(0.5 + level / 2.0))
    mean = float(theta_vals.mean())
    lo, hi = mean - z * err, mean + z * err
    return ResidualReport(mean, err, lo, hi, passes=lo <= 0.0 <= hi,
                          per_replica=theta_vals, level=level)


def discrete_funineq_ratio(ensemble: TrajectoryEnsemble, ep: EstimatorParams,
                           a: float = 0.5, b: float | None = None) -> np.ndarray:
    """Discrete echo of the functional inequality along stored path pairs.

    For each (replica, ordered pair), forms f(s_l) = alpha |R_(T, T-s_l)|^2
    on the right-endpoint grid s_l = l dt and returns the ratios
    sum (s+f)^-(1+a) dt / [kappa(a,b) (sum (s+f)^-(1+b) dt)^(a/b)].
    """
    if b is None:
        b = ep.gamma - 1.0
    cfg = ensemble.config
    dt = cfg.dt
    m_t = _horizon_index(ensemble, ep.horizon)
    pairs = ordered_pairs(ensemble.n_particles)
    i_idx = np.array([i for i, _ in pairs])
    j_idx = np.array([j for _, j in pairs])
    k_ab = kappa(a, b)
    ratios = np.zeros((ensemble.n_replicas, len(pairs)))
    s_grid = np.arange(1, m_t + 1) * dt
    for r in range(ensemble.n_replicas):
        pos = ensemble.positions[r, : m_t + 1]
        # R_(T, T - s_l) = X^i_T - X^j_(T - s_l), l = 1..m_t
        diff = pos[m_t, i_idx][None, :, :] - pos[m_t - np.arange(1, m_t + 1)][:, j_idx, :]
        f_vals = ep.alpha * np.einsum("lkc,lkc->lk", diff, diff)
        base = s_grid[:, None] + f_vals
        lhs = dt * np.sum(base ** (-(1.0 + a)), axis=0)
        rhs = k_ab * (dt * np.sum(base ** (-(1.0 + b)), axis=0)) ** (a / b)
        ratios[r] = lhs / rhs
    return ratios
