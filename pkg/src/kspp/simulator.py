"""Euler-Maruyama integration of the smoothed N-particle system.

The drift on particle i at grid time t_m is the discrete time convolution

    (1/(N-1)) * sum_{j != i} sum_{l < m} H_(t_m - t_l)(X^i_m - X^j_l) * dt

over the full stored history (left-endpoint rule in the history variable;
the l = m endpoint is excluded and would contribute zero anyway, since the
smoothed kernel vanishes there). Noise and initial positions come from
counter-based Philox streams keyed by (seed, replica, particle), so runs
are bit-reproducible, per-replica prefixes are stable when the replica
count grows, and streams can be permuted or reused across configurations
(the epsilon-refinement study relies on reusing one noise array).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from scipy.integrate import quad

from .kernels import EXP_CLAMP, KernelParams, SourceSpec, background_field

_VALID_INIT = ("point", "gaussian", "uniform_disk", "mirrored_pair")
_VALID_NOISE = ("standard", "zero", "mirrored")
RNG_SCHEME = "philox128/init0-noise1-v1"


@dataclass(frozen=True)
class InitSpec:
    """Initial-law specification.

    point:          all particles at `center`
    gaussian:       iid center + sigma * N(0, I) per particle
    uniform_disk:   iid uniform on the disk of radius `radius` around `center`
    mirrored_pair:  N = 2, particle 0 at `center`, particle 1 at -`center`
    """

    kind: str
    center: tuple[float, float] = (0.0, 0.0)
    sigma: float = 1.0
    radius: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in _VALID_INIT:
            raise ValueError(f"unknown init kind {self.kind!r}, "
                             f"expected one of {_VALID_INIT}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.radius <= 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class SimConfig:
    params: KernelParams
    source: SourceSpec = SourceSpec()
    n_particles: int = 2
    dt: float = 1e-2
    n_steps: int = 100
    n_replicas: int = 1
    seed: int = 0
    init: InitSpec = InitSpec("point")
    history_cutoff: float | None = None
    noise_mode: str = "standard"

    def __post_init__(self) -> None:
        if self.n_particles < 2:
            raise ValueError(f"n_particles must be >= 2, got {self.n_particles}")
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.n_replicas < 1:
            raise ValueError(f"n_replicas must be >= 1, got {self.n_replicas}")
        if self.noise_mode not in _VALID_NOISE:
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}, "
                             f"expected one of {_VALID_NOISE}")
        if self.noise_mode == "mirrored" and self.n_particles != 2:
            raise ValueError("mirrored noise requires exactly 2 particles")
        if self.init.kind == "mirrored_pair" and self.n_particles != 2:
            raise ValueError("mirrored_pair init requires exactly 2 particles")
        if self.history_cutoff is not None and self.history_cutoff <= 0:
            raise ValueError("history_cutoff must be positive when set")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


class BlowupError(RuntimeError):
    """A particle position became non-finite during integration."""

    def __init__(self, replica: int, step: int):
        super().__init__(f"non-finite position in replica {replica} at step {step}")
        self.replica = replica
        self.step = step


@dataclass
class TrajectoryEnsemble:
    """Simulated paths: replica x time-grid x particle x 2 positions.

    Rows after a blow-up stay NaN; affected replicas are listed in
    `blowups` as (replica, step) with `step` the first non-finite row.
    """

    positions: np.ndarray
    config: SimConfig
    rng_provenance: dict
    blowups: list[tuple[int, int]] = field(default_factory=list)
    drift_seconds: float = 0.0

    @property
    def n_replicas(self) -> int:
        return self.positions.shape[0]

    @property
    def n_steps(self) -> int:
        return self.positions.shape[1] - 1

    @property
    def n_particles(self) -> int:
        return self.positions.shape[2]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.positions.shape[1]) * self.config.dt


def _stream(seed: int, replica: int, particle: int, purpose: int) -> np.random.Generator:
    """Philox stream keyed by (seed, replica, particle, purpose)."""
    if not 0 <= replica < 2 ** 31 or not 0 <= particle < 2 ** 31:
        raise ValueError("replica/particle index out of the 31-bit key range")
    key = np.array([np.uint64(seed % 2 ** 64),
                    np.uint64((purpose << 62) | (replica << 31) | particle)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def draw_initial(config: SimConfig) -> np.ndarray:
    """Step-0 positions, shape (n_replicas, n_particles, 2)."""
    r_n, n = config.n_replicas, config.n_particles
    out = np.empty((r_n, n, 2))
    spec = config.init
    center = np.asarray(spec.center, dtype=float)
    for r in range(r_n):
        for i in range(n):
            if spec.kind == "point":
                out[r, i] = center
            elif spec.kind == "mirrored_pair":
                out[r, i] = center if i == 0 else -center
            else:
                gen = _stream(config.seed, r, i, purpose=0)
                if spec.kind == "gaussian":
                    out[r, i] = center + spec.sigma * gen.standard_normal(2)
                else:  # uniform_disk
                    rad = spec.radius * math.sqrt(gen.uniform())
                    ang = gen.uniform(0.0, 2.0 * math.pi)
                    out[r, i] = center + rad * np.array([math.cos(ang), math.sin(ang)])
    return out


def draw_noise(config: SimConfig) -> np.ndarray:
    """Brownian increments (var dt per coordinate), shape (R, n_steps, N, 2)."""
    r_n, m, n = config.n_replicas, config.n_steps, config.n_particles
    out = np.zeros((r_n, m, n, 2))
    if config.noise_mode == "zero" or m == 0:
        return out
    root_dt = math.sqrt(config.dt)
    for r in range(r_n):
        if config.noise_mode == "mirrored":
            w = root_dt * _stream(config.seed, r, 0, purpose=1).standard_normal((m, 2))
            out[r, :, 0] = w
            out[r, :, 1] = -w
        else:
            for i in range(n):
                gen = _stream(config.seed, r, i, purpose=1)
                out[r, :, i] = root_dt * gen.standard_normal((m, 2))
    return out


def init_ensemble(config: SimConfig, initial: np.ndarray | None = None) -> TrajectoryEnsemble:
    """Ensemble holding only the step-0 state."""
    positions = np.full((config.n_replicas, config.n_steps + 1,
                         config.n_particles, 2), np.nan)
    if initial is None:
        initial = draw_initial(config)
    initial = np.asarray(initial, dtype=float)
    if initial.shape != (config.n_replicas, config.n_particles, 2):
        raise ValueError(f"initial has shape {initial.shape}, expected "
                         f"{(config.n_replicas, config.n_particles, 2)}")
    positions[:, 0] = initial
    return TrajectoryEnsemble(positions=positions, config=config,
                              rng_provenance={"seed": config.seed,
                                              "scheme": RNG_SCHEME})


def _history_start(m: int, config: SimConfig) -> int:
    if config.history_cutoff is None:
        return 0
    keep = int(math.floor(config.history_cutoff / config.dt + 1e-9))
    return max(0, m - keep)


def _conv_weights(m: int, config: SimConfig) -> tuple[int, np.ndarray, np.ndarray]:
    """Time lags u = t_m - t_l and kernel weights for history rows l0 <= l < m."""
    p = config.params
    l0 = _history_start(m, config)
    lags = (m - np.arange(l0, m)) * config.dt
    w = (p.theta / (8.0 * math.pi * (lags + p.epsilon) ** 2)
         * np.exp(-p.lam * lags / p.theta))
    return l0, lags, w


def _mean_drift(x_now: np.ndarray, hist: np.ndarray, m: int,
                config: SimConfig) -> np.ndarray:
    """Per-particle interaction drift (1/(N-1)) sum_{j != i} D^{i,j}_m, shape (N, 2)."""
    n = x_now.shape[0]
    if m == 0:
        return np.zeros((n, 2))
    l0, lags, w = _conv_weights(m, config)
    block = hist[l0:m]                                   # (mm, N, 2)
    diff = x_now[:, None, None, :] - block[None, :, :, :]  # (i, l, j, 2)
    sq = np.einsum("iljc,iljc->ilj", diff, diff)
    arg = np.minimum(config.params.theta * sq / (4.0 * lags[None, :, None]),
                     EXP_CLAMP)
    coef = np.exp(-arg) * w[None, :, None]
    pair = np.einsum("ilj,iljc->ijc", coef, diff)        # sum over history
    total = pair.sum(axis=1) - pair[np.arange(n), np.arange(n)]
    return -config.dt * total / (n - 1)


def pair_drift_series(positions: np.ndarray, config: SimConfig,
                      pairs: Iterable[tuple[int, int]],
                      m_last: int | None = None) -> np.ndarray:
    """Discrete pair drifts D^{i,j}_m for every grid step, shape (m_last+1, npairs, 2).

    Uses exactly the simulator's convolution rule, so values agree with what
    the integrator fed into the paths (positions are the single source of
    truth; D is a pure function of them).
    """
    pairs = list(pairs)
    if m_last is None:
        m_last = positions.shape[0] - 1
    out = np.zeros((m_last + 1, len(pairs), 2))
    for m in range(1, m_last + 1):
        out[m] = pair_drift_at(positions, config, pairs, m)
    return out


def pair_drift_at(positions: np.ndarray, config: SimConfig,
                  pairs: Iterable[tuple[int, int]], m: int) -> np.ndarray:
    """Discrete pair drifts D^{i,j}_m at one grid step, shape (npairs, 2)."""
    pairs = list(pairs)
    if m == 0:
        return np.zeros((len(pairs), 2))
    i_idx = np.array([i for i, _ in pairs])
    j_idx = np.array([j for _, j in pairs])
    l0, lags, w = _conv_weights(m, config)
    diff = positions[m, i_idx][None, :, :] - positions[l0:m][:, j_idx, :]
    sq = np.einsum("lkc,lkc->lk", diff, diff)
    arg = np.minimum(config.params.theta * sq / (4.0 * lags[:, None]), EXP_CLAMP)
    coef = np.exp(-arg) * w[:, None]
    return -config.dt * np.einsum("lk,lkc->kc", coef, diff)


def history_drift(ensemble: TrajectoryEnsemble, replica: int, i: int,
                  m: int) -> np.ndarray:
    """Interaction drift on particle i at step m: (1/(N-1)) sum_{j != i} D^{i,j}_m."""
    if m < 0 or m > ensemble.n_steps:
        raise ValueError(f"step {m} outside the grid")
    pos = ensemble.positions[replica]
    n = ensemble.n_particles
    pairs = [(i, j) for j in range(n) if j != i]
    return pair_drift_at(pos, ensemble.config, pairs, m).sum(axis=0) / (n - 1)


def _advance(pos: np.ndarray, d_w: np.ndarray, m: int, config: SimConfig,
             replica: int) -> float:
    """One Euler step for one replica; writes row m+1, returns drift seconds."""
    p = config.params
    x = pos[m]
    drift_time = 0.0
    if p.chi != 0.0:
        t0 = time.perf_counter()
        drift = _mean_drift(x, pos, m, config)
        if not config.source.is_zero:
            _, grad_b = background_field(m * config.dt + p.epsilon, x,
                                         config.source, p)
            drift = drift + grad_b
        drift_time = time.perf_counter() - t0
        # overflow here is the blow-up signal, detected explicitly below
        with np.errstate(over="ignore", invalid="ignore"):
            x_new = x + math.sqrt(2.0) * d_w + p.chi * drift * config.dt
    else:
        x_new = x + math.sqrt(2.0) * d_w
    if not np.all(np.isfinite(x_new)):
        raise BlowupError(replica, m + 1)
    pos[m + 1] = x_new
    return drift_time


def step(ensemble: TrajectoryEnsemble, m: int,
         noise: np.ndarray | None = None) -> TrajectoryEnsemble:
    """Advance every replica from step m to m+1 (in place).

    `noise` is the (R, N, 2) array of increments for this step; when None
    it is re-derived from the per-(replica, particle) streams, which costs
    one full stream regeneration (run() passes noise explicitly).
    """
    config = ensemble.config
    if not 0 <= m < config.n_steps:
        raise ValueError(f"step index {m} outside [0, {config.n_steps})")
    if config.params.chi != 0.0 and config.params.epsilon <= 0:
        raise ValueError("the smoothed system requires epsilon > 0")
    if noise is None:
        noise = draw_noise(config)[:, m]
    noise = np.asarray(noise, dtype=float)
    for r in range(ensemble.n_replicas):
        ensemble.drift_seconds += _advance(ensemble.positions[r], noise[r],
                                           m, config, r)
    return ensemble


def run(config: SimConfig, initial: np.ndarray | None = None,
        noise: np.ndarray | None = None,
        n_threads: int | None = None) -> TrajectoryEnsemble:
    """Integrate the full ensemble.

    `initial` (R, N, 2) and `noise` (R, n_steps, N, 2) override the stream
    draws when given (used by the permutation, mirror and epsilon-refinement
    studies). Replicas are independent; blow-ups abort only their replica
    and are recorded rather than raised.
    """
    if config.params.chi != 0.0 and config.params.epsilon <= 0:
        raise ValueError("the smoothed system requires epsilon > 0")
    ens = init_ensemble(config, initial=initial)
    if noise is None:
        noise = draw_noise(config)
    else:
        noise = np.asarray(noise, dtype=float)
        want = (config.n_replicas, config.n_steps, config.n_particles, 2)
        if noise.shape != want:
            raise ValueError(f"noise has shape {noise.shape}, expected {want}")

    def run_replica(r: int) -> tuple[int, tuple[int, int] | None, float]:
        pos = ens.positions[r]
        noise_r = noise[r]
        secs = 0.0
        for m in range(config.n_steps):
            try:
                secs += _advance(pos, noise_r[m], m, config, r)
            except BlowupError as exc:
                return r, (exc.replica, exc.step), secs
        return r, None, secs

    workers = _resolve_threads(n_threads)
    if workers > 1 and config.n_replicas > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_replica, range(config.n_replicas)))
    else:
        results = [run_replica(r) for r in range(config.n_replicas)]
    for _, blow, secs in results:
        ens.drift_seconds += secs
        if blow is not None:
            ens.blowups.append(blow)
    ens.blowups.sort()
    return ens


def _resolve_threads(n_threads: int | None) -> int:
    if n_threads is not None:
        return max(1, n_threads)
    env = os.environ.get("KSPP_THREADS", "")
    try:
        return max(1, int(env))
    except ValueError:
        return 1


def frozen_drift_oracle(displacement, t: float, params: KernelParams) -> np.ndarray:
    """Drift integral int_0^t H_u(R) du for a constant displacement R.

    For lam = 0, eps = 0 this is the closed form
    -R e^(-theta|R|^2 / 4t) / (2 pi |R|^2); otherwise the radial weight is
    integrated by adaptive quadrature to absolute tolerance 1e-8.
    """
    r = np.asarray(displacement, dtype=float)
    sq = float(r @ r)
    if sq == 0.0:
        raise ValueError("displacement must be nonzero")
    if t <= 0:
        raise ValueError(f"t must be > 0, got {t}")
    th, lam, eps = params.theta, params.lam, params.epsilon
    if lam == 0.0 and eps == 0.0:
        return -r * math.exp(-th * sq / (4.0 * t)) / (2.0 * math.pi * sq)

    def weight(u: float) -> float:
        if u == 0.0:
            return 0.0
        arg = th * sq / (4.0 * u)
        if arg > EXP_CLAMP:
            return 0.0
        return (th / (8.0 * math.pi * (u + eps) ** 2)
                * math.exp(-lam * u / th) * math.exp(-arg))

    total, _ = quad(weight, 0.0, t, epsabs=1e-8, limit=300)
    return -r * total
