"""Closed-form kernels and drift fields of the chemotaxis model.

All functions are pure and vectorized: `x` is an array of shape (..., 2)
and `t` a scalar or an array broadcastable against the leading dimensions.
Exponential arguments are clamped at 700 before exponentiation, so deep
Gaussian tails flush to zero instead of raising overflow warnings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad

from .constants import c0_const

EXP_CLAMP = 700.0


@dataclass(frozen=True)
class KernelParams:
    """Physical and regularization parameters of one model instance.

    theta: ratio between the diffusion time scales (> 0)
    lam:   death rate of the chemo-attractant (>= 0)
    chi:   chemotactic sensitivity (> 0)
    epsilon: kernel smoothing parameter (>= 0; 0 means unsmoothed)
    p:     integrability exponent of the initial concentration (> 2)
    """

    theta: float
    lam: float = 0.0
    chi: float = 1.0
    epsilon: float = 0.0
    p: float = 4.0

    def __post_init__(self) -> None:
        if self.theta <= 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.chi < 0:
            raise ValueError(f"chi must be >= 0, got {self.chi}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.p <= 2:
            raise ValueError(f"p must be > 2, got {self.p}")


def _sqnorm(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 2:
        raise ValueError(f"expected trailing dimension 2, got shape {x.shape}")
    return np.einsum("...i,...i->...", x, x)


def _clamped_exp(arg: np.ndarray) -> np.ndarray:
    return np.exp(-np.minimum(arg, EXP_CLAMP))


def heat_kernel(t, x, params: KernelParams):
    """Gaussian heat kernel with diffusivity 2/theta: (theta/4 pi t) e^(-theta|x|^2/4t)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("heat_kernel requires t > 0")
    arg = params.theta * _sqnorm(x) / (4.0 * t)
    return params.theta / (4.0 * math.pi * t) * _clamped_exp(arg)


def chemo_kernel(t, x, params: KernelParams):
    """Chemo-attractant kernel (1/theta) e^(-lam t/theta) g_t(x)."""
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("chemo_kernel requires t > 0")
    decay = np.exp(-params.lam * t / params.theta)
    return decay / params.theta * heat_kernel(t, x, params)


def chemo_kernel_grad(t, x, params: KernelParams):
    """Gradient of the chemo-attractant kernel.

    Exactly -(theta / 8 pi t^2) e^(-lam t/theta) e^(-theta|x|^2/4t) x; odd
    in x and undefined at t <= 0 (the smoothed variant owns the t = 0
    extension).
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("chemo_kernel_grad requires t > 0")
    x = np.asarray(x, dtype=float)
    arg = params.theta * _sqnorm(x) / (4.0 * t)
    coef = (-params.theta / (8.0 * math.pi * t ** 2)
            * np.exp(-params.lam * t / params.theta) * _clamped_exp(arg))
    return coef[..., None] * x


def smoothed_grad(t, x, params: KernelParams):
    """Smoothed interaction kernel t^2/(t+eps)^2 * grad of the chemo kernel.

    Equals -(theta / 8 pi (t+eps)^2) e^(-lam t/theta) e^(-theta|x|^2/4t) x.
    At t = 0 (with eps > 0) the continuous extension is the zero vector:
    the Gaussian factor kills every x != 0 and the x factor kills x = 0.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("smoothed_grad requires t >= 0")
    if params.epsilon == 0 and np.any(t == 0):
        raise ValueError("smoothed_grad at t = 0 requires epsilon > 0")
    x = np.asarray(x, dtype=float)
    sq = _sqnorm(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        arg = params.theta * sq / (4.0 * t)
    gauss = np.where(t > 0, _clamped_exp(np.where(t > 0, arg, 0.0)), 0.0)
    coef = (-params.theta / (8.0 * math.pi * (t + params.epsilon) ** 2)
            * np.exp(-params.lam * t / params.theta) * gauss)
    return coef[..., None] * x


def grad_envelope(t, x, alpha: float, params: KernelParams):
    """Pointwise envelope of |smoothed_grad|.

    sqrt(theta) C0(4 alpha/theta) / (4 pi (t + eps + alpha |x|^2)^(3/2)),
    valid for every t >= 0 and every alpha > 0; with eps = 0 it also
    dominates the unsmoothed |chemo_kernel_grad|.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise ValueError("grad_envelope requires t >= 0")
    c0 = c0_const(4.0 * alpha / params.theta)
    base = t + params.epsilon + alpha * _sqnorm(x)
    with np.errstate(divide="ignore"):
        return math.sqrt(params.theta) * c0 / (4.0 * math.pi * base ** 1.5)


@dataclass(frozen=True)
class SourceSpec:
    """Initial chemo-attractant as a finite Gaussian mixture.

    Each component is (weight, center, variance) with weight > 0 and
    variance > 0 (isotropic, per-coordinate). An empty tuple means the
    source is identically zero. Mixtures keep the background field and its
    gradient in closed form.
    """

    components: tuple[tuple[float, tuple[float, float], float], ...] = ()

    def __post_init__(self) -> None:
        for w, center, var in self.components:
            if w <= 0:
                raise ValueError(f"component weight must be > 0, got {w}")
            if var <= 0:
                raise ValueError(f"component variance must be > 0, got {var}")
            if len(center) != 2:
                raise ValueError(f"component center must be a 2-vector, got {center}")

    @property
    def is_zero(self) -> bool:
        return not self.components

    def density(self, x) -> np.ndarray:
        """The mixture density itself (used by quadrature oracles)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for w, center, var in self.components:
            sq = _sqnorm(x - np.asarray(center))
            out = out + w / (2.0 * math.pi * var) * _clamped_exp(sq / (2.0 * var))
        return out

    def lp_norm(self, p: float, n_quad: int = 400) -> float:
        """||c0||_Lp by tensor Gauss-Legendre quadrature over a covering box."""
        if self.is_zero:
            return 0.0
        if p < 1:
            raise ValueError(f"p must be >= 1, got {p}")
        half = max(abs(c[0]) + abs(c[1]) + 12.0 * math.sqrt(v)
                   for _, c, v in self.components)
        nodes, weights = np.polynomial.legendre.leggauss(n_quad)
        u = half * nodes
        w2 = np.outer(weights, weights) * half * half
        grid = np.stack(np.meshgrid(u, u, indexing="ij"), axis=-1)
        return float(np.sum(self.density(grid) ** p * w2)) ** (1.0 / p)


def background_field(t, x, source: SourceSpec, params: KernelParams):
    """Background concentration and its gradient at (t, x).

    For a Gaussian-mixture source the heat convolution is again a mixture
    with per-component variance var + 2t/theta, times the death-rate decay;
    the gradient is exact. Returns (b, grad_b) with shapes (...,) and
    (..., 2); an empty source yields zeros.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise ValueError("background_field requires t > 0")
    x = np.asarray(x, dtype=float)
    b = np.zeros(np.broadcast_shapes(t.shape, x.shape[:-1]))
    grad = np.zeros(np.broadcast_shapes(t.shape, x.shape[:-1]) + (2,))
    if source.is_zero:
        return b, grad
    decay = np.exp(-params.lam * t / params.theta)
    for w, center, var in source.components:
        v_t = var + 2.0 * t / params.theta
        d = x - np.asarray(center)
        dens = w / (2.0 * math.pi * v_t) * _clamped_exp(_sqnorm(d) / (2.0 * v_t))
        b = b + decay * dens
        grad = grad + (-(decay * dens / v_t))[..., None] * d
    return b, grad


def heat_grad_lp_norm(t: float, q: float, params: KernelParams) -> float:
    """||grad g_t||_Lq by radial quadrature (the gradient field is radial)."""
    if t <= 0 or q < 1:
        raise ValueError("require t > 0 and q >= 1")
    th = params.theta

    def profile(r: float) -> float:
        mag = th / (4.0 * math.pi * t) * (th * r / (2.0 * t)) \
            * math.exp(-min(th * r * r / (4.0 * t), EXP_CLAMP))
        return 2.0 * math.pi * r * mag ** q

    upper = 30.0 * math.sqrt(t / th)
    val, _ = quad(profile, 0.0, upper, limit=200)
    return val ** (1.0 / q)
