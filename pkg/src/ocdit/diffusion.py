"""Diffusion-process numerics: preconditioning, losses, noise schedules, sampling.

Everything here is independent of the concrete denoiser network. A denoiser
is any callable ``denoise_fn(x, sigma, cond) -> denoised`` operating on
latent tensors; the stochastic sampler, losses and conversion helpers only
rely on that contract.

Conventions: ``sigma`` may be a python float or a per-sample tensor of shape
``(B,)``; latents are ``(B, ...)`` tensors and sigma broadcasts over the
trailing dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn


@dataclass
class DiffusionConfig:
    """Noise-level range, discretization and sampler parameters."""

    sigma_min: float = 0.002
    sigma_max: float = 80.0
    sigma_data: float = 0.5
    rho: float = 15.0
    num_steps: int = 18
    churn: float = 0.0            # S_churn analogue; 0 = deterministic ODE
    churn_min: float = 0.0        # noise-injection band lower edge
    churn_max: float = field(default=float("inf"))
    noise_inflation: float = 1.0  # S_noise analogue, >= 1

    def validate(self) -> None:
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.rho < 1:
            raise ValueError(f"rho must be >= 1, got {self.rho}")
        if self.num_steps < 2:
            raise ValueError(f"num_steps must be >= 2, got {self.num_steps}")
        if self.churn < 0:
            raise ValueError(f"churn must be >= 0, got {self.churn}")
        if self.noise_inflation < 1:
            raise ValueError(f"noise_inflation must be >= 1, got {self.noise_inflation}")


@dataclass
class PreconditionCoeffs:
    """sigma-dependent scalings of the denoiser input/output/skip path."""

    c_skip: torch.Tensor
    c_in: torch.Tensor
    c_out: torch.Tensor
    c_noise: torch.Tensor


def sigma_schedule(cfg: DiffusionConfig, i: int) -> float:
    """Noise level of sampling step ``i`` (0 = sigma_max, N-1 = sigma_min).

    Power-law interpolation in sigma^(1/rho); larger rho concentrates steps
    at low noise levels.
    """
    n = cfg.num_steps
    if not 0 <= i <= n - 1:
        raise IndexError(f"step index {i} out of range [0, {n - 1}]")
    a = cfg.sigma_max ** (1.0 / cfg.rho)
    b = cfg.sigma_min ** (1.0 / cfg.rho)
    return float((a + i / (n - 1) * (b - a)) ** cfg.rho)


def sigma_schedule_all(cfg: DiffusionConfig) -> torch.Tensor:
    """All N sampling noise levels, strictly decreasing."""
    return torch.tensor([sigma_schedule(cfg, i) for i in range(cfg.num_steps)], dtype=torch.float64)


def _as_sigma(sigma, like: torch.Tensor | None = None) -> torch.Tensor:
    t = torch.as_tensor(sigma, dtype=torch.float32 if like is None else like.dtype)
    if like is not None:
        t = t.to(like.device)
    return t


def _bcast(sigma: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """View a per-sample sigma (B,) or scalar so it broadcasts over x."""
    if sigma.ndim == 0:
        return sigma
    return sigma.view(sigma.shape[0], *([1] * (x.ndim - 1)))


def precondition(sigma, sigma_data: float) -> PreconditionCoeffs:
    """Input/output/skip/noise scalings at noise level sigma.

    c_in normalizes the variance of y + n to one, c_skip/c_out mix the
    network output with the noisy input so the effective training target
    of the inner network has unit variance, and c_noise = ln(sigma)/4 is
    the conditioning value the network sees.
    """
    s = _as_sigma(sigma)
    sd2 = sigma_data * sigma_data
    s2 = s * s
    denom = torch.sqrt(s2 + sd2)
    c_in = 1.0 / denom
    c_skip = sd2 / (s2 + sd2)
    c_out = s * sigma_data / denom
    # ln(0) guard: c_out = 0 multiplies the network branch away at sigma = 0,
    # but the network still gets called with a finite conditioning value.
    c_noise = torch.log(torch.clamp(s, min=1e-20)) / 4.0
    return PreconditionCoeffs(c_skip=c_skip, c_in=c_in, c_out=c_out, c_noise=c_noise)


def denoise(denoiser_net, x: torch.Tensor, sigma, cond=None, *, sigma_data: float) -> torch.Tensor:
    """Preconditioned denoiser D(x; sigma, cond) around the raw network.

    ``denoiser_net(x_scaled, sigma, cond)`` is the inner network F; with a
    zero-output F this returns c_skip * x, which is exactly the optimal
    denoiser for zero-mean Gaussian data of std sigma_data.
    """
    s = _as_sigma(sigma, like=x)
    c = precondition(s, sigma_data)
    f_out = denoiser_net(_bcast(c.c_in, x) * x, s, cond)
    if f_out.shape != x.shape:
        raise ValueError(f"denoiser output shape {tuple(f_out.shape)} != input {tuple(x.shape)}")
    return _bcast(c.c_skip, x) * x + _bcast(c.c_out, x) * f_out


def score_from_denoised(d: torch.Tensor, x: torch.Tensor, sigma) -> torch.Tensor:
    """Score field (d - x) / sigma^2 of the smoothed density at level sigma."""
    s = _as_sigma(sigma, like=x)
    if torch.any(s <= 0):
        raise ValueError("score is undefined at sigma = 0; stop at sigma_min")
    return (d - x) / _bcast(s * s, x)


def ode_derivative(d: torch.Tensor, x: torch.Tensor, sigma) -> torch.Tensor:
    """dx/dsigma = -(d - x) / sigma of the probability-flow ODE."""
    s = _as_sigma(sigma, like=x)
    if torch.any(s <= 0):
        raise ValueError("ODE derivative is undefined at sigma = 0; stop at sigma_min")
    return -(d - x) / _bcast(s, x)


def sample_training_sigma(rng: torch.Generator, cfg: DiffusionConfig, n: int = 1) -> torch.Tensor:
    """Draw n noise levels with ln(sigma) uniform on [ln sigma_min, ln sigma_max]."""
    lo, hi = math.log(cfg.sigma_min), math.log(cfg.sigma_max)
    u = torch.rand(n, generator=rng)
    return torch.exp(lo + (hi - lo) * u)


def denoising_loss(d: torch.Tensor, y: torch.Tensor, sigma, *, sigma_data: float) -> torch.Tensor:
    """Weighted reconstruction loss lambda(sigma) * mse(d, y), per sample.

    lambda = 1/c_out^2 equalizes the expected loss across noise levels at
    initialization. The mse is a mean over all non-batch elements, keeping
    the weighting resolution-independent. Returns shape (B,) for batched
    sigma, scalar otherwise.
    """
    if d.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(d.shape)} vs {tuple(y.shape)}")
    s = _as_sigma(sigma, like=d)
    c_out = precondition(s, sigma_data).c_out
    sq = (d - y) ** 2
    if s.ndim == 0:
        return sq.mean() / (c_out * c_out)
    mse = sq.reshape(sq.shape[0], -1).mean(dim=1)
    return mse / (c_out * c_out)


def uncertainty_weighted_loss(weighted_loss: torch.Tensor, u_sigma: torch.Tensor) -> torch.Tensor:
    """Per-noise-level uncertainty weighting: loss * e^{-u} + u.

    ``weighted_loss`` already carries the lambda(sigma) factor. Minimized
    over u at u = ln(weighted_loss), so a well-trained u tracks the log of
    the per-level loss.
    """
    return weighted_loss * torch.exp(-u_sigma) + u_sigma


class MPFourier(nn.Module):
    """Magnitude-preserving Fourier features of a scalar input.

    Uses cos/sin pairs with fixed random frequencies and phases, scaled by
    sqrt(2) so the feature vector has norm exactly sqrt(dim) for every input.
    """

    def __init__(self, dim: int, bandwidth: float = 1.0, seed: int = 0):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("feature dim must be even (cos/sin pairs)")
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("freqs", 2 * math.pi * bandwidth * torch.randn(dim // 2, generator=g))
        self.register_buffer("phases", 2 * math.pi * torch.rand(dim // 2, generator=g))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B,) -> (B, dim)
        ang = x[:, None] * self.freqs[None, :] + self.phases[None, :]
        return math.sqrt(2.0) * torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)


class UncertaintyHead(nn.Module):
    """Scalar u(sigma): a small map from the noise embedding to one real.

    Zero-initialized output layer, so u = 0 at initialization and the
    uncertainty-weighted loss starts as the plain weighted loss.
    """

    def __init__(self, fourier_dim: int = 64, hidden: int = 64):
        super().__init__()
        self.fourier = MPFourier(fourier_dim)
        self.net = nn.Sequential(nn.Linear(fourier_dim, hidden), nn.SiLU(), nn.Linear(hidden, 1))
        nn.init.zeros_(self.net[-1].weight)
        nn.init.zeros_(self.net[-1].bias)

    def forward(self, sigma: torch.Tensor) -> torch.Tensor:
        # sigma: (B,) positive -> (B,)
        c_noise = torch.log(torch.clamp(sigma, min=1e-20)) / 4.0
        return self.net(self.fourier(c_noise)).squeeze(-1)


def stochastic_sample(
    denoise_fn,
    cond,
    cfg: DiffusionConfig,
    rng: torch.Generator,
    x_init: torch.Tensor | None = None,
    shape: tuple[int, ...] | None = None,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Run the stochastic sampler from sigma_max down to sigma_min.

    Each step optionally raises the noise level (churn > 0), then integrates
    the probability-flow ODE with a two-stage second-order Runge-Kutta
    correction (second derivative evaluation at 3/4 of the interval, the
    point that minimizes the generic RK2 error bound). The process stops at
    sigma_min, where the final state stands in for x_0.

    Returns the full trajectory stacked as (num_steps, *shape); index 0 is
    the initial draw at sigma_max, index -1 the final state.
    """
    cfg.validate()
    if x_init is None:
        if shape is None:
            raise ValueError("either x_init or shape is required")
        x = cfg.sigma_max * torch.randn(shape, generator=rng, dtype=dtype)
    else:
        x = x_init.clone()

    n = cfg.num_steps
    sigmas = [sigma_schedule(cfg, i) for i in range(n)]
    gamma_cap = math.sqrt(2.0) - 1.0
    trajectory = [x.clone()]

    for i in range(n - 1):
        s_cur, s_next = sigmas[i], sigmas[i + 1]
        gamma = 0.0
        if cfg.churn > 0 and cfg.churn_min <= s_cur <= cfg.churn_max:
            gamma = min(cfg.churn / n, gamma_cap)
        s_hat = s_cur * (1 + gamma)
        if gamma > 0:
            eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
            x = x + math.sqrt(s_hat * s_hat - s_cur * s_cur) * cfg.noise_inflation * eps

        h = s_next - s_hat
        d_cur = (x - denoise_fn(x, s_hat, cond)) / s_hat
        s_mid = s_hat + 0.75 * h
        x_mid = x + 0.75 * h * d_cur
        # s_mid > 0 because we stop at sigma_min instead of integrating to 0.
        d_mid = (x_mid - denoise_fn(x_mid, s_mid, cond)) / s_mid
        x = x + h * (d_cur + 2.0 * d_mid) / 3.0

        if not torch.isfinite(x).all():
            raise FloatingPointError(
                f"non-finite latent at step {i} (sigma {s_cur:.4g} -> {s_next:.4g})"
            )
        trajectory.append(x.clone())

    return torch.stack(trajectory)


def gaussian_oracle_denoiser(sigma_data: float):
    """Analytic optimal denoiser for zero-mean Gaussian data, for testing."""

    def fn(x: torch.Tensor, sigma, cond=None) -> torch.Tensor:
        s = _as_sigma(sigma, like=x)
        sd2 = sigma_data * sigma_data
        return _bcast(sd2 / (s * s + sd2), x) * x

    return fn
