"""DDPM forward process, classifier-free guidance and a deterministic DDIM sampler."""
from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class NoiseSchedule:
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor

    @property
    def T(self):
        return self.betas.shape[0]

    @classmethod
    def from_betas(cls, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if betas.dim() != 1 or not ((betas > 0) & (betas < 1)).all():
            raise ValueError("betas must be a vector with entries in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas, alphas, torch.cumprod(alphas, dim=0))

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=2e-2):
        return cls.from_betas(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))


def _coef(values, t, like):
    v = values[t].to(like.dtype)
    if v.dim() == 0:
        return v
    return v.view(-1, *([1] * (like.dim() - 1)))


def forward_diffuse(schedule, x0, t, eps):
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; ``t`` is an int or a [B] tensor."""
    t = torch.as_tensor(t, dtype=torch.long)
    if (t < 0).any() or (t >= schedule.T).any():
        raise IndexError(f"timestep out of range [0, {schedule.T})")
    ab = schedule.alpha_bars
    return _coef(ab.sqrt(), t, x0) * x0 + _coef((1 - ab).sqrt(), t, x0) * eps


def cfg_combine(eps_uncond, eps_cond, scale):
    # (1-s)u + s c rather than u + s(c-u): exact at s=0 and s=1
    return (1 - scale) * eps_uncond + scale * eps_cond


def ddim_timesteps(T, steps):
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if steps > T:
        raise ValueError(f"steps={steps} exceeds T={T}")
    return torch.linspace(T - 1, 0, steps, dtype=torch.float64).round().long()


def ddim_sample(eps_fn, x_T, schedule, steps):
    """Deterministic DDIM (eta = 0) from ``x_T`` at t = T-1 down to a clean estimate.

    ``eps_fn(x_t, t_int)`` returns the noise prediction.
    """
    ts = ddim_timesteps(schedule.T, steps)
    ab = schedule.alpha_bars
    x = x_T
    for i, t in enumerate(ts.tolist()):
        ab_t = ab[t]
        ab_prev = ab[ts[i + 1]] if i + 1 < len(ts) else torch.tensor(1.0, dtype=torch.float64)
        eps = eps_fn(x, t)
        x0 = (x.double() - (1 - ab_t).sqrt() * eps.double()) / ab_t.sqrt()
        x = (ab_prev.sqrt() * x0 + (1 - ab_prev).sqrt() * eps.double()).to(x_T.dtype)
    return x


@torch.no_grad()
def sample(model, c_g, c_l, steps=50, guidance=7.0, seed=0, x_T=None):
    """Guided generation: both passes run per step, the unconditional one on the
    learned null conditions. Returns images in [0, 1]."""
    if steps <= 0:
        raise ValueError("steps must be >= 1")
    b = c_g.tokens.shape[0]
    if x_T is None:
        g = torch.Generator().manual_seed(seed)
        x_T = torch.randn(b, *model.latent_shape, generator=g)
    null_g, null_l = model.null_conditions(b)
    use_local = c_l is not None

    def eps_fn(x, t):
        tt = torch.full((b,), t, dtype=torch.long)
        if guidance == 1.0:
            return model.predict_noise(x, tt, c_g, c_l)
        xx = torch.cat([x, x])
        cg = type(c_g)(torch.cat([null_g.tokens, c_g.tokens]), torch.cat([null_g.fused_index, c_g.fused_index]))
        cl = type(c_l)(torch.cat([null_l.tokens, c_l.tokens])) if use_local else None
        eps = model.predict_noise(xx, torch.cat([tt, tt]), cg, cl)
        return cfg_combine(eps[:b], eps[b:], guidance)

    z = ddim_sample(eps_fn, x_T, model.schedule, steps)
    return model.codec.decode(z).clamp(0, 1)
