"""Toy UNet denoiser. Every block attends to the global (text) condition; every
upblock additionally hosts one local cross-attention whose output projection is
zero-initialized, so an untrained local path leaves the network unchanged."""
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import DenoiserConfig
from .layers import CrossAttention, group_norm, sinusoidal_embedding


class ResBlock(nn.Module):
    def __init__(self, c_in, c_out, t_dim):
        super().__init__()
        self.norm1 = group_norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = group_norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.t_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Residual spatial cross-attention onto a token sequence."""

    def __init__(self, channels, context_dim, heads, zero_init=False):
        super().__init__()
        self.norm = group_norm(channels)
        self.attn = CrossAttention(channels, context_dim, heads)
        if zero_init:
            nn.init.zeros_(self.attn.to_out.weight)
            nn.init.zeros_(self.attn.to_out.bias)

    def forward(self, x, context):
        b, c, h, w = x.shape
        z = self.norm(x).flatten(2).transpose(1, 2)
        out = self.attn(z, context)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


class Denoiser(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        widths = [cfg.base_width * 2 ** min(i, 2) for i in range(cfg.depth)]
        t_dim = cfg.base_width * 4
        self.t_mlp = nn.Sequential(nn.Linear(cfg.base_width, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, widths[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        prev = widths[0]
        for w in widths:
            self.down_res.append(ResBlock(prev, w, t_dim))
            self.down_attn.append(AttnBlock(w, cfg.d_model, cfg.heads))
            prev = w
        self.mid_res = ResBlock(prev, prev, t_dim)
        self.mid_attn = AttnBlock(prev, cfg.d_model, cfg.heads)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.local_attn = nn.ModuleList()
        for w in reversed(widths):
            self.up_res.append(ResBlock(prev + w, w, t_dim))
            self.up_attn.append(AttnBlock(w, cfg.d_model, cfg.heads))
            self.local_attn.append(AttnBlock(w, cfg.d_model, cfg.heads, zero_init=True))
            prev = w
        self.norm_out = group_norm(prev)
        self.conv_out = nn.Conv2d(prev, cfg.latent_channels, 3, padding=1)

    def forward(self, x, t, text_ctx, local_ctx=None):
        """Noise prediction; ``local_ctx=None`` runs the text-only network."""
        temb = self.t_mlp(sinusoidal_embedding(t, self.cfg.base_width).to(x.dtype))
        h = self.conv_in(x)
        skips = []
        n = len(self.down_res)
        for i, (res, attn) in enumerate(zip(self.down_res, self.down_attn)):
            h = attn(res(h, temb), text_ctx)
            skips.append(h)
            if i < n - 1:
                h = F.avg_pool2d(h, 2)
        h = self.mid_attn(self.mid_res(h, temb), text_ctx)
        for res, attn, local in zip(self.up_res, self.up_attn, self.local_attn):
            skip = skips.pop()
            if h.shape[-2:] != skip.shape[-2:]:
                h = F.interpolate(h, size=skip.shape[-2:], mode="nearest")
            h = attn(res(torch.cat([h, skip], dim=1), temb), text_ctx)
            if local_ctx is not None:
                h = local(h, local_ctx)
        return self.conv_out(F.silu(self.norm_out(h)))

    def local_out_projections(self):
        return [blk.attn.to_out for blk in self.local_attn]
