import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeError

ACTIVATIONS = {
    "gelu": nn.GELU,
    "silu": nn.SiLU,
    "relu": nn.ReLU,
    "identity": nn.Identity,
}


class TwoLayerMLP(nn.Module):
    """d_in -> d_hidden -> d_out with one nonlinearity in between, applied row-wise."""

    def __init__(self, d_in, d_out, d_hidden=None, activation="gelu"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        d_hidden = d_hidden or d_out
        self.d_in = d_in
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.act = ACTIVATIONS[activation]()
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"MLP expects last dim {self.d_in}, got {tuple(x.shape)}")
        return self.fc2(self.act(self.fc1(x)))


def attention(q, k, v, return_weights=False):
    """Scaled dot-product attention over the last two dims."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    weights = torch.softmax(torch.matmul(q, k.transpose(-1, -2)) * scale, dim=-1)
    out = torch.matmul(weights, v)
    return (out, weights) if return_weights else out


class CrossAttention(nn.Module):
    """Multi-head cross-attention; ``to_out`` maps back to the query width."""

    def __init__(self, query_dim, context_dim, heads=4, dim_head=None):
        super().__init__()
        dim_head = dim_head or max(query_dim // heads, 1)
        inner = dim_head * heads
        self.heads = heads
        self.to_q = nn.Linear(query_dim, inner, bias=False)
        self.to_k = nn.Linear(context_dim, inner, bias=False)
        self.to_v = nn.Linear(context_dim, inner, bias=False)
        self.to_out = nn.Linear(inner, query_dim)

    def forward(self, x, context):
        b, m, _ = x.shape
        n = context.shape[1]
        h = self.heads
        q = self.to_q(x).view(b, m, h, -1).transpose(1, 2)
        k = self.to_k(context).view(b, n, h, -1).transpose(1, 2)
        v = self.to_v(context).view(b, n, h, -1).transpose(1, 2)
        out = attention(q, k, v).transpose(1, 2).reshape(b, m, -1)
        return self.to_out(out)


def sinusoidal_embedding(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([args.sin(), args.cos()], dim=-1)


def group_norm(channels, groups=8):
    g = math.gcd(channels, groups)
    return nn.GroupNorm(g, channels)


def resize_square(images, size):
    """Bilinear (antialiased) resize of a [B,C,H,W] image batch to size x size.

    The antialias kernel can overshoot slightly, so the result is clamped to [0, 1].
    """
    if images.shape[-2:] == (size, size):
        return images
    out = F.interpolate(images, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return out.clamp(0.0, 1.0)
