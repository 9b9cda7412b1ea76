"""Dual-level ID injection: the global condition (prompt with the class word
replaced by a fused ID token) and the local condition (fused patch tokens),
plus the cross-attention operator both paths use."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ShapeError
from .layers import attention


@dataclass
class GlobalCondition:
    tokens: torch.Tensor  # [B, L, d]
    fused_index: torch.Tensor  # [B] position of the fused class token


@dataclass
class LocalCondition:
    tokens: torch.Tensor  # [B, n_patches, d]


@dataclass
class AttentionWeights:
    w_q: torch.Tensor
    w_k: torch.Tensor
    w_v: torch.Tensor

    def __post_init__(self):
        d = self.w_q.shape[1]
        if self.w_k.shape[1] != d or self.w_v.shape[1] != d:
            raise ShapeError("W_q, W_k, W_v must share the attention width")


def pool_span(text_tokens, span):
    """Mean of the class-word token embeddings (one vector even for multi-token words)."""
    start, end = span
    return text_tokens[..., start:end, :].mean(dim=-2)


def fuse_class_token(text_class, detail_class, recon_class, fuser):
    d = text_class.shape[-1]
    if detail_class.shape[-1] != d or recon_class.shape[-1] != d:
        raise ShapeError(
            f"class token widths differ: {text_class.shape[-1]}, {detail_class.shape[-1]}, {recon_class.shape[-1]}"
        )
    return fuser(torch.cat([text_class, detail_class, recon_class], dim=-1))


def build_global_condition(text_tokens, span, fused):
    """Replace ``text_tokens[start:end]`` (a ``[L, d]`` matrix) with the single ``fused`` vector."""
    start, end = span
    seq_len = text_tokens.shape[-2]
    if not 0 <= start < end <= seq_len:
        raise IndexError(f"class-word span {span} out of bounds for {seq_len} tokens")
    if fused.shape[-1] != text_tokens.shape[-1]:
        raise ShapeError("fused token width differs from text width")
    return torch.cat([text_tokens[:start], fused.unsqueeze(0), text_tokens[end:]], dim=0)


def build_global_condition_batch(text_tokens, spans, fused, pad_embedding):
    """Batched splice; every row is padded back to the input length with ``pad_embedding``."""
    b, seq_len, d = text_tokens.shape
    rows = []
    for i, span in enumerate(spans):
        row = build_global_condition(text_tokens[i], span, fused[i])
        if row.shape[0] < seq_len:
            pad = pad_embedding.to(row).expand(seq_len - row.shape[0], d)
            row = torch.cat([row, pad], dim=0)
        rows.append(row)
    index = torch.tensor([s for s, _ in spans], dtype=torch.long)
    return GlobalCondition(torch.stack(rows), index)


def _grid_of(n, grid):
    if grid is not None:
        if grid[0] * grid[1] != n:
            raise ShapeError(f"grid {grid} does not hold {n} patches")
        return tuple(grid)
    side = math.isqrt(n)
    if side * side != n:
        raise ShapeError(f"cannot infer a square patch grid for {n} patches")
    return side, side


def resample_patches(patches, src_grid, dst_grid):
    """Bilinearly resample ``[..., n_src, d]`` patch tokens from one grid onto another."""
    lead = patches.shape[:-2]
    d = patches.shape[-1]
    x = patches.reshape(-1, src_grid[0], src_grid[1], d).permute(0, 3, 1, 2)
    x = F.interpolate(x, size=dst_grid, mode="bilinear", align_corners=False)
    return x.permute(0, 2, 3, 1).reshape(*lead, dst_grid[0] * dst_grid[1], d)


def build_local_condition(detail_patches, recon_patches, mlp_detail, mlp_recon, detail_grid=None, recon_grid=None):
    """Sum of row-wise MLPs over both patch sets, on the detail encoder's grid.

    ``recon_patches`` may be None (detail-only extraction).
    """
    out = mlp_detail(detail_patches)
    if recon_patches is None:
        return out
    if detail_patches.shape[-1] != recon_patches.shape[-1]:
        raise ShapeError("patch token widths differ")
    n_det, n_rec = detail_patches.shape[-2], recon_patches.shape[-2]
    if n_det != n_rec or (recon_grid is not None and detail_grid is not None and tuple(recon_grid) != tuple(detail_grid)):
        src = _grid_of(n_rec, recon_grid)
        dst = _grid_of(n_det, detail_grid)
        recon_patches = resample_patches(recon_patches, src, dst)
    return out + mlp_recon(recon_patches)


def cross_attention(z, c, w: AttentionWeights, return_weights=False):
    """softmax(Z W_q (c W_k)^T / sqrt(d_attn)) c W_v for ``z`` [m, d_in] and ``c`` [n, d_in]."""
    if z.shape[-1] != w.w_q.shape[0] or c.shape[-1] != w.w_k.shape[0] or c.shape[-1] != w.w_v.shape[0]:
        raise ShapeError("input widths do not match the projection matrices")
    return attention(z @ w.w_q, c @ w.w_k, c @ w.w_v, return_weights=return_weights)
