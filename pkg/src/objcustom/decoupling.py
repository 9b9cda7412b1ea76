"""ID-aware decoupling: masked non-ID target feature, the two denoising branches,
the contrastive term and condition dropout."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NonFiniteLossError, ShapeError
from .injection import GlobalCondition, LocalCondition


class FeatureMask(nn.Module):
    """Trainable per-dimension mask, sigmoid(logits); logits start at 0 (mask 0.5)."""

    def __init__(self, d_feat):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(d_feat))

    def forward(self):
        return torch.sigmoid(self.logits)


def compute_masked_feature(f_tar, mask):
    logits = mask.logits if isinstance(mask, FeatureMask) else mask
    if f_tar.shape[-1] != logits.shape[-1]:
        raise ShapeError(f"target feature width {f_tar.shape[-1]} != mask width {logits.shape[-1]}")
    return f_tar * torch.sigmoid(logits)


def contrastive_loss(fused, masked, sign=1.0, eps=1e-12, form="abs"):
    """sign * cosine(fused, masked), averaged over the batch.

    ``form="abs"`` uses |cosine|, whose minimum is orthogonality rather than
    anti-alignment. Rows where either vector has norm below ``eps`` contribute 0
    (with a warning).
    """
    if form not in ("signed", "abs"):
        raise ValueError(f"unknown contrastive form {form!r}")
    if fused.shape != masked.shape:
        raise ShapeError(f"shape mismatch {tuple(fused.shape)} vs {tuple(masked.shape)}")
    na = fused.norm(dim=-1)
    nb = masked.norm(dim=-1)
    ok = (na >= eps) & (nb >= eps)
    if not ok.all():
        warnings.warn("degenerate vector in contrastive loss; contribution set to 0", RuntimeWarning)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    cos = torch.where(ok, (fused * masked).sum(-1) / denom, torch.zeros_like(na))
    if form == "abs":
        cos = cos.abs()
    return sign * cos.mean()


def apply_condition_dropout(c_g, c_l, u_g, u_l, p, null_g, null_l):
    """Replace each condition by its null tokens where its uniform draw is below ``p``.

    ``u_g``/``u_l`` are per-sample draws [B]; ``c_l`` may be None.
    """
    drop_g = torch.as_tensor(u_g) < p
    tokens = torch.where(drop_g.view(-1, 1, 1), null_g.tokens, c_g.tokens)
    out_g = GlobalCondition(tokens, c_g.fused_index)
    out_l = None
    if c_l is not None:
        drop_l = torch.as_tensor(u_l) < p
        out_l = LocalCondition(torch.where(drop_l.view(-1, 1, 1), null_l.tokens, c_l.tokens))
    return out_g, out_l


@dataclass
class LossReport:
    l_normal: torch.Tensor
    l_decouple: torch.Tensor
    l_contrast: torch.Tensor
    l_total: torch.Tensor

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in ("l_normal", "l_decouple", "l_contrast", "l_total")}


def branch_losses(batch, model, t, eps, weights=(1.0, 1.0, 0.01), sign=1.0, mask=None, u_g=None, u_l=None, p=0.0,
                  form="abs"):
    """Losses of both branches for one batch.

    The decoupling branch sees the global condition with the masked target
    feature added onto the fused class token; the normal branch sees the
    conditions alone. Both regress ``eps`` with MSE. Dropout draws are optional.
    """
    mask = mask if mask is not None else model.feature_mask
    fused, c_g, c_l = model.conditions(batch)
    f_msk = compute_masked_feature(batch.target_feature, mask)
    b = fused.shape[0]
    if u_g is not None:
        null_g, null_l = model.null_conditions(b)
        c_g, c_l = apply_condition_dropout(c_g, c_l, u_g, u_l, p, null_g, null_l)
        # a nulled global condition carries no class token to add onto
        f_add = torch.where((torch.as_tensor(u_g) < p).view(-1, 1), torch.zeros_like(f_msk), f_msk)
    else:
        f_add = f_msk

    x_t = model.q_sample(batch.latents, t, eps)
    both_g = GlobalCondition(torch.cat([c_g.tokens, c_g.tokens]), torch.cat([c_g.fused_index, c_g.fused_index]))
    both_l = LocalCondition(torch.cat([c_l.tokens, c_l.tokens])) if c_l is not None else None
    f_both = torch.cat([f_add, torch.zeros_like(f_add)])
    pred = model.predict_noise(torch.cat([x_t, x_t]), torch.cat([t, t]), both_g, both_l, f_msk=f_both)
    l_decouple = F.mse_loss(pred[:b], eps)
    l_normal = F.mse_loss(pred[b:], eps)
    a1, a2, a3 = weights
    # a disabled term is reported as 0 so ablation logs show it switched off
    l_contrast = contrastive_loss(fused, f_msk, sign, form=form) if a3 else pred.new_zeros(())
    l_total = a1 * l_normal + a2 * l_decouple + a3 * l_contrast
    report = LossReport(l_normal, l_decouple, l_contrast, l_total)
    if not torch.isfinite(l_total):
        raise NonFiniteLossError("non-finite loss", report.as_floats())
    return report
