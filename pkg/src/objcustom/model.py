"""The customization model: trainable projectors, fusion MLPs, denoiser, feature
mask and null tokens, plus the frozen encoders it reads from."""
from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn

from .codec import LatentCodec
from .config import RunConfig
from .decoupling import FeatureMask
from .diffusion import NoiseSchedule, forward_diffuse, sample
from .extractor import EncoderOutput, FrozenEncoder, IDTokens, encode, prepare_reference, project_tokens
from .injection import (
    GlobalCondition,
    LocalCondition,
    build_global_condition_batch,
    build_local_condition,
    fuse_class_token,
    pool_span,
)
from .layers import TwoLayerMLP, resize_square
from .text import ToyTextEncoder
from .unet import Denoiser


@dataclass
class ReferenceBatch:
    """Frozen-encoder outputs for a batch; everything the trainable part consumes."""

    detail_raw: EncoderOutput | None
    recon_raw: EncoderOutput | None
    text_tokens: torch.Tensor
    spans: list
    latents: torch.Tensor | None = None
    target_feature: torch.Tensor | None = None

    def __len__(self):
        return self.text_tokens.shape[0]

    def select(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)

        def pick(raw):
            if raw is None:
                return None
            return EncoderOutput(raw.class_token[idx], raw.patch_tokens[idx], raw.grid)

        return ReferenceBatch(
            pick(self.detail_raw),
            pick(self.recon_raw),
            self.text_tokens[idx],
            [self.spans[i] for i in idx.tolist()],
            None if self.latents is None else self.latents[idx],
            None if self.target_feature is None else self.target_feature[idx],
        )


class FrozenParts:
    """Encoders that never receive gradients. Kept off the module tree so they
    are neither optimized nor stored in checkpoints (rebuilt from the config)."""

    def __init__(self, cfg: RunConfig):
        ex = cfg.extractor
        self.detail = FrozenEncoder(ex.detail) if ex.mode != "recon_only" else None
        self.recon = FrozenEncoder(ex.recon) if ex.mode != "detail_only" else None
        self.target = FrozenEncoder(cfg.train.target_encoder)
        self.text = ToyTextEncoder(cfg.denoiser.d_model, cfg.text.max_len, cfg.text.vocab_size, cfg.text.seed)

    def encoders(self):
        return [e for e in (self.detail, self.recon, self.target) if e is not None]


class CustomizationModel(nn.Module):
    def __init__(self, cfg: RunConfig, seed=None):
        super().__init__()
        self.cfg = cfg
        ex, dn = cfg.extractor, cfg.denoiser
        d = dn.d_model
        self.frozen = FrozenParts(cfg)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.train.seed if seed is None else seed)
            self.detail_proj = TwoLayerMLP(ex.detail.d_enc, d, ex.d_hidden, ex.activation)
            self.recon_proj = TwoLayerMLP(ex.recon.d_enc, d, ex.d_hidden, ex.activation)
            self.class_fuser = TwoLayerMLP(3 * d, d, ex.d_hidden, ex.activation)
            self.local_detail = TwoLayerMLP(d, d, ex.d_hidden, ex.activation)
            self.local_recon = TwoLayerMLP(d, d, ex.d_hidden, ex.activation)
            self.denoiser = Denoiser(replace(dn, latent_channels=self._latent_channels(cfg)))
            self.codec = LatentCodec(cfg.codec.mode, cfg.codec.scale, cfg.codec.latent_channels)
        self.codec.requires_grad_(False)
        self.feature_mask = FeatureMask(d)
        n_local = (ex.recon if ex.mode == "recon_only" else ex.detail).n_patches
        self.null_global = nn.Parameter(torch.zeros(cfg.text.max_len, d))
        self.null_local = nn.Parameter(torch.zeros(n_local, d))
        self.schedule = NoiseSchedule.linear(dn.T, dn.beta_start, dn.beta_end)

    @staticmethod
    def _latent_channels(cfg):
        return 3 if cfg.codec.mode == "identity" else cfg.codec.latent_channels

    @property
    def latent_shape(self):
        return self.codec.latent_shape(self.cfg.denoiser.image_size)

    def trainable_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("codec.")]

    # -- frozen feature extraction ------------------------------------------------

    @torch.no_grad()
    def encode_references(self, images, masks):
        ex = self.cfg.extractor
        refs = prepare_reference(images, masks, ex.crop_to_mask, ex.crop_margin)
        d_raw = encode(self.frozen.detail, refs) if self.frozen.detail else None
        r_raw = encode(self.frozen.recon, refs) if self.frozen.recon else None
        return d_raw, r_raw

    @torch.no_grad()
    def target_features(self, images):
        return encode(self.frozen.target, images).class_token

    @torch.no_grad()
    def image_latents(self, images):
        return self.codec.encode(resize_square(images, self.cfg.denoiser.image_size))

    def make_batch(self, ref_images, ref_masks, prompts, class_words, targets=None):
        d_raw, r_raw = self.encode_references(ref_images, ref_masks)
        text, spans = self.frozen.text.encode(prompts, class_words)
        latents = f_tar = None
        if targets is not None:
            latents = self.image_latents(targets)
            f_tar = self.target_features(targets)
        return ReferenceBatch(d_raw, r_raw, text, spans, latents, f_tar)

    # -- trainable conditioning ------------------------------------------------------

    def id_tokens(self, batch: ReferenceBatch) -> IDTokens:
        ref = batch.detail_raw if batch.detail_raw is not None else batch.recon_raw
        b, d = len(batch), self.cfg.denoiser.d_model
        zeros_c = torch.zeros(b, d)
        if batch.detail_raw is not None:
            dc, dp = project_tokens(batch.detail_raw, self.detail_proj)
            dg = batch.detail_raw.grid
        else:
            dc, dp, dg = zeros_c, None, None
        if batch.recon_raw is not None:
            rc, rp = project_tokens(batch.recon_raw, self.recon_proj)
            rg = batch.recon_raw.grid
        else:
            rc, rp, rg = zeros_c, None, None
        assert ref is not None
        return IDTokens(dc, dp, rc, rp, dg, rg)

    def conditions(self, batch: ReferenceBatch):
        """Returns (fused class token [B,d], GlobalCondition, LocalCondition or None)."""
        ids = self.id_tokens(batch)
        text_class = torch.stack([pool_span(batch.text_tokens[i], s) for i, s in enumerate(batch.spans)])
        fused = fuse_class_token(text_class, ids.detail_class, ids.recon_class, self.class_fuser)
        mode = self.cfg.denoiser.injection
        if mode == "local":
            # text prompt untouched; index still marks where the class word sits
            c_g = GlobalCondition(batch.text_tokens, torch.tensor([s for s, _ in batch.spans], dtype=torch.long))
        else:
            c_g = build_global_condition_batch(batch.text_tokens, batch.spans, fused, self.frozen.text.pad_embedding)
        c_l = None
        if mode != "global":
            if ids.detail_patches is None:
                c_l = LocalCondition(self.local_recon(ids.recon_patches))
            else:
                c_l = LocalCondition(
                    build_local_condition(
                        ids.detail_patches, ids.recon_patches, self.local_detail, self.local_recon,
                        ids.detail_grid, ids.recon_grid,
                    )
                )
        return fused, c_g, c_l

    def null_conditions(self, b):
        g = GlobalCondition(self.null_global.unsqueeze(0).expand(b, -1, -1), torch.zeros(b, dtype=torch.long))
        l = LocalCondition(self.null_local.unsqueeze(0).expand(b, -1, -1))
        return g, l

    def predict_noise(self, x_t, t, c_g: GlobalCondition, c_l: LocalCondition | None, f_msk=None):
        tokens = c_g.tokens
        if f_msk is not None:
            onehot = torch.zeros(tokens.shape[:2], dtype=tokens.dtype)
            onehot[torch.arange(tokens.shape[0]), c_g.fused_index] = 1.0
            tokens = tokens + onehot.unsqueeze(-1) * f_msk.unsqueeze(1)
        local = c_l.tokens if c_l is not None else None
        return self.denoiser(x_t, t, tokens, local)

    def q_sample(self, x0, t, eps):
        return forward_diffuse(self.schedule, x0, t, eps)

    @torch.no_grad()
    def generate(self, batch: ReferenceBatch, steps=None, guidance=None, seed=0):
        steps = self.cfg.sampling.steps if steps is None else steps
        guidance = self.cfg.sampling.cfg_scale if guidance is None else guidance
        _, c_g, c_l = self.conditions(batch)
        return sample(self, c_g, c_l, steps=steps, guidance=guidance, seed=seed)
