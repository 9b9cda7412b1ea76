"""General ID extraction: mask the reference object, encode it with two frozen
encoders (a color-insensitive "detail" encoder and a color-aware
"reconstruction" encoder), and project class/patch tokens to the injection width.

Images are float tensors ``[3, H, W]`` (or batched ``[B, 3, H, W]``) in [0, 1];
masks are ``[H, W]`` tensors with values in {0, 1}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .config import EncoderSpec
from .errors import ConfigError, ShapeError
from .layers import resize_square


@dataclass
class EncoderOutput:
    class_token: torch.Tensor  # [..., d_enc]
    patch_tokens: torch.Tensor  # [..., n_patches, d_enc]
    grid: tuple


@dataclass
class IDTokens:
    detail_class: torch.Tensor
    detail_patches: torch.Tensor
    recon_class: torch.Tensor
    recon_patches: torch.Tensor
    detail_grid: tuple
    recon_grid: tuple

    @property
    def n_detail_patches(self):
        return self.detail_patches.shape[-2]

    @property
    def n_recon_patches(self):
        return self.recon_patches.shape[-2]


def check_image(image):
    if image.dim() < 3 or image.shape[-3] != 3 or image.shape[-1] < 1 or image.shape[-2] < 1:
        raise ShapeError(f"image must be [..., 3, H, W], got {tuple(image.shape)}")
    if not torch.isfinite(image).all() or image.min() < 0 or image.max() > 1:
        raise ValueError("image values must be finite and within [0, 1]")


def check_mask(mask, image=None):
    if mask.dim() < 2:
        raise ShapeError(f"mask must be [..., H, W], got {tuple(mask.shape)}")
    if image is not None and (image.shape[-2:] != mask.shape[-2:] or image.shape[:-3] != mask.shape[:-2]):
        raise ShapeError(f"mask {tuple(mask.shape)} not aligned with image {tuple(image.shape)}")
    if not ((mask == 0) | (mask == 1)).all():
        raise ValueError("mask values must be 0 or 1")


def mask_reference(image, mask):
    """Zero out everything outside the object mask."""
    check_mask(mask, image)
    return image * mask.to(image.dtype).unsqueeze(-3)


def mask_bbox(mask):
    """(y0, x0, y1, x1) half-open bounding box of the nonzero pixels, or None."""
    ys, xs = torch.nonzero(mask, as_tuple=True)
    if ys.numel() == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def crop_to_mask(image, mask, margin=0.1):
    """Square crop around the mask bounding box, ``margin`` of the box side added on
    each side; out-of-frame area is zero. Empty masks return the image unchanged."""
    box = mask_bbox(mask)
    if box is None:
        return image
    y0, x0, y1, x1 = box
    side = max(y1 - y0, x1 - x0)
    side = max(int(math.ceil(side * (1 + 2 * margin))), 1)
    top = int(math.floor((y0 + y1 - side) / 2))
    left = int(math.floor((x0 + x1 - side) / 2))
    h, w = image.shape[-2:]
    out = image.new_zeros(image.shape[:-2] + (side, side))
    sy0, sx0 = max(top, 0), max(left, 0)
    sy1, sx1 = min(top + side, h), min(left + side, w)
    out[..., sy0 - top:sy1 - top, sx0 - left:sx1 - left] = image[..., sy0:sy1, sx0:sx1]
    return out


class _Block(nn.Module):
    def __init__(self, d, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = nn.MultiheadAttention(d, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ToyPatchEncoder(nn.Module):
    """Small patch transformer standing in for a pretrained self-supervised ViT.

    No positional embedding, so a constant input yields identical patch tokens.
    ``color_invariant`` encoders see a contrast-normalized luminance image, which
    makes them blind to hue, saturation, brightness and contrast.
    """

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        in_ch = 1 if spec.color_invariant else 3
        self.patch_embed = nn.Conv2d(in_ch, spec.d_enc, spec.patch_size, stride=spec.patch_size)
        self.blocks = nn.ModuleList([_Block(spec.d_enc, spec.heads) for _ in range(spec.depth)])

    def preprocess(self, x):
        if self.spec.color_invariant:
            gray = 0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]
            mean = gray.mean(dim=(-2, -1), keepdim=True)
            std = gray.std(dim=(-2, -1), keepdim=True, unbiased=False)
            return (gray - mean) / (std + 1e-6)
        return x * 2 - 1

    def forward(self, x):
        tokens = self.patch_embed(self.preprocess(x)).flatten(2).transpose(1, 2)
        for blk in self.blocks:
            tokens = blk(tokens)
        if self.spec.pooling == "mean":
            cls = tokens.mean(dim=1)
        else:
            cls = tokens.amax(dim=1)
        return cls, tokens


def build_encoder_module(spec: EncoderSpec):
    ref = spec.weights_ref
    if ref.startswith("toy:"):
        try:
            seed = int(ref[4:])
        except ValueError:
            raise ConfigError(f"bad toy weights_ref {ref!r}") from None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return ToyPatchEncoder(spec)
    path = Path(ref)
    if not path.is_file():
        raise ConfigError(f"encoder weights not found: {ref}")
    module = ToyPatchEncoder(spec)
    try:
        module.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    except RuntimeError as exc:
        raise ConfigError(f"encoder weights {ref} do not match spec: {exc}") from None
    return module


class FrozenEncoder:
    """A frozen encoder bound to its spec. Any module mapping ``[B,3,S,S]`` to
    ``(class [B,d], patches [B,n,d])`` can be plugged in via ``module``."""

    def __init__(self, spec: EncoderSpec, module=None):
        self.spec = spec
        self.module = module if module is not None else build_encoder_module(spec)
        self.module.eval()
        self.module.requires_grad_(False)

    def parameters(self):
        return self.module.parameters()

    def __call__(self, images):
        return encode(self, images)


def _as_batch(images, size):
    if isinstance(images, (list, tuple)):
        for im in images:
            check_image(im)
        return torch.cat([resize_square(im.unsqueeze(0), size) for im in images])
    check_image(images)
    if images.dim() == 3:
        images = images.unsqueeze(0)
    return resize_square(images, size)


@torch.no_grad()
def encode(encoder: FrozenEncoder, images):
    """Resize to the encoder's input size and run it; ``images`` may be a single
    image, a batch, or a list of differently sized images."""
    single = not isinstance(images, (list, tuple)) and images.dim() == 3
    x = _as_batch(images, encoder.spec.input_size)
    cls, patches = encoder.module(x)
    expected = encoder.spec.n_patches
    if patches.shape[1] != expected:
        raise ShapeError(f"encoder produced {patches.shape[1]} patches, spec says {expected}")
    if single:
        cls, patches = cls[0], patches[0]
    return EncoderOutput(cls, patches, encoder.spec.grid)


def project_tokens(raw: EncoderOutput, projector):
    """Project class and patch tokens with the same two-layer MLP."""
    if raw.class_token.shape[-1] != projector.d_in or raw.patch_tokens.shape[-1] != projector.d_in:
        raise ShapeError(
            f"projector expects width {projector.d_in}, encoder gives {raw.class_token.shape[-1]}"
        )
    return projector(raw.class_token), projector(raw.patch_tokens)


def prepare_reference(image, mask, crop=True, margin=0.1):
    """Masked (and optionally cropped) reference; accepts lists of differently sized images."""
    if isinstance(image, (list, tuple)):
        return [prepare_reference(im, m, crop, margin) for im, m in zip(image, mask)]
    masked = mask_reference(image, mask)
    if crop:
        if image.dim() == 3:
            return crop_to_mask(masked, mask, margin)
        return [crop_to_mask(im, m, margin) for im, m in zip(masked, mask)]
    return masked


def extract_id(image, mask, detail, recon, crop=True, margin=0.1) -> IDTokens:
    """Run the full extraction. ``detail`` and ``recon`` are ``(FrozenEncoder, projector)`` pairs."""
    ref = prepare_reference(image, mask, crop, margin)
    d_raw = encode(detail[0], ref)
    r_raw = encode(recon[0], ref)
    dc, dp = project_tokens(d_raw, detail[1])
    rc, rp = project_tokens(r_raw, recon[1])
    return IDTokens(dc, dp, rc, rp, d_raw.grid, r_raw.grid)
