import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from objcustom.config import EncoderSpec
from objcustom.errors import ConfigError, ShapeError
from objcustom.extractor import (
    FrozenEncoder,
    ToyPatchEncoder,
    crop_to_mask,
    encode,
    extract_id,
    mask_reference,
    project_tokens,
)
from objcustom.layers import TwoLayerMLP, resize_square


def _image(h=8, w=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, h, w, generator=g)


def test_mask_reference_identity_and_annihilator():
    img = _image()
    assert torch.equal(mask_reference(img, torch.ones(8, 8)), img)
    assert torch.equal(mask_reference(img, torch.zeros(8, 8)), torch.zeros_like(img))


def test_mask_reference_hand_case():
    img = torch.tensor([[0.2, 0.4], [0.6, 0.8]]).expand(3, 2, 2)
    out = mask_reference(img, torch.tensor([[1.0, 0.0], [0.0, 1.0]]))
    expected = torch.tensor([[0.2, 0.0], [0.0, 0.8]]).expand(3, 2, 2)
    assert torch.equal(out, expected)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_mask_reference_idempotent(h, w, seed):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(3, h, w, generator=g)
    mask = (torch.rand(h, w, generator=g) > 0.5).float()
    once = mask_reference(img, mask)
    assert torch.equal(mask_reference(once, mask), once)


def test_mask_reference_rejects_bad_inputs():
    img = _image()
    with pytest.raises(ShapeError):
        mask_reference(img, torch.ones(4, 4))
    with pytest.raises(ValueError):
        mask_reference(img, torch.full((8, 8), 0.5))


def test_crop_to_mask_margin_and_padding():
    img = torch.ones(3, 20, 20)
    mask = torch.zeros(20, 20)
    mask[5:15, 5:15] = 1
    out = crop_to_mask(img, mask, margin=0.1)
    assert out.shape == (3, 12, 12)  # 10 px box + 1 px each side
    assert torch.equal(out, torch.ones(3, 12, 12))
    edge = torch.zeros(20, 20)
    edge[0:4, 0:4] = 1
    cropped = crop_to_mask(img, edge, margin=0.5)
    assert cropped.shape == (3, 8, 8)
    assert cropped[:, :2].abs().sum() == 0  # rows above the frame are zero padding
    assert torch.equal(crop_to_mask(img, torch.zeros(20, 20)), img)


class _IdentityPatch(nn.Module):
    """Flattens each patch into a token; the class token is the mean patch."""

    def __init__(self, patch):
        super().__init__()
        self.patch = patch

    def forward(self, x):
        b = x.shape[0]
        p = self.patch
        tokens = x.unfold(2, p, p).unfold(3, p, p).permute(0, 2, 3, 1, 4, 5).reshape(b, -1, 3 * p * p)
        return tokens.mean(dim=1), tokens


def test_encode_single_patch_identity_embed():
    spec = EncoderSpec("detail", 2, 2, 12, "toy:1")
    enc = FrozenEncoder(spec, module=_IdentityPatch(2))
    img = _image(2, 2)
    out = encode(enc, img)
    assert out.patch_tokens.shape == (1, 12)
    assert torch.equal(out.class_token, out.patch_tokens[0])


def test_encode_deterministic_and_constant_input_symmetry():
    spec = EncoderSpec("reconstruction", 8, 4, 16, "toy:5")
    enc = FrozenEncoder(spec)
    img = _image(8, 8)
    a, b = encode(enc, img), encode(enc, img)
    assert torch.equal(a.class_token, b.class_token) and torch.equal(a.patch_tokens, b.patch_tokens)
    const = torch.full((3, 8, 8), 0.3)
    out = encode(enc, const)
    assert out.grid == (2, 2)
    for row in out.patch_tokens[1:]:
        torch.testing.assert_close(row, out.patch_tokens[0], rtol=0, atol=1e-6)


def test_encoder_is_frozen_and_seeded():
    spec = EncoderSpec("detail", 8, 4, 16, "toy:9")
    a, b = FrozenEncoder(spec), FrozenEncoder(spec)
    assert all(not p.requires_grad for p in a.parameters())
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_encoder_weights_from_path(tmp_path):
    spec = EncoderSpec("detail", 8, 4, 16, "toy:3")
    module = ToyPatchEncoder(spec)
    path = tmp_path / "enc.pt"
    torch.save(module.state_dict(), path)
    loaded = FrozenEncoder(EncoderSpec("detail", 8, 4, 16, str(path)))
    img = _image()
    torch.testing.assert_close(encode(loaded, img).class_token, module(img[None])[0][0])
    with pytest.raises(ConfigError):
        FrozenEncoder(EncoderSpec("detail", 8, 4, 16, str(tmp_path / "missing.pt")))


def test_color_invariant_encoder_ignores_color_changes():
    spec = EncoderSpec("detail", 8, 4, 16, "toy:4", color_invariant=True)
    enc = FrozenEncoder(spec)
    gray = _image(8, 8).mean(0, keepdim=True)
    a = gray.expand(3, 8, 8) * torch.tensor([1.0, 0.2, 0.2])[:, None, None]  # reddish
    b = gray.expand(3, 8, 8) * torch.tensor([0.2, 0.2, 1.0])[:, None, None]  # bluish
    # both have luminance proportional to the same gray image
    torch.testing.assert_close(encode(enc, a).class_token, encode(enc, b).class_token, atol=1e-4, rtol=0)
    sensitive = FrozenEncoder(EncoderSpec("reconstruction", 8, 4, 16, "toy:4"))
    assert not torch.allclose(encode(sensitive, a).class_token, encode(sensitive, b).class_token, atol=1e-3)


def _identity_mlp(d):
    mlp = TwoLayerMLP(d, d, activation="identity")
    with torch.no_grad():
        for fc in (mlp.fc1, mlp.fc2):
            fc.weight.copy_(torch.eye(d))
            fc.bias.zero_()
    return mlp


def test_project_tokens_identity_and_zero():
    raw_cls, raw_p = torch.randn(4), torch.randn(3, 4)
    from objcustom.extractor import EncoderOutput

    raw = EncoderOutput(raw_cls, raw_p, (1, 3))
    cls, patches = project_tokens(raw, _identity_mlp(4))
    assert torch.equal(cls, raw_cls) and torch.equal(patches, raw_p)
    mlp = TwoLayerMLP(4, 4)
    with torch.no_grad():
        mlp.fc1.bias.zero_()
        mlp.fc2.bias.zero_()
    zc, zp = project_tokens(EncoderOutput(torch.zeros(4), torch.zeros(3, 4), (1, 3)), mlp)
    assert torch.equal(zc, torch.zeros(4)) and torch.equal(zp, torch.zeros(3, 4))


def test_project_tokens_hand_case():
    mlp = TwoLayerMLP(2, 2, activation="relu")
    w1 = torch.tensor([[1.0, 2.0], [3.0, -1.0]])
    b1 = torch.tensor([0.5, -0.5])
    w2 = torch.tensor([[1.0, 1.0], [-2.0, 0.5]])
    b2 = torch.tensor([0.1, 0.2])
    with torch.no_grad():
        mlp.fc1.weight.copy_(w1)
        mlp.fc1.bias.copy_(b1)
        mlp.fc2.weight.copy_(w2)
        mlp.fc2.bias.copy_(b2)
    x = np.array([1.0, -1.0])
    h = np.maximum(w1.numpy() @ x + b1.numpy(), 0)  # [-0.5, 3.5] -> [0, 3.5]
    expected = w2.numpy() @ h + b2.numpy()
    from objcustom.extractor import EncoderOutput

    cls, _ = project_tokens(EncoderOutput(torch.tensor(x, dtype=torch.float32), torch.zeros(1, 2), (1, 1)), mlp)
    np.testing.assert_allclose(cls.detach().numpy(), expected, atol=1e-6)
    np.testing.assert_allclose(expected, [3.6, 1.95], atol=1e-12)


def test_project_tokens_linear_regime():
    torch.manual_seed(1)
    mlp = TwoLayerMLP(6, 5, d_hidden=7, activation="identity")
    x = torch.randn(4, 6)
    w = mlp.fc2.weight @ mlp.fc1.weight
    b = mlp.fc2.weight @ mlp.fc1.bias + mlp.fc2.bias
    torch.testing.assert_close(mlp(x), x @ w.T + b, atol=1e-6, rtol=0)


def test_project_tokens_width_mismatch():
    from objcustom.extractor import EncoderOutput

    with pytest.raises(ShapeError):
        project_tokens(EncoderOutput(torch.zeros(3), torch.zeros(2, 3), (1, 2)), TwoLayerMLP(4, 4))


def _pair(spec, d=8):
    torch.manual_seed(spec.d_enc)
    return FrozenEncoder(spec), TwoLayerMLP(spec.d_enc, d)


def test_extract_id_zero_mask_equals_black_image():
    det = _pair(EncoderSpec("detail", 8, 4, 12, "toy:1"))
    rec = _pair(EncoderSpec("reconstruction", 8, 8, 10, "toy:2"))
    img = _image(16, 16)
    zero = torch.zeros(16, 16)
    a = extract_id(img, zero, det, rec)
    b = extract_id(torch.zeros_like(img), torch.ones(16, 16), det, rec, crop=False)
    for name in ("detail_class", "detail_patches", "recon_class", "recon_patches"):
        assert torch.equal(getattr(a, name), getattr(b, name))


def test_extract_id_swap_specs_swaps_outputs():
    det = _pair(EncoderSpec("detail", 8, 4, 12, "toy:1"))
    rec = _pair(EncoderSpec("reconstruction", 8, 8, 10, "toy:2"))
    img = _image(16, 16)
    mask = torch.zeros(16, 16)
    mask[3:12, 4:14] = 1
    a = extract_id(img, mask, det, rec)
    b = extract_id(img, mask, rec, det)
    assert torch.equal(a.detail_class, b.recon_class) and torch.equal(a.detail_patches, b.recon_patches)
    assert torch.equal(a.recon_class, b.detail_class) and torch.equal(a.recon_patches, b.detail_patches)
    assert a.detail_grid == b.recon_grid


def test_extract_id_matches_stepwise_oracle():
    det = _pair(EncoderSpec("detail", 4, 2, 12, "toy:1"))
    rec = _pair(EncoderSpec("reconstruction", 4, 4, 10, "toy:2"))
    img = _image(4, 4, seed=3)
    mask = torch.tensor([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]], dtype=torch.float32)
    out = extract_id(img, mask, det, rec, crop=False)
    masked = img * mask[None]
    for (enc, mlp), cls, patches in ((det, out.detail_class, out.detail_patches),
                                     (rec, out.recon_class, out.recon_patches)):
        with torch.no_grad():
            raw_cls, raw_p = enc.module(masked[None])
            torch.testing.assert_close(cls, mlp(raw_cls[0]), atol=1e-6, rtol=0)
            torch.testing.assert_close(patches, mlp(raw_p[0]), atol=1e-6, rtol=0)


@settings(max_examples=15, deadline=None)
@given(h=st.integers(8, 48), w=st.integers(8, 48))
def test_extract_id_shape_independent_of_resolution(h, w):
    det = _pair(EncoderSpec("detail", 8, 4, 12, "toy:1"))
    rec = _pair(EncoderSpec("reconstruction", 8, 8, 10, "toy:2"))
    img = torch.rand(3, h, w)
    mask = torch.zeros(h, w)
    mask[h // 4: h // 2 + 1, w // 4: w // 2 + 1] = 1
    out = extract_id(img, mask, det, rec)
    assert out.detail_class.shape == (8,) and out.detail_patches.shape == (4, 8)
    assert out.recon_class.shape == (8,) and out.recon_patches.shape == (1, 8)


def test_resize_square_stays_in_range():
    img = torch.zeros(1, 3, 40, 40)
    img[..., ::2, :] = 1.0
    out = resize_square(img, 7)
    assert out.min() >= 0 and out.max() <= 1
