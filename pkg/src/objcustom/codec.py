"""Latent codec: the space diffusion runs in."""
import torch
import torch.nn as nn
import torch.nn.functional as F


class TinyAutoencoder(nn.Module):
    """Stride-2 conv autoencoder: [B,3,H,W] <-> [B,c,H/2,W/2]."""

    def __init__(self, latent_channels=4, width=32):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, latent_channels, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, width, 1), nn.SiLU(),
            nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(width, 3, 3, padding=1),
        )

    def forward(self, x):
        return self.dec(self.enc(x))


class LatentCodec(nn.Module):
    """``identity`` mode is pixel-space diffusion: z = scale * (x - 0.5)."""

    def __init__(self, mode="identity", scale=2.0, latent_channels=4):
        super().__init__()
        if mode not in ("identity", "tiny_autoencoder"):
            raise ValueError(f"unknown codec mode {mode!r}")
        self.mode = mode
        self.scale = scale
        self.ae = TinyAutoencoder(latent_channels) if mode == "tiny_autoencoder" else None

    def latent_shape(self, image_size):
        if self.mode == "identity":
            return (3, image_size, image_size)
        return (self.ae.enc[-1].out_channels, image_size // 2, image_size // 2)

    def encode(self, x):
        h = x - 0.5
        if self.ae is not None:
            h = self.ae.enc(h)
        return h * self.scale

    def decode(self, z):
        h = z / self.scale
        if self.ae is not None:
            h = self.ae.dec(h)
        return h + 0.5


def fit_autoencoder(codec, images, steps=200, lr=2e-3, seed=0):
    """Fit the tiny autoencoder to reconstruct ``images``; returns the loss history."""
    if codec.ae is None:
        return []
    g = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.ae.parameters(), lr=lr)
    history = []
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (min(32, images.shape[0]),), generator=g)
        x = images[idx]
        loss = F.mse_loss(codec.ae(x - 0.5) + 0.5, x)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history
