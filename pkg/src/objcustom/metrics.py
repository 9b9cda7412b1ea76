"""Evaluation metrics: embedding similarities (CLIP-i / DINO-i / CLIP-t roles),
FID, an optional face-similarity hook, DiverSim-i over scenario prompts, and a
color-fidelity score for the toy ablations.

All similarity metrics are on a 0-100 scale.
"""
from __future__ import annotations

import importlib
import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .layers import resize_square
from .toy import SCENES

# Scenario suffixes used to probe text-driven diversity.
DEFAULT_SCENARIOS = (
    ("Snow", ("The scene of the picture is in the snow.", "The background of the picture is in the snow.")),
    ("Grass", ("The scene of the picture is on the grass.", "The background of the picture is on the grass.")),
    ("Beach", ("The scene of the picture is on the beach.", "The background of the picture is on the beach.")),
    ("Jungle", ("The scene of the picture is in the jungle.", "The background of the picture is in the jungle.")),
    ("Eiffel Tower", ("The scene of the picture is beside the Eiffel Tower.",
                      "The background of the picture is beside the Eiffel Tower.")),
)


@dataclass
class ScenarioPromptSet:
    scenarios: tuple = DEFAULT_SCENARIOS

    def names(self):
        return [name for name, _ in self.scenarios]

    def expand(self, prompt, template_index=0):
        """[(scenario, prompt + suffix)] using one suffix template per scenario."""
        return [(name, expand_prompt(prompt, suffixes[template_index % len(suffixes)]))
                for name, suffixes in self.scenarios]


def expand_prompt(prompt, suffix):
    return f"{prompt.rstrip()} {suffix}"


def scenario_slug(name):
    return name.lower().replace(" ", "_")


# -- embedders --------------------------------------------------------------------------


class ToyConvEmbedder:
    """Frozen random conv net with mean pooling; signed features."""

    role = "image_sim"

    def __init__(self, seed=0, dim=64, input_size=32, color_invariant=False, width=32):
        self.dim = dim
        self.input_size = input_size
        self.color_invariant = color_invariant
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            c_in = 1 if color_invariant else 3
            self.net = nn.Sequential(
                nn.Conv2d(c_in, width, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(width, width, 3, stride=2, padding=1), nn.ReLU(),
                nn.Conv2d(width, dim, 3, stride=2, padding=1),
            ).eval().requires_grad_(False)

    @torch.no_grad()
    def embed(self, images):
        x = resize_square(images, self.input_size)
        if self.color_invariant:
            g = 0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]
            x = (g - g.mean(dim=(-2, -1), keepdim=True)) / (g.std(dim=(-2, -1), keepdim=True, unbiased=False) + 1e-6)
        else:
            x = x * 2 - 1
        return self.net(x).mean(dim=(-2, -1))


class SceneTextEmbedder:
    """Joint text/image embedding over the toy scene vocabulary.

    Text maps to the scenes it mentions; an image maps to a soft assignment of
    its border color to each scene's background color.
    """

    role = "text_sim"

    def __init__(self, temperature=20.0, border=0.15):
        self.names = list(SCENES)
        self.protos = torch.tensor([SCENES[n][0] for n in self.names], dtype=torch.float32) / 255.0
        self.temperature = temperature / 255.0
        self.border = border
        self.dim = len(self.names)

    @torch.no_grad()
    def embed(self, images):
        h, w = images.shape[-2:]
        by, bx = max(int(h * self.border), 1), max(int(w * self.border), 1)
        keep = torch.zeros(h, w, dtype=torch.bool)
        keep[h - by:, :] = True
        keep[:, :bx] = True
        keep[:, w - bx:] = True
        color = images[..., keep].mean(dim=-1)
        dist = torch.cdist(color, self.protos)
        return torch.softmax(-dist / self.temperature, dim=-1)

    def embed_text(self, texts):
        out = torch.zeros(len(texts), self.dim)
        for i, t in enumerate(texts):
            low = t.lower()
            for j, name in enumerate(self.names):
                if name.split()[0] in low:
                    out[i, j] = 1.0
            if out[i].sum() == 0:
                out[i] = 1.0
        return out


class ColorHistogramEmbedder:
    role = "image_sim"

    def __init__(self, bins=4):
        self.bins = bins
        self.dim = bins ** 3

    @torch.no_grad()
    def embed(self, images):
        return torch.stack([torch.from_numpy(color_histogram(im)) for im in images]).float()


def build_embedder(spec):
    """Embedder from a config entry: ``{"kind": ..., **kwargs}``.

    ``kind: python`` loads ``factory: "module:callable"`` and calls it with the
    remaining keys; this is how a face embedder is attached.
    """
    if spec is None:
        return None
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "toy_conv":
        return ToyConvEmbedder(**spec)
    if kind == "scene_text":
        return SceneTextEmbedder(**spec)
    if kind == "color_hist":
        return ColorHistogramEmbedder(**spec)
    if kind == "python":
        module, _, attr = spec.pop("factory").partition(":")
        return getattr(importlib.import_module(module), attr)(**spec)
    raise ValueError(f"unknown embedder kind {kind!r}")


def build_embedders(config):
    return {role: build_embedder(spec) for role, spec in config.items() if spec is not None}


# -- similarity, FID, DiverSim ----------------------------------------------------------------


def _cos100(ea, eb):
    na, nb = ea.norm(dim=-1), eb.norm(dim=-1)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("degenerate zero embedding")
    return 100.0 * (ea * eb).sum(-1) / (na * nb)


def _batch(image):
    return image.unsqueeze(0) if image.dim() == 3 else image


def pairwise_sim(embedder, image_a, image_b):
    """100 * cos(e(a), e(b)); batched inputs give one value per row."""
    a, b = _batch(image_a), _batch(image_b)
    s = _cos100(embedder.embed(a).double(), embedder.embed(b).double())
    return float(s) if s.numel() == 1 else s


def text_sim(embedder, images, texts):
    return _cos100(embedder.embed(_batch(images)).double(), embedder.embed_text(texts).double())


def _sqrt_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def _cov(x):
    if x.shape[0] < 2:
        return np.zeros((x.shape[1], x.shape[1]))
    return np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1])


def fid_details(features_a, features_b, eps=1e-6):
    """(FID, regularized_flag). The trace term uses tr sqrt(S_a^1/2 S_b S_a^1/2),
    which equals tr sqrt(S_a S_b) but stays symmetric PSD."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    mu = a.mean(0) - b.mean(0)
    sa, sb = _cov(a), _cov(b)
    flagged = False
    for attempt in range(2):
        if attempt:
            sa = sa + eps * np.eye(sa.shape[0])
            sb = sb + eps * np.eye(sb.shape[0])
            flagged = True
        root = _sqrt_psd(sa)
        w = np.linalg.eigvalsh(root @ sb @ root)
        tr_sqrt = np.sqrt(np.clip(w, 0, None)).sum()
        if np.isfinite(tr_sqrt):
            break
    value = float(mu @ mu + np.trace(sa) + np.trace(sb) - 2 * tr_sqrt)
    return max(value, 0.0), flagged


def fid(features_a, features_b):
    return fid_details(features_a, features_b)[0]


def diversim_i(generations_by_scenario, embedder, pairs="cross"):
    """(mean, std) of pairwise similarity between generations of different
    scenarios (``pairs="all"`` also includes same-scenario pairs)."""
    if len(generations_by_scenario) < 2:
        raise ValueError("DiverSim-i needs at least two scenarios")
    embs, labels = [], []
    for name, images in generations_by_scenario.items():
        if len(images) == 0:
            raise ValueError(f"scenario {name!r} has no generations")
        embs.append(embedder.embed(torch.stack(list(images))).double())
        labels += [name] * len(images)
    e = torch.cat(embs)
    sims = []
    for i, j in itertools.combinations(range(len(labels)), 2):
        if pairs == "cross" and labels[i] == labels[j]:
            continue
        sims.append(float(_cos100(e[i], e[j])))
    sims = np.array(sims)
    return float(sims.mean()), float(sims.std())


def color_histogram(image, mask=None, bins=4):
    """Normalized joint RGB histogram of a [3,H,W] image in [0,1] (optionally masked)."""
    x = image.detach().permute(1, 2, 0).reshape(-1, 3).numpy()
    if mask is not None:
        x = x[mask.reshape(-1).numpy() > 0]
    idx = np.clip((x * bins).astype(int), 0, bins - 1)
    flat = idx[:, 0] * bins * bins + idx[:, 1] * bins + idx[:, 2]
    hist = np.bincount(flat, minlength=bins ** 3).astype(np.float64)
    return hist / max(hist.sum(), 1.0)


def histogram_correlation(h1, h2):
    a, b = h1 - h1.mean(), h2 - h2.mean()
    denom = math.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / denom) if denom > 0 else 0.0


def color_fidelity(generation, ref_image, ref_mask, bins=4):
    """Correlation of the generation's color histogram with the reference object's."""
    return histogram_correlation(color_histogram(generation, bins=bins), color_histogram(ref_image, ref_mask, bins))


# -- full evaluation ------------------------------------------------------------------------


@dataclass
class MetricReport:
    fid: float | None = None
    clip_i: float | None = None
    clip_t: float | None = None
    dino_i: float | None = None
    face_sim: float | None = None
    diversim_i_mean: float | None = None
    diversim_i_std: float | None = None
    n_samples: int = 0
    missing: list = field(default_factory=list)
    missing_fraction: float = 0.0
    fid_regularized: bool = False
    compare_to: str = "reference"

    def to_dict(self):
        d = asdict(self)
        if d["face_sim"] is None:
            d.pop("face_sim")
        return d

    def write(self, path, config=None):
        d = self.to_dict()
        if config is not None:
            d["config"] = config
        Path(path).write_text(json.dumps(d, indent=2, sort_keys=True))


def load_image(path):
    from PIL import Image

    with Image.open(path) as im:
        return torch.from_numpy(np.asarray(im.convert("RGB")).copy()).permute(2, 0, 1).float() / 255.0


def load_mask(path):
    from PIL import Image

    with Image.open(path) as im:
        return torch.from_numpy((np.asarray(im.convert("L")) > 127).astype(np.float32))


def _mean_sim(embedder, gens, refs, size):
    a = torch.stack([resize_square(g.unsqueeze(0), size)[0] for g in gens])
    b = torch.stack([resize_square(r.unsqueeze(0), size)[0] for r in refs])
    return float(pairwise_sim(embedder, a, b).mean()) if len(gens) > 1 else pairwise_sim(embedder, a, b)


def evaluate(manifest, generations_dir, embedders, prompts=None, compare_to="reference", diversim_pairs="cross",
             base_prompt="a photo of a {class_word}.", work_size=64):
    """Score ``generations_dir/<sample_id>.png`` against the manifest.

    DiverSim-i is computed when ``generations_dir/diversim/<sample_id>/<scenario>/*.png``
    exists. Missing generations are listed and excluded.
    """
    prompts = prompts or ScenarioPromptSet()
    gdir = Path(generations_dir)
    gens, refs, tgts, captions, missing, kept = [], [], [], [], [], []
    for r in manifest.records:
        p = gdir / f"{r.sample_id}.png"
        if not p.is_file():
            missing.append(r.sample_id)
            continue
        kept.append(r)
        gens.append(load_image(p))
        refs.append(load_image(manifest.resolve(r.ref_image_path)))
        tgts.append(load_image(manifest.resolve(r.target_image_path)))
        captions.append(r.caption)
    n = len(manifest.records)
    report = MetricReport(n_samples=len(kept), missing=missing, missing_fraction=len(missing) / n if n else 0.0,
                          compare_to=compare_to)
    if not kept:
        return report
    against = tgts if compare_to == "target" else refs
    if "clip_i" in embedders:
        report.clip_i = _mean_sim(embedders["clip_i"], gens, against, work_size)
    if "dino_i" in embedders:
        report.dino_i = _mean_sim(embedders["dino_i"], gens, against, work_size)
    if "face" in embedders:
        report.face_sim = _mean_sim(embedders["face"], gens, against, work_size)
    if "clip_t" in embedders:
        g = torch.stack([resize_square(x.unsqueeze(0), work_size)[0] for x in gens])
        report.clip_t = float(text_sim(embedders["clip_t"], g, captions).mean())
    if "fid" in embedders:
        emb = embedders["fid"]
        fa = emb.embed(torch.stack([resize_square(x.unsqueeze(0), work_size)[0] for x in gens])).numpy()
        fb = emb.embed(torch.stack([resize_square(x.unsqueeze(0), work_size)[0] for x in tgts])).numpy()
        report.fid, report.fid_regularized = fid_details(fa, fb)
    div_embedder = embedders.get("dino_i")
    per_sample = []
    for r in kept:
        sdir = gdir / "diversim" / r.sample_id
        if not sdir.is_dir() or div_embedder is None:
            continue
        groups = {}
        for name in prompts.names():
            files = sorted((sdir / scenario_slug(name)).glob("*.png"))
            if files:
                groups[name] = [resize_square(load_image(f).unsqueeze(0), work_size)[0] for f in files]
        if len(groups) >= 2:
            per_sample.append(diversim_i(groups, div_embedder, diversim_pairs)[0])
    if per_sample:
        report.diversim_i_mean = float(np.mean(per_sample))
        report.diversim_i_std = float(np.std(per_sample))
    return report
