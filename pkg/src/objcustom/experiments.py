"""Toy-scale ablation runs on the procedural shapes corpus."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .dataset import build_pairs
from .metrics import ScenarioPromptSet, build_embedders, color_fidelity, diversim_i, expand_prompt, pairwise_sim
from .model import CustomizationModel
from .toy import make_toy_groups
from .trainer import prepare_batch, prepare_pairs, probe_cosine, to_image_tensor, to_mask_tensor, train


def toy_pairs(seed, n_groups=150, frames_per_group=4, pairs_per_group=2, prefix="g"):
    groups = make_toy_groups(n_groups, frames_per_group, seed=seed, prefix=prefix)
    pairs, _ = build_pairs(groups, seed, pairs_per_group)
    return pairs


@dataclass
class ToyRunResult:
    cos_init: float
    cos_final: float
    clip_i: float
    diversim_i: float
    color_fidelity: float
    history: list
    seconds: float


def scenario_generations(model, probe_pairs, prompts, base_prompt, seed):
    """Generate one image per (probe reference, scenario). Returns [n_probe][n_scenario] images."""
    items = []
    for p in probe_pairs:
        base = base_prompt.format(class_word=p.class_word)
        for _, prompt in prompts.expand(base):
            items.append((p.ref_image, p.ref_mask, None, prompt, p.class_word))
    batch = prepare_batch(model, items)
    images = model.generate(batch, seed=seed)
    k = len(prompts.scenarios)
    return [list(images[i * k:(i + 1) * k]) for i in range(len(probe_pairs))]


def evaluate_toy(model, probe_pairs, embedders, seed=0, prompts=None, base_prompt="a photo of a {class_word}."):
    prompts = prompts or ScenarioPromptSet()
    gens = scenario_generations(model, probe_pairs, prompts, base_prompt, seed)
    clip, div, color = [], [], []
    for p, row in zip(probe_pairs, gens):
        ref = to_image_tensor(p.ref_image)
        mask = to_mask_tensor(p.ref_mask)
        ref_small = torch.nn.functional.interpolate(ref[None], size=row[0].shape[-2:], mode="bilinear",
                                                    antialias=True, align_corners=False)[0].clamp(0, 1)
        clip += [pairwise_sim(embedders["clip_i"], g, ref_small) for g in row]
        div.append(diversim_i({name: [g] for name, g in zip(prompts.names(), row)}, embedders["dino_i"])[0])
        color += [color_fidelity(g, ref, mask) for g in row]
    return float(np.mean(clip)), float(np.mean(div)), float(np.mean(color))


def run_toy(cfg, train_pairs, probe_pairs, seed=0, embedders=None):
    """Train a fresh model on ``train_pairs`` and score it on held-out ``probe_pairs``."""
    start = time.time()
    model = CustomizationModel(cfg, seed=seed)
    data = prepare_pairs(model, train_pairs)
    probe = prepare_pairs(model, probe_pairs)
    cos_init = probe_cosine(model, probe)
    result = train(cfg, data, model)
    cos_final = probe_cosine(model, probe)
    embedders = embedders or build_embedders(cfg.metrics.embedders)
    clip, div, color = evaluate_toy(model, probe_pairs, embedders, seed=seed,
                                    base_prompt=cfg.metrics.diversim_base_prompt)
    return ToyRunResult(cos_init, cos_final, clip, div, color, result.history, time.time() - start)
