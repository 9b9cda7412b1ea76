"""Training loop, data preparation and checkpoint archives."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, from_dict, to_dict
from .decoupling import branch_losses, compute_masked_feature
from .errors import ConfigError, NonFiniteLossError, TrainingError
from .extractor import EncoderOutput
from .layers import resize_square
from .model import CustomizationModel, ReferenceBatch

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "l_normal", "l_decouple", "l_contrast", "l_total", "skipped")


def to_image_tensor(array):
    return torch.from_numpy(np.array(array, copy=True)).permute(2, 0, 1).float() / 255.0


def to_mask_tensor(array):
    return torch.from_numpy(np.array(array, copy=True)).float()


def _cat_raw(parts):
    if parts[0] is None:
        return None
    return EncoderOutput(torch.cat([p.class_token for p in parts]), torch.cat([p.patch_tokens for p in parts]),
                         parts[0].grid)


def prepare_batch(model, items, chunk=64):
    """Run the frozen encoders once over ``items``: an iterable of
    (ref_image, ref_mask, target_image_or_None, prompt, class_word) numpy tuples."""
    items = list(items)
    pieces = []
    for s in range(0, len(items), chunk):
        part = items[s:s + chunk]
        refs = [to_image_tensor(it[0]) for it in part]
        masks = [to_mask_tensor(it[1]) for it in part]
        targets = None
        if part[0][2] is not None:
            size = max(model.cfg.denoiser.image_size, model.cfg.train.target_encoder.input_size)
            targets = torch.cat([resize_square(to_image_tensor(it[2]).unsqueeze(0), size) for it in part])
        pieces.append(model.make_batch(refs, masks, [it[3] for it in part], [it[4] for it in part], targets))
    return ReferenceBatch(
        _cat_raw([p.detail_raw for p in pieces]),
        _cat_raw([p.recon_raw for p in pieces]),
        torch.cat([p.text_tokens for p in pieces]),
        [s for p in pieces for s in p.spans],
        None if pieces[0].latents is None else torch.cat([p.latents for p in pieces]),
        None if pieces[0].target_feature is None else torch.cat([p.target_feature for p in pieces]),
    )


def prepare_pairs(model, pairs):
    return prepare_batch(model, [(p.ref_image, p.ref_mask, p.target_image, p.caption, p.class_word) for p in pairs])


def prepare_manifest(model, manifest):
    from .dataset import load_record_images

    def items():
        for r in manifest.records:
            ref, mask, tgt = load_record_images(manifest, r)
            yield ref, mask, tgt, r.caption, r.class_word

    return prepare_batch(model, items())


# -- checkpoints ----------------------------------------------------------------------


def save_checkpoint(path, model, step=0, epoch=0, optimizer=None):
    archive = {
        "format": 1,
        "config": to_dict(model.cfg),
        "state": model.state_dict(),
        "schedule": {
            "betas": model.schedule.betas,
            "alphas": model.schedule.alphas,
            "alpha_bars": model.schedule.alpha_bars,
        },
        "step": step,
        "epoch": epoch,
    }
    if optimizer is not None:
        archive["optimizer"] = optimizer.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(archive, path)
    return path


def load_checkpoint(path):
    """Rebuild the model from the echoed config and load its weights. Returns (model, archive)."""
    archive = torch.load(path, map_location="cpu", weights_only=False)
    cfg = from_dict(RunConfig, archive["config"])
    model = CustomizationModel(cfg)
    model.load_state_dict(archive["state"])
    return model, archive


def _comparable(cfg_dict):
    d = {k: dict(v) if isinstance(v, dict) else v for k, v in cfg_dict.items()}
    for k in ("epochs", "max_steps"):
        d["train"].pop(k, None)
    return d


# -- training ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    steps: int = 0
    skipped: int = 0


def _grads_finite(params):
    return all(p.grad is None or torch.isfinite(p.grad).all() for p in params)


def train(cfg: RunConfig, data: ReferenceBatch, model: CustomizationModel, out_dir=None, resume=None):
    """Optimize every trainable part of ``model`` on prepared ``data``.

    Stops after ``cfg.train.epochs`` epochs, or after ``max_steps`` optimizer
    steps when that is set. Writes ``epoch_NNN.pt``, ``final.pt`` and
    ``losses.csv`` under ``out_dir`` when given.
    """
    tc = cfg.train
    if data.latents is None or data.target_feature is None:
        raise ValueError("training data needs target latents and target features")
    params = model.trainable_parameters()
    opt = torch.optim.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    start_step = start_epoch = 0
    if resume is not None:
        archive = torch.load(resume, map_location="cpu", weights_only=False)
        if _comparable(archive["config"]) != _comparable(to_dict(cfg)):
            raise ConfigError(f"refusing to resume from {resume}: config differs")
        model.load_state_dict(archive["state"])
        if "optimizer" in archive:
            opt.load_state_dict(archive["optimizer"])
        start_step, start_epoch = archive["step"], archive["epoch"]

    out_dir = Path(out_dir) if out_dir else None
    writer = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = (out_dir / "losses.csv").open("a" if resume else "w", newline="")
        writer = csv.DictWriter(fh, LOG_FIELDS)
        if not resume:
            writer.writeheader()

    g = torch.Generator().manual_seed(tc.seed + 7919 * start_step)
    n = len(data)
    b = min(tc.batch_size, n)
    steps_per_epoch = math.ceil(n / b)
    total = tc.max_steps if tc.max_steps is not None else tc.epochs * steps_per_epoch
    weights = (tc.alpha1, tc.alpha2, tc.alpha3)
    result = TrainResult()
    step, epoch = start_step, start_epoch
    model.train()
    try:
        while step < total:
            perm = torch.randperm(n, generator=g)
            for s in range(0, n, b):
                if step >= total:
                    break
                batch = data.select(perm[s:s + b])
                bs = len(batch)
                t = torch.randint(0, model.schedule.T, (bs,), generator=g)
                eps = torch.randn(bs, *model.latent_shape, generator=g)
                u = torch.rand(2, bs, generator=g)
                step += 1
                try:
                    report = branch_losses(batch, model, t, eps, weights, tc.contrast_sign,
                                           u_g=u[0], u_l=u[1], p=tc.cond_dropout, form=tc.contrast_form)
                except NonFiniteLossError as exc:
                    log.warning("step %d: %s %s; skipped", step, exc, exc.diagnostics)
                    result.skipped += 1
                    continue
                opt.zero_grad(set_to_none=True)
                report.l_total.backward()
                if not _grads_finite(params):
                    log.warning("step %d: non-finite gradient; skipped", step)
                    opt.zero_grad(set_to_none=True)
                    result.skipped += 1
                    continue
                opt.step()
                row = {"step": step, "epoch": epoch, **report.as_floats(), "skipped": result.skipped}
                result.history.append(row)
                if writer:
                    writer.writerow(row)
            epoch += 1
            if out_dir and tc.max_steps is None:
                result.checkpoints.append(save_checkpoint(out_dir / f"epoch_{epoch:03d}.pt", model, step, epoch, opt))
    finally:
        if writer:
            fh.close()
    model.eval()
    result.steps = step - start_step
    if result.steps and result.skipped / result.steps > tc.max_skip_fraction:
        raise TrainingError(f"{result.skipped} of {result.steps} steps skipped (> {tc.max_skip_fraction:.0%})")
    if out_dir:
        result.checkpoints.append(save_checkpoint(out_dir / "final.pt", model, step, epoch, opt))
    return result


@torch.no_grad()
def probe_cosine(model, data):
    """Mean |cos| between the fused class token and the masked target feature."""
    fused, _, _ = model.conditions(data)
    f_msk = compute_masked_feature(data.target_feature, model.feature_mask)
    cos = torch.nn.functional.cosine_similarity(fused, f_msk, dim=-1)
    return float(cos.abs().mean())
