"""Acceptance criteria 1-10. Each test records one PASS/FAIL line that is
printed in the terminal summary; criteria 7 and 8 train nine toy models and
take most of the runtime."""
import statistics
import time

import numpy as np
import pytest
import scipy.linalg
import torch

from conftest import record_criterion, small_config, toy_items
from objcustom.config import RunConfig, toy_config
from objcustom.dataset import (
    ManifestRecord,
    build_pairs,
    mask_bbox,
    read_manifest,
    write_manifest,
)
from objcustom.decoupling import apply_condition_dropout, branch_losses, compute_masked_feature, contrastive_loss
from objcustom.diffusion import NoiseSchedule, cfg_combine, forward_diffuse
from objcustom.injection import AttentionWeights, GlobalCondition, LocalCondition, cross_attention
from objcustom.model import CustomizationModel
from objcustom.trainer import prepare_batch, train

SEEDS = (0, 1, 2)


def _check(number, fn):
    """Run ``fn`` (returns (passed, detail)), record the line, then assert."""
    try:
        passed, detail = fn()
    except Exception as exc:
        record_criterion(number, False, f"error: {type(exc).__name__}: {exc}")
        raise
    record_criterion(number, passed, detail)
    assert passed, detail


# -- 1 ------------------------------------------------------------------------------------------


def _dense_attention(z, c, wq, wk, wv):
    q, k, v = z @ wq, c @ wk, c @ wv
    out = np.empty((z.shape[0], v.shape[1]))
    for i in range(z.shape[0]):
        logits = np.array([q[i] @ k[j] for j in range(c.shape[0])]) / np.sqrt(q.shape[1])
        w = np.exp(logits - logits.max())
        w = w / w.sum()
        out[i] = (w[:, None] * v).sum(0)
    return out


def test_criterion_01_attention_oracle():
    def run():
        start = time.time()
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            m, n = (int(v) for v in rng.integers(1, 9, 2))
            d_in, d = (int(v) for v in rng.integers(1, 17, 2))
            z, c = rng.normal(size=(m, d_in)), rng.normal(size=(n, d_in))
            wq, wk, wv = (rng.normal(size=(d_in, d)) for _ in range(3))
            # float64 so the comparison measures the operator, not float32 rounding of O(10) logits
            out = cross_attention(torch.tensor(z), torch.tensor(c), AttentionWeights(*(torch.tensor(w) for w in (wq, wk, wv))))
            worst = max(worst, float(np.abs(out.numpy() - _dense_attention(z, c, wq, wk, wv)).max()))
        secs = time.time() - start
        return worst <= 1e-5 and secs < 5, f"max-abs {worst:.2e} (<= 1e-5), {secs:.2f}s (< 5s)"

    _check(1, run)


# -- 2 ------------------------------------------------------------------------------------------


def _central_fd(f, param, idx, h):
    with torch.no_grad():
        old = param[idx].item()
        param[idx] = old + h
        up = float(f())
        param[idx] = old - h
        down = float(f())
        param[idx] = old
    return (up - down) / (2 * h)


def _rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def test_criterion_02_gradient_checks():
    def run():
        start = time.time()
        # contrastive loss w.r.t. the mask logits, random 8-dim cases
        worst_c = 0.0
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            fused = torch.randn(3, 8, generator=g, dtype=torch.float64)
            f_tar = torch.randn(3, 8, generator=g, dtype=torch.float64)
            logits = torch.randn(8, generator=g, dtype=torch.float64, requires_grad=True)

            def lc():
                return contrastive_loss(fused, compute_masked_feature(f_tar, logits))

            lc().backward()
            for i in range(8):
                worst_c = max(worst_c, _rel(float(logits.grad[i]), _central_fd(lc, logits, i, 1e-6)))

        # denoising loss of the normal branch w.r.t. injection-MLP weights, d_model = 8
        cfg = small_config(**{"denoiser.d_model": 8, "denoiser.heads": 2, "train.target_encoder.d_enc": 8,
                              "train.cond_dropout": 0.0})
        model = CustomizationModel(cfg, seed=0)
        batch = prepare_batch(model, toy_items(2, seed=5))
        model = model.double()
        for proj in model.denoiser.local_out_projections():  # leave the zero init so gradients reach the local MLPs
            torch.nn.init.normal_(proj.weight, std=0.2)
        batch.detail_raw.class_token = batch.detail_raw.class_token.double()
        batch.detail_raw.patch_tokens = batch.detail_raw.patch_tokens.double()
        batch.recon_raw.class_token = batch.recon_raw.class_token.double()
        batch.recon_raw.patch_tokens = batch.recon_raw.patch_tokens.double()
        batch.text_tokens = batch.text_tokens.double()
        batch.latents = batch.latents.double()
        batch.target_feature = batch.target_feature.double()
        t = torch.tensor([7, 30])
        eps = torch.randn(2, *model.latent_shape, generator=torch.Generator().manual_seed(1), dtype=torch.float64)

        def ln():
            return branch_losses(batch, model, t, eps).l_normal

        worst_n = 0.0
        for param in (model.local_detail.fc1.weight, model.class_fuser.fc2.weight):
            model.zero_grad()
            ln().backward()
            grad = param.grad.clone()
            for idx in [(0, 0), (1, 2), (3, 5), (7, 7)]:
                worst_n = max(worst_n, _rel(float(grad[idx]), _central_fd(ln, param, idx, 1e-6)))
        secs = time.time() - start
        ok = worst_c <= 1e-4 and worst_n <= 1e-3 and secs < 10
        return ok, f"contrast rel {worst_c:.1e} (<= 1e-4), normal rel {worst_n:.1e} (<= 1e-3), {secs:.1f}s (< 10s)"

    _check(2, run)


# -- 3 ------------------------------------------------------------------------------------------


def test_criterion_03_forward_statistics():
    def run():
        start = time.time()
        s = NoiseSchedule.linear()
        n = 10_000
        x0 = torch.tensor([0.8, -0.3, 1.5], dtype=torch.float64)
        g = torch.Generator().manual_seed(0)
        lines, ok = [], True
        for t in (10, 500, 990):
            eps = torch.randn(n, 3, generator=g, dtype=torch.float64)
            xt = forward_diffuse(s, x0.expand(n, 3), t, eps)
            ab = float(s.alpha_bars[t])
            mean_target, var_target = np.sqrt(ab) * x0.numpy(), 1 - ab
            mean, var = xt.mean(0).numpy(), xt.var(0, unbiased=True).numpy()
            se_mean = np.sqrt(var_target / n)
            se_var = var_target * np.sqrt(2 / (n - 1))
            zm = np.abs(mean - mean_target) / se_mean
            zv = np.abs(var - var_target) / se_var
            ok &= bool((zm <= 3).all() and (zv <= 3).all())
            lines.append(f"t={t}: |z_mean|<={zm.max():.2f} |z_var|<={zv.max():.2f}")
        secs = time.time() - start
        return ok and secs < 30, "; ".join(lines) + f"; {secs:.1f}s"

    _check(3, run)


# -- 4 ------------------------------------------------------------------------------------------


def test_criterion_04_cfg_identities():
    def run():
        g = torch.Generator().manual_seed(0)
        u, c = torch.randn(4, 3, 8, 8, generator=g), torch.randn(4, 3, 8, 8, generator=g)
        exact = torch.equal(cfg_combine(u, c, 1), c) and torch.equal(cfg_combine(u, c, 0), u)
        cfg = RunConfig()
        model = CustomizationModel(cfg, seed=0)
        batch = prepare_batch(model, toy_items(1, seed=0))
        calls = {"n": 0}
        real = model.denoiser.forward

        def counting(*args, **kwargs):
            calls["n"] += 1
            return real(*args, **kwargs)

        model.denoiser.forward = counting
        images = model.generate(batch)
        runs = calls["n"] == 50 and images.shape == (1, 3, 16, 16) and bool(torch.isfinite(images).all())
        defaults = (cfg.sampling.steps, cfg.sampling.cfg_scale) == (50, 7.0)
        ok = exact and runs and defaults
        return ok, (f"s=1/s=0 bit-exact: {exact}; default sampler steps={cfg.sampling.steps} "
                    f"scale={cfg.sampling.cfg_scale}, {calls['n']} denoiser calls")

    _check(4, run)


# -- 5 ------------------------------------------------------------------------------------------


def test_criterion_05_zero_residual_isolation():
    def run():
        cfg = small_config()
        model = CustomizationModel(cfg, seed=3)
        # perturb everything, then zero only the local output projections
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.05 * torch.randn_like(p))
            for proj in model.denoiser.local_out_projections():
                proj.weight.zero_()
                proj.bias.zero_()
        batch = prepare_batch(model, toy_items(4, seed=1))
        _, c_g, c_l = model.conditions(batch)
        equal = 0
        for seed in range(10):
            g = torch.Generator().manual_seed(seed)
            x = torch.randn(4, *model.latent_shape, generator=g)
            t = torch.randint(0, cfg.denoiser.T, (4,), generator=g)
            with torch.no_grad():
                equal += torch.equal(model.predict_noise(x, t, c_g, c_l), model.predict_noise(x, t, c_g, None))
        return equal == 10, f"{equal}/10 seeded inputs bit-identical to the text-only pass"

    _check(5, run)


# -- 6 ------------------------------------------------------------------------------------------


def test_criterion_06_recomposition_and_dropout(monkeypatch):
    def run():
        import objcustom.trainer as trainer_mod

        reports = []
        real = trainer_mod.branch_losses

        def spy(*args, **kwargs):
            rep = real(*args, **kwargs)
            reports.append((rep, args[4]))
            return rep

        monkeypatch.setattr(trainer_mod, "branch_losses", spy)
        cfg = small_config(**{"train.max_steps": 25, "train.alpha1": 0.7, "train.alpha2": 1.3, "train.alpha3": 0.4})
        model = CustomizationModel(cfg, seed=0)
        train(cfg, prepare_batch(model, toy_items(8, seed=2)), model)
        exact = all(
            torch.equal(r.l_total, w[0] * r.l_normal + w[1] * r.l_decouple + w[2] * r.l_contrast)
            for r, w in reports
        )
        # dropout draws as the trainer makes them: one uniform per sample and path
        n = 10_000
        u = torch.rand(2, n, generator=torch.Generator().manual_seed(cfg.train.seed))
        c_g = GlobalCondition(torch.ones(n, 2, 1), torch.zeros(n, dtype=torch.long))
        c_l = LocalCondition(torch.ones(n, 2, 1))
        null_g = GlobalCondition(torch.zeros(n, 2, 1), torch.zeros(n, dtype=torch.long))
        null_l = LocalCondition(torch.zeros(n, 2, 1))
        g_out, l_out = apply_condition_dropout(c_g, c_l, u[0], u[1], 0.1, null_g, null_l)
        rate_g = float((g_out.tokens[:, 0, 0] == 0).float().mean())
        rate_l = float((l_out.tokens[:, 0, 0] == 0).float().mean())
        ok = exact and len(reports) == 25 and 0.09 <= rate_g <= 0.11 and 0.09 <= rate_l <= 0.11
        return ok, f"exact recomposition on {len(reports)} steps: {exact}; null rates {rate_g:.4f} / {rate_l:.4f}"

    _check(6, run)


# -- 7 and 8: toy training runs ----------------------------------------------------------------


@pytest.fixture(scope="session")
def toy_runs():
    """Default, alpha3 = 0 and detail-only runs on three seeds (2,000 steps each)."""
    from objcustom.experiments import run_toy, toy_pairs

    variants = {"default": {}, "no_contrast": {"train.alpha3": 0}, "detail_only": {"extractor.mode": "detail_only"}}
    results = {name: [] for name in variants}
    for seed in SEEDS:
        train_pairs = toy_pairs(seed=100 + seed)
        probe_pairs = toy_pairs(seed=900 + seed, n_groups=12, pairs_per_group=1, prefix="p")
        for name, overrides in variants.items():
            cfg = toy_config(**{"train.seed": seed, **overrides})
            results[name].append(run_toy(cfg, train_pairs, probe_pairs, seed=seed))
    return results


def _median(runs, attr):
    return statistics.median(getattr(r, attr) for r in runs)


@pytest.mark.slow
def test_criterion_07_decoupling_effect(toy_runs):
    def run():
        d, n = toy_runs["default"], toy_runs["no_contrast"]
        assert all(len(r.history) == 2000 for r in d + n)
        cos0, cos1 = _median(d, "cos_init"), _median(d, "cos_final")
        clip_d, clip_n = _median(d, "clip_i"), _median(n, "clip_i")
        div_d, div_n = _median(d, "diversim_i"), _median(n, "diversim_i")
        a = cos1 < cos0
        b = clip_d >= clip_n and div_d <= div_n
        detail = (f"(a) median |cos| {cos0:.4f} -> {cos1:.4f}: {'ok' if a else 'not lower'}; "
                  f"(b) CLIP-i {clip_d:.2f} vs {clip_n:.2f} (alpha3=0), DiverSim-i {div_d:.2f} vs {div_n:.2f}: "
                  f"{'ok' if b else 'direction not met'}")
        return a and b, detail

    _check(7, run)


@pytest.mark.slow
def test_criterion_08_ensemble_color_fidelity(toy_runs):
    def run():
        ens, det = _median(toy_runs["default"], "color_fidelity"), _median(toy_runs["detail_only"], "color_fidelity")
        per_seed = ", ".join(f"{a.color_fidelity:.3f}/{b.color_fidelity:.3f}"
                             for a, b in zip(toy_runs["default"], toy_runs["detail_only"]))
        return ens > det, f"median color fidelity ensemble {ens:.4f} vs detail-only {det:.4f} (per seed {per_seed})"

    _check(8, run)


# -- 9 ------------------------------------------------------------------------------------------


def test_criterion_09_metrics_suite(tmp_path):
    def run():
        import shutil

        from objcustom.dataset import build_dataset
        from objcustom.metrics import ToyConvEmbedder, build_embedders, diversim_i, evaluate, fid, pairwise_sim
        from objcustom.toy import make_toy_groups

        start = time.time()
        rng = np.random.default_rng(0)
        a = rng.normal(size=(300, 8))
        self_fid = fid(a, a)
        worst = 0.0
        for seed in range(5):
            r = np.random.default_rng(100 + seed)
            x = r.normal(size=(400, 6))
            y = r.normal(loc=0.3, size=(350, 6)) @ r.normal(size=(6, 6))
            s1, s2 = np.cov(x, rowvar=False), np.cov(y, rowvar=False)
            covmean = scipy.linalg.sqrtm(s1 @ s2).real
            literal = float(((x.mean(0) - y.mean(0)) ** 2).sum() + np.trace(s1 + s2 - 2 * covmean))
            worst = max(worst, abs(fid(x, y) - literal))
        emb = ToyConvEmbedder(seed=11, dim=64)
        img = torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0))
        self_sim = pairwise_sim(emb, img, img)
        div_mean, div_std = diversim_i({"Snow": [img, img], "Beach": [img], "Grass": [img]}, emb)

        manifest, _ = build_dataset(make_toy_groups(6, 3, seed=9), tmp_path / "ds", seed=4)
        gdir = tmp_path / "gen"
        gdir.mkdir()
        for rec in manifest.records:
            shutil.copy(manifest.resolve(rec.target_image_path), gdir / f"{rec.sample_id}.png")
        report = evaluate(manifest, gdir, build_embedders(RunConfig().metrics.embedders), compare_to="target")
        secs = time.time() - start
        ok = (self_fid <= 1e-6 and worst <= 1e-4 and abs(self_sim - 100) <= 1e-9
              and abs(div_mean - 100) <= 1e-9 and div_std <= 1e-9
              and abs(report.clip_i - 100) <= 1e-6 and abs(report.dino_i - 100) <= 1e-6
              and report.fid <= 1e-6 and secs < 60)
        return ok, (f"fid(A,A)={self_fid:.1e}, |fid-oracle|<={worst:.1e}, self-sim {self_sim:.6f}, "
                    f"DiverSim {div_mean:.6f}+-{div_std:.1e}, target-as-generation CLIP-i {report.clip_i:.6f} "
                    f"DINO-i {report.dino_i:.6f} FID {report.fid:.1e}, {secs:.1f}s")

    _check(9, run)


# -- 10 -----------------------------------------------------------------------------------------


def _contains(window, bbox):
    top, left, h, w = window
    y0, x0, y1, x1 = bbox
    return top <= y0 and left <= x0 and top + h >= y1 and left + w >= x1


def test_criterion_10_dataset_pipeline(tmp_path):
    def run():
        from objcustom.toy import make_toy_groups

        start = time.time()
        # a seeded pool from the toy generator, some groups below the 300 px threshold
        pool = make_toy_groups(60, 3, seed=2024, small_fraction=0.2)
        by_id = {g.group_id: g for g in pool}
        bad = []
        n_records = n_filtered = 0
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            chosen = [pool[i] for i in rng.choice(len(pool), size=3, replace=False)]
            pairs, skipped = build_pairs(chosen, seed, pairs_per_group=2)
            n_filtered += len(skipped)
            for p in pairs:
                g = by_id[p.group_id]
                if min(p.ref_image.shape[:2]) < 300 or min(p.target_image.shape[:2]) < 300:
                    bad.append(f"{seed}/{p.sample_id}: below 300 px")
                if g.kind == "single":
                    frame = g.frames[0]
                    src_ids = {frame.object_id}
                    for key in ("ref", "target"):
                        if not _contains(p.params[key]["crop"], mask_bbox(frame.mask)):
                            bad.append(f"{seed}/{p.sample_id}: {key} crop misses bbox")
                    if int(p.ref_mask.sum()) != int(frame.mask.sum()):
                        bad.append(f"{seed}/{p.sample_id}: reference crop cuts the object")
                else:
                    i, j = p.params["frames"]
                    src_ids = {g.frames[i].object_id, g.frames[j].object_id}
                    for frame, win in ((g.frames[i], p.params["ref_crop"]), (g.frames[j], p.params["target_crop"])):
                        if not _contains(win, mask_bbox(frame.mask)):
                            bad.append(f"{seed}/{p.sample_id}: crop misses bbox")
                    if int(p.ref_mask.sum()) != int(g.frames[i].mask.sum()):
                        bad.append(f"{seed}/{p.sample_id}: reference crop cuts the object")
                if len(src_ids) != 1 or p.object_id not in src_ids:
                    bad.append(f"{seed}/{p.sample_id}: object_id mismatch")
            if any(min(f.image.shape[:2]) < 300 for g in chosen for f in g.frames):
                assert any(g.group_id in skipped for g in chosen)
            records = [ManifestRecord(p.sample_id, f"images/{p.sample_id}_ref.png", f"images/{p.sample_id}_mask.png",
                                      f"images/{p.sample_id}_target.png", p.caption, p.class_word, p.category)
                       for p in pairs]
            path = tmp_path / f"m{seed % 4}.jsonl"
            written = write_manifest(records, path)
            again = read_manifest(path, check_files=False)
            if again.records != records or again.stats != written.stats:
                bad.append(f"{seed}: manifest round trip differs")
            n_records += len(records)
        secs = time.time() - start
        ok = not bad and secs < 120 and n_records > 0
        detail = (f"{n_records} records over 1000 builds ({n_filtered} small groups filtered), "
                  f"{len(bad)} violations, {secs:.1f}s (< 120s)")
        if bad:
            detail += f"; first: {bad[0]}"
        return ok, detail

    _check(10, run)
