"""Command line entry point: make-toy-sources, build-dataset, train, generate, evaluate.

Exit codes: 0 ok, 1 validation failure (bad config, manifest, request), 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from .config import apply_overrides, load_config, save_config, to_dict
from .errors import ConfigError, ManifestError

log = logging.getLogger("objcustom")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    pass


@dataclass
class GenerationRequest:
    prompt: str
    class_word: str
    ref_image_path: str
    ref_mask_path: str
    count: int = 1
    seed: int = 0

    def validate(self):
        from .text import tokenize

        if self.class_word.lower() not in tokenize(self.prompt):
            raise ValidationError(f"class word {self.class_word!r} does not occur in prompt {self.prompt!r}")
        if self.count < 1:
            raise ValidationError("count must be >= 1")


def _config(args):
    cfg = load_config(args.config)
    overrides = list(args.set or [])
    for flag, key in (("epochs", "train.epochs"), ("alpha3", "train.alpha3"), ("lr", "train.lr"),
                      ("batch_size", "train.batch_size"), ("max_steps", "train.max_steps"), ("seed", "train.seed"),
                      ("steps", "sampling.steps"), ("cfg_scale", "sampling.cfg_scale")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _to_uint8(image):
    return (image.clamp(0, 1).permute(1, 2, 0).numpy() * 255).round().astype(np.uint8)


def save_image(image, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(_to_uint8(image)).save(path)


def contact_sheet(images, cols=None):
    """Tile [C,H,W] images into one uint8 array, row-major, with a 2 px gutter."""
    n = len(images)
    cols = cols or math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    h, w = images[0].shape[-2:]
    pad = 2
    sheet = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, np.uint8)
    for i, im in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        sheet[y:y + h, x:x + w] = _to_uint8(im)
    return sheet


def _read_rgb(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def _read_mask(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


# -- subcommands ---------------------------------------------------------------------------


def cmd_make_toy_sources(args):
    from .dataset import write_sources
    from .toy import make_toy_groups

    groups = make_toy_groups(args.groups, args.frames, seed=args.seed, size=args.size)
    write_sources(groups, args.out)
    print(f"wrote {len(groups)} source groups to {args.out}")


def cmd_build_dataset(args):
    from .dataset import build_dataset

    manifest, skipped = build_dataset(args.sources, args.out, args.seed, min_side=args.min_side,
                                      pairs_per_group=args.pairs_per_group, min_gap=args.min_gap, jitter=args.jitter)
    for gid in skipped:
        log.warning("skipped group %s: no usable frames or pairs", gid)
    print(f"wrote {len(manifest.records)} records to {Path(args.out) / 'manifest.jsonl'}")


def cmd_train(args):
    from .dataset import read_manifest
    from .model import CustomizationModel
    from .trainer import prepare_manifest, save_checkpoint, train

    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    manifest = read_manifest(args.manifest, min_side=cfg.dataset.min_side)
    torch.manual_seed(cfg.seed)
    model = CustomizationModel(cfg, seed=cfg.seed)
    data = prepare_manifest(model, manifest)
    result = train(cfg, data, model, out_dir=out, resume=args.resume)
    if not result.checkpoints:
        save_checkpoint(out / "final.pt", model)
    print(f"trained {result.steps} steps ({result.skipped} skipped); checkpoint {out / 'final.pt'}")


def cmd_generate(args):
    from .trainer import load_checkpoint, prepare_batch

    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    steps = args.steps if args.steps is not None else cfg.sampling.steps
    scale = args.cfg_scale if args.cfg_scale is not None else cfg.sampling.cfg_scale
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.manifest:
        from .dataset import load_record_images, read_manifest
        from .metrics import ScenarioPromptSet, scenario_slug

        manifest = read_manifest(args.manifest, min_side=cfg.dataset.min_side)
        prompts = ScenarioPromptSet()
        for i, r in enumerate(manifest.records):
            ref, mask, _ = load_record_images(manifest, r)
            batch = prepare_batch(model, [(ref, mask, None, r.caption, r.class_word)])
            save_image(model.generate(batch, steps, scale, seed=args.seed + i)[0], out / f"{r.sample_id}.png")
            if args.diversim:
                base = cfg.metrics.diversim_base_prompt.format(class_word=r.class_word)
                items = [(ref, mask, None, p, r.class_word) for _, p in prompts.expand(base)]
                items = items * cfg.metrics.images_per_scenario
                images = model.generate(prepare_batch(model, items), steps, scale, seed=args.seed + i)
                k = len(prompts.scenarios)
                for j, im in enumerate(images):
                    name = prompts.names()[j % k]
                    save_image(im, out / "diversim" / r.sample_id / scenario_slug(name) / f"{j // k}.png")
        (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True))
        print(f"wrote generations for {len(manifest.records)} records to {out}")
        return

    if not (args.prompt and args.class_word and args.ref and args.mask):
        raise ValidationError("single-request mode needs --prompt, --class-word, --ref and --mask")
    req = GenerationRequest(args.prompt, args.class_word, args.ref, args.mask, args.count, args.seed)
    req.validate()
    ref, mask = _read_rgb(req.ref_image_path), _read_mask(req.ref_mask_path)
    batch = prepare_batch(model, [(ref, mask, None, req.prompt, req.class_word)] * req.count)
    images = model.generate(batch, steps, scale, seed=req.seed)
    for i, im in enumerate(images):
        save_image(im, out / f"sample_{i:03d}.png")
    Image.fromarray(contact_sheet(list(images))).save(out / "grid.png")
    request = {**asdict(req), "steps": steps, "cfg_scale": scale, "checkpoint": str(args.checkpoint),
               "config": to_dict(cfg)}
    (out / "request.json").write_text(json.dumps(request, indent=2, sort_keys=True))
    print(f"wrote {args.count} images and grid.png to {out}")


def cmd_evaluate(args):
    from .dataset import read_manifest
    from .metrics import build_embedders, evaluate

    cfg = _config(args)
    embedder_cfg = cfg.metrics.embedders
    if args.embedder_config:
        embedder_cfg = yaml.safe_load(Path(args.embedder_config).read_text())
        if not isinstance(embedder_cfg, dict):
            raise ConfigError(f"{args.embedder_config}: expected a mapping of metric name to embedder spec")
    compare_to = args.compare_to or cfg.metrics.compare_to
    manifest = read_manifest(args.manifest, check_files=True, min_side=cfg.dataset.min_side)
    report = evaluate(manifest, args.generations, build_embedders(embedder_cfg), compare_to=compare_to,
                      diversim_pairs=cfg.metrics.diversim_pairs, base_prompt=cfg.metrics.diversim_base_prompt)
    provenance = to_dict(cfg)
    provenance["metrics"]["embedders"] = embedder_cfg
    report.write(args.report, provenance)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "missing"}, sort_keys=True))
    if report.missing_fraction > cfg.metrics.max_missing_fraction:
        raise ValidationError(f"{len(report.missing)} of {len(manifest.records)} generations missing "
                              f"(> {cfg.metrics.max_missing_fraction:.0%}): {', '.join(report.missing[:10])}")


# -- parser -------------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", default=None, help="YAML/JSON config file or preset name (e.g. toy)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry, repeatable")


def build_parser():
    parser = argparse.ArgumentParser(prog="objcustom", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy-sources", help="render the procedural shapes corpus as source groups")
    p.add_argument("--out", required=True)
    p.add_argument("--groups", type=int, default=20)
    p.add_argument("--frames", type=int, default=4)
    p.add_argument("--size", type=int, default=320)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_sources)

    p = sub.add_parser("build-dataset", help="build reference/target pairs and a manifest")
    p.add_argument("--sources", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-side", type=int, default=300)
    p.add_argument("--pairs-per-group", type=int, default=1)
    p.add_argument("--min-gap", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.1)
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="train the adapter modules on a manifest")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--alpha3", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompt")
    p.add_argument("--class-word")
    p.add_argument("--ref")
    p.add_argument("--mask")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int)
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--manifest", help="generate one image per manifest record instead of a single request")
    p.add_argument("--diversim", action="store_true", help="also write per-scenario generations (manifest mode)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generations against a manifest")
    _add_config_flags(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--embedder-config")
    p.add_argument("--compare-to", choices=("reference", "target"))
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ManifestError as exc:
        print("invalid manifest:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  - {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
