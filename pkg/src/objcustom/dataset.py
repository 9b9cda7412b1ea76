"""Reference/target pair construction from video clips, multi-view sets and
single images, the resolution filter, and line-delimited manifests.

Images in this module are ``uint8`` arrays ``[H, W, 3]``; masks are ``bool``
arrays ``[H, W]``.
"""
from __future__ import annotations

import json
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ManifestError

CAPTION_TEMPLATE = "a photo of a {class_word}"
GROUP_KINDS = ("video", "multiview", "single")
RECORD_FIELDS = (
    "sample_id", "ref_image_path", "ref_mask_path", "target_image_path", "caption", "class_word", "category",
)


class SkipGroup(Exception):
    """The group cannot yield a pair (no object id appears in two usable frames)."""


@dataclass
class Frame:
    image: np.ndarray
    mask: np.ndarray
    object_id: str
    class_word: str
    category: str
    caption: str | None = None


@dataclass
class SourceGroup:
    group_id: str
    kind: str
    frames: list

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise ValueError(f"unknown group kind {self.kind!r}")


@dataclass
class PairSample:
    sample_id: str
    ref_image: np.ndarray
    ref_mask: np.ndarray
    target_image: np.ndarray
    caption: str
    class_word: str
    category: str
    object_id: str = ""
    group_id: str = ""
    params: dict = field(default_factory=dict)


@dataclass
class ManifestRecord:
    sample_id: str
    ref_image_path: str
    ref_mask_path: str
    target_image_path: str
    caption: str
    class_word: str
    category: str


@dataclass
class Manifest:
    records: list
    stats: dict
    root: Path | None = None

    def resolve(self, rel):
        return Path(rel) if self.root is None else self.root / rel


# -- filtering -------------------------------------------------------------------------


def image_hw(image):
    if isinstance(image, Image.Image):
        return image.size[1], image.size[0]
    return int(image.shape[0]), int(image.shape[1])


def passes_resolution(image, min_side=300):
    h, w = image_hw(image)
    return h >= min_side and w >= min_side


def filter_resolution(images, min_side=300):
    """Keep images whose height and width are both at least ``min_side``."""
    return [im for im in images if passes_resolution(im, min_side)]


# -- cropping and augmentation -------------------------------------------------------------


def mask_bbox(mask):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def _crop_axis(rng, frame_len, lo_box, hi_box, min_side):
    box = hi_box - lo_box
    lo = max(box, min(min_side, frame_len))
    hi = max(lo, min(frame_len, 2 * box))
    side = int(rng.integers(lo, hi + 1))
    first = max(0, hi_box - side)
    last = min(lo_box, frame_len - side)
    start = int(rng.integers(first, last + 1))
    return start, side


def random_crop_window(rng, hw, bbox, min_side=300):
    """(top, left, height, width) of a random window containing ``bbox``.

    Per axis the side is uniform over [max(box, min(min_side, frame)), min(frame, 2 * box)].
    """
    y0, x0, y1, x1 = bbox
    top, h = _crop_axis(rng, hw[0], y0, y1, min_side)
    left, w = _crop_axis(rng, hw[1], x0, x1, min_side)
    return top, left, h, w


def _apply_crop(arr, window):
    top, left, h, w = window
    return arr[top:top + h, left:left + w]


def color_jitter(image, brightness, contrast, saturation):
    x = image.astype(np.float32) / 255.0
    x = x * brightness
    x = (x - x.mean()) * contrast + x.mean()
    gray = (0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2])[..., None]
    x = gray + (x - gray) * saturation
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def sample_augmentation(rng, hw, bbox, augmentations, jitter=0.1, min_side=300, allow_jitter=True):
    params = {"flip": False, "crop": None, "jitter": None}
    if "flip" in augmentations:
        params["flip"] = bool(rng.integers(0, 2))
    if "crop" in augmentations:
        params["crop"] = random_crop_window(rng, hw, bbox, min_side)
    if "jitter" in augmentations and allow_jitter:
        params["jitter"] = tuple(float(v) for v in rng.uniform(1 - jitter, 1 + jitter, size=3))
    return params


def apply_augmentation(image, mask, params):
    if params["flip"]:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if params["crop"] is not None:
        # the window was sampled on the unflipped frame; mirror it when flipped
        top, left, h, w = params["crop"]
        if params["flip"]:
            left = image.shape[1] - left - w
        image, mask = _apply_crop(image, (top, left, h, w)), _apply_crop(mask, (top, left, h, w))
    if params["jitter"] is not None:
        image = color_jitter(image, *params["jitter"])
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)


def _caption(frame, template):
    return frame.caption if frame.caption else template.format(class_word=frame.class_word)


def make_pair_from_group(group, rng, sample_id="", min_gap=0, min_side=300, caption_template=CAPTION_TEMPLATE):
    """Pick two distinct frames of one object uniformly at random, crop each around
    the object; the first becomes the reference, the second the target."""
    if group.kind == "single":
        raise SkipGroup(f"{group.group_id}: single-image group")
    gap = max(min_gap, 1)
    candidates = [
        (i, j)
        for i, a in enumerate(group.frames)
        for j, b in enumerate(group.frames)
        if abs(i - j) >= gap and a.object_id == b.object_id
    ]
    if not candidates:
        raise SkipGroup(f"{group.group_id}: no object id shared by two frames")
    i, j = candidates[int(rng.integers(len(candidates)))]
    ref, tgt = group.frames[i], group.frames[j]
    ref_win = random_crop_window(rng, image_hw(ref.image), mask_bbox(ref.mask), min_side)
    tgt_win = random_crop_window(rng, image_hw(tgt.image), mask_bbox(tgt.mask), min_side)
    return PairSample(
        sample_id=sample_id,
        ref_image=np.ascontiguousarray(_apply_crop(ref.image, ref_win)),
        ref_mask=np.ascontiguousarray(_apply_crop(ref.mask, ref_win)),
        target_image=np.ascontiguousarray(_apply_crop(tgt.image, tgt_win)),
        caption=_caption(tgt, caption_template),
        class_word=tgt.class_word,
        category=tgt.category,
        object_id=ref.object_id,
        group_id=group.group_id,
        params={"frames": (i, j), "ref_crop": ref_win, "target_crop": tgt_win},
    )


def make_pair_from_single(frame, rng, sample_id="", group_id="", augmentations=("flip", "crop", "jitter"),
                          jitter=0.1, min_side=300, caption_template=CAPTION_TEMPLATE):
    """Two independent augmentations of one image. Color jitter goes on the target only."""
    hw, bbox = image_hw(frame.image), mask_bbox(frame.mask)
    ref_p = sample_augmentation(rng, hw, bbox, augmentations, jitter, min_side, allow_jitter=False)
    tgt_p = sample_augmentation(rng, hw, bbox, augmentations, jitter, min_side)
    ref_img, ref_mask = apply_augmentation(frame.image, frame.mask, ref_p)
    tgt_img, _ = apply_augmentation(frame.image, frame.mask, tgt_p)
    return PairSample(
        sample_id=sample_id,
        ref_image=ref_img,
        ref_mask=ref_mask,
        target_image=tgt_img,
        caption=_caption(frame, caption_template),
        class_word=frame.class_word,
        category=frame.category,
        object_id=frame.object_id,
        group_id=group_id,
        params={"ref": ref_p, "target": tgt_p},
    )


def group_rng(seed, group_id):
    return np.random.default_rng([int(seed), zlib.crc32(group_id.encode())])


def build_pairs(groups, seed, pairs_per_group=1, min_side=300, min_gap=0, jitter=0.1,
                caption_template=CAPTION_TEMPLATE):
    """Pairs for every group; a pure function of (groups, seed). Returns (pairs, skipped_group_ids)."""
    pairs, skipped = [], []
    for group in groups:
        rng = group_rng(seed, group.group_id)
        usable = [
            f for f in group.frames
            if passes_resolution(f.image, min_side) and f.mask.shape == image_hw(f.image) and f.mask.any()
        ]
        g = SourceGroup(group.group_id, group.kind, usable)
        if not usable:
            skipped.append(group.group_id)
            continue
        try:
            for k in range(pairs_per_group):
                sid = f"{group.group_id}-{k:03d}"
                if g.kind == "single":
                    frame = usable[int(rng.integers(len(usable)))]
                    pairs.append(make_pair_from_single(frame, rng, sid, g.group_id, jitter=jitter,
                                                       min_side=min_side, caption_template=caption_template))
                else:
                    pairs.append(make_pair_from_group(g, rng, sid, min_gap, min_side, caption_template))
        except SkipGroup:
            skipped.append(group.group_id)
    return pairs, skipped


# -- on-disk sources ---------------------------------------------------------------------


def _load_png(path, mode):
    with Image.open(path) as im:
        return np.asarray(im.convert(mode))


def save_png(path, array):
    if array.dtype == bool:
        array = array.astype(np.uint8) * 255
    Image.fromarray(array).save(path, compress_level=1)


def write_sources(groups, root):
    """One directory per group with PNG frames/masks and a ``group.json`` listing."""
    root = Path(root)
    for group in groups:
        gdir = root / group.group_id
        gdir.mkdir(parents=True, exist_ok=True)
        entries = []
        for k, f in enumerate(group.frames):
            save_png(gdir / f"frame_{k:03d}.png", f.image)
            save_png(gdir / f"mask_{k:03d}.png", f.mask)
            entries.append({
                "image": f"frame_{k:03d}.png", "mask": f"mask_{k:03d}.png", "object_id": f.object_id,
                "class_word": f.class_word, "category": f.category, "caption": f.caption,
            })
        (gdir / "group.json").write_text(json.dumps({"group_id": group.group_id, "kind": group.kind,
                                                      "frames": entries}, indent=1))


def load_sources(root):
    root = Path(root)
    if not root.is_dir():
        raise ManifestError([f"sources directory not found: {root}"])
    groups, problems = [], []
    for listing in sorted(root.glob("*/group.json")):
        try:
            meta = json.loads(listing.read_text())
            frames = [
                Frame(
                    _load_png(listing.parent / e["image"], "RGB"),
                    _load_png(listing.parent / e["mask"], "L") > 127,
                    str(e["object_id"]), e["class_word"], e.get("category", e["class_word"]), e.get("caption"),
                )
                for e in meta["frames"]
            ]
            groups.append(SourceGroup(meta.get("group_id", listing.parent.name), meta["kind"], frames))
        except (OSError, KeyError, ValueError) as exc:
            problems.append(f"{listing}: {exc}")
    if problems:
        raise ManifestError(problems)
    if not groups:
        raise ManifestError([f"no */group.json listings under {root}"])
    return groups


# -- manifests ---------------------------------------------------------------------------


def compute_stats(records):
    return {"count": len(records), "categories": dict(sorted(Counter(r.category for r in records).items()))}


def _stats_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".stats.json")


def write_manifest(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    stats = compute_stats(records)
    _stats_path(path).write_text(json.dumps(stats, indent=1, sort_keys=True))
    return Manifest(list(records), stats, path.parent)


def read_manifest(path, check_files=True, min_side=300):
    """Parse and validate a manifest. All problems are collected into one ``ManifestError``."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError([f"manifest not found: {path}"])
    records, problems = [], []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            data = json.loads(line)
            if set(data) != set(RECORD_FIELDS):
                raise ValueError(f"fields {sorted(data)} != {sorted(RECORD_FIELDS)}")
            if not all(isinstance(data[k], str) for k in RECORD_FIELDS):
                raise ValueError("all fields must be strings")
            records.append(ManifestRecord(**data))
        except ValueError as exc:
            problems.append(f"line {lineno}: malformed record ({exc})")
    ids = Counter(r.sample_id for r in records)
    problems += [f"duplicate sample_id {sid}" for sid, n in ids.items() if n > 1]
    if check_files:
        for r in records:
            for rel in (r.ref_image_path, r.ref_mask_path, r.target_image_path):
                p = path.parent / rel
                if not p.is_file():
                    problems.append(f"{r.sample_id}: missing file {p}")
                    continue
                with Image.open(p) as im:
                    if not passes_resolution(im, min_side):
                        problems.append(f"{r.sample_id}: {p} smaller than {min_side}x{min_side}")
    stats = compute_stats(records)
    sp = _stats_path(path)
    if sp.is_file():
        stored = json.loads(sp.read_text())
        if stored != stats:
            problems.append(f"stats mismatch: stored {stored}, recomputed {stats}")
    if problems:
        raise ManifestError(problems)
    return Manifest(records, stats, path.parent)


def write_dataset(pairs, out_dir, name="manifest.jsonl"):
    """Write pair images under ``out_dir/images`` and the manifest beside them."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for p in pairs:
        paths = {k: f"images/{p.sample_id}_{k}.png" for k in ("ref", "mask", "target")}
        save_png(out_dir / paths["ref"], p.ref_image)
        save_png(out_dir / paths["mask"], p.ref_mask)
        save_png(out_dir / paths["target"], p.target_image)
        records.append(ManifestRecord(p.sample_id, paths["ref"], paths["mask"], paths["target"],
                                      p.caption, p.class_word, p.category))
    return write_manifest(records, out_dir / name)


def load_record_images(manifest, record):
    """(ref_image, ref_mask, target_image) as numpy arrays."""
    ref = _load_png(manifest.resolve(record.ref_image_path), "RGB")
    mask = _load_png(manifest.resolve(record.ref_mask_path), "L") > 127
    tgt = _load_png(manifest.resolve(record.target_image_path), "RGB")
    return ref, mask, tgt


def build_dataset(sources, out_dir, seed, min_side=300, pairs_per_group=1, min_gap=0, jitter=0.1):
    groups = load_sources(sources) if not isinstance(sources, list) else sources
    pairs, skipped = build_pairs(groups, seed, pairs_per_group, min_side, min_gap, jitter)
    manifest = write_dataset(pairs, out_dir)
    return manifest, skipped
