"""Procedural shapes corpus with ground-truth identities.

Identity is (shape, color, texture); pose (position, size, rotation) and the
background scene are nuisance factors. Captions name the shape and the scene
but never the color, so color can only reach the model through the reference.
"""
from __future__ import annotations

import math

import numpy as np
from PIL import Image, ImageDraw

from .dataset import Frame, SourceGroup

SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (210, 40, 40),
    "blue": (40, 70, 210),
    "purple": (140, 50, 190),
    "orange": (240, 140, 30),
}
TEXTURES = ("solid", "striped")
SCENES = {
    "snow": ((236, 240, 246), "in the snow"),
    "grass": ((70, 150, 60), "on the grass"),
    "beach": ((225, 205, 150), "on the beach"),
    "jungle": ((25, 80, 35), "in the jungle"),
    "eiffel tower": ((150, 175, 205), "beside the Eiffel Tower"),
}


def caption_for(shape, scene):
    return f"a photo of a {shape}. The scene of the picture is {SCENES[scene][1]}."


def render_background(scene, size, rng):
    base = np.array(SCENES[scene][0], dtype=np.float32)
    img = base + rng.normal(0, 6, size=(size, size, 1)).astype(np.float32)
    if scene == "jungle":
        stripes = (np.sin(np.arange(size) / size * 18 * math.pi) > 0.6)[None, :, None]
        img = img - 18 * stripes
    elif scene == "grass":
        img[: size // 3] = np.array((150, 200, 240), dtype=np.float32)
    elif scene == "beach":
        img[: size // 3] = np.array((120, 180, 235), dtype=np.float32)
    elif scene == "eiffel tower":
        x = np.arange(size)[None, :]
        y = np.arange(size)[:, None]
        cx = 0.8 * size
        half = 0.02 * size + 0.12 * size * (y / size)
        img[(np.abs(x - cx) < half) & (y > 0.1 * size)] = (60, 55, 50)
    return np.clip(img, 0, 255).astype(np.uint8)


def shape_polygon(shape, cx, cy, r, angle):
    if shape == "square":
        corners = [45, 135, 225, 315]
    elif shape == "triangle":
        corners = [90, 210, 330]
    else:
        corners = list(range(0, 360, 10))
    pts = []
    for c in corners:
        a = math.radians(c + angle)
        pts.append((cx + r * math.cos(a), cy - r * math.sin(a)))
    return pts


def render_object(img, shape, color, texture, pose):
    """Draw the object onto ``img`` (uint8 HxWx3) and return its boolean mask."""
    size = img.shape[0]
    cx, cy, scale, angle = pose
    poly = shape_polygon(shape, cx * size, cy * size, scale * size, angle)
    m = Image.new("L", (size, size), 0)
    ImageDraw.Draw(m).polygon(poly, fill=255)
    mask = np.asarray(m) > 127
    rgb = np.array(COLORS[color], dtype=np.float32)
    fill = np.broadcast_to(rgb, img.shape).copy()
    if texture == "striped":
        band = ((np.arange(size)[:, None] + np.arange(size)[None, :]) // max(size // 24, 1)) % 2 == 0
        fill[band] = rgb * 0.55
    out = img.copy()
    out[mask] = fill[mask].astype(np.uint8)
    return out, mask


def random_pose(rng):
    scale = rng.uniform(0.16, 0.3)
    cx = rng.uniform(scale + 0.05, 0.95 - scale)
    cy = rng.uniform(scale + 0.05, 0.95 - scale)
    return (cx, cy, scale, rng.uniform(0, 360))


def render_frame(shape, color, texture, pose, scene, size, rng):
    bg = render_background(scene, size, rng)
    return render_object(bg, shape, color, texture, pose)


def make_toy_groups(n_groups, frames_per_group=3, seed=0, size=320, kinds=("video", "multiview", "single"),
                    textures=("solid",), small_fraction=0.0, prefix="g"):
    """Toy source groups. ``single`` groups hold one frame; a ``small_fraction`` of
    groups is rendered at 256 px so the resolution filter has something to drop."""
    rng = np.random.default_rng(seed)
    groups = []
    for gi in range(n_groups):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(COLORS)[rng.integers(len(COLORS))]
        texture = textures[rng.integers(len(textures))]
        kind = kinds[gi % len(kinds)]
        side = 256 if rng.uniform() < small_fraction else size
        object_id = f"{shape}-{color}-{texture}"
        n = 1 if kind == "single" else frames_per_group
        scenes = list(SCENES)
        scene0 = scenes[rng.integers(len(scenes))]
        start, end = random_pose(rng), random_pose(rng)
        frames = []
        for k in range(n):
            if kind == "video":
                w = k / max(n - 1, 1)
                pose = tuple((1 - w) * a + w * b for a, b in zip(start, end))
                scene = scene0
            else:
                pose = random_pose(rng)
                scene = scenes[rng.integers(len(scenes))]
            img, mask = render_frame(shape, color, texture, pose, scene, side, rng)
            frames.append(Frame(img, mask, object_id, shape, shape, caption_for(shape, scene)))
        groups.append(SourceGroup(f"{prefix}{gi:04d}", kind, frames))
    return groups
