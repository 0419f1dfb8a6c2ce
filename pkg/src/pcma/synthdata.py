"""Seeded synthetic audio-visual scenes.

Each scene renders 1-3 filled circles with class-specific colors onto a
noisy background; every frame has at least one sounding object. The audio
descriptor of a frame is the sum of the signatures of that frame's
sounding classes plus Gaussian noise, where class signatures are rows of a
scaled Walsh matrix: fixed, unit-norm, and pairwise orthogonal, so the
audio-to-class mapping is decodable by construction. The ground truth
marks exactly the pixels covered by a sounding object.

Scene content depends only on (seed, scene index): each scene draws from
its own counter-based stream, so generation order and count never change
what a given index contains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_tensor, write_tensor

__all__ = [
    "Scene",
    "generate",
    "class_signatures",
    "write_dataset",
    "load_dataset",
    "load_scene",
    "DATASET_MANIFEST",
]

DATASET_MANIFEST = "manifest.json"

# 16 fixed, well-separated RGB colors; index = class id.
PALETTE = np.array(
    [
        [0.90, 0.10, 0.10], [0.10, 0.75, 0.10], [0.15, 0.25, 0.95], [0.95, 0.80, 0.10],
        [0.80, 0.15, 0.80], [0.10, 0.80, 0.80], [0.95, 0.55, 0.10], [0.55, 0.35, 0.15],
        [0.45, 0.95, 0.45], [0.60, 0.60, 0.95], [0.95, 0.45, 0.65], [0.35, 0.55, 0.35],
        [0.75, 0.75, 0.45], [0.40, 0.15, 0.55], [0.20, 0.45, 0.60], [0.70, 0.30, 0.30],
    ],
    dtype=np.float32,
)

BACKGROUND = 0.12
BACKGROUND_NOISE = 0.02
TEXTURE_NOISE = 0.05


@dataclass
class Scene:
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    audio: np.ndarray  # [T, d] float32
    gt: np.ndarray  # [T, H, W] uint8
    meta: dict


def class_signatures(n_classes: int, dim: int) -> np.ndarray:
    """Unit-norm, pairwise-orthogonal class vectors (scaled Walsh rows)."""
    if n_classes >= dim:
        raise ValueError(f"need audio dim > n_classes, got {dim} <= {n_classes}")
    if dim & (dim - 1) == 0:
        h = np.array([[1.0]])
        while h.shape[0] < dim:
            h = np.block([[h, h], [h, -h]])
        basis = h / np.sqrt(dim)
    else:
        basis = np.eye(dim)
    # skip row 0 (the all-ones Walsh row) so signatures are zero-mean
    return basis[1 : n_classes + 1].astype(np.float32)


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def _render(rng, t, h, w, n_classes, noise, dim, signatures) -> Scene:
    n_objects = int(rng.integers(1, 4))
    yy, xx = np.mgrid[0:h, 0:w]
    objects = []
    covers = []
    r_lo, r_hi = max(3, h // 10), max(4, h // 4)
    for _ in range(n_objects):
        class_id = int(rng.integers(0, n_classes))
        radius = int(rng.integers(r_lo, r_hi + 1))
        cy = int(rng.integers(radius, h - radius + 1))
        cx = int(rng.integers(radius, w - radius + 1))
        sounding = rng.random(t) < 0.65
        objects.append({"class_id": class_id, "center": [cy, cx], "radius": radius,
                        "sounding": sounding})
        covers.append((yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius)
    for ft in range(t):
        if not any(o["sounding"][ft] for o in objects):
            objects[int(rng.integers(0, n_objects))]["sounding"][ft] = True

    frames = np.full((t, h, w, 3), BACKGROUND, dtype=np.float64)
    frames += rng.normal(0.0, BACKGROUND_NOISE, size=frames.shape)
    for obj, cover in zip(objects, covers):
        color = PALETTE[obj["class_id"]]
        texture = color + rng.normal(0.0, TEXTURE_NOISE, size=(t, h, w, 3))
        frames = np.where(cover[None, :, :, None], texture, frames)
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    audio = np.zeros((t, dim), dtype=np.float64)
    gt = np.zeros((t, h, w), dtype=np.uint8)
    for ft in range(t):
        for obj, cover in zip(objects, covers):
            if obj["sounding"][ft]:
                audio[ft] += signatures[obj["class_id"]]
                gt[ft] |= cover
    if noise > 0:
        audio += rng.normal(0.0, noise, size=audio.shape)

    meta = {
        "objects": [
            {
                "class_id": o["class_id"],
                "center": o["center"],
                "radius": o["radius"],
                "sounding": [bool(s) for s in o["sounding"]],
            }
            for o in objects
        ]
    }
    return Scene(frames=frames, audio=audio.astype(np.float32), gt=gt, meta=meta)


def generate(seed: int, count: int, frames: int, height: int, width: int,
             n_classes: int = 6, noise: float = 0.05, audio_dim: int = 128) -> list[Scene]:
    if height % 32 or width % 32:
        raise ValueError(f"scene extent {height}x{width} must be divisible by 32")
    if not 1 <= n_classes <= 16:
        raise ValueError(f"n_classes must lie in [1, 16], got {n_classes}")
    if frames < 1 or count < 0:
        raise ValueError("need frames >= 1 and count >= 0")
    signatures = class_signatures(n_classes, audio_dim)
    return [
        _render(_scene_rng(seed, i), frames, height, width, n_classes, noise, audio_dim, signatures)
        for i in range(count)
    ]


def _scene_dir(root: Path, index: int) -> Path:
    return root / f"scene_{index:05d}"


def write_dataset(root, scenes: list[Scene], info: dict) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    names = []
    for i, scene in enumerate(scenes):
        d = _scene_dir(root, i)
        d.mkdir(exist_ok=True)
        write_tensor(d / "frames.pcmt", scene.frames)
        write_tensor(d / "audio.pcmt", scene.audio)
        write_tensor(d / "gt.pcmt", scene.gt)
        (d / "meta.json").write_text(
            json.dumps(scene.meta, sort_keys=True, separators=(",", ":")) + "\n"
        )
        names.append(d.name)
    manifest = dict(info)
    manifest["count"] = len(scenes)
    manifest["scenes"] = names
    (root / DATASET_MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_scene(path) -> Scene:
    d = Path(path)
    return Scene(
        frames=read_tensor(d / "frames.pcmt"),
        audio=read_tensor(d / "audio.pcmt"),
        gt=read_tensor(d / "gt.pcmt"),
        meta=json.loads((d / "meta.json").read_text()),
    )


def load_dataset(root) -> list[Scene]:
    root = Path(root)
    manifest_path = root / DATASET_MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root} has no dataset manifest")
    manifest = json.loads(manifest_path.read_text())
    return [load_scene(root / name) for name in manifest["scenes"]]
