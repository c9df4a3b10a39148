"""Synthetic bracketed scenes with exact ground truth.

A latent radiance image in [0, 1] is rendered through the forward
camera model (exposure scaling, sensor clipping, display gamma, 16-bit
quantization) to produce the three LDR captures, so tests and demos
have scenes whose true radiance is known analytically.  Optional
per-capture shifts emulate camera motion.
"""

from pathlib import Path

import numpy as np

from .dataset import SceneRecord, save_scene, write_manifest, _shift_replicate
from .imaging import DomainParams, RadianceMap

__all__ = ["latent_radiance", "render_ldr", "make_scene", "make_dataset"]


def latent_radiance(height, width, rng):
    """Smooth random radiance in [0, 1] with a bright region that will
    saturate the longer exposures."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    base = 0.15 + 0.2 * xx + 0.1 * yy
    img = np.zeros((height, width, 3))
    for ch in range(3):
        field = base.copy()
        for _ in range(4):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            sigma = rng.uniform(0.08, 0.25)
            amp = rng.uniform(0.05, 0.35)
            field += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        img[:, :, ch] = field
    # a hot blob shared by all channels guarantees saturated medium pixels
    cy, cx = rng.uniform(0.25, 0.75, size=2)
    hot = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.12**2))
    img += 0.9 * hot[:, :, None]
    img /= max(img.max(), 1.0)
    return np.clip(img, 0.0, 1.0)


def render_ldr(latent, t_k, params=DomainParams(), quantize=True):
    """Forward camera model: clip at the sensor level, apply display gamma."""
    linear = np.clip(latent * t_k, 0.0, params.eps_sat)
    ldr = linear ** (1.0 / params.gamma)
    if quantize:
        ldr = np.round(ldr * 65535.0) / 65535.0
    return ldr


def make_scene(height=64, width=64, biases=(-2.0, 0.0, 2.0), seed=0, motion=0, scene_id=None, params=DomainParams()):
    """SceneRecord rendered from a random latent radiance.

    `motion` shifts the short and long captures by that many pixels
    relative to the medium one before rendering, emulating misalignment.
    The ground truth is the latent radiance itself (shortest-exposure
    normalization, so it already lies in [0, 1]).
    """
    rng = np.random.default_rng(seed)
    latent = latent_radiance(height, width, rng)
    ratios = [2.0 ** (b - min(biases)) for b in biases]
    views = [latent, latent, latent]
    if motion:
        views[0] = _shift_replicate(latent, motion)
        views[2] = _shift_replicate(latent, motion)
    ldr = [render_ldr(view, t, params) for view, t in zip(views, ratios)]
    return SceneRecord(
        ldr=ldr,
        biases=list(biases),
        gt_hdr=RadianceMap(latent, exposure_scale=1.0),
        scene_id=scene_id or f"synthetic_{seed:04d}",
    )


def make_dataset(root, n_train=4, n_test=2, height=64, width=64, seed=0, motion=0):
    """Write a loadable synthetic dataset: scene directories plus manifest."""
    root = Path(root)
    scene_dirs = {"train": [], "test": []}
    index = 0
    for split, count in (("train", n_train), ("test", n_test)):
        for _ in range(count):
            scene = make_scene(height, width, seed=seed + index, motion=motion, scene_id=f"{split}_{index:03d}")
            scene_dir = root / "scenes" / scene.scene_id
            save_scene(scene_dir, scene)
            scene_dirs[split].append(scene_dir)
            index += 1
    manifest = root / "manifest.txt"
    write_manifest(manifest, scene_dirs["train"], scene_dirs["test"])
    return manifest
