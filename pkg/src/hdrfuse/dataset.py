"""Scene ingestion for bracketed-exposure datasets.

A scene directory holds three lossless LDR images (8- or 16-bit
integer), a plain-text exposure file with one signed bias per line
(short to long), and optionally one ground-truth ``.hdr`` radiance
image.  A dataset manifest is a text file listing scene directories
under ``[train]`` and ``[test]`` sections, paths relative to the
manifest's own directory.
"""

import copy
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .imaging import (
    DomainParams,
    RadianceMap,
    exposure_ratios,
    ms_hdr_clip_level,
    ms_hdr_transform,
    saturation_mask,
    to_radiance,
)
from . import rgbe

__all__ = [
    "SceneRecord",
    "PatchSample",
    "load_scene",
    "save_scene",
    "read_manifest",
    "write_manifest",
    "sample_patches",
    "apply_translation",
]

LDR_EXTENSIONS = (".tif", ".tiff", ".png")


@dataclass
class SceneRecord:
    """Three aligned LDR captures plus biases and optional ground truth."""

    ldr: list  # 3 arrays H x W x 3 float64 in [0, 1], ascending bias
    biases: list  # 3 floats, strictly increasing
    gt_hdr: RadianceMap | None
    scene_id: str

    def __post_init__(self):
        if len(self.ldr) != 3 or len(self.biases) != 3:
            raise ValueError("a scene holds exactly three exposures")
        shapes = {img.shape for img in self.ldr}
        if len(shapes) != 1:
            raise ValueError(f"LDR images disagree on shape: {sorted(shapes)}")
        if self.gt_hdr is not None and self.gt_hdr.pixels.shape != self.ldr[0].shape:
            raise ValueError(
                f"ground truth shape {self.gt_hdr.pixels.shape} does not match LDR {self.ldr[0].shape}"
            )
        if not (self.biases[0] < self.biases[1] < self.biases[2]):
            raise ValueError(f"biases must be strictly increasing, got {self.biases}")

    @property
    def height(self):
        return self.ldr[0].shape[0]

    @property
    def width(self):
        return self.ldr[0].shape[1]


@dataclass
class PatchSample:
    """Co-located crops of everything the model consumes for one window."""

    h_s: RadianceMap
    h_m: RadianceMap
    h_l: RadianceMap
    h_s_masked: RadianceMap
    mask_s: np.ndarray  # bool H x W, saturation plateau of the masked short exposure
    mask_m: np.ndarray  # bool H x W, saturated pixels of the medium LDR
    gt: np.ndarray | None
    origin: tuple
    size: int

    def __post_init__(self):
        if self.size % 4:
            raise ValueError(f"patch size must be divisible by 4, got {self.size}")


def _decode_ldr(path):
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"cannot decode image {path}")
    if raw.ndim != 3 or raw.shape[2] < 3:
        raise ValueError(f"{path} is not a 3-channel image (shape {raw.shape})")
    raw = raw[:, :, :3][:, :, ::-1]  # BGR -> RGB
    if raw.dtype == np.uint8:
        return raw.astype(np.float64) / 255.0, 8
    if raw.dtype == np.uint16:
        return raw.astype(np.float64) / 65535.0, 16
    raise ValueError(f"{path} has unsupported dtype {raw.dtype}; expected 8- or 16-bit integer")


def _encode_ldr(path, img):
    arr = np.clip(np.round(np.asarray(img) * 65535.0), 0, 65535).astype(np.uint16)
    if not cv2.imwrite(str(path), arr[:, :, ::-1]):
        raise IOError(f"failed to write {path}")


def load_scene(directory):
    """Decode one scene directory into a SceneRecord, exposures ordered by bias."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"scene directory not found: {directory}")
    ldr_paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in LDR_EXTENSIONS)
    if len(ldr_paths) != 3:
        raise FileNotFoundError(
            f"{directory} must contain exactly three LDR images, found {[p.name for p in ldr_paths]}"
        )
    txt_paths = sorted(directory.glob("*.txt"))
    preferred = directory / "exposure.txt"
    exposure_path = preferred if preferred.exists() else (txt_paths[0] if txt_paths else None)
    if exposure_path is None:
        raise FileNotFoundError(f"{directory} has no exposure file (*.txt)")
    lines = [ln for ln in exposure_path.read_text().splitlines() if ln.strip()]
    if len(lines) != 3:
        raise ValueError(f"{exposure_path} must list exactly three biases, found {len(lines)} lines")
    biases = [float(ln) for ln in lines]

    images = [_decode_ldr(p)[0] for p in ldr_paths]
    order = np.argsort(biases, kind="stable")
    images = [images[i] for i in order]
    biases = [biases[i] for i in order]

    hdr_paths = sorted(directory.glob("*.hdr"))
    gt = rgbe.read_hdr(hdr_paths[0]) if hdr_paths else None
    return SceneRecord(ldr=images, biases=biases, gt_hdr=gt, scene_id=directory.name)


def save_scene(directory, record):
    """Write a SceneRecord as a loadable scene directory (16-bit PNG LDRs)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for idx, img in enumerate(record.ldr):
        _encode_ldr(directory / f"ldr_{idx}.png", img)
    (directory / "exposure.txt").write_text("".join(f"{b}\n" for b in record.biases))
    if record.gt_hdr is not None:
        rgbe.write_hdr(directory / "gt.hdr", record.gt_hdr)


def read_manifest(path):
    """Scene directories of the train/test split, resolved against the manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    sections = {"train": [], "test": []}
    current = None
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].lower()
            if current not in sections:
                raise ValueError(f"unknown manifest section [{current}] in {path}")
            continue
        if current is None:
            raise ValueError(f"manifest entry before any section header: {line!r}")
        sections[current].append((path.parent / line).resolve())
    return sections["train"], sections["test"]


def write_manifest(path, train_dirs, test_dirs):
    path = Path(path)
    lines = ["[train]"]
    lines += [str(Path(d).resolve().relative_to(path.parent.resolve())) for d in train_dirs]
    lines += ["[test]"]
    lines += [str(Path(d).resolve().relative_to(path.parent.resolve())) for d in test_dirs]
    path.write_text("".join(f"{ln}\n" for ln in lines))


def scene_radiance(record, params=DomainParams()):
    """Radiance maps, masked short exposure, and the two saturation masks."""
    t_s, t_m, t_l = exposure_ratios(record.biases)
    h_s = to_radiance(record.ldr[0], t_s, params)
    h_m = to_radiance(record.ldr[1], t_m, params)
    h_l = to_radiance(record.ldr[2], t_l, params)
    h_s_masked = ms_hdr_transform(h_s, t_s, t_m, params)
    clip_level = ms_hdr_clip_level(t_m, params)
    mask_s = saturation_mask(h_s_masked, clip_level)
    mask_m = saturation_mask(record.ldr[1], params.sat_threshold)
    return h_s, h_m, h_l, h_s_masked, mask_s, mask_m


def sample_patches(record, size=256, count=1, rng_seed=0, params=DomainParams()):
    """Deterministic uniform crops shared across every image of the record."""
    if size % 4:
        raise ValueError(f"patch size must be divisible by 4, got {size}")
    if size > min(record.height, record.width):
        raise ValueError(f"patch size {size} exceeds scene extent {record.height}x{record.width}")
    h_s, h_m, h_l, h_s_masked, mask_s, mask_m = scene_radiance(record, params)
    rng = np.random.default_rng(rng_seed)
    samples = []
    for _ in range(count):
        r0 = int(rng.integers(0, record.height - size + 1))
        c0 = int(rng.integers(0, record.width - size + 1))
        win = np.s_[r0 : r0 + size, c0 : c0 + size]

        def crop(rmap):
            return RadianceMap(rmap.pixels[win].copy(), exposure_scale=rmap.exposure_scale)

        samples.append(
            PatchSample(
                h_s=crop(h_s),
                h_m=crop(h_m),
                h_l=crop(h_l),
                h_s_masked=crop(h_s_masked),
                mask_s=mask_s[win].copy(),
                mask_m=mask_m[win].copy(),
                gt=record.gt_hdr.pixels[win].copy() if record.gt_hdr is not None else None,
                origin=(r0, c0),
                size=size,
            )
        )
    return samples


def _shift_replicate(img, delta):
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - delta, 0, h - 1)
    cols = np.clip(np.arange(w) - delta, 0, w - 1)
    return img[np.ix_(rows, cols)]


def apply_translation(record, delta):
    """Shift the short and long exposures by (delta, delta) against the medium.

    Edge pixels are replicated; the medium exposure and the ground
    truth stay put, which emulates camera motion between the bracketed
    captures for the robustness sweep.
    """
    delta = int(delta)
    if abs(delta) >= min(record.height, record.width):
        raise ValueError(f"|delta|={abs(delta)} exceeds scene extent {record.height}x{record.width}")
    shifted = copy.deepcopy(record)
    shifted.ldr[0] = _shift_replicate(record.ldr[0], delta)
    shifted.ldr[2] = _shift_replicate(record.ldr[2], delta)
    return shifted
