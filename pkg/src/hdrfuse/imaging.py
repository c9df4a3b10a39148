"""Pixel-domain math shared by the whole pipeline.

Radiance normalization, saturation masking, the masked-saturation
transform of the short exposure, mu-law range compression, and the
classical per-pixel weighted fusion baseline.  Everything here is a pure
function of numpy arrays; images are H x W x 3 float arrays, LDR values
live in [0, 1] and radiance values are normalized so the shortest
exposure maps onto [0, 1].
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DomainParams",
    "RadianceMap",
    "exposure_ratios",
    "to_radiance",
    "saturation_mask",
    "ms_hdr_transform",
    "mu_law",
    "weighted_fusion",
]


@dataclass(frozen=True)
class DomainParams:
    """Scalar constants of the imaging model.

    gamma          display gamma inverted when moving LDR -> radiance
    mu             mu-law compression strength
    eps_sat        sensor saturation level in linear (post-gamma) units
    sat_threshold  LDR intensity above which a pixel counts as saturated
    """

    gamma: float = 2.2
    mu: float = 5000.0
    eps_sat: float = 1.0
    sat_threshold: float = 0.98

    def __post_init__(self):
        if not (self.gamma > 0):
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if not (self.mu > 0):
            raise ValueError(f"mu must be positive, got {self.mu}")
        if not (0.0 < self.sat_threshold < self.eps_sat <= 1.0):
            raise ValueError(
                "need 0 < sat_threshold < eps_sat <= 1, got "
                f"sat_threshold={self.sat_threshold}, eps_sat={self.eps_sat}"
            )


@dataclass
class RadianceMap:
    """Linear-domain image plus the relative exposure used to normalize it."""

    pixels: np.ndarray  # H x W x 3, >= 0
    exposure_scale: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.exposure_scale <= 0:
            raise ValueError(f"exposure_scale must be positive, got {self.exposure_scale}")
        if self.pixels.min() < 0:
            raise ValueError("radiance values must be non-negative")

    @property
    def shape(self):
        return self.pixels.shape


def _check_image(img, name="image"):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"{name} must be H x W x 3, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"{name} has empty spatial extent {img.shape}")
    return img


def exposure_ratios(biases):
    """Relative exposures from log2 exposure biases.

    The shortest capture is the reference: t_k = 2^(bias_k - min bias),
    so the returned list starts at 1 for a short/medium/long ordering.
    Non-monotone biases are tolerated (the caller may have reordered),
    non-finite ones are not.
    """
    biases = np.asarray(biases, dtype=np.float64)
    if biases.shape != (3,):
        raise ValueError(f"expected exactly three biases, got shape {biases.shape}")
    if not np.all(np.isfinite(biases)):
        raise ValueError(f"biases must be finite, got {biases.tolist()}")
    if not (biases[0] <= biases[1] <= biases[2]):
        import warnings

        warnings.warn(f"exposure biases are not ordered short/medium/long: {biases.tolist()}")
    return list(2.0 ** (biases - biases.min()))


def to_radiance(img, t_k, params=DomainParams()):
    """Map an LDR image to the normalized radiance domain: H = I^gamma / t_k."""
    img = _check_image(img, "ldr image")
    if t_k <= 0:
        raise ValueError(f"relative exposure must be positive, got {t_k}")
    if img.min() < 0 or img.max() > 1:
        raise ValueError("LDR values must lie in [0, 1]")
    return RadianceMap(img**params.gamma / t_k, exposure_scale=float(t_k))


def saturation_mask(img, threshold):
    """Binary mask of pixels whose channel maximum reaches `threshold`.

    Accepts an LDR array (threshold in [0, 1]) or a RadianceMap
    (threshold in normalized radiance units).  Returns an H x W bool
    array.
    """
    if isinstance(img, RadianceMap):
        pixels = img.pixels
    else:
        pixels = _check_image(img)
    if threshold <= 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    return pixels.max(axis=2) >= threshold


def ms_hdr_transform(h_s, t_s, t_m, params=DomainParams()):
    """Clip the short-exposure radiance at the level where the medium clips.

    Every pixel the medium exposure cannot measure is flattened onto the
    clip plateau `eps_sat / t_m`, which makes the saturated regions of
    the transformed short exposure and of the medium exposure coincide.
    Idempotent by construction.
    """
    if t_s >= t_m:
        raise ValueError(f"short exposure must be shorter than medium, got t_s={t_s}, t_m={t_m}")
    if not isinstance(h_s, RadianceMap):
        h_s = RadianceMap(np.asarray(h_s), exposure_scale=float(t_s))
    clip_level = params.eps_sat / t_m
    return RadianceMap(np.minimum(h_s.pixels, clip_level), exposure_scale=h_s.exposure_scale)


def ms_hdr_clip_level(t_m, params=DomainParams()):
    """Radiance level at which the medium exposure clips."""
    return params.eps_sat / t_m


def mu_law(h, mu=5000.0, clamp=False):
    """mu-law range compression T(H) = log(1 + mu*H) / log(1 + mu).

    Strictly increasing on [0, 1] with exact endpoints T(0)=0, T(1)=1.
    Inputs must lie in [0, 1] unless `clamp` is set.
    """
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    h = np.asarray(h, dtype=np.float64)
    if clamp:
        h = np.clip(h, 0.0, 1.0)
    elif h.size and (h.min() < 0 or h.max() > 1):
        raise ValueError("mu_law input must lie in [0, 1] (pass clamp=True to clip)")
    return np.log1p(mu * h) / np.log1p(mu)


def weighted_fusion(maps, weights):
    """Per-pixel convex combination of three exposure-normalized radiance maps.

    `maps` are three RadianceMaps (or arrays) brought to a common
    exposure scale, `weights` three non-negative per-pixel maps (H x W
    or H x W x 3) summing to one at every pixel.  This is the classical
    fusion baseline and doubles as the oracle for fusion tests.
    """
    if len(maps) != 3 or len(weights) != 3:
        raise ValueError("weighted_fusion expects exactly three maps and three weight maps")
    pixel_stack = []
    scales = set()
    for m in maps:
        if isinstance(m, RadianceMap):
            scales.add(m.exposure_scale)
            pixel_stack.append(m.pixels)
        else:
            pixel_stack.append(np.asarray(m, dtype=np.float64))
    if len(scales) > 1:
        raise ValueError(f"maps are not on a common exposure scale: {sorted(scales)}")

    h, w = pixel_stack[0].shape[:2]
    wmaps = []
    for wm in weights:
        wm = np.asarray(wm, dtype=np.float64)
        if wm.ndim == 2:
            wm = wm[:, :, None]
        if wm.shape[:2] != (h, w):
            raise ValueError(f"weight map shape {wm.shape} does not match image {h}x{w}")
        if wm.min() < 0:
            raise ValueError("weights must be non-negative")
        wmaps.append(wm)

    total = wmaps[0] + wmaps[1] + wmaps[2]
    if np.abs(total - 1.0).max() > 1e-6:
        raise ValueError("per-pixel weight sums deviate from 1 by more than 1e-6")

    fused = sum(wm * px for wm, px in zip(wmaps, pixel_stack))
    scale = scales.pop() if scales else 1.0
    return RadianceMap(fused, exposure_scale=scale)
