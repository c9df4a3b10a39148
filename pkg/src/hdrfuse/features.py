"""Multi-scale matching features.

Two producers share the three-level pyramid contract: a frozen
pretrained 19-layer-classifier prefix (taps after the first rectifier
of its first three blocks, channel counts 64/128/256 at full, half and
quarter resolution), and a deterministic handcrafted filter bank that
is exactly translation-covariant on image interiors, used to test the
matcher without pretrained weights.
"""

import hashlib
from dataclasses import dataclass

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .imaging import mu_law
from . import tensorio

__all__ = [
    "FeaturePyramid",
    "BackboneWeights",
    "BACKBONE_LAYERS",
    "load_backbone",
    "save_backbone",
    "random_backbone_weights",
    "extract_pyramid",
    "handcrafted_pyramid",
    "FeatureSource",
]

# conv layers up to the third-scale tap: (name, in_channels, out_channels,
# pool before this layer).  Taps are taken after the rectifier of the
# first conv in each block.
BACKBONE_LAYERS = (
    ("conv1_1", 3, 64, False),
    ("conv1_2", 64, 64, False),
    ("conv2_1", 64, 128, True),
    ("conv2_2", 128, 128, False),
    ("conv3_1", 128, 256, True),
)
_TAPS = ("conv1_1", "conv2_1", "conv3_1")

# input statistics the pretrained classifier expects
_INPUT_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_INPUT_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass
class FeaturePyramid:
    """Three feature tensors (C_l, H/2^l, W/2^l), finest first."""

    levels: list  # of np.float32 arrays, shape (C, h, w)
    source: str  # "backbone" | "handcrafted" | "encoder"

    def __post_init__(self):
        if len(self.levels) != 3:
            raise ValueError(f"pyramid must have exactly 3 levels, got {len(self.levels)}")
        for l in range(1, 3):
            prev, cur = self.levels[l - 1], self.levels[l]
            if prev.shape[1] != 2 * cur.shape[1] or prev.shape[2] != 2 * cur.shape[2]:
                raise ValueError("pyramid spatial sizes must halve per level")
        if any(not np.all(np.isfinite(lv)) for lv in self.levels):
            raise ValueError("pyramid contains non-finite values")

    def shapes(self):
        return [lv.shape for lv in self.levels]


class BackboneWeights:
    """Frozen conv weights of the matching backbone, keyed by layer name."""

    def __init__(self, tensors):
        missing = []
        for name, cin, cout, _ in BACKBONE_LAYERS:
            for suffix, shape in ((".weight", (cout, cin, 3, 3)), (".bias", (cout,))):
                key = name + suffix
                if key not in tensors:
                    missing.append(key)
                elif tuple(tensors[key].shape) != shape:
                    raise ValueError(
                        f"backbone tensor {key} has shape {tuple(tensors[key].shape)}, expected {shape}"
                    )
        if missing:
            raise ValueError(f"backbone archive is missing tensors: {', '.join(missing)}")
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in tensors.items()}
        self.frozen = True

    def fingerprint(self):
        digest = hashlib.sha256()
        for key in sorted(self.tensors):
            digest.update(key.encode())
            digest.update(self.tensors[key].tobytes())
        return digest.hexdigest()


def load_backbone(path):
    """Load backbone weights from a named-tensor archive."""
    tensors = {k: v for k, v in tensorio.load_tensors(path).items() if not k.startswith("meta/")}
    return BackboneWeights(tensors)


def save_backbone(path, weights):
    tensors = weights.tensors if isinstance(weights, BackboneWeights) else weights
    tensorio.save_tensors(path, tensors)


def random_backbone_weights(seed=0):
    """Architecture-shaped random weights, a stand-in when no pretrained
    archive is available (texture statistics are meaningless, shapes and
    determinism are not)."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, cin, cout, _ in BACKBONE_LAYERS:
        fan = cin * 9 + cout * 9
        tensors[name + ".weight"] = rng.normal(0.0, np.sqrt(2.0 / fan), size=(cout, cin, 3, 3))
        tensors[name + ".bias"] = np.zeros(cout)
    return BackboneWeights(tensors)


def backbone_from_torchvision():
    """Convert torchvision's pretrained 19-layer weights, if downloadable."""
    from torchvision.models import vgg19, VGG19_Weights

    net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
    conv_indices = [0, 2, 5, 7, 10]  # conv layers up to the third block's first conv
    tensors = {}
    for (name, _, _, _), idx in zip(BACKBONE_LAYERS, conv_indices):
        tensors[name + ".weight"] = net[idx].weight.detach().numpy()
        tensors[name + ".bias"] = net[idx].bias.detach().numpy()
    return BackboneWeights(tensors)


def _check_extract_input(image):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 input, got shape {image.shape}")
    if image.shape[0] % 4 or image.shape[1] % 4:
        raise ValueError(f"spatial size must be divisible by 4, got {image.shape[:2]}")
    return image


def extract_pyramid(image, weights):
    """Run the frozen backbone prefix and tap its three scales.

    `image` is H x W x 3 in [0, 1] (radiance or tone-mapped); it is
    standardized to the backbone's expected input statistics before the
    first convolution.  All convolutions use replicate padding.
    """
    image = _check_extract_input(image)
    x = (image - _INPUT_MEAN) / _INPUT_STD
    x = torch.from_numpy(np.ascontiguousarray(x.transpose(2, 0, 1)))[None]
    taps = []
    with torch.no_grad():
        for name, _, _, pool_before in BACKBONE_LAYERS:
            if pool_before:
                x = F.max_pool2d(x, 2)
            w = torch.from_numpy(weights.tensors[name + ".weight"])
            b = torch.from_numpy(weights.tensors[name + ".bias"])
            x = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), w, b)
            x = F.relu(x)
            if name in _TAPS:
                taps.append(x[0].numpy().copy())
            if name == _TAPS[-1]:
                break
    return FeaturePyramid(levels=taps, source="backbone")


# handcrafted bank: intensity, two gradients, four oriented edge bars;
# the /8 scale keeps every coefficient exactly representable so constant
# images produce exact zeros
_DX = np.array([[-0.5, 0.0, 0.5]], dtype=np.float32)
_DY = _DX.T.copy()
_E0 = np.array([[-1, -1, -1], [2, 2, 2], [-1, -1, -1]], dtype=np.float32) / 8.0
_E90 = _E0.T.copy()
_E45 = np.array([[2, -1, -1], [-1, 2, -1], [-1, -1, 2]], dtype=np.float32) / 8.0
_E135 = np.ascontiguousarray(_E45[:, ::-1])


def _filter_bank(luma):
    responses = [luma]
    for kernel in (_DX, _DY, _E0, _E45, _E90, _E135):
        responses.append(cv2.filter2D(luma, -1, kernel, borderType=cv2.BORDER_REPLICATE))
    return np.stack(responses)


def _avg_pool2(img):
    h, w = img.shape
    return img[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def handcrafted_pyramid(image):
    """Fixed 7-channel filter bank at three dyadic scales.

    Downsampling is a 2x2 block average, so for shifts that are
    multiples of 2^l the level-l features shift rigidly on the interior.
    """
    image = _check_extract_input(image)
    luma = image.mean(axis=2).astype(np.float32)
    levels = []
    for _ in range(3):
        levels.append(_filter_bank(luma))
        luma = _avg_pool2(luma).astype(np.float32)
    return FeaturePyramid(levels=levels, source="handcrafted")


class FeatureSource:
    """Produces matching pyramids from normalized radiance images.

    Radiance is mu-law tone mapped before feature extraction so the
    backbone sees display-range inputs.
    """

    def __init__(self, kind="handcrafted", weights=None, mu=5000.0):
        if kind not in ("handcrafted", "backbone"):
            raise ValueError(f"unknown feature source {kind!r}")
        if kind == "backbone" and weights is None:
            raise ValueError("backbone feature source requires loaded weights")
        self.kind = kind
        self.weights = weights
        self.mu = mu

    def pyramid(self, radiance_pixels):
        tone = mu_law(radiance_pixels, self.mu, clamp=True).astype(np.float32)
        if self.kind == "backbone":
            return extract_pyramid(tone, self.weights)
        return handcrafted_pyramid(tone)
