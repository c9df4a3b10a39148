"""Learnable blocks and the two-stream restoration forward pass.

One stream fuses motion-suppressed features of all three exposures
through a chain of channel-attention blocks; the other encodes the
short exposure's saturation-clue features, swaps encoder patches per
the texture match field, and decodes them back.  Scale attention gates
the decoded pyramid into the fusion head, and the result is composed
residually with the medium-exposure radiance.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import PatchSample, SceneRecord, scene_radiance
from .features import FeaturePyramid, FeatureSource
from .imaging import DomainParams
from .matching import (
    MatchField,
    WindowSpec,
    progressive_match,
    single_scale_match,
    swap_features,
)

__all__ = [
    "NetConfig",
    "ModelInputs",
    "ForwardTrace",
    "FusionNet",
    "init_params",
    "param_arrays",
    "load_param_arrays",
    "build_mef_input",
    "build_nft_input",
    "compose_output",
    "tiny_config",
]

ABLATION_FLAGS = (
    "no_ms_hdr",
    "no_nft",
    "single_scale_vgg",
    "match_with_encoder_features",
    "no_motion_attention",
    "no_scale_attention",
)


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 64
    cab_count_mef: int = 6
    cab_count_codec: int = 2
    cab_reduction: int = 16
    attention_conv_layers: int = 2
    window: WindowSpec = field(default_factory=WindowSpec)
    normalization: str = "cosine"
    no_ms_hdr: bool = False
    no_nft: bool = False
    single_scale_vgg: bool = False
    match_with_encoder_features: bool = False
    no_motion_attention: bool = False
    no_scale_attention: bool = False

    def __post_init__(self):
        if self.base_channels < 8:
            raise ValueError(f"base_channels must be at least 8, got {self.base_channels}")
        if self.cab_count_mef < 1 or self.cab_count_codec < 1:
            raise ValueError("CAB counts must be at least 1")
        if self.attention_conv_layers < 1:
            raise ValueError("attention heads need at least one convolution")

    def with_flags(self, **flags):
        unknown = set(flags) - set(ABLATION_FLAGS)
        if unknown:
            raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
        return replace(self, **flags)


def tiny_config(**overrides):
    """Small configuration for audits and smoke experiments."""
    defaults = dict(
        base_channels=8,
        cab_count_mef=1,
        cab_count_codec=1,
        cab_reduction=4,
        window=WindowSpec(radii=(2, 2, 4)),
    )
    defaults.update(overrides)
    return NetConfig(**defaults)


@dataclass
class ModelInputs:
    """Preprocessed radiance tensors and saturation masks (1 x C x H x W)."""

    h_s: torch.Tensor
    h_m: torch.Tensor
    h_l: torch.Tensor
    h_s_masked: torch.Tensor
    mask_s: torch.Tensor
    mask_m: torch.Tensor
    gt: torch.Tensor | None = None

    @staticmethod
    def _image(arr, dtype):
        arr = np.asarray(arr, dtype=np.float64)
        return torch.from_numpy(arr.transpose(2, 0, 1)).to(dtype)[None]

    @staticmethod
    def _mask(arr, dtype):
        return torch.from_numpy(np.asarray(arr, dtype=np.float64))[None, None].to(dtype)

    @classmethod
    def from_patch(cls, sample: PatchSample, dtype=torch.float32):
        return cls(
            h_s=cls._image(sample.h_s.pixels, dtype),
            h_m=cls._image(sample.h_m.pixels, dtype),
            h_l=cls._image(sample.h_l.pixels, dtype),
            h_s_masked=cls._image(sample.h_s_masked.pixels, dtype),
            mask_s=cls._mask(sample.mask_s, dtype),
            mask_m=cls._mask(sample.mask_m, dtype),
            gt=None if sample.gt is None else cls._image(sample.gt, dtype),
        )

    @classmethod
    def from_record(cls, record: SceneRecord, params=DomainParams(), dtype=torch.float32):
        h_s, h_m, h_l, h_s_masked, mask_s, mask_m = scene_radiance(record, params)
        return cls(
            h_s=cls._image(h_s.pixels, dtype),
            h_m=cls._image(h_m.pixels, dtype),
            h_l=cls._image(h_l.pixels, dtype),
            h_s_masked=cls._image(h_s_masked.pixels, dtype),
            mask_s=cls._mask(mask_s, dtype),
            mask_m=cls._mask(mask_m, dtype),
            gt=None if record.gt_hdr is None else cls._image(record.gt_hdr.pixels, dtype),
        )


@dataclass
class ForwardTrace:
    """Named intermediates of one forward pass, for tests and debugging."""

    a_mt_s: torch.Tensor
    a_mt_l: torch.Tensor
    a_sat_s: torch.Tensor
    a_sat_m: torch.Tensor
    a_sc: list  # [A_sc^0, A_sc^1, A_sc^2]
    f_mef: torch.Tensor
    f_nft: torch.Tensor | None
    match_field: MatchField | None
    match_source: str | None
    swapped: list  # tensors consumed by the decoder
    decoded: list  # [F_dec^0, F_dec^1, F_dec^2]
    h_mef: torch.Tensor
    weight: torch.Tensor

    def detach_arrays(self):
        """Numpy copies of every tensor field, for diagnostic dumps."""
        out = {}
        for name in ("a_mt_s", "a_mt_l", "a_sat_s", "a_sat_m", "f_mef", "h_mef", "weight"):
            out[name] = getattr(self, name).detach().numpy().copy()
        if self.f_nft is not None:
            out["f_nft"] = self.f_nft.detach().numpy().copy()
        for group in ("a_sc", "swapped", "decoded"):
            for idx, tensor in enumerate(getattr(self, group)):
                out[f"{group}_{idx}"] = tensor.detach().numpy().copy()
        return out


class ChannelAttentionBlock(nn.Module):
    """conv-relu-conv, channel reweighting from pooled statistics, residual add."""

    def __init__(self, channels, reduction):
        super().__init__()
        bottleneck = max(1, channels // reduction)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        self.gate = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(channels, bottleneck, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(bottleneck, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        y = self.body(x)
        return x + y * self.gate(y)


class AttentionHead(nn.Module):
    """Stack of 3x3 convolutions ending in a sigmoid, values in (0, 1)."""

    def __init__(self, in_channels, out_channels, layers=2):
        super().__init__()
        mods = []
        ch = in_channels
        for _ in range(layers - 1):
            mods += [nn.Conv2d(ch, out_channels, 3, padding=1), nn.ReLU(inplace=True)]
            ch = out_channels
        mods += [nn.Conv2d(ch, out_channels, 3, padding=1), nn.Sigmoid()]
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class FeatureExtractor(nn.Module):
    """Shared-weight radiance-to-feature front end, full resolution."""

    def __init__(self, channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class MefStream(nn.Module):
    """Channel-attention chain over the concatenated exposure features."""

    def __init__(self, channels, cab_count, reduction):
        super().__init__()
        self.entry = nn.Conv2d(3 * channels, channels, 3, padding=1)
        self.cabs = nn.Sequential(*[ChannelAttentionBlock(channels, reduction) for _ in range(cab_count)])

    def forward(self, f_mef):
        return self.cabs(self.entry(f_mef))


class Encoder(nn.Module):
    """Three-scale encoder: CABs per scale, 2x2 average between scales."""

    def __init__(self, channels, cab_count, reduction):
        super().__init__()
        c0, c1, c2 = channels, 2 * channels, 4 * channels
        self.scale0 = nn.Sequential(*[ChannelAttentionBlock(c0, reduction) for _ in range(cab_count)])
        self.enter1 = nn.Conv2d(c0, c1, 3, padding=1)
        self.scale1 = nn.Sequential(*[ChannelAttentionBlock(c1, reduction) for _ in range(cab_count)])
        self.enter2 = nn.Conv2d(c1, c2, 3, padding=1)
        self.scale2 = nn.Sequential(*[ChannelAttentionBlock(c2, reduction) for _ in range(cab_count)])

    def forward(self, x):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"encoder input must be divisible by 4, got {tuple(x.shape[-2:])}")
        phi0 = self.scale0(x)
        phi1 = self.scale1(self.enter1(F.avg_pool2d(phi0, 2)))
        phi2 = self.scale2(self.enter2(F.avg_pool2d(phi1, 2)))
        return [phi0, phi1, phi2]


class Decoder(nn.Module):
    """Coarse-to-fine decoder with same-scale skip concatenation."""

    def __init__(self, channels, cab_count, reduction):
        super().__init__()
        c0, c1, c2 = channels, 2 * channels, 4 * channels
        self.scale2 = nn.Sequential(*[ChannelAttentionBlock(c2, reduction) for _ in range(cab_count)])
        self.up21 = nn.Conv2d(c2, c1, 3, padding=1)
        self.merge1 = nn.Conv2d(2 * c1, c1, 3, padding=1)
        self.scale1 = nn.Sequential(*[ChannelAttentionBlock(c1, reduction) for _ in range(cab_count)])
        self.up10 = nn.Conv2d(c1, c0, 3, padding=1)
        self.merge0 = nn.Conv2d(2 * c0, c0, 3, padding=1)
        self.scale0 = nn.Sequential(*[ChannelAttentionBlock(c0, reduction) for _ in range(cab_count)])

    def forward(self, swapped):
        if len(swapped) != 3:
            raise ValueError(f"decoder expects three swapped levels, got {len(swapped)}")
        dec2 = self.scale2(swapped[2])
        up1 = self.up21(F.interpolate(dec2, scale_factor=2, mode="bilinear", align_corners=False))
        dec1 = self.scale1(self.merge1(torch.cat([up1, swapped[1]], dim=1)))
        up0 = self.up10(F.interpolate(dec1, scale_factor=2, mode="bilinear", align_corners=False))
        dec0 = self.scale0(self.merge0(torch.cat([up0, swapped[0]], dim=1)))
        return [dec0, dec1, dec2]


class FusionHead(nn.Module):
    """Maps gated decoder features plus the fusion stream to a (0,1) image."""

    def __init__(self, channels):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(4 * channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, 3, 3, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, x):
        return self.net(x)


def build_mef_input(f_m, f_s, f_l, a_mt_s, a_mt_l):
    """Concatenate the reference features with the motion-suppressed others."""
    for other in (f_s, f_l, a_mt_s, a_mt_l):
        if other.shape != f_m.shape:
            raise ValueError(f"shape mismatch: {tuple(other.shape)} vs {tuple(f_m.shape)}")
    return torch.cat([f_m, f_s * a_mt_s, f_l * a_mt_l], dim=1)


def build_nft_input(f_s, a_mt_s, a_sat_s):
    """Gate the short-exposure features by motion and saturation attention."""
    if f_s.shape != a_mt_s.shape or f_s.shape != a_sat_s.shape:
        raise ValueError("attention maps must match the feature shape")
    return f_s * torch.sigmoid(a_mt_s + a_sat_s)


def compose_output(h_m, h_mef, weight):
    """Residual composition with the medium exposure, clamped to [0, 1]."""
    return torch.clamp(h_m * (1.0 - weight) + h_mef, 0.0, 1.0)


class FusionNet(nn.Module):
    def __init__(self, config: NetConfig, feature_source: FeatureSource | None = None):
        super().__init__()
        self.config = config
        self.feature_source = feature_source or FeatureSource("handcrafted")
        c = config.base_channels
        layers = config.attention_conv_layers
        self.extract = FeatureExtractor(c)
        self.motion_att_s = AttentionHead(2 * c, c, layers)
        self.motion_att_l = AttentionHead(2 * c, c, layers)
        self.sat_att = AttentionHead(1, c, layers)
        self.mef = MefStream(c, config.cab_count_mef, config.cab_reduction)
        self.encoder = Encoder(c, config.cab_count_codec, config.cab_reduction)
        self.decoder = Decoder(c, config.cab_count_codec, config.cab_reduction)
        self.up_dec2 = nn.Sequential(
            nn.ConvTranspose2d(4 * c, c, 4, stride=2, padding=1),
            nn.ConvTranspose2d(c, c, 4, stride=2, padding=1),
        )
        self.up_dec1 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.scale_att_1 = AttentionHead(2 * c, c, layers)
        self.scale_att_0 = AttentionHead(2 * c, c, layers)
        self.fusion_head = FusionHead(c)
        self.reweight = AttentionHead(c, 1, layers)

    def _match_pyramids(self, inputs, phi_m, phi_nft):
        cfg = self.config
        if cfg.match_with_encoder_features:
            to_np = lambda levels: FeaturePyramid(
                levels=[lv[0].detach().cpu().numpy().astype(np.float32) for lv in levels],
                source="encoder",
            )
            return to_np(phi_nft), to_np(phi_m), "encoder"
        source_image = inputs.h_s if cfg.no_ms_hdr else inputs.h_s_masked
        src_np = source_image[0].detach().cpu().numpy().transpose(1, 2, 0)
        tgt_np = inputs.h_m[0].detach().cpu().numpy().transpose(1, 2, 0)
        src_pyr = self.feature_source.pyramid(src_np)
        tgt_pyr = self.feature_source.pyramid(tgt_np)
        return src_pyr, tgt_pyr, ("raw_short" if cfg.no_ms_hdr else "ms_hdr")

    def forward(self, inputs: ModelInputs):
        cfg = self.config
        f_s = self.extract(inputs.h_s)
        f_m = self.extract(inputs.h_m)
        f_l = self.extract(inputs.h_l)

        if cfg.no_motion_attention:
            a_mt_s = torch.ones_like(f_s)
            a_mt_l = torch.ones_like(f_l)
        else:
            a_mt_s = self.motion_att_s(torch.cat([f_s, f_m], dim=1))
            a_mt_l = self.motion_att_l(torch.cat([f_l, f_m], dim=1))

        f_mef = self.mef(build_mef_input(f_m, f_s, f_l, a_mt_s, a_mt_l))

        a_sat_s = self.sat_att(inputs.mask_s)
        a_sat_m = self.sat_att(inputs.mask_m)

        phi_m = self.encoder(f_m)
        if cfg.no_nft:
            f_nft = None
            match_field = None
            match_source = None
            swapped = phi_m
        else:
            f_nft = build_nft_input(f_s, a_mt_s, a_sat_s)
            phi_nft = self.encoder(f_nft)
            src_pyr, tgt_pyr, match_source = self._match_pyramids(inputs, phi_m, phi_nft)
            matcher = single_scale_match if cfg.single_scale_vgg else progressive_match
            match_field = matcher(src_pyr, tgt_pyr, cfg.window, cfg.normalization)
            swapped = swap_features(
                [lv[0] for lv in phi_m], [lv[0] for lv in phi_nft], match_field, cfg.window
            )
            swapped = [lv[None] for lv in swapped]

        decoded = self.decoder(swapped)
        up2 = self.up_dec2(decoded[2])
        up1 = self.up_dec1(decoded[1])
        up0 = decoded[0]

        a_sc2 = a_sat_m
        if cfg.no_scale_attention:
            a_sc1 = torch.ones_like(up1)
            a_sc0 = torch.ones_like(up0)
        else:
            a_sc1 = self.scale_att_1(torch.cat([up2, up1], dim=1))
            a_sc0 = self.scale_att_0(torch.cat([up1, up0], dim=1))

        h_mef = self.fusion_head(torch.cat([a_sc2 * up2, a_sc1 * up1, a_sc0 * up0, f_mef], dim=1))
        weight = self.reweight(a_sat_m)
        h_out = compose_output(inputs.h_m, h_mef, weight)

        trace = ForwardTrace(
            a_mt_s=a_mt_s,
            a_mt_l=a_mt_l,
            a_sat_s=a_sat_s,
            a_sat_m=a_sat_m,
            a_sc=[a_sc0, a_sc1, a_sc2],
            f_mef=f_mef,
            f_nft=f_nft,
            match_field=match_field,
            match_source=match_source,
            swapped=swapped,
            decoded=decoded,
            h_mef=h_mef,
            weight=weight,
        )
        return h_out, trace

    def infer(self, inputs: ModelInputs):
        """Forward pass without gradients, output as H x W x 3 numpy."""
        with torch.no_grad():
            h_out, trace = self.forward(inputs)
        return h_out[0].numpy().transpose(1, 2, 0), trace


def _fan_in_out(shape):
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def init_params(config, rng_seed, feature_source=None):
    """Fresh model with variance-preserving (fan-based) weight init.

    All convolution kernels are drawn N(0, 2 / (fan_in + fan_out)) from
    a numpy generator in sorted parameter order, biases are zero, so the
    result is deterministic for a given seed across platforms.
    """
    model = FusionNet(config, feature_source)
    rng = np.random.default_rng(rng_seed)
    state = {}
    for name, param in sorted(model.named_parameters()):
        if param.dim() >= 2:
            fan_in, fan_out = _fan_in_out(tuple(param.shape))
            std = math.sqrt(2.0 / (fan_in + fan_out))
            values = rng.normal(0.0, std, size=tuple(param.shape))
        else:
            values = np.zeros(tuple(param.shape))
        state[name] = torch.from_numpy(values.astype(np.float32))
    model.load_state_dict(state)
    return model


def param_arrays(model):
    """Named parameter tensors as float32 numpy arrays (the checkpointable store)."""
    return {name: p.detach().cpu().numpy().astype(np.float32) for name, p in model.named_parameters()}


def load_param_arrays(model, arrays):
    missing = set(dict(model.named_parameters())) ^ set(arrays)
    if missing:
        raise ValueError(f"parameter store mismatch on names: {sorted(missing)}")
    state = {name: torch.from_numpy(np.ascontiguousarray(arr)) for name, arr in arrays.items()}
    model.load_state_dict(state)
    return model
