"""Stereo pair -> occupancy pyramid network.

feature extractor (quarter resolution) -> interlaced cost volume over a
disparity plan -> 2-D conv encoder to a latent vector -> octree decoder
that emits one probability grid per level, coarse to fine.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import DisparityPlan, upsample_replicate
from .sparse import active_sites, pointwise_conv3d, submanifold_conv3d, subdivide_deconv3d

DECODE_MODES = ("straight", "dense", "sparse_gt", "sparse_pred")
FEATURE_STRIDE = 4


@dataclass
class DecoderConfig:
    n_latent: int = 128
    delta: int = 4
    n_levels: int = 3
    mask_threshold: float = 0.5
    mode: str = "sparse_pred"
    width: int = 32
    min_width: int = 8

    def __post_init__(self):
        if self.mode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}; expected one of {DECODE_MODES}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask threshold must lie in (0, 1)")
        if self.n_levels < 1 or self.delta < 1:
            raise ValueError("need delta >= 1 and at least one level")

    def resolution(self, level: int) -> int:
        return self.delta * 2 ** level

    @property
    def resolutions(self) -> list[int]:
        return [self.resolution(l) for l in range(1, self.n_levels + 1)]

    def channels(self, level: int) -> int:
        """Feature width after level ``level``; level 0 is the reshaped latent."""
        return max(self.width >> max(level - 1, 0), self.min_width)

    @property
    def masked(self) -> bool:
        return self.mode != "straight"

    @property
    def sparse(self) -> bool:
        return self.mode in ("sparse_gt", "sparse_pred")


@dataclass
class NetConfig:
    image_height: int = 64
    image_width: int = 128
    image_channels: int = 1
    feature_channels: int = 8
    encoder_width: int = 64
    plan: DisparityPlan = field(default_factory=lambda: DisparityPlan((8.0, 4.0)))
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    match_channels: int = 8

    def __post_init__(self):
        if self.image_height % FEATURE_STRIDE or self.image_width % FEATURE_STRIDE:
            raise ValueError(f"image dims must be divisible by {FEATURE_STRIDE}")

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.image_height // FEATURE_STRIDE, self.image_width // FEATURE_STRIDE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["plan"] = self.plan.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["plan"] = DisparityPlan.from_dict(d["plan"])
        d["decoder"] = DecoderConfig(**d["decoder"])
        return cls(**d)


ACT_SLOPE = 0.1
HEAD_PRIOR = 0.05


def _act():
    return nn.LeakyReLU(ACT_SLOPE)


def pixel_norm(x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Scale every site's channel vector to unit RMS; all-zero (inactive) sites stay zero.

    Without it Adam keeps inflating the decoder activations until the sigmoid
    heads round to exactly 0 or 1 and every gradient vanishes.
    """
    return x * torch.rsqrt(x.pow(2).mean(dim=1, keepdim=True) + eps)


class FeatureExtractor(nn.Module):
    """Four 3x3 convs, two of them strided, giving C x H/4 x W/4 features."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, stride=2, padding=1), nn.BatchNorm2d(channels), _act(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.BatchNorm2d(channels), _act(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1), nn.BatchNorm2d(channels), _act(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, image):
        h, w = image.shape[-2:]
        if h % FEATURE_STRIDE or w % FEATURE_STRIDE:
            raise ValueError(f"image dims {h}x{w} not divisible by {FEATURE_STRIDE}")
        return self.layers(image)


def build_cost_volume(f_left: torch.Tensor, f_right: torch.Tensor, plan: DisparityPlan,
                      stride: int = FEATURE_STRIDE) -> torch.Tensor:
    """Interlace left features with right features shifted by each planned disparity.

    Output is (B, 2C, D, H, W); left channel i goes to 2i, right to 2i+1.
    Columns shifted in from outside the image are zero.
    """
    if f_left.shape != f_right.shape:
        raise ValueError("left/right feature maps differ in shape")
    b, c, h, w = f_left.shape
    shifts = plan.feature_shifts(stride)
    if shifts.max() >= w:
        raise ValueError(f"shift {int(shifts.max())} reaches the feature width {w}")
    volume = f_left.new_zeros(b, c, 2, len(shifts), h, w)
    volume[:, :, 0] = f_left[:, :, None]
    for i, s in enumerate(shifts.tolist()):
        if s > 0:
            volume[:, :, 1, i, :, s:] = f_right[:, :, :, :-s]
        else:
            volume[:, :, 1, i] = f_right
    return volume.reshape(b, 2 * c, len(shifts), h, w)


def encoder_downsamples(h: int, w: int) -> int:
    n = 0
    while max(h, w) > 4 and min(h, w) > 2:
        h, w = math.ceil(h / 2), math.ceil(w / 2)
        n += 1
    return n


class Encoder(nn.Module):
    """Cost volume -> latent vector, using only 2-D convolutions.

    Each interlaced left/right channel pair is reduced to its absolute
    difference, a 3x3 conv shared across disparity levels turns that into
    ``match_channels`` matching features per level, and the levels are then
    folded into channels for a stack of strided convs and a linear layer.
    """

    def __init__(self, feature_channels: int, n_disparities: int, feature_hw: tuple[int, int],
                 width: int, n_latent: int, match_channels: int = 8):
        super().__init__()
        h, w = feature_hw
        self.feature_channels = feature_channels
        self.n_disparities = n_disparities
        self.match_channels = match_channels
        self.match = nn.Sequential(nn.Conv2d(feature_channels, match_channels, 3, padding=1),
                                   nn.BatchNorm2d(match_channels), _act())
        layers = [nn.Conv2d(match_channels * n_disparities, width, 3, padding=1), nn.BatchNorm2d(width), _act()]
        for _ in range(encoder_downsamples(h, w)):
            layers += [nn.Conv2d(width, width, 3, stride=2, padding=1), nn.BatchNorm2d(width), _act()]
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        self.convs = nn.Sequential(*layers)
        self.out_hw = (h, w)
        self.fc = nn.Linear(width * h * w, n_latent)

    def forward(self, cost: torch.Tensor) -> torch.Tensor:
        b, c2, d, h, w = cost.shape
        if c2 != 2 * self.feature_channels or d != self.n_disparities:
            raise ValueError(f"encoder expects a (B, {2 * self.feature_channels}, {self.n_disparities}, H, W) "
                             f"cost volume, got {tuple(cost.shape)}")
        diff = (cost[:, 0::2] - cost[:, 1::2]).abs()
        x = diff.transpose(1, 2).reshape(b * d, c2 // 2, h, w)
        x = self.match(x).reshape(b, d * self.match_channels, h, w)
        return self.fc(self.convs(x).flatten(1))


class DecoderLevel(nn.Module):
    def __init__(self, cin: int, cout: int, with_head: bool):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, 2, stride=2)
        self.conv = nn.Conv3d(cout, cout, 3, padding=1)
        self.head = nn.Conv3d(cout, 1, 1) if with_head else None


@dataclass
class DecodeResult:
    probs: list            # per produced level, (B, R, R, R) tensors
    active: list           # per produced level, active output sites summed over the batch
    levels: list           # 1-based level numbers of ``probs``


class OctreeDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.channels(0)
        self.fc = nn.Linear(cfg.n_latent, c0 * cfg.delta ** 3)
        self.stages = nn.ModuleList(
            DecoderLevel(cfg.channels(l - 1), cfg.channels(l),
                         with_head=cfg.masked or l == cfg.n_levels)
            for l in range(1, cfg.n_levels + 1)
        )
        self.act = _act()
        self.reset_parameters()

    def reset_parameters(self):
        # He init keeps the latent's signal alive through the stack; PyTorch's
        # default shrinks it ~3x per layer and the output starts input-independent.
        for mod in self.modules():
            if isinstance(mod, (nn.Linear, nn.Conv3d, nn.ConvTranspose3d)):
                fan_mode = "fan_out" if isinstance(mod, nn.ConvTranspose3d) else "fan_in"
                nn.init.kaiming_normal_(mod.weight, a=ACT_SLOPE, mode=fan_mode, nonlinearity="leaky_relu")
                nn.init.zeros_(mod.bias)
        # heads start at a sparse-occupancy prior instead of p = 0.5
        for stage in self.stages:
            if stage.head is not None:
                nn.init.normal_(stage.head.weight, std=0.01)
                nn.init.constant_(stage.head.bias, math.log(HEAD_PRIOR / (1 - HEAD_PRIOR)))

    def forward(self, latent, gt_levels=None, max_level=None, mode=None) -> DecodeResult:
        cfg = self.cfg
        mode = mode or cfg.mode
        if mode not in DECODE_MODES:
            raise ValueError(f"unknown decode mode {mode!r}")
        if (mode == "straight") != (cfg.mode == "straight"):
            raise ValueError("straight and octree decoders have different heads")
        max_level = cfg.n_levels if max_level is None else max_level
        if not 1 <= max_level <= cfg.n_levels:
            raise ValueError(f"level {max_level} outside [1, {cfg.n_levels}]")
        if mode == "straight" and max_level != cfg.n_levels:
            raise ValueError("straight decoding has no intermediate exits")
        if mode == "sparse_gt" and gt_levels is None:
            raise ValueError("sparse_gt decoding needs the ground-truth pyramid")
        if gt_levels is not None and mode == "sparse_gt":
            for l, g in enumerate(gt_levels[: max_level - 1], start=1):
                if g.shape[-1] != cfg.resolution(l):
                    raise ValueError(f"gt level {l} has resolution {g.shape[-1]}, expected {cfg.resolution(l)}")
        sparse = mode in ("sparse_gt", "sparse_pred")

        b = latent.shape[0]
        d = cfg.delta
        x = self.act(self.fc(latent)).reshape(b, cfg.channels(0), d, d, d)
        result = DecodeResult([], [], [])
        mask = None
        for l in range(1, max_level + 1):
            stage = self.stages[l - 1]
            r = cfg.resolution(l)
            if mask is None:
                x = pixel_norm(self.act(stage.conv(self.act(stage.up(x)))))
                n_active = b * r ** 3
            elif sparse:
                sites = active_sites(mask)
                x = self.act(subdivide_deconv3d(x, sites, stage.up.weight, stage.up.bias))
                x = pixel_norm(self.act(submanifold_conv3d(x, sites, stage.conv.weight, stage.conv.bias)))
                n_active = len(sites)
            else:
                m = mask[:, None].to(x.dtype)
                x = self.act(stage.up(x)) * m
                x = pixel_norm(self.act(stage.conv(x)) * m)
                n_active = b * r ** 3   # computed everywhere, masked afterwards
            if stage.head is None:
                result.active.append(n_active)
                continue
            if mask is not None and sparse:
                logits = pointwise_conv3d(x, sites, stage.head.weight, stage.head.bias)
                p = torch.sigmoid(logits[:, 0]) * mask.to(x.dtype)
            else:
                p = torch.sigmoid(stage.head(x)[:, 0])
                if mask is not None:
                    p = p * mask.to(p.dtype)
            result.probs.append(p)
            result.levels.append(l)
            result.active.append(n_active)
            if mode != "straight" and l < max_level:
                src = gt_levels[l - 1] if mode == "sparse_gt" else p.detach()
                mask = upsample_replicate(src >= cfg.mask_threshold if src.dtype != torch.bool else src)
        return result


class StereoVoxNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feature_channels
        self.features = FeatureExtractor(cfg.image_channels, c)
        self.encoder = Encoder(c, len(cfg.plan), cfg.feature_hw, cfg.encoder_width,
                               cfg.decoder.n_latent, cfg.match_channels)
        self.decoder = OctreeDecoder(cfg.decoder)

    def extract_features(self, image):
        return self.features(image)

    def encode(self, cost):
        return self.encoder(cost)

    def latent(self, left, right):
        fl = self.features(left)
        fr = self.features(right)
        return self.encoder(build_cost_volume(fl, fr, self.cfg.plan))

    def decode(self, latent, gt_levels=None, max_level=None, mode=None) -> DecodeResult:
        return self.decoder(latent, gt_levels=gt_levels, max_level=max_level, mode=mode)

    def forward(self, left, right, gt_levels=None, max_level=None, mode=None) -> DecodeResult:
        return self.decode(self.latent(left, right), gt_levels, max_level, mode)


def as_image_batch(images, channels: int = 1) -> torch.Tensor:
    """(H, W) / (H, W, C) / (B, H, W[, C]) numpy images -> (B, C, H, W) float tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 2 or (arr.ndim == 3 and arr.shape[-1] in (3, 4) and channels == 3):
        arr = arr[None]
    if arr.ndim == 3:
        arr = arr[..., None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    if t.shape[1] != channels:
        if channels == 1:
            t = t[:, :3].mean(dim=1, keepdim=True)
        else:
            t = t.expand(-1, channels, -1, -1)
    return t.contiguous()
