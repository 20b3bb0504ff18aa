"""Flat key-value run configuration and the objects derived from it."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .geometry import CameraModel, DisparityPlan, GridSpec, even_plan, full_plan, plan_disparity_levels
from .metrics import LossWeights
from .network import DecoderConfig, NetConfig
from .synth import SceneDistribution


@dataclass
class Config:
    # camera / ROI
    focal_length_px: float = 128.0
    baseline_m: float = 1.0
    image_width: int = 128
    image_height: int = 64
    voxel_size_m: float = 0.5
    grid_size: int = 32
    # cost volume
    cv_source: str = "voxel"          # voxel | full | even
    cv_step_scale: float = 2.5
    cv_max_disparity: int = 48
    cv_even_step: int = 2
    # network
    image_channels: int = 1
    feature_channels: int = 8
    encoder_width: int = 64
    match_channels: int = 8
    n_latent: int = 128
    delta: int = 4
    n_levels: int = 3
    decoder_width: int = 64
    mask_threshold: float = 0.5
    decode_mode: str = "sparse_gt"
    eval_decode_mode: str = ""        # empty: sparse_pred for sparse_gt models, else decode_mode
    loss_weights: list = field(default_factory=list)  # empty: per-level defaults
    # optimisation
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    augment: bool = False             # photometric jitter shared by both images
    # data
    dataset_root: str = "data/synth"
    n_scenes: int = 500
    min_obstacles: int = 3
    max_obstacles: int = 6
    obstacle_min_size: float = 1.5
    obstacle_max_size: float = 5.0
    obstacle_far_z: float = 14.0
    texture_sigma: float = 2.0
    ground: bool = False
    ground_height: float = -1.0
    obstacle_base: float = 0.0
    min_points: int = 1
    workers: int = 1
    # output
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.delta * 2 ** self.n_levels != self.grid_size:
            raise ValueError(
                f"delta * 2^n_levels = {self.delta * 2 ** self.n_levels} must equal grid_size {self.grid_size}"
            )

    def camera(self) -> CameraModel:
        return CameraModel(self.focal_length_px, self.baseline_m, self.image_width, self.image_height)

    def grid(self) -> GridSpec:
        return GridSpec.cubic(self.voxel_size_m, self.grid_size)

    def plan(self) -> DisparityPlan:
        if self.cv_source == "voxel":
            return plan_disparity_levels(self.camera(), self.grid(), self.cv_step_scale)
        if self.cv_source == "full":
            return full_plan(self.cv_max_disparity)
        if self.cv_source == "even":
            return even_plan(self.cv_max_disparity, self.cv_even_step)
        raise ValueError(f"unknown cost-volume source {self.cv_source!r}")

    def decoder(self, mode: str | None = None) -> DecoderConfig:
        return DecoderConfig(self.n_latent, self.delta, self.n_levels, self.mask_threshold,
                             mode or self.decode_mode, self.decoder_width)

    def net(self) -> NetConfig:
        return NetConfig(self.image_height, self.image_width, self.image_channels,
                         self.feature_channels, self.encoder_width, self.plan(), self.decoder(),
                         self.match_channels)

    def weights(self) -> LossWeights:
        if self.loss_weights:
            w = LossWeights(tuple(self.loss_weights))
            if len(w) != self.n_levels:
                raise ValueError(f"{len(w)} loss weights for {self.n_levels} levels")
            return w
        return LossWeights.for_levels(self.n_levels)

    def eval_mode(self) -> str:
        if self.eval_decode_mode:
            return self.eval_decode_mode
        return "sparse_pred" if self.decode_mode == "sparse_gt" else self.decode_mode

    def scene_distribution(self) -> SceneDistribution:
        return SceneDistribution(
            camera=self.camera(), grid=self.grid(), n_levels=self.n_levels,
            min_obstacles=self.min_obstacles, max_obstacles=self.max_obstacles,
            ground=self.ground, ground_height=self.ground_height, base_height=self.obstacle_base,
            size_range=(self.obstacle_min_size, self.obstacle_max_size),
            far_z=self.obstacle_far_z, texture_sigma=self.texture_sigma,
            min_plane_depth=self.cv_step_scale * self.voxel_size_m,
            near_z=self.camera().disparity_constant / (self.image_width / 4),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **overrides) -> "Config":
        return replace(self, **overrides)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def full_scale_config(**overrides) -> Config:
    """Full-size configuration: 64^3 ROI at 0.5 m, four levels from 8^3, 400x880 pairs.

    Camera intrinsics are illustrative; they only need to keep the nearest
    voxel plane's disparity inside the image.
    """
    base = dict(
        focal_length_px=800.0, baseline_m=0.54, image_width=880, image_height=400,
        image_channels=3, grid_size=64, n_levels=4, delta=4, n_latent=128,
        feature_channels=32, epochs=30, batch_size=16,
    )
    base.update(overrides)
    return Config(**base)


def load_config(path) -> Config:
    return Config.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
