"""Camera model, ROI grid, disparity planning and voxelization.

Frames
------
Camera frame (optical convention): x right, y down, z forward.
Grid frame: x right in [-s_x/2, s_x/2], y up in [0, s_y], z forward in
[0, s_z]. The camera sits at the grid origin, so the only change between
the two frames is the sign of y.

Voxel arrays are indexed ``[i, j, k]`` for ``(x, y, z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Points within this many voxel widths of a face snap onto the face. Keeps
# voxelization stable under the ~1 ulp error of depth -> disparity -> depth.
_FACE_SNAP = 1e-9

# Disparity quantization used to merge near-identical far-range levels.
DISPARITY_QUANTUM = 0.25


@dataclass(frozen=True)
class CameraModel:
    focal_length_px: float
    baseline_m: float
    image_width: int
    image_height: int
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        if self.focal_length_px <= 0 or self.baseline_m <= 0:
            raise ValueError("focal length and baseline must be positive")
        if self.image_width <= 0 or self.image_height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.principal_point is None:
            object.__setattr__(
                self, "principal_point", (self.image_width / 2.0, self.image_height / 2.0)
            )
        else:
            object.__setattr__(self, "principal_point", tuple(float(v) for v in self.principal_point))

    @property
    def disparity_constant(self) -> float:
        """f_u * b, so that disparity = constant / depth."""
        return self.focal_length_px * self.baseline_m

    def disparity_of(self, depth):
        return self.disparity_constant / np.asarray(depth, dtype=np.float64)

    def depth_of(self, disparity):
        return self.disparity_constant / np.asarray(disparity, dtype=np.float64)


@dataclass(frozen=True)
class GridSpec:
    voxel_size_m: float
    counts: tuple[int, int, int]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if len(counts) != 3 or min(counts) <= 0:
            raise ValueError(f"bad grid counts {self.counts}")
        if self.voxel_size_m <= 0:
            raise ValueError("voxel size must be positive")
        object.__setattr__(self, "counts", counts)

    @classmethod
    def cubic(cls, voxel_size_m: float, n: int) -> "GridSpec":
        return cls(voxel_size_m, (n, n, n))

    @property
    def extents_m(self) -> tuple[float, float, float]:
        return tuple(c * self.voxel_size_m for c in self.counts)

    @property
    def total_voxels(self) -> int:
        return self.counts[0] * self.counts[1] * self.counts[2]

    @property
    def z_max_m(self) -> float:
        return self.counts[2] * self.voxel_size_m

    @property
    def lower_corner(self) -> np.ndarray:
        sx = self.extents_m[0]
        return np.array([-sx / 2.0, 0.0, 0.0])

    @property
    def is_cubic_pow2(self) -> bool:
        n = self.counts[0]
        return len(set(self.counts)) == 1 and n & (n - 1) == 0

    @property
    def diagonal_m(self) -> float:
        return float(math.sqrt(sum(e * e for e in self.extents_m)))

    def with_resolution(self, n: int) -> "GridSpec":
        """Same physical ROI sampled at ``n`` voxels per axis (cubic grids)."""
        if not len(set(self.counts)) == 1:
            raise ValueError("resampling is defined for cubic grids only")
        return GridSpec(self.extents_m[0] / n, (n, n, n))

    def voxel_centers(self, indices) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.float64).reshape(-1, 3)
        return self.lower_corner + (idx + 0.5) * self.voxel_size_m


@dataclass(frozen=True)
class DisparityPlan:
    """Ordered disparity levels (pixels), nearest depth first."""

    levels: tuple[float, ...]
    source: str = "voxel"
    step_scale: float = 1.0
    raw_levels: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(float(d) for d in self.levels))
        if not self.levels:
            raise ValueError("empty disparity plan")
        if any(d <= 0 for d in self.levels):
            raise ValueError("disparity levels must be positive")
        if any(b >= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("disparity levels must be strictly decreasing")

    def __len__(self):
        return len(self.levels)

    @property
    def max_disparity(self) -> float:
        return self.levels[0]

    def feature_shifts(self, downsample: int = 4) -> np.ndarray:
        """Per-level shift at feature resolution, rounded half-up."""
        return np.floor(np.asarray(self.levels) / downsample + 0.5).astype(np.int64)

    def to_dict(self) -> dict:
        return {"levels": list(self.levels), "source": self.source, "step_scale": self.step_scale}

    @classmethod
    def from_dict(cls, d: dict) -> "DisparityPlan":
        return cls(tuple(d["levels"]), d.get("source", "voxel"), d.get("step_scale", 1.0))


def voxel_plane_depths(grid: GridSpec, step_scale: float) -> np.ndarray:
    step = step_scale * grid.voxel_size_m
    n = int(math.floor(grid.z_max_m / step + 1e-9))
    return step * np.arange(1, n + 1, dtype=np.float64)


def plan_disparity_levels(cam: CameraModel, grid: GridSpec, step_scale: float = 1.0,
                          quantum: float = DISPARITY_QUANTUM) -> DisparityPlan:
    """Disparities whose depths land on voxel planes z = a*l_v, 2*a*l_v, ..., z_max."""
    if step_scale <= 0:
        raise ValueError(f"step_scale must be positive, got {step_scale}")
    if grid.z_max_m <= 0:
        raise ValueError("grid has no depth extent")
    depths = voxel_plane_depths(grid, step_scale)
    if depths.size == 0:
        raise ValueError("step larger than the ROI depth")
    raw = cam.disparity_constant / depths
    if raw[0] >= cam.image_width:
        raise ValueError(
            f"disparity {raw[0]:.2f}px at z={depths[0]:.3f}m exceeds the image width "
            f"({cam.image_width}px): ROI too close for this camera"
        )
    levels = []
    for d in raw:
        q = math.floor(d / quantum + 0.5) * quantum
        if q <= 0:
            continue
        if not levels or q < levels[-1]:
            levels.append(q)
    return DisparityPlan(tuple(levels), "voxel", step_scale, tuple(raw.tolist()))


def full_plan(max_disparity: int) -> DisparityPlan:
    """Every integer disparity in [1, max_disparity]."""
    return DisparityPlan(tuple(range(max_disparity, 0, -1)), "full", 1.0)


def even_plan(max_disparity: int, every: int) -> DisparityPlan:
    """Every ``every``-th integer disparity up to max_disparity."""
    if every < 1:
        raise ValueError("every must be >= 1")
    return DisparityPlan(tuple(range(max_disparity - max_disparity % every, 0, -every)),
                         f"even_{every}", 1.0)


def backproject_depth(depth_map, cam: CameraModel):
    """Back-project valid depth pixels into the camera frame.

    Returns ``(points, n_skipped)`` where points is (N, 3) float64 and
    invalid pixels (NaN, inf or <= 0) are skipped and counted.
    """
    depth = np.asarray(depth_map, dtype=np.float64)
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    valid = np.isfinite(depth) & (depth > 0)
    v, u = np.nonzero(valid)
    z = depth[v, u]
    cx, cy = cam.principal_point
    f = cam.focal_length_px
    x = (u - cx) * z / f
    y = (v - cy) * z / f
    pts = np.stack([x, y, z], axis=1)
    return pts, int(depth.size - v.size)


def camera_to_grid(points) -> np.ndarray:
    pts = np.array(points, dtype=np.float64).reshape(-1, 3)
    pts[:, 1] = -pts[:, 1]
    return pts


def grid_indices(points, grid: GridSpec):
    """Integer voxel indices and an in-ROI mask for grid-frame points.

    Half-open cells [lo, hi); points on the max face of the ROI go to the
    last voxel.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rel = (pts - grid.lower_corner) / grid.voxel_size_m
    counts = np.asarray(grid.counts)
    snapped = np.round(rel)
    rel = np.where(np.abs(rel - snapped) <= _FACE_SNAP, snapped, rel)
    inside = np.all((rel >= 0) & (rel <= counts), axis=1)
    idx = np.floor(rel).astype(np.int64)
    idx = np.minimum(idx, counts - 1)
    return idx, inside


def voxelize(points, grid: GridSpec, min_points: int = 1) -> np.ndarray:
    """Boolean occupancy: a voxel is set when >= min_points grid-frame points fall in it."""
    idx, inside = grid_indices(points, grid)
    idx = idx[inside]
    counts = np.zeros(grid.counts, dtype=np.int64)
    if idx.size:
        np.add.at(counts, (idx[:, 0], idx[:, 1], idx[:, 2]), 1)
    return counts >= max(int(min_points), 1)


def downsample_or(grid: np.ndarray) -> np.ndarray:
    r = grid.shape
    if any(n % 2 for n in r):
        raise ValueError(f"cannot halve resolution {r}")
    g = grid[0::2] | grid[1::2]
    g = g[:, 0::2] | g[:, 1::2]
    return g[:, :, 0::2] | g[:, :, 1::2]


def upsample_replicate(grid):
    """Copy every cell into its 2x2x2 children. Works on numpy arrays and
    on torch tensors whose last three dims are spatial."""
    if isinstance(grid, np.ndarray):
        return grid.repeat(2, axis=-3).repeat(2, axis=-2).repeat(2, axis=-1)
    return grid.repeat_interleave(2, dim=-3).repeat_interleave(2, dim=-2).repeat_interleave(2, dim=-1)


@dataclass
class OccupancyPyramid:
    """Per-level grids ordered coarse to fine; level l (1-based) is ``levels[l-1]``."""

    levels: list
    grid_spec: GridSpec | None = None

    def __post_init__(self):
        for a, b in zip(self.levels, self.levels[1:]):
            if tuple(b.shape[-3:]) != tuple(2 * n for n in a.shape[-3:]):
                raise ValueError("resolution must double between consecutive levels")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def resolutions(self) -> list[int]:
        return [int(g.shape[-1]) for g in self.levels]

    def binarize(self, threshold: float = 0.5) -> "OccupancyPyramid":
        return OccupancyPyramid([np.asarray(g) >= threshold for g in self.levels], self.grid_spec)

    def level_grid_spec(self, level: int) -> GridSpec:
        """GridSpec of 1-based ``level``, sharing the finest ROI."""
        if self.grid_spec is None:
            raise ValueError("pyramid has no grid spec")
        return self.grid_spec.with_resolution(self.resolutions[level - 1])

    def is_consistent(self) -> bool:
        return all(np.array_equal(downsample_or(np.asarray(f, dtype=bool)), np.asarray(c, dtype=bool))
                   for c, f in zip(self.levels, self.levels[1:]))


def build_pyramid(finest: np.ndarray, n_levels: int, grid_spec: GridSpec | None = None) -> OccupancyPyramid:
    """OR-reduce the finest grid over 2x2x2 blocks into ``n_levels`` levels, coarse first."""
    finest = np.asarray(finest, dtype=bool)
    if n_levels < 1:
        raise ValueError("need at least one level")
    factor = 2 ** (n_levels - 1)
    if any(n % factor for n in finest.shape):
        raise ValueError(f"resolution {finest.shape} not divisible by {factor}")
    levels = [finest]
    for _ in range(n_levels - 1):
        levels.append(downsample_or(levels[-1]))
    return OccupancyPyramid(levels[::-1], grid_spec)


def depth_to_occupancy(depth_map, cam: CameraModel, grid: GridSpec, min_points: int = 1) -> np.ndarray:
    pts, _ = backproject_depth(depth_map, cam)
    return voxelize(camera_to_grid(pts), grid, min_points)


def pipeline_voxelize(disparity_map, cam: CameraModel, grid: GridSpec, min_points: int = 1) -> np.ndarray:
    """Standard obstacle pipeline: disparity -> depth -> points -> voxels."""
    disp = np.asarray(disparity_map, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(np.isfinite(disp) & (disp > 0), cam.disparity_constant / disp, np.nan)
    return depth_to_occupancy(depth, cam, grid, min_points)
