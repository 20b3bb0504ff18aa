"""Synthetic rectified stereo scenes with exact depth and occupancy.

Scenes are boxes and spheres over an optional ground plane, rendered by
analytic ray casting in the grid frame (camera at the origin, y up). The
left image is per-pixel random texture modulated by Lambert shading; the
right image backward-warps the left image along each right-camera ray, and
pixels whose surface the left camera cannot see get fresh texture.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (CameraModel, GridSpec, OccupancyPyramid, build_pyramid,
                       depth_to_occupancy)
from .io import grid_from_json, load_json, load_png, pyramid_to_json, read_pfm, save_json, save_png, write_pfm

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
_LIGHT = np.array([0.4, 0.8, -0.45]) / np.linalg.norm([0.4, 0.8, -0.45])


@dataclass
class Obstacle:
    kind: str                       # "box" or "sphere"
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # box edge lengths; sphere uses size[0] as diameter
    texture_seed: int = 0
    albedo: float = 0.8

    def __post_init__(self):
        if self.kind not in ("box", "sphere"):
            raise ValueError(f"unknown obstacle kind {self.kind!r}")
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        half = np.asarray(self.size) / 2 if self.kind == "box" else np.full(3, self.size[0] / 2)
        return c - half, c + half


@dataclass
class SceneSpec:
    seed: int
    camera: CameraModel
    grid: GridSpec
    obstacles: list = field(default_factory=list)
    ground: bool = False
    ground_height: float = -1.0
    n_levels: int = 3
    min_points: int = 1
    texture_sigma: float = 1.0

    def to_dict(self) -> dict:
        return {
            "texture_sigma": self.texture_sigma,
            "seed": self.seed,
            "camera": asdict(self.camera),
            "grid": {"voxel_size_m": self.grid.voxel_size_m, "counts": list(self.grid.counts)},
            "obstacles": [asdict(o) for o in self.obstacles],
            "ground": self.ground,
            "ground_height": self.ground_height,
            "n_levels": self.n_levels,
            "min_points": self.min_points,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        cam = dict(d["camera"])
        cam["principal_point"] = tuple(cam["principal_point"])
        return cls(
            seed=d["seed"],
            camera=CameraModel(**cam),
            grid=GridSpec(d["grid"]["voxel_size_m"], tuple(d["grid"]["counts"])),
            obstacles=[Obstacle(**o) for o in d["obstacles"]],
            ground=d["ground"],
            ground_height=d["ground_height"],
            n_levels=d["n_levels"],
            min_points=d.get("min_points", 1),
            texture_sigma=d.get("texture_sigma", 1.0),
        )


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    gt_depth: np.ndarray       # float32, NaN where the ray escapes
    gt_pyramid: OccupancyPyramid
    scene: SceneSpec
    right_disparity: np.ndarray | None = None  # per right pixel, NaN where occluded or escaping
    occluded: np.ndarray | None = None         # right pixels filled with fresh texture


def _ray_dirs(cam: CameraModel, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    cx, cy = cam.principal_point
    f = cam.focal_length_px
    return np.stack([(us - cx) / f, -(vs - cy) / f, np.ones_like(us, dtype=np.float64)], axis=-1)


def _hit_box(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    par = dirs == 0
    inside = (origin >= lo) & (origin <= hi)
    tmin_ax = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    tmax_ax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    tmin = tmin_ax.max(axis=-1)
    tmax = tmax_ax.min(axis=-1)
    hit = (tmax >= tmin) & (tmin > 0)
    t = np.where(hit, tmin, np.inf)
    axis = np.argmax(tmin_ax, axis=-1)
    normal = np.zeros(dirs.shape)
    sign = -np.sign(np.take_along_axis(dirs, axis[..., None], axis=-1))[..., 0]
    np.put_along_axis(normal, axis[..., None], sign[..., None], axis=-1)
    return t, normal


def _hit_sphere(origin, dirs, center, radius):
    oc = origin - center
    a = (dirs * dirs).sum(-1)
    b = 2 * (dirs * oc).sum(-1)
    c = (oc * oc).sum() - radius * radius
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit = ok & (t > 0)
    t = np.where(hit, t, np.inf)
    with np.errstate(invalid="ignore"):
        p = origin + dirs * np.where(hit, t, 0.0)[..., None]
    normal = (p - center) / radius
    return t, normal


def cast_rays(scene: SceneSpec, origin, dirs):
    """Nearest hit along each ray. Returns (t, surface id, normal); id -1 means no hit,
    0 the ground, i+1 obstacle i. ``dirs`` have unit z so t equals depth."""
    origin = np.asarray(origin, dtype=np.float64)
    best = np.full(dirs.shape[:-1], np.inf)
    ids = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    normals = np.zeros(dirs.shape)
    if scene.ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground_height - origin[1]) / dirs[..., 1]
        t = np.where((dirs[..., 1] < 0) & (t > 0), t, np.inf)
        closer = t < best
        best = np.where(closer, t, best)
        ids[closer] = 0
        normals[closer] = (0.0, 1.0, 0.0)
    for k, ob in enumerate(scene.obstacles, start=1):
        if ob.kind == "box":
            t, n = _hit_box(origin, dirs, *ob.bounds)
        else:
            t, n = _hit_sphere(origin, dirs, np.asarray(ob.center), ob.size[0] / 2)
        closer = t < best
        best = np.where(closer, t, best)
        ids[closer] = k
        normals[closer] = n[closer]
    return best, ids, normals


def _shade(scene: SceneSpec, ids, normals) -> np.ndarray:
    albedo = np.full(ids.shape, 0.55)
    for k, ob in enumerate(scene.obstacles, start=1):
        albedo[ids == k] = ob.albedo
    albedo[ids == 0] = 0.6
    lambert = np.clip((normals * _LIGHT).sum(-1), 0.0, 1.0)
    shade = albedo * (0.45 + 0.55 * lambert)
    return np.where(ids < 0, 0.5, shade)


def _texture(rng, shape, sigma: float) -> np.ndarray:
    """Random-dot texture blurred to a grain of ~sigma pixels, stretched to [0, 1]."""
    t = rng.uniform(0.0, 1.0, size=shape)
    if sigma > 0:
        t = gaussian_filter(t, sigma, mode="wrap")
    lo, hi = t.min(), t.max()
    return (t - lo) / (hi - lo) if hi > lo else t


def max_scene_disparity(scene: SceneSpec) -> float:
    cam = scene.camera
    v = np.arange(cam.image_height, dtype=np.float64)
    u = np.arange(cam.image_width, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    depth, _, _ = cast_rays(scene, np.zeros(3), _ray_dirs(cam, uu, vv))
    finite = depth[np.isfinite(depth)]
    return float(cam.disparity_constant / finite.min()) if finite.size else 0.0


def render_scene(spec: SceneSpec) -> StereoSample:
    cam = spec.camera
    h, w = cam.image_height, cam.image_width
    c = cam.disparity_constant
    rng = np.random.default_rng(spec.seed)
    uu, vv = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))

    depth, ids, normals = cast_rays(spec, np.zeros(3), _ray_dirs(cam, uu, vv))
    finite = np.isfinite(depth)
    if finite.any() and c / depth[finite].min() > w / 4:
        raise ValueError(
            f"max disparity {c / depth[finite].min():.1f}px exceeds image width / 4 ({w / 4:.0f}px)"
        )
    texture = _texture(rng, (h, w), spec.texture_sigma)
    left = 0.1 + 0.8 * texture * _shade(spec, ids, normals)

    # right camera sits at +baseline along x
    r_depth, r_ids, r_normals = cast_rays(spec, np.array([cam.baseline_m, 0.0, 0.0]),
                                          _ray_dirs(cam, uu, vv))
    with np.errstate(divide="ignore"):
        disp = np.where(np.isfinite(r_depth), c / r_depth, 0.0)
    u_left = uu + disp
    l_depth, _, _ = cast_rays(spec, np.zeros(3), _ray_dirs(cam, u_left, vv))
    with np.errstate(invalid="ignore"):
        same = np.where(np.isfinite(r_depth),
                        np.abs(l_depth - r_depth) <= 1e-9 * np.maximum(r_depth, 1.0),
                        ~np.isfinite(l_depth))
    visible = same & (u_left <= w - 1)
    right = np.empty_like(left)
    for v in range(h):
        right[v] = np.interp(u_left[v], uu[v], left[v])
    fresh = 0.1 + 0.8 * _texture(rng, (h, w), spec.texture_sigma) * _shade(spec, r_ids, r_normals)
    right = np.where(visible, right, fresh)

    gt_depth = np.where(finite, depth, np.nan).astype(np.float32)
    return StereoSample(
        left=left.astype(np.float32),
        right=right.astype(np.float32),
        gt_depth=gt_depth,
        gt_pyramid=gt_pyramid_from_depth(gt_depth, cam, spec.grid, spec.n_levels, spec.min_points),
        scene=spec,
        right_disparity=np.where(visible, disp, np.nan),
        occluded=~visible,
    )


def gt_pyramid_from_depth(depth, cam, grid, n_levels, min_points=1) -> OccupancyPyramid:
    return build_pyramid(depth_to_occupancy(depth, cam, grid, min_points), n_levels, grid)


@dataclass
class SceneDistribution:
    """Parameters for random scene sampling."""

    camera: CameraModel
    grid: GridSpec
    n_levels: int = 3
    min_obstacles: int = 1
    max_obstacles: int = 3
    sphere_prob: float = 0.3
    ground: bool = False
    ground_height: float = -1.0
    base_height: float = 0.0      # obstacles rest here when the ground is off
    near_z: float = 2.0
    far_z: float = 14.0
    size_range: tuple[float, float] = (1.0, 4.0)
    texture_sigma: float = 1.0
    fov_margin: float = 0.9
    min_plane_depth: float = 0.5   # first voxel plane of the disparity plan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = {"voxel_size_m": self.grid.voxel_size_m, "counts": list(self.grid.counts)}
        return d


def _obstacle_ok(ob: Obstacle, dist: SceneDistribution) -> bool:
    lo, hi = ob.bounds
    g = dist.grid
    roi_lo = g.lower_corner
    roi_hi = roi_lo + np.asarray(g.extents_m)
    if np.any(hi <= roi_lo) or np.any(lo >= roi_hi):
        return False
    return lo[2] > dist.min_plane_depth and hi[2] < g.z_max_m


def sample_scene(dist: SceneDistribution, seed: int) -> SceneSpec:
    rng = np.random.default_rng(seed)
    cam, grid = dist.camera, dist.grid
    half_fov = (cam.image_width / 2) / cam.focal_length_px * dist.fov_margin
    z_far = grid.z_max_m
    smin, smax = dist.size_range
    for _attempt in range(1000):
        n = int(rng.integers(dist.min_obstacles, dist.max_obstacles + 1))
        obstacles = []
        for _ in range(n):
            kind = "sphere" if rng.random() < dist.sphere_prob else "box"
            if kind == "box":
                size = rng.uniform(smin, smax, size=3)
            else:
                size = np.full(3, rng.uniform(smin, smax))
            z_lo = dist.near_z + size[2] / 2
            z_hi = min(dist.far_z, z_far - size[2] / 2 - 0.01)
            if z_hi <= z_lo:
                continue
            z = rng.uniform(z_lo, z_hi)
            x = rng.uniform(-half_fov * z, half_fov * z)
            base = dist.ground_height if dist.ground else dist.base_height
            y = base + size[1] / 2
            ob = Obstacle(kind, (x, y, z), tuple(size), int(rng.integers(2**31)),
                          float(rng.uniform(0.5, 1.0)))
            if _obstacle_ok(ob, dist):
                obstacles.append(ob)
        if len(obstacles) < dist.min_obstacles:
            continue
        spec = SceneSpec(seed=seed, camera=cam, grid=grid, obstacles=obstacles,
                         ground=dist.ground, ground_height=dist.ground_height,
                         n_levels=dist.n_levels, texture_sigma=dist.texture_sigma)
        if max_scene_disparity(spec) <= cam.image_width / 4:
            return spec
    raise RuntimeError(f"could not sample a valid scene for seed {seed}")


def scene_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([master_seed, index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def split_assignment(n: int, master_seed: int) -> list[str]:
    """80/10/10 train/val/test over a seeded permutation of scene indices."""
    n_train = int(round(0.8 * n))
    n_val = int(round(0.1 * n))
    order = np.random.default_rng(master_seed).permutation(n)
    labels = [""] * n
    for rank, idx in enumerate(order):
        labels[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return labels


def write_sample(sample: StereoSample, folder: Path) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    try:
        save_png(folder / "left.png", sample.left)
        save_png(folder / "right.png", sample.right)
        write_pfm(folder / "depth.pfm", sample.gt_depth)
        save_json(folder / "scene.json", sample.scene.to_dict())
        save_json(folder / "pyramid.json", pyramid_to_json(sample.gt_pyramid))
    except OSError as e:
        raise OSError(f"failed writing sample to {folder}: {e}") from e


def _render_one(args):
    dist, seed, folder = args
    spec = sample_scene(dist, seed)
    write_sample(render_scene(spec), Path(folder))
    return seed


def _file_digest(folder: Path) -> str:
    h = hashlib.sha256()
    for name in ("left.png", "right.png", "depth.pfm", "scene.json", "pyramid.json"):
        h.update((folder / name).read_bytes())
    return h.hexdigest()


def generate_dataset(n_scenes: int, dist: SceneDistribution, out_dir, master_seed: int,
                     workers: int = 1) -> dict:
    """Render ``n_scenes`` scenes under ``out_dir`` and write manifest.json.

    Scene i uses a seed derived from (master_seed, i), so output does not
    depend on ``workers``.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset root {root}: {e}") from e
    splits = split_assignment(n_scenes, master_seed)
    jobs = []
    entries = []
    for i in range(n_scenes):
        sid = f"{i:05d}"
        seed = scene_seed(master_seed, i)
        rel = f"{splits[i]}/{sid}"
        jobs.append((dist, seed, str(root / rel)))
        entries.append({"id": sid, "split": splits[i], "seed": seed, "path": rel})
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            list(ex.map(_render_one, jobs))
    else:
        for job in jobs:
            _render_one(job)
    for e in entries:
        e["sha256"] = _file_digest(root / e["path"])
    manifest = {
        "format": "stereovox-dataset/1",
        "master_seed": master_seed,
        "n_scenes": n_scenes,
        "config": dist.to_dict(),
        "samples": entries,
    }
    save_json(root / "manifest.json", manifest)
    log.info("wrote %d scenes to %s", n_scenes, root)
    return manifest


def camera_grid_from_manifest(manifest: dict) -> tuple[CameraModel, GridSpec, int]:
    cfg = manifest["config"]
    cam = dict(cfg["camera"])
    cam["principal_point"] = tuple(cam["principal_point"])
    grid = GridSpec(cfg["grid"]["voxel_size_m"], tuple(cfg["grid"]["counts"]))
    return CameraModel(**cam), grid, int(cfg["n_levels"])


@dataclass
class LoadedSplit:
    ids: list
    left: np.ndarray          # (N, H, W) float32
    right: np.ndarray
    depth: np.ndarray
    pyramids: list            # per level, (N, R, R, R) bool
    camera: CameraModel
    grid: GridSpec

    def __len__(self):
        return len(self.ids)


def _gray(img: np.ndarray) -> np.ndarray:
    return img if img.ndim == 2 else img[..., :3].mean(axis=-1)


def load_split(root, split: str) -> LoadedSplit:
    """Read one split of any dataset laid out as ``<root>/<split>/<id>/...``.

    pyramid.json is optional; when absent the pyramid is rebuilt from depth.pfm.
    """
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest at {mpath}")
    manifest = load_json(mpath)
    cam, grid, n_levels = camera_grid_from_manifest(manifest)
    entries = [e for e in manifest["samples"] if e["split"] == split]
    ids, lefts, rights, depths = [], [], [], []
    levels = [[] for _ in range(n_levels)]
    for e in entries:
        folder = root / e["path"]
        ids.append(e["id"])
        lefts.append(_gray(load_png(folder / "left.png")))
        rights.append(_gray(load_png(folder / "right.png")))
        depth = read_pfm(folder / "depth.pfm")
        depths.append(depth)
        if (folder / "pyramid.json").exists():
            grids = [grid_from_json(d) for d in load_json(folder / "pyramid.json")]
        else:
            grids = gt_pyramid_from_depth(depth, cam, grid, n_levels).levels
        for l, g in enumerate(grids):
            levels[l].append(g)
    h, w = cam.image_height, cam.image_width
    stack = (lambda xs, shape: np.stack(xs) if xs else np.zeros((0, *shape), np.float32))
    return LoadedSplit(
        ids=ids,
        left=stack(lefts, (h, w)).astype(np.float32),
        right=stack(rights, (h, w)).astype(np.float32),
        depth=stack(depths, (h, w)).astype(np.float32),
        pyramids=[np.stack(l) if l else np.zeros((0,) * 4, bool) for l in levels],
        camera=cam,
        grid=grid,
    )


def manifest_digest(root) -> str:
    return hashlib.sha256(Path(root, "manifest.json").read_bytes()).hexdigest()


def dumps_scene(spec: SceneSpec) -> str:
    return json.dumps(spec.to_dict(), sort_keys=True)
