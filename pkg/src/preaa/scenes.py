"""Synthetic multi-frame clips of a textured box room seen by a moving pinhole camera.

Each clip is rendered at patch resolution: every patch carries a small
``s x s`` RGB sub-image as its input feature vector, plus the ground-truth
depth, world-space point map and camera vector of the frame.

Camera convention: ``x_cam = R @ x_world + t``; pixel ``(row v, col u)``
looks along ``((u + 0.5 - w/2) / f, (v + 0.5 - h/2) / f, 1)`` in camera
coordinates, so depth is the camera-frame z of the hit point. The camera
vector is ``[qw, qx, qy, qz, tx, ty, tz, log f]`` with ``qw >= 0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

ROOM_LO = np.array([-3.0, -1.5, -3.0])
ROOM_HI = np.array([3.0, 1.5, 3.0])
SUBPIXELS = 2
CAMERA_DIM = 8
_NOISE_CELL = 0.35
_NOISE_SIZE = 24


@dataclass
class ClipSample:
    images: np.ndarray   # [N, h, w, C_in]
    cameras: np.ndarray  # [N, 8]
    depth: np.ndarray    # [N, h, w]
    points: np.ndarray   # [N, h, w, 3]
    seed: int

    @property
    def n_frames(self) -> int:
        return self.images.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.images.shape[1], self.images.shape[2]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"images": self.images, "cameras": self.cameras,
                "depth": self.depth, "points": self.points}


def camera_vector(rot: np.ndarray, trans: np.ndarray, focal: float) -> np.ndarray:
    x, y, z, w = Rotation.from_matrix(rot).as_quat()
    q = np.array([w, x, y, z])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return np.concatenate([q, trans, [np.log(focal)]])


def camera_from_vector(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    w, x, y, z = g[:4]
    rot = Rotation.from_quat([x, y, z, w]).as_matrix()
    return rot, np.asarray(g[4:7], dtype=np.float64), float(np.exp(g[7]))


def pixel_rays(h: int, w: int, focal: float) -> np.ndarray:
    """Camera-frame ray directions with unit z, shape ``[h, w, 3]``."""
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return np.stack([(u - w / 2) / focal, (v - h / 2) / focal, np.ones_like(u)], axis=-1)


def unproject(depth: np.ndarray, g: np.ndarray) -> np.ndarray:
    """World-space points of a depth map under camera vector ``g``."""
    rot, trans, focal = camera_from_vector(g)
    h, w = depth.shape
    cam_pts = pixel_rays(h, w, focal) * depth[..., None]
    return (cam_pts - trans) @ rot


def _ray_box_exit(origin, dirs, lo, hi):
    with np.errstate(divide="ignore"):
        bound = np.where(dirs > 0, hi, lo)
        t = np.where(dirs != 0, (bound - origin) / dirs, np.inf)
    axis = np.argmin(t, axis=-1)
    t_exit = np.take_along_axis(t, axis[..., None], -1)[..., 0]
    side = np.take_along_axis(dirs, axis[..., None], -1)[..., 0] > 0
    return t_exit, axis, side


def _ray_box_entry(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(dirs != 0, 1.0 / dirs, np.inf)
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_enter = tmin.max(axis=-1)
    t_leave = tmax.min(axis=-1)
    hit = (t_leave >= t_enter) & (t_enter > 1e-9)
    axis = np.argmax(tmin, axis=-1)
    side = np.take_along_axis(dirs, axis[..., None], -1)[..., 0] < 0
    return np.where(hit, t_enter, np.inf), axis, side


class _Scene:
    def __init__(self, rng: np.random.Generator):
        self.boxes = []
        for _ in range(int(rng.integers(1, 4))):
            size = rng.uniform([0.4, 0.4, 0.4], [1.4, 1.6, 1.0])
            lo = np.array([rng.uniform(-2.8, 2.8 - size[0]), ROOM_LO[1],
                           rng.uniform(1.0, 2.9 - size[2])])
            self.boxes.append((lo, lo + size))
        n_surfaces = 6 + 6 * len(self.boxes)
        self.base = rng.uniform(0.2, 1.0, size=(n_surfaces, 3))
        self.noise = rng.uniform(0.0, 1.0, size=(n_surfaces, 3, _NOISE_SIZE, _NOISE_SIZE))

    def cast(self, origin: np.ndarray, dirs: np.ndarray):
        """Nearest hit distance (in units of ``dirs``) and surface id per ray."""
        t, axis, side = _ray_box_exit(origin, dirs, ROOM_LO, ROOM_HI)
        surface = axis * 2 + side
        for b, (lo, hi) in enumerate(self.boxes):
            tb, axb, sb = _ray_box_entry(origin, dirs, lo, hi)
            closer = tb < t
            t = np.where(closer, tb, t)
            surface = np.where(closer, 6 + 6 * b + axb * 2 + sb, surface)
        return t, surface

    def shade(self, points: np.ndarray, surface: np.ndarray) -> np.ndarray:
        axis = (surface % 6) // 2
        uv_axes = np.array([[1, 2], [0, 2], [0, 1]])[axis]
        uv = np.take_along_axis(points, uv_axes, axis=-1)
        coords = (uv - ROOM_LO.min()) / _NOISE_CELL
        i0 = np.clip(np.floor(coords).astype(int), 0, _NOISE_SIZE - 2)
        frac = np.clip(coords - i0, 0.0, 1.0)
        s = frac * frac * (3 - 2 * frac)
        ch = np.arange(3)

        def at(di, dj):
            return self.noise[surface[..., None], ch,
                              (i0[..., 0] + di)[..., None], (i0[..., 1] + dj)[..., None]]

        su, sv = s[..., 0:1], s[..., 1:2]
        val = (at(0, 0) * (1 - su) * (1 - sv) + at(1, 0) * su * (1 - sv)
               + at(0, 1) * (1 - su) * sv + at(1, 1) * su * sv)
        return self.base[surface] * (0.35 + 0.65 * val)


def _camera_path(rng: np.random.Generator, n: int):
    yaw0, pitch0 = rng.uniform(-0.15, 0.15), rng.uniform(-0.05, 0.05)
    yaw1, pitch1 = yaw0 + rng.uniform(-0.5, 0.5), pitch0 + rng.uniform(-0.15, 0.15)
    c0 = rng.uniform([-0.3, -0.2, -1.0], [0.3, 0.2, -0.6])
    c1 = c0 + rng.uniform([-0.8, -0.3, -0.3], [0.8, 0.3, 0.6])
    # camera-to-world rotations; the camera looks along +z
    key = Rotation.from_euler("yx", [[yaw0, pitch0], [yaw1, pitch1]])
    slerp = Slerp([0.0, 1.0], key)
    ts = np.linspace(0.0, 1.0, n) if n > 1 else np.zeros(1)
    s = ts * ts * (3 - 2 * ts)
    rots = slerp(s).as_matrix()
    centers = c0 + s[:, None] * (c1 - c0)
    return rots, centers


def generate_clip(seed: int, n_frames: int, h: int, w: int) -> ClipSample:
    """Render a deterministic clip of ``n_frames`` frames at ``h x w`` patches."""
    if n_frames < 1 or h < 2 or w < 2:
        raise ValueError(f"invalid clip dims N={n_frames}, h={h}, w={w}")
    rng = np.random.default_rng(seed)
    scene = _Scene(rng)
    rots, centers = _camera_path(rng, n_frames)
    focal = (w / 2) / np.tan(np.deg2rad(32.0))

    images, cameras, depths, points = [], [], [], []
    for c2w, center in zip(rots, centers):
        rot = c2w.T
        trans = -rot @ center
        # depth and points at patch centres
        dirs = pixel_rays(h, w, focal) @ rot
        depth, _ = scene.cast(center, dirs)
        pts = center + depth[..., None] * dirs
        # sub-pixel render for the input features
        s = SUBPIXELS
        sub_rays = pixel_rays(h * s, w * s, focal * s) @ rot
        ts, surf = scene.cast(center, sub_rays)
        colors = scene.shade(center + ts[..., None] * sub_rays, surf)
        patches = colors.reshape(h, s, w, s, 3).transpose(0, 2, 1, 3, 4).reshape(h, w, s * s * 3)
        images.append(patches)
        cameras.append(camera_vector(rot, trans, focal))
        depths.append(depth)
        points.append(pts)
    return ClipSample(np.stack(images), np.stack(cameras), np.stack(depths), np.stack(points), seed)


def save_clip(clip: ClipSample, directory) -> Path:
    """Write flat little-endian float64 tensors plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, arr in clip.tensors().items():
        fname = f"{name}.f64"
        np.ascontiguousarray(arr, dtype="<f8").tofile(directory / fname)
        entries.append({"name": name, "file": fname, "shape": list(arr.shape), "dtype": "float64-le"})
    manifest = {"seed": clip.seed, "n_frames": clip.n_frames, "grid": list(clip.grid), "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_clip(directory) -> ClipSample:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    arrays = {}
    for e in manifest["tensors"]:
        arrays[e["name"]] = np.fromfile(directory / e["file"], dtype="<f8").reshape(e["shape"])
    return ClipSample(arrays["images"], arrays["cameras"], arrays["depth"], arrays["points"],
                      int(manifest["seed"]))
