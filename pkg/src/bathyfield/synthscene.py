"""Analytic two-media ground-truth generator.

Renders exact refracted images of a simple bathymetric scene (planar water
surface, piecewise-planar terrain, optional submerged box) together with
medium masks, shoreline markers, camera manifests and per-pixel truth, so
the whole reconstruction pipeline can be validated without any external
renderer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from bathyfield.dataprep import Camera, MaskLabel, encode_mask, look_at_camera
from bathyfield.geom import normalize as unit

# albedo pairs (checker parity 0/1) per surface material
PALETTES = {
    "floor": ((0.76, 0.70, 0.52), (0.50, 0.44, 0.31)),
    "ramp": ((0.46, 0.56, 0.30), (0.28, 0.38, 0.17)),
    "box": ((0.72, 0.26, 0.20), (0.85, 0.82, 0.78)),
}


@dataclass(frozen=True)
class SyntheticScene:
    """Water plane at z = water_level over piecewise-planar terrain.

    The terrain is the upper envelope of affine planes: a flat seabed plus
    one shoreline ramp per land edge rising above the water, which makes
    ray intersection exact (first descending root over the planes).  An
    optional axis-aligned box sits on the seabed as an obstacle.
    """

    extent: float = 10.0
    water_level: float = 0.0
    seabed_z: float = -2.0
    ramp_slope: float = 0.5
    shoreline: float = 8.0
    land_edges: tuple = ("x", "y")
    obstacle_min: tuple | None = (-2.0, -2.0, -2.0)
    obstacle_max: tuple | None = (2.0, 2.0, -1.0)
    checker_period: float = 0.5
    attenuation: float = 0.1
    ambient: float = 0.35
    light: tuple = (0.35, 0.25, 1.0)
    water_tint: tuple = (0.80, 0.92, 1.0)
    n_air: float = 1.0
    n_water: float = 1.333

    def __post_init__(self):
        if self.seabed_z >= self.water_level:
            raise ValueError("seabed must be below the water level")
        if not set(self.land_edges) <= {"x", "y"}:
            raise ValueError("land_edges entries must be 'x' or 'y'")

    @property
    def terrain_planes(self) -> np.ndarray:
        """(K, 3) rows (a, b, c) of planes z = a x + b y + c."""
        planes = [(0.0, 0.0, self.seabed_z)]
        # ramp z = slope * (q - shoreline) crosses the water level exactly
        # at the shoreline coordinate
        c = self.water_level - self.ramp_slope * self.shoreline
        if "x" in self.land_edges:
            planes.append((self.ramp_slope, 0.0, c))
        if "y" in self.land_edges:
            planes.append((0.0, self.ramp_slope, c))
        return np.asarray(planes, dtype=np.float64)

    @property
    def has_obstacle(self) -> bool:
        return self.obstacle_min is not None and self.obstacle_max is not None

    def height(self, x, y) -> np.ndarray:
        """Exact surface height (terrain envelope plus obstacle top)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        planes = self.terrain_planes
        h = np.max(planes[:, 0] * x[..., None] + planes[:, 1] * y[..., None]
                   + planes[:, 2], axis=-1)
        if self.has_obstacle:
            mn, mx = np.asarray(self.obstacle_min), np.asarray(
                self.obstacle_max)
            inside = ((x >= mn[0]) & (x <= mx[0]) & (y >= mn[1])
                      & (y <= mx[1]))
            h = np.where(inside, np.maximum(h, mx[2]), h)
        return h

    def to_json(self) -> dict:
        return {
            "extent": self.extent,
            "water_level": self.water_level,
            "seabed_z": self.seabed_z,
            "ramp_slope": self.ramp_slope,
            "shoreline": self.shoreline,
            "land_edges": list(self.land_edges),
            "obstacle_min": list(self.obstacle_min)
            if self.obstacle_min else None,
            "obstacle_max": list(self.obstacle_max)
            if self.obstacle_max else None,
            "checker_period": self.checker_period,
            "attenuation": self.attenuation,
            "ambient": self.ambient,
            "light": list(self.light),
            "water_tint": list(self.water_tint),
            "n_air": self.n_air,
            "n_water": self.n_water,
        }

    @staticmethod
    def from_json(obj: dict) -> "SyntheticScene":
        kw = dict(obj)
        for key in ("land_edges", "light", "water_tint"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        for key in ("obstacle_min", "obstacle_max"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return SyntheticScene(**kw)


@dataclass(frozen=True)
class Trajectory:
    """POI ring plus a small nadir grid, everything above the water."""

    n_ring: int = 18
    ring_radius: float = 12.0
    ring_altitude: float = 8.0
    n_nadir: int = 6
    nadir_radius: float = 4.5
    nadir_altitude: float = 8.0
    ring_fov_deg: float = 60.0
    nadir_fov_deg: float = 55.0

    def cameras(self, width: int, height: int) -> list:
        cams = []
        for k in range(self.n_ring):
            a = 2.0 * np.pi * k / self.n_ring
            eye = (self.ring_radius * np.cos(a), self.ring_radius * np.sin(a),
                   self.ring_altitude)
            cams.append(look_at_camera(f"cam_{k:03d}", eye, (0.0, 0.0, 0.0),
                                       width, height, self.ring_fov_deg))
        for j in range(self.n_nadir):
            if j == 0:
                x, y = 0.0, 0.0
            else:
                a = np.pi / 4.0 + 2.0 * np.pi * (j - 1) / max(
                    self.n_nadir - 1, 1)
                x, y = (self.nadir_radius * np.cos(a),
                        self.nadir_radius * np.sin(a))
            eye = (x, y, self.nadir_altitude)
            cams.append(look_at_camera(f"cam_{self.n_ring + j:03d}", eye,
                                       (x, y, self.nadir_altitude - 1.0),
                                       width, height, self.nadir_fov_deg))
        return cams


def _terrain_first_hit(scene: SyntheticScene, origins: np.ndarray,
                       dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First descending crossing of the terrain envelope, vectorized.

    The envelope of planes is concave in t along a line, so the first
    root is the minimum of per-plane descending roots.  Hits landing
    outside the scene extent count as misses.

    Returns:
        (t_hit with inf for misses, plane index).
    """
    planes = scene.terrain_planes
    a, b, c = planes[:, 0], planes[:, 1], planes[:, 2]
    clearance = origins[:, 2:3] - (a * origins[:, 0:1] + b * origins[:, 1:2]
                                   + c)
    slope = dirs[:, 2:3] - (a * dirs[:, 0:1] + b * dirs[:, 1:2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(slope < -1e-15, -clearance / slope, np.inf)
    t = np.where(t >= 0.0, t, np.inf)
    k = np.argmin(t, axis=1)
    t_hit = t[np.arange(t.shape[0]), k]
    xy = origins[:, :2] + t_hit[:, None] * dirs[:, :2]
    outside = np.any(np.abs(xy) > scene.extent + 1e-12, axis=1)
    t_hit = np.where(np.isfinite(t_hit) & ~outside, t_hit, np.inf)
    return t_hit, k


def _box_first_hit(scene: SyntheticScene, origins: np.ndarray,
                   dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Slab-method entry hit against the obstacle box.

    Returns:
        (t_enter with inf for misses, outward unit face normals).
    """
    n = origins.shape[0]
    normals = np.zeros((n, 3))
    if not scene.has_obstacle:
        return np.full(n, np.inf), normals
    mn = np.asarray(scene.obstacle_min, dtype=np.float64)
    mx = np.asarray(scene.obstacle_max, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (mn - origins) / dirs
        t2 = (mx - origins) / dirs
    lo = np.fmin(t1, t2)
    hi = np.fmax(t1, t2)
    parallel = np.abs(dirs) < 1e-300
    inside = (origins >= mn) & (origins <= mx)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_enter = lo.max(axis=1)
    t_exit = hi.min(axis=1)
    hit = (t_enter <= t_exit) & (t_enter >= 0.0) & np.isfinite(t_enter)
    axis = np.argmax(np.where(np.isfinite(lo), lo, -np.inf), axis=1)
    rows = np.arange(n)
    normals[rows, axis] = -np.sign(dirs[rows, axis])
    normals[~hit] = 0.0
    return np.where(hit, t_enter, np.inf), normals


def _shade(scene: SyntheticScene, points: np.ndarray, normals: np.ndarray,
           material: np.ndarray) -> np.ndarray:
    """Checkerboard albedo with Lambertian shading; no shadows."""
    parity = (np.floor(points / scene.checker_period).sum(axis=1)
              .astype(np.int64) & 1)
    albedo = np.zeros((points.shape[0], 3))
    for idx, name in enumerate(("floor", "ramp", "box")):
        pal = np.asarray(PALETTES[name])
        sel = material == idx
        albedo[sel] = pal[parity[sel]]
    light = unit(np.asarray(scene.light, dtype=np.float64))
    lambert = np.clip(normals @ light, 0.0, None)
    shade = scene.ambient + (1.0 - scene.ambient) * lambert
    return albedo * shade[:, None]


def trace_rays(scene: SyntheticScene, origins, dirs) -> dict:
    """Exact two-media trace of N rays.

    Straight segments that reach the terrain before the water plane are
    LAND; rays crossing the plane inside the domain are refracted with
    Snell's law and continue to the submerged terrain or obstacle (WATER,
    Beer-Lambert attenuated); everything else is IGNORE.

    Returns a dict of per-ray arrays: rgb, label, t_interface, water_path,
    range_virtual (cumulative path length to the hit), range_apparent
    (straight-ray depth placing the hit at its refraction-free apparent
    position) and hit (NaN where there is none).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    n = origins.shape[0]
    rgb = np.zeros((n, 3))
    label = np.full(n, int(MaskLabel.IGNORE), dtype=np.uint8)
    t_interface = np.full(n, np.nan)
    water_path = np.zeros(n)
    range_virtual = np.full(n, np.nan)
    range_apparent = np.full(n, np.nan)
    hit = np.full((n, 3), np.nan)

    t_terr, plane_idx = _terrain_first_hit(scene, origins, dirs)
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_plane = np.where(dz < -1e-15,
                           (scene.water_level - origins[:, 2]) / dz, np.inf)
    t_plane_safe = np.where(np.isfinite(t_plane), t_plane, 0.0)
    p_plane = origins + t_plane_safe[:, None] * dirs
    plane_in_domain = np.isfinite(t_plane) & np.all(
        np.abs(p_plane[:, :2]) <= scene.extent, axis=1)

    planes = scene.terrain_planes
    plane_normals = unit(np.stack([-planes[:, 0], -planes[:, 1],
                                   np.ones(len(planes))], axis=1))

    land = np.isfinite(t_terr) & (t_terr <= t_plane)
    if np.any(land):
        pts = origins[land] + t_terr[land, None] * dirs[land]
        mat = np.where(plane_idx[land] == 0, 0, 1)
        rgb[land] = _shade(scene, pts, plane_normals[plane_idx[land]], mat)
        label[land] = int(MaskLabel.LAND)
        range_virtual[land] = t_terr[land]
        range_apparent[land] = t_terr[land]
        hit[land] = pts

    enters = (~land) & plane_in_domain
    if np.any(enters):
        d_in = dirs[enters]
        # vectorized Snell for a horizontal interface hit from above
        eta = scene.n_air / scene.n_water
        cos_i = -d_in[:, 2]
        k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
        d_w = eta * d_in + (eta * cos_i - np.sqrt(k))[:, None] * np.array(
            [0.0, 0.0, 1.0])
        d_w /= np.linalg.norm(d_w, axis=1, keepdims=True)
        p_i = p_plane[enters]
        t_bed, bed_idx = _terrain_first_hit(scene, p_i, d_w)
        t_box, box_n = _box_first_hit(scene, p_i, d_w)
        s_water = np.minimum(t_bed, t_box)
        ok = np.isfinite(s_water)
        pts = p_i[ok] + s_water[ok, None] * d_w[ok]
        use_box = (t_box < t_bed)[ok]
        normals = np.where(use_box[:, None], box_n[ok],
                           plane_normals[bed_idx[ok]])
        mat = np.where(use_box, 2, np.where(bed_idx[ok] == 0, 0, 1))
        color = _shade(scene, pts, normals, mat)
        color *= np.asarray(scene.water_tint)[None, :]
        color *= np.exp(-scene.attenuation * s_water[ok, None])

        idx = np.flatnonzero(enters)[ok]
        rgb[idx] = color
        label[idx] = int(MaskLabel.WATER)
        t_interface[idx] = t_plane[idx]
        water_path[idx] = s_water[ok]
        range_virtual[idx] = t_plane[idx] + s_water[ok]
        # straight backprojection at this depth reproduces the classical
        # refraction-free apparent point (horizontal displacement match)
        range_apparent[idx] = t_plane[idx] + s_water[ok] * eta
        hit[idx] = pts

    return {"rgb": np.clip(rgb, 0.0, 1.0), "label": label,
            "t_interface": t_interface, "water_path": water_path,
            "range_virtual": range_virtual,
            "range_apparent": range_apparent, "hit": hit}


def trace_pixel(camera: Camera, px: int, py: int,
                scene: SyntheticScene) -> tuple:
    """Single-pixel convenience wrapper around trace_rays.

    Returns:
        (rgb, label, true range, hit point); range/hit are NaN for IGNORE.
    """
    o, d = camera.pixel_rays(np.array([px]), np.array([py]))
    out = trace_rays(scene, o, d)
    return (out["rgb"][0], MaskLabel(int(out["label"][0])),
            float(out["range_virtual"][0]), out["hit"][0])


def render_image(scene: SyntheticScene, camera: Camera, aa: int = 3) -> dict:
    """Trace every pixel; arrays come back shaped (H, W[, 3]).

    RGB is box-filtered over an aa x aa subpixel grid (point-sampled
    checker texture aliases badly otherwise and the speckle breaks
    multi-view photometric consistency).  Labels and truth ranges stay
    point-sampled at pixel centers so masks remain crisp.
    """
    if aa < 1:
        raise ValueError("aa must be >= 1")
    o, d = camera.all_pixel_rays()
    out = trace_rays(scene, o, d)
    if aa > 1:
        py, px = np.mgrid[0:camera.height, 0:camera.width]
        px, py = px.ravel().astype(np.float64), py.ravel().astype(np.float64)
        acc = np.zeros((px.shape[0], 3))
        for i in range(aa):
            for j in range(aa):
                so, sd = camera.pixel_rays(px + (i + 0.5) / aa - 0.5,
                                           py + (j + 0.5) / aa - 0.5)
                acc += trace_rays(scene, so, sd)["rgb"]
        out["rgb"] = acc / (aa * aa)
    h, w = camera.height, camera.width
    shaped = {}
    for key, val in out.items():
        shaped[key] = val.reshape((h, w) + val.shape[1:])
    return shaped


def shoreline_markers(scene: SyntheticScene, per_edge: int = 13) -> np.ndarray:
    """Points on the land-water boundary at the water level.

    With two land edges the markers form an L, which keeps the plane fit
    well-conditioned; a single straight shoreline would be collinear.
    """
    if not scene.land_edges:
        raise ValueError("scene has no land edge to place markers on")
    span = np.linspace(-scene.extent, scene.shoreline, per_edge)
    segs = []
    if "x" in scene.land_edges:
        segs.append(np.stack([np.full(per_edge, scene.shoreline), span,
                              np.full(per_edge, scene.water_level)], axis=1))
    if "y" in scene.land_edges:
        seg = np.stack([span, np.full(per_edge, scene.shoreline),
                        np.full(per_edge, scene.water_level)], axis=1)
        segs.append(seg[:-1] if len(segs) else seg)  # drop duplicate corner
    return np.vstack(segs)


def render_dataset(scene: SyntheticScene, cameras: list, out_dir,
                   save_truth: bool = False, aa: int = 3) -> Path:
    """Render a dataprep-ready dataset directory.

    Writes images/, masks/, cameras.json, markers.json, scene.json and
    (optionally) per-camera truth arrays under truth/.  Everything is a
    deterministic function of (scene, cameras).
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    if save_truth:
        (out_dir / "truth").mkdir(parents=True, exist_ok=True)
    for cam in cameras:
        out = render_image(scene, cam, aa=aa)
        img = np.clip(np.round(out["rgb"] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(out_dir / "images" / f"{cam.cam_id}.png")
        Image.fromarray(encode_mask(out["label"])).save(
            out_dir / "masks" / f"{cam.cam_id}.png")
        if save_truth:
            np.savez(out_dir / "truth" / f"{cam.cam_id}.npz",
                     label=out["label"], t_interface=out["t_interface"],
                     water_path=out["water_path"],
                     range_virtual=out["range_virtual"],
                     range_apparent=out["range_apparent"], hit=out["hit"])
    (out_dir / "cameras.json").write_text(
        json.dumps([c.to_json() for c in cameras], indent=2))
    (out_dir / "markers.json").write_text(
        json.dumps(shoreline_markers(scene).tolist(), indent=2))
    (out_dir / "scene.json").write_text(json.dumps(scene.to_json(), indent=2))
    return out_dir


def sample_reference_points(scene: SyntheticScene, gsd: float) -> np.ndarray:
    """Exact surface points on a regular grid at the given ground sampling
    distance (inclusive of both domain edges)."""
    if gsd <= 0:
        raise ValueError("gsd must be positive")
    n = int(round(2.0 * scene.extent / gsd))
    axis = np.linspace(-scene.extent, scene.extent, n + 1)
    xs, ys = np.meshgrid(axis, axis)
    zs = scene.height(xs, ys)
    return np.stack([xs.ravel(), ys.ravel(), zs.ravel()], axis=1)


def analytic_apparent_depth(depth: float, theta_inc: float,
                            n_air: float = 1.0,
                            n_water: float = 1.333) -> float:
    """Apparent depth of a point at true depth under straight-ray
    backprojection: depth * tan(theta2) / tan(theta1).

    theta_inc is the incidence angle in radians; the nadir limit is
    depth * n_air / n_water.
    """
    if not 0.0 <= theta_inc < np.pi / 2.0:
        raise ValueError("incidence angle must be in [0, pi/2)")
    eta = n_air / n_water
    if theta_inc < 1e-9:
        return depth * eta
    sin_t = np.sin(theta_inc) * eta
    theta_t = np.arcsin(sin_t)
    return float(depth * np.tan(theta_t) / np.tan(theta_inc))
