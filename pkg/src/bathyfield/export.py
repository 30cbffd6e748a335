"""Refraction-corrected point-cloud export and PLY I/O.

Each kept pixel contributes one 3D point: the rendered expected depth is
projected along the two-segment ray (straight to the interface, then the
refracted direction), gated by accumulated opacity.  Clouds start in the
normalized training frame; `denormalize` returns them to the global
metric frame via the stored similarity transforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from bathyfield.dataprep import DatasetBundle, MaskLabel
from bathyfield.field import DTYPE
from bathyfield.geom import SimilarityTransform, apply_similarity, \
    invert_similarity
from bathyfield.rendering import render_rays
from bathyfield.sampling import ProposalConfig, VirtualRays, \
    build_virtual_rays

FRAMES = ("normalized", "chunk", "global")

PLY_VERTEX = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
                       ("red", "u1"), ("green", "u1"), ("blue", "u1")])


class EmptyCloud(ValueError):
    """No points survived opacity gating (or a write of zero points)."""


@dataclass
class PointCloud:
    """Positions + colors with an explicit coordinate-frame tag."""

    positions: np.ndarray   # (N, 3) float64
    colors: np.ndarray      # (N, 3) float64 in [0, 1]
    frame: str = "normalized"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, np.float64)
        self.colors = np.asarray(self.colors, np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must be (N, 3)")
        if self.colors.shape != self.positions.shape:
            raise ValueError("colors must match positions")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite point coordinates")
        if self.colors.size and (self.colors.min() < 0
                                 or self.colors.max() > 1):
            raise ValueError("colors must lie in [0, 1]")
        if self.frame not in FRAMES:
            raise ValueError(f"unknown frame tag: {self.frame!r}")

    def __len__(self) -> int:
        return self.positions.shape[0]


def backproject(vrays: VirtualRays, depth,
                refraction_enabled: bool = True) -> np.ndarray:
    """Depth along the virtual ray to a 3D point.

    With refraction enabled, points past the interface follow
    p_I + d_w (depth - t_I); otherwise (and for non-water rays) the
    original straight direction is used.
    """
    depth = torch.as_tensor(np.asarray(depth), dtype=DTYPE).reshape(-1)
    with torch.no_grad():
        if refraction_enabled:
            pos = vrays.positions(depth[:, None])[:, 0]
        else:
            pos = vrays.origins + depth[:, None] * vrays.dirs
    return pos.numpy()


def export_pointcloud(field_model, proposals, bundle: DatasetBundle,
                      config: ProposalConfig, *,
                      opacity_threshold: float = 0.5,
                      refraction_enabled: bool = True,
                      two_media: bool = True, stride: int = 1,
                      indices: list | None = None,
                      uniform_samples: int | None = None,
                      chunk: int = 8192, return_aux: bool = False):
    """Back-project one point per kept pixel across dataset views.

    IGNORE pixels are skipped; a pixel is kept when its accumulated
    opacity exceeds the threshold.  `stride` subsamples the pixel grid in
    both axes.  Raises EmptyCloud when nothing passes.

    Returns:
        PointCloud in the normalized frame; with return_aux=True, a
        (cloud, aux) pair where aux has per-point labels and view ids.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if indices is None:
        indices = list(range(len(bundle.cameras)))
    pts, cols, aux_labels, aux_views = [], [], [], []
    for idx in indices:
        cam = bundle.cameras[idx]
        origins, dirs = cam.all_pixel_rays()
        if bundle.masks_enabled:
            labels = bundle.load_mask(idx).reshape(-1)
        else:
            labels = np.full(cam.height * cam.width, int(MaskLabel.WATER))
        keep_grid = np.zeros((cam.height, cam.width), bool)
        keep_grid[::stride, ::stride] = True
        keep = keep_grid.reshape(-1) & (labels != int(MaskLabel.IGNORE))
        origins, dirs, labels = origins[keep], dirs[keep], labels[keep]

        for lo in range(0, origins.shape[0], chunk):
            hi = min(lo + chunk, origins.shape[0])
            o_np, d_np = origins[lo:hi], dirs[lo:hi]
            lab = labels[lo:hi]
            with torch.no_grad():
                out, _, _ = render_rays(
                    o_np, d_np, lab, field_model, proposals,
                    bundle.water_plane, bundle.scene_box, config,
                    refraction_enabled=refraction_enabled,
                    two_media=two_media, uniform_samples=uniform_samples)
                passed = (out.accumulation
                          > opacity_threshold).numpy()
            if not passed.any():
                continue
            vrays = build_virtual_rays(o_np[passed], d_np[passed],
                                       lab[passed], bundle.water_plane,
                                       bundle.scene_box,
                                       refraction_enabled)
            depth = out.depth.numpy()[passed]
            pts.append(backproject(vrays, depth, refraction_enabled))
            cols.append(np.clip(out.rgb.numpy()[passed], 0.0, 1.0))
            aux_labels.append(lab[passed])
            aux_views.append(np.full(int(passed.sum()), idx))
    if not pts:
        raise EmptyCloud(
            f"no pixels exceeded opacity {opacity_threshold}")
    cloud = PointCloud(np.concatenate(pts), np.concatenate(cols),
                       frame="normalized")
    if return_aux:
        return cloud, {"labels": np.concatenate(aux_labels),
                       "views": np.concatenate(aux_views)}
    return cloud


def denormalize(cloud: PointCloud, norm: SimilarityTransform,
                chunk: SimilarityTransform | None = None) -> PointCloud:
    """Normalized -> global frame.

    Inverts the dataset normalization (rotation/centering/scale applied
    at prep time), then applies the chunk-to-global similarity; a None
    chunk means the dataset frame already was global.
    """
    if cloud.frame != "normalized":
        raise ValueError(f"expected a normalized cloud, got {cloud.frame}")
    x = apply_similarity(invert_similarity(norm), cloud.positions)
    if chunk is not None:
        x = apply_similarity(chunk, x)
    return PointCloud(x, cloud.colors.copy(), frame="global")


def write_ply(cloud: PointCloud, path, binary: bool = False) -> None:
    """PLY writer: x,y,z doubles + red,green,blue uchar per vertex."""
    if len(cloud) == 0:
        raise EmptyCloud("refusing to write an empty PLY")
    fmt = "binary_little_endian" if binary else "ascii"
    header = "\n".join([
        "ply",
        f"format {fmt} 1.0",
        f"comment frame {cloud.frame}",
        f"element vertex {len(cloud)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]) + "\n"
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            rec = np.empty(len(cloud), dtype=PLY_VERTEX)
            for i, k in enumerate(("x", "y", "z")):
                rec[k] = cloud.positions[:, i]
            for i, k in enumerate(("red", "green", "blue")):
                rec[k] = rgb[:, i]
            f.write(rec.tobytes())
        else:
            lines = []
            for p, c in zip(cloud.positions, rgb):
                lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g} "
                             f"{c[0]} {c[1]} {c[2]}")
            f.write(("\n".join(lines) + "\n").encode("ascii"))


def read_ply(path) -> PointCloud:
    """Read PLY files produced by write_ply."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt = None
        count = None
        frame = "global"
        props = []
        while True:
            line = f.readline()
            if not line:
                raise ValueError("unterminated PLY header")
            parts = line.decode("ascii").split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "comment" and parts[1:2] == ["frame"]:
                frame = parts[2]
            elif parts[0] == "element":
                if parts[1] != "vertex":
                    raise ValueError("only vertex elements supported")
                count = int(parts[2])
            elif parts[0] == "property":
                props.append((parts[1], parts[2]))
            elif parts[0] == "end_header":
                break
        expected = [("double", k) for k in "xyz"] \
            + [("uchar", k) for k in ("red", "green", "blue")]
        if props != expected:
            raise ValueError(f"unsupported vertex layout: {props}")
        if fmt == "binary_little_endian":
            rec = np.frombuffer(f.read(count * PLY_VERTEX.itemsize),
                                PLY_VERTEX, count=count)
            pos = np.column_stack([rec["x"], rec["y"], rec["z"]])
            rgb = np.column_stack([rec["red"], rec["green"], rec["blue"]])
        elif fmt == "ascii":
            rows = np.loadtxt(f, ndmin=2, max_rows=count)
            pos = rows[:, :3]
            rgb = rows[:, 3:6]
        else:
            raise ValueError(f"unsupported PLY format: {fmt}")
    return PointCloud(pos.astype(np.float64), rgb / 255.0, frame=frame)
