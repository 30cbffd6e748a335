"""3D and 2D evaluation: signed cloud-to-surface distances, completeness,
outlier filtering, rigid ICP, PSNR/SSIM, and CSV reporting.

The reference is an analytic height field (exact vertical distances); a
height-field triangle mesh can be wrapped through the same interface.
Sign convention: positive = above the surface.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from bathyfield.export import PointCloud
from bathyfield.geom import SimilarityTransform
from bathyfield.synthscene import SyntheticScene

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PSNR_CAP = 99.0


class FrameMismatch(ValueError):
    """Cloud and reference carry different coordinate-frame tags."""


class ReferenceSurface:
    """Height-field reference: z = h(x, y) over a rectangular extent.

    Queries outside the extent return NaN and are excluded from stats.
    """

    def __init__(self, height_fn, extent: float, frame: str = "global"):
        self._height_fn = height_fn
        self.extent = float(extent)
        self.frame = frame

    @staticmethod
    def from_scene(scene: SyntheticScene,
                   frame: str = "global") -> "ReferenceSurface":
        return ReferenceSurface(scene.height, scene.extent, frame)

    @staticmethod
    def from_scene_json(path, frame: str = "global") -> "ReferenceSurface":
        scene = SyntheticScene.from_json(json.loads(Path(path).read_text()))
        return ReferenceSurface.from_scene(scene, frame)

    @staticmethod
    def from_mesh(vertices: np.ndarray, faces: np.ndarray,
                  frame: str = "global") -> "ReferenceSurface":
        """Wrap a height-field mesh (each xy hits exactly one triangle)."""
        vertices = np.asarray(vertices, np.float64)
        faces = np.asarray(faces, int)
        extent = float(np.abs(vertices[:, :2]).max())

        def height(x, y):
            x = np.atleast_1d(np.asarray(x, np.float64))
            y = np.atleast_1d(np.asarray(y, np.float64))
            out = np.full(np.broadcast(x, y).shape, np.nan)
            xb, yb = np.broadcast_arrays(x, y)
            for tri in faces:
                a, b, c = vertices[tri]
                # barycentric in the xy projection
                det = (b[1] - c[1]) * (a[0] - c[0]) \
                    + (c[0] - b[0]) * (a[1] - c[1])
                if abs(det) < 1e-15:
                    continue
                l1 = ((b[1] - c[1]) * (xb - c[0])
                      + (c[0] - b[0]) * (yb - c[1])) / det
                l2 = ((c[1] - a[1]) * (xb - c[0])
                      + (a[0] - c[0]) * (yb - c[1])) / det
                l3 = 1.0 - l1 - l2
                eps = 1e-12
                inside = (l1 >= -eps) & (l2 >= -eps) & (l3 >= -eps)
                z = l1 * a[2] + l2 * b[2] + l3 * c[2]
                out = np.where(inside & np.isnan(out), z, out)
            return out if out.shape else float(out)

        return ReferenceSurface(height, extent, frame)

    def height(self, x, y) -> np.ndarray:
        x = np.asarray(x, np.float64)
        y = np.asarray(y, np.float64)
        h = np.asarray(self._height_fn(x, y), np.float64)
        outside = (np.abs(x) > self.extent) | (np.abs(y) > self.extent)
        return np.where(outside, np.nan, h)

    def central_crop_mask(self, points: np.ndarray,
                          fraction: float = 0.8) -> np.ndarray:
        """True for points inside the centered square evaluation crop."""
        half = self.extent * fraction
        xy = np.abs(np.asarray(points)[:, :2])
        return (xy[:, 0] <= half) & (xy[:, 1] <= half)


def read_mesh_ply(path) -> tuple:
    """Read an ascii PLY triangle mesh: (vertices (V, 3), faces (F, 3)).

    Vertex properties beyond x, y, z are ignored; faces must be triangles.
    """
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ValueError("not a PLY file")
    n_vertex = n_face = 0
    vertex_props = []
    current = None
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise ValueError("mesh reader supports ascii PLY only")
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                n_vertex = int(tok[2])
            elif current == "face":
                n_face = int(tok[2])
        elif tok[0] == "property" and current == "vertex" \
                and tok[1] != "list":
            vertex_props.append(tok[-1])
        elif tok[0] == "end_header":
            body_at = i + 1
            break
    if body_at is None or n_vertex == 0 or n_face == 0:
        raise ValueError("PLY mesh needs vertex and face elements")
    try:
        cols = [vertex_props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ValueError("PLY vertices must carry x, y, z")
    vertices = np.array(
        [[float(lines[body_at + r].split()[c]) for c in cols]
         for r in range(n_vertex)])
    faces = []
    for r in range(n_face):
        tok = lines[body_at + n_vertex + r].split()
        if int(tok[0]) != 3:
            raise ValueError("mesh faces must be triangles")
        faces.append([int(v) for v in tok[1:4]])
    return vertices, np.array(faces, int)


@dataclass
class C2MResult:
    signed: np.ndarray   # (N,) signed distances, NaN outside extent
    kept: np.ndarray     # (N,) included in stats (finite, within clip)
    mean: float
    std: float
    clip: float | None


def c2m_signed(cloud, ref: ReferenceSurface,
               clip: float | None = 2.0) -> C2MResult:
    """Signed vertical distance to the reference per point.

    Positive above the surface.  Distances beyond +-clip (and points
    outside the reference extent) are excluded from mean/std.
    """
    if isinstance(cloud, PointCloud):
        if cloud.frame != ref.frame:
            raise FrameMismatch(f"cloud frame {cloud.frame!r} vs "
                                f"reference frame {ref.frame!r}")
        positions = cloud.positions
    else:
        positions = np.asarray(cloud, np.float64)
    z_ref = ref.height(positions[:, 0], positions[:, 1])
    signed = positions[:, 2] - z_ref
    kept = np.isfinite(signed)
    if clip is not None:
        kept &= np.abs(signed) <= clip
    if kept.any():
        mean = float(signed[kept].mean())
        std = float(signed[kept].std())
    else:
        mean = std = float("nan")
    return C2MResult(signed=signed, kept=kept, mean=mean, std=std,
                     clip=clip)


def completeness(ref_points: np.ndarray, cloud,
                 threshold: float = 0.3) -> float:
    """Fraction of reference points with a reconstruction within range."""
    ref_points = np.asarray(ref_points, np.float64)
    if ref_points.size == 0:
        raise ValueError("empty reference point set")
    positions = cloud.positions if isinstance(cloud, PointCloud) \
        else np.asarray(cloud, np.float64)
    if positions.shape[0] == 0:
        return 0.0
    tree = cKDTree(positions)
    dist, _ = tree.query(ref_points, k=1)
    return float((dist <= threshold).mean())


def sor_filter(cloud, k: int = 10, sigma: float = 2.0):
    """Statistical outlier removal on mean k-NN distance.

    Keeps points whose mean distance to the k nearest neighbors is at
    most mean + sigma * std of that statistic over the cloud.
    """
    positions = cloud.positions if isinstance(cloud, PointCloud) \
        else np.asarray(cloud, np.float64)
    n = positions.shape[0]
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    tree = cKDTree(positions)
    dist, _ = tree.query(positions, k=k + 1)   # first hit is the point
    mean_knn = dist[:, 1:].mean(axis=1)
    thresh = mean_knn.mean() + sigma * mean_knn.std()
    keep = mean_knn <= thresh
    if isinstance(cloud, PointCloud):
        return PointCloud(positions[keep], cloud.colors[keep],
                          frame=cloud.frame)
    return positions[keep]


@dataclass
class IcpResult:
    transform: SimilarityTransform   # maps source onto target, scale 1
    rms: float
    iterations: int
    converged: bool


def _rigid_fit(src: np.ndarray, dst: np.ndarray):
    """Closed-form rigid alignment (SVD of the cross-covariance)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s) / src.shape[0]
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    rot = u @ np.diag([1.0, 1.0, d]) @ vt
    return rot, mu_d - rot @ mu_s


def icp_align(source, target, max_iters: int = 50, tol: float = 1e-9,
              min_overlap: float = 0.3) -> IcpResult:
    """Point-to-point rigid ICP (six degrees of freedom, scale = 1).

    Convergence means the RMS of nearest-neighbor residuals changed by
    less than tol between iterations; the result is additionally flagged
    unconverged when the final inlier overlap (pairs within 5x the
    target's median spacing) falls below min_overlap, which catches
    disjoint clouds that trivially stop improving.
    """
    src0 = source.positions if isinstance(source, PointCloud) \
        else np.asarray(source, np.float64)
    dst = target.positions if isinstance(target, PointCloud) \
        else np.asarray(target, np.float64)
    tree = cKDTree(dst)
    spacing, _ = tree.query(dst, k=min(2, dst.shape[0]))
    median_spacing = float(np.median(spacing[:, -1])) if dst.shape[0] > 1 \
        else 1.0

    rot_total = np.eye(3)
    t_total = np.zeros(3)
    src = src0.copy()
    prev_rms = np.inf
    rms = np.inf
    rms_converged = False
    iterations = 0
    for iterations in range(1, max_iters + 1):
        dist, idx = tree.query(src, k=1)
        rms = float(np.sqrt((dist ** 2).mean()))
        if abs(prev_rms - rms) < tol:
            rms_converged = True
            break
        prev_rms = rms
        rot, t = _rigid_fit(src, dst[idx])
        src = src @ rot.T + t
        rot_total = rot @ rot_total
        t_total = rot @ t_total + t
    dist, _ = tree.query(src, k=1)
    overlap = float((dist <= 5.0 * max(median_spacing, 1e-12)).mean())
    converged = rms_converged and overlap >= min_overlap
    return IcpResult(transform=SimilarityTransform(rot_total, t_total, 1.0),
                     rms=rms, iterations=iterations, converged=converged)


def psnr(pred: np.ndarray, gt: np.ndarray,
         valid: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio over valid pixels, capped at 99 dB."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shape mismatch")
    err = (pred - gt) ** 2
    if valid is not None:
        valid = np.asarray(valid, bool)
        if not valid.any():
            raise ValueError("no valid pixels")
        err = err[valid]
    mse = float(err.mean())
    if mse < 10 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(-10.0 * np.log10(mse))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, kernel, axis=0, mode="nearest")
    return ndimage.correlate1d(out, kernel, axis=1, mode="nearest")


def ssim(pred: np.ndarray, gt: np.ndarray,
         valid: np.ndarray | None = None) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5).

    Only window centers whose full support lies inside the image and the
    valid mask contribute; RGB channels are averaged.
    """
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shape mismatch")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    h, w = pred.shape[:2]
    half = SSIM_WINDOW // 2
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")

    inside = np.zeros((h, w), bool)
    inside[half:h - half, half:w - half] = True
    if valid is not None:
        valid = np.asarray(valid, bool)
        eroded = ndimage.binary_erosion(
            valid, structure=np.ones((SSIM_WINDOW, SSIM_WINDOW)),
            border_value=0)
        inside &= eroded
    if not inside.any():
        raise ValueError("no fully-valid SSIM windows")

    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    scores = []
    for ch in range(pred.shape[2]):
        x, y = pred[..., ch], gt[..., ch]
        mu_x, mu_y = _windowed(x, kernel), _windowed(y, kernel)
        xx = _windowed(x * x, kernel) - mu_x ** 2
        yy = _windowed(y * y, kernel) - mu_y ** 2
        xy = _windowed(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        scores.append((num / den)[inside].mean())
    return float(np.mean(scores))


@dataclass
class MethodEval:
    """One evaluated method/run, ready for the report writer."""

    name: str
    c2m: C2MResult
    completeness: float
    point_count: int
    psnr: float | None = None
    ssim: float | None = None


def report(methods: list, out_dir, hist_bins: int = 80) -> dict:
    """Write summary.csv and per-method signed-distance histograms.

    Histogram bins span [-clip, clip] (or the data range when unclipped);
    counts cover exactly the points kept by the C2M stats.

    Returns:
        dict of written file paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out_dir / "summary.csv"}
    with open(paths["summary"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "c2m_mean", "c2m_std", "completeness",
                         "points", "psnr", "ssim"])
        for m in methods:
            writer.writerow([
                m.name, repr(m.c2m.mean), repr(m.c2m.std),
                repr(m.completeness), m.point_count,
                "" if m.psnr is None else repr(m.psnr),
                "" if m.ssim is None else repr(m.ssim)])
    for m in methods:
        kept = m.c2m.signed[m.c2m.kept]
        limit = m.c2m.clip if m.c2m.clip is not None else \
            (float(np.abs(kept).max()) if kept.size else 1.0)
        edges = np.linspace(-limit, limit, hist_bins + 1)
        counts, _ = np.histogram(kept, bins=edges)
        path = out_dir / f"hist_{m.name}.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_lo", "bin_hi", "count"])
            for i in range(hist_bins):
                writer.writerow([repr(float(edges[i])),
                                 repr(float(edges[i + 1])),
                                 int(counts[i])])
        paths[m.name] = path
    return paths
