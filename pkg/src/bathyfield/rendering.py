"""Volume compositing, loss terms, and learned pose corrections.

Compositing runs on the virtual straight ray: interval widths come from t
spacing, positions are kink-corrected by the sampler, and the
transmittance chain crosses the air/water interface without a reset, so
underwater samples inherit the residual transmittance of the air segment.

All reductions are plain torch sums on CPU tensors (fixed evaluation
order), which keeps losses bit-reproducible across runs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from bathyfield.field import DTYPE
from bathyfield.dataprep import Camera, MaskLabel
from bathyfield.geom import Aabb, WaterPlane
from bathyfield.sampling import (
    ProposalConfig,
    SampleBatch,
    alpha_weights,
    build_virtual_rays,
    hierarchical_sample,
    make_sample_batch,
    sample_uniform,
)

logger = logging.getLogger(__name__)

EPS = 1e-10

# rendering variants: (refraction_enabled, medium_conditioned_color)
VARIANTS = {
    "full": (True, True),
    "no_refraction": (False, True),
    "single_medium": (False, False),
}


class NonFiniteLoss(RuntimeError):
    """Raised when a loss value is NaN or infinite; aborts the step."""


@dataclass
class RenderOutputs:
    """Per-ray compositing results."""

    rgb: torch.Tensor            # (N, 3) in [0, 1]
    depth: torch.Tensor          # (N,) expected t along the virtual ray
    accumulation: torch.Tensor   # (N,) sum of weights
    weights: torch.Tensor        # (N, S)
    valid: torch.Tensor | None = None  # (N,) False for IGNORE pixels


def composite(sigma: torch.Tensor, delta: torch.Tensor,
              colors: torch.Tensor, t: torch.Tensor) -> RenderOutputs:
    """Alpha-composite per-ray samples.

    alpha_i = 1 - exp(-sigma_i delta_i); T_i = T_{i-1} (1 - alpha_{i-1});
    w_i = T_i alpha_i.  Depth is the weight-normalized expected t over
    interval midpoints (left edges would bias every surface toward the
    camera by ~delta/2), which is what the point-cloud export consumes.
    """
    weights, _ = alpha_weights(sigma, delta)
    acc = weights.sum(dim=-1)
    rgb = (weights.unsqueeze(-1) * colors).sum(dim=-2)
    depth = (weights * (t + 0.5 * delta)).sum(dim=-1) / acc.clamp(min=EPS)
    return RenderOutputs(rgb=rgb, depth=depth, accumulation=acc,
                         weights=weights)


class PoseCorrections(nn.Module):
    """Learned per-camera pose deltas: axis-angle r and translation t.

    Both start at zero; rotations use a Rodrigues map written with sinc
    terms so the gradient is well defined at the identity.
    """

    def __init__(self, num_cameras: int):
        super().__init__()
        self.rvec = nn.Parameter(torch.zeros(num_cameras, 3, dtype=DTYPE))
        self.tvec = nn.Parameter(torch.zeros(num_cameras, 3, dtype=DTYPE))

    @staticmethod
    def rotation_matrices(rvec: torch.Tensor) -> torch.Tensor:
        """Batched axis-angle to rotation matrix, smooth at theta = 0."""
        # sqrt is biased by 1e-36 so the zero-rotation gradient stays
        # finite (norm alone has an undefined gradient at the origin)
        theta = torch.sqrt((rvec ** 2).sum(dim=-1, keepdim=True) + 1e-36)
        a = torch.sinc(theta / np.pi)
        b = 0.5 * torch.sinc(theta / (2.0 * np.pi)) ** 2
        zeros = torch.zeros_like(rvec[..., 0])
        k = torch.stack([
            torch.stack([zeros, -rvec[..., 2], rvec[..., 1]], dim=-1),
            torch.stack([rvec[..., 2], zeros, -rvec[..., 0]], dim=-1),
            torch.stack([-rvec[..., 1], rvec[..., 0], zeros], dim=-1),
        ], dim=-2)
        eye = torch.eye(3, dtype=rvec.dtype).expand(*k.shape)
        return eye + a.unsqueeze(-1) * k \
            + b.unsqueeze(-1) * (k @ k)

    def apply(self, cam_indices: torch.Tensor, origins: torch.Tensor,
              dirs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Rotate directions about the camera center, shift the center."""
        rot = self.rotation_matrices(self.rvec[cam_indices])
        new_dirs = (rot @ dirs.unsqueeze(-1)).squeeze(-1)
        new_origins = origins + self.tvec[cam_indices]
        return new_origins, new_dirs

    def regularization(self, lambda_rot: float = 0.001,
                       lambda_trans: float = 0.01) -> torch.Tensor:
        return lambda_rot * (self.rvec ** 2).sum() \
            + lambda_trans * (self.tvec ** 2).sum()


def render_rays(origins, dirs, labels, field, proposal_fields,
                plane: WaterPlane, box: Aabb, config: ProposalConfig,
                *, cam_indices: torch.Tensor | None = None,
                poses: PoseCorrections | None = None,
                image_idx: torch.Tensor | None = None,
                refraction_enabled: bool = True, two_media: bool = True,
                anneal: float = 1.0, jitter_key: tuple | None = None,
                uniform_samples: int | None = None
                ) -> tuple[RenderOutputs, SampleBatch, list]:
    """Render a ray batch through the two-media field.

    Pose corrections are applied to origins/directions before the plane
    intersection, so the learned deltas move the refraction point too.
    IGNORE-labeled rays are still rendered but flagged invalid.  Setting
    `uniform_samples` bypasses the proposal hierarchy (single stratified
    pass, fully differentiable); `two_media=False` zeroes the medium flag
    fed to the color head (single-medium baseline).
    """
    if not torch.is_tensor(origins):
        origins = torch.as_tensor(np.asarray(origins), dtype=DTYPE)
    if not torch.is_tensor(dirs):
        dirs = torch.as_tensor(np.asarray(dirs), dtype=DTYPE)
    if poses is not None:
        if cam_indices is None:
            raise ValueError("pose corrections need cam_indices")
        origins, dirs = poses.apply(cam_indices, origins, dirs)

    vrays = build_virtual_rays(origins, dirs, labels, plane, box,
                               refraction_enabled)
    if uniform_samples is not None:
        t = sample_uniform(vrays, uniform_samples)
        batch = make_sample_batch(vrays, t)
        retained = []
    else:
        batch, retained = hierarchical_sample(vrays, proposal_fields,
                                              config, anneal, jitter_key)
    medium = batch.medium if two_media else torch.zeros_like(batch.medium)
    sigma, geo = field.density(batch.positions)
    colors = field.color(geo, batch.directions, medium, image_idx)
    out = composite(sigma, batch.delta, colors, batch.t)
    labels_t = labels if torch.is_tensor(labels) \
        else torch.as_tensor(np.asarray(labels))
    out.valid = labels_t.long() != int(MaskLabel.IGNORE)
    return out, batch, retained


def render_view(field, proposal_fields, camera: Camera,
                plane: WaterPlane, box: Aabb, config: ProposalConfig,
                labels: np.ndarray | None = None, variant: str = "full",
                chunk: int = 8192,
                poses: PoseCorrections | None = None,
                cam_index: int | None = None,
                image_idx: int | None = None) -> dict:
    """Render a full camera view in chunks (no gradients).

    Without a mask every pixel is treated as WATER; rays whose density
    terminates above the interface are unaffected by the gating.

    Returns:
        dict with rgb (H, W, 3), depth (H, W), accumulation (H, W),
        valid (H, W) numpy arrays.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant: {variant!r}")
    refraction_enabled, two_media = VARIANTS[variant]
    origins, dirs = camera.all_pixel_rays()
    h, w = camera.height, camera.width
    if labels is None:
        labels = np.full(h * w, int(MaskLabel.WATER))
    labels = np.asarray(labels).reshape(-1)

    rgb = np.zeros((h * w, 3))
    depth = np.zeros(h * w)
    acc = np.zeros(h * w)
    valid = np.zeros(h * w, dtype=bool)
    with torch.no_grad():
        for lo in range(0, h * w, chunk):
            hi = min(lo + chunk, h * w)
            cam_idx = None
            if poses is not None:
                cam_idx = torch.full((hi - lo,), int(cam_index),
                                     dtype=torch.long)
            img_idx = None
            if image_idx is not None:
                img_idx = torch.full((hi - lo,), int(image_idx),
                                     dtype=torch.long)
            out, _, _ = render_rays(
                origins[lo:hi], dirs[lo:hi], labels[lo:hi], field,
                proposal_fields, plane, box, config, cam_indices=cam_idx,
                poses=poses, image_idx=img_idx,
                refraction_enabled=refraction_enabled, two_media=two_media)
            rgb[lo:hi] = out.rgb.numpy()
            depth[lo:hi] = out.depth.numpy()
            acc[lo:hi] = out.accumulation.numpy()
            valid[lo:hi] = out.valid.numpy()
    return {"rgb": rgb.reshape(h, w, 3), "depth": depth.reshape(h, w),
            "accumulation": acc.reshape(h, w),
            "valid": valid.reshape(h, w)}


def rgb_loss(pred: torch.Tensor, gt: torch.Tensor,
             valid: torch.Tensor) -> torch.Tensor:
    """Masked photometric MSE, normalized by the valid-pixel count."""
    if pred.shape != gt.shape:
        raise ValueError("prediction/target shape mismatch")
    valid = valid.to(DTYPE)
    count = valid.sum()
    if count.item() == 0:
        logger.warning("rgb_loss: no valid pixels in batch")
        return torch.zeros((), dtype=DTYPE)
    per_pixel = ((pred - gt) ** 2).sum(dim=-1)
    return (per_pixel * valid).sum() / count


def normalize_edges(edges: torch.Tensor, t_near: torch.Tensor,
                    t_far: torch.Tensor) -> torch.Tensor:
    """Map t bin edges to s in [0, 1] over the virtual ray span."""
    span = (t_far - t_near).clamp(min=EPS)
    return ((edges - t_near[:, None]) / span[:, None]).clamp(0.0, 1.0)


def distortion_loss(weights: torch.Tensor,
                    s_edges: torch.Tensor) -> torch.Tensor:
    """Distortion regularizer on the normalized ray histogram.

    sum_{i,j} w_i w_j |sbar_i - sbar_j| + (1/3) sum_i w_i^2 (s_{i+1}-s_i),
    averaged over rays.
    """
    mid = 0.5 * (s_edges[..., 1:] + s_edges[..., :-1])
    width = s_edges[..., 1:] - s_edges[..., :-1]
    dist = (mid.unsqueeze(-1) - mid.unsqueeze(-2)).abs()
    cross = (weights.unsqueeze(-1) * weights.unsqueeze(-2) * dist) \
        .sum(dim=(-2, -1))
    self_term = (weights ** 2 * width).sum(dim=-1) / 3.0
    return (cross + self_term).mean()


def _overlap_mass(prop_edges: torch.Tensor, prop_weights: torch.Tensor,
                  lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
    """Summed proposal weight of bins overlapping each [lo, hi) interval."""
    bins = prop_weights.shape[-1]
    cw = torch.cat([torch.zeros_like(prop_weights[..., :1]),
                    torch.cumsum(prop_weights, dim=-1)], dim=-1)
    idx_lo = torch.searchsorted(prop_edges, lo, right=True) - 1
    idx_hi = torch.searchsorted(prop_edges, hi, right=False)
    idx_lo = idx_lo.clamp(0, bins)
    idx_hi = idx_hi.clamp(0, bins)
    return (cw.gather(-1, idx_hi) - cw.gather(-1, idx_lo)).clamp(min=0.0)


def interlevel_loss(retained: list, final_edges: torch.Tensor,
                    final_weights: torch.Tensor) -> torch.Tensor:
    """Histogram-consistency penalty on the proposal levels.

    For each final bin, the summed proposal weight overlapping it bounds
    the final weight from above; violations are penalized quadratically.
    Gradients flow into the proposal weights only.
    """
    final_edges = final_edges.detach()
    final_weights = final_weights.detach()
    lo = final_edges[..., :-1].contiguous()
    hi = final_edges[..., 1:].contiguous()
    total = torch.zeros((), dtype=DTYPE)
    for prop_edges, prop_weights in retained:
        bound = _overlap_mass(prop_edges.detach().contiguous(),
                              prop_weights, lo, hi)
        excess = (final_weights - bound).clamp(min=0.0)
        total = total + (excess ** 2 / (bound + EPS)).mean()
    return total


def total_loss(rgb: torch.Tensor, distortion: torch.Tensor,
               interlevel: torch.Tensor,
               poses: PoseCorrections | None = None,
               lambda_dist: float = 0.002,
               lambda_inter: float = 1.0) -> torch.Tensor:
    """L = L_rgb + 0.002 L_dist + 1.0 L_inter + pose L2 penalties."""
    loss = rgb + lambda_dist * distortion + lambda_inter * interlevel
    if poses is not None:
        loss = loss + poses.regularization()
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite total loss: {loss.item()!r}")
    return loss


def write_pfm(path, data: np.ndarray) -> None:
    """Write a grayscale 32-bit PFM (little-endian, bottom-up rows)."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{data.shape[1]} {data.shape[0]}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError("not a grayscale PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(4 * w * h), dt).reshape(h, w)
    return np.flipud(data).astype(np.float64)
