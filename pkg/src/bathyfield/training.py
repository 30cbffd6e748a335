"""Optimization loop: hand-rolled Adam, exponential LR decay, proposal
schedule, CSV metrics, and blob checkpoints.

Determinism contract: batches and stratified jitter come from
counter-based Philox streams keyed by (seed, step), so a rerun with the
same config reproduces the metrics file byte for byte.  Rendering and
reductions stay on CPU tensors in a fixed evaluation order.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
import torch

from bathyfield.dataprep import DatasetBundle, MaskLabel
from bathyfield.field import (
    DTYPE,
    FieldConfig,
    RadianceField,
    read_blob,
    write_blob,
)
from bathyfield.geom import Aabb
from bathyfield.rendering import (
    NonFiniteLoss,
    PoseCorrections,
    VARIANTS,
    distortion_loss,
    interlevel_loss,
    normalize_edges,
    render_rays,
    rgb_loss,
    total_loss,
)
from bathyfield.sampling import ProposalConfig

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"
METRICS_COLUMNS = ("step", "lr", "loss_rgb", "loss_dist", "loss_inter",
                   "loss_total", "psnr")


class NonFiniteGradient(RuntimeWarning):
    """Issued when a parameter group update is skipped over NaN/inf grads."""


@dataclass(frozen=True)
class TrainConfig:
    """Run shape: desk-scale defaults, production values via full_scale()."""

    max_iterations: int = 2000
    rays_per_batch: int = 1024
    lr_init: float = 1e-2
    lr_final: float = 1e-4
    pose_lr_init: float = 1e-3
    seed: int = 42
    eval_interval: int = 500
    lambda_dist: float = 0.002
    lambda_inter: float = 1.0
    variant: str = "full"
    optimize_poses: bool = False
    field: FieldConfig = dataclass_field(default_factory=FieldConfig)
    proposal: ProposalConfig = dataclass_field(
        default_factory=ProposalConfig)

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ValueError("lr_final must not exceed lr_init")
        if self.rays_per_batch <= 0:
            raise ValueError("rays_per_batch must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be nonnegative")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant: {self.variant!r}")

    @staticmethod
    def full_scale() -> "TrainConfig":
        return TrainConfig(max_iterations=100_000, rays_per_batch=4096,
                           field=FieldConfig.full_scale(),
                           proposal=ProposalConfig.full_scale())

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in
               ("max_iterations", "rays_per_batch", "lr_init", "lr_final",
                "pose_lr_init", "seed", "eval_interval", "lambda_dist",
                "lambda_inter", "variant", "optimize_poses")}
        out["field"] = self.field.to_json()
        out["proposal"] = self.proposal.to_json()
        return out

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        kw = dict(obj)
        kw["field"] = FieldConfig.from_json(kw["field"])
        kw["proposal"] = ProposalConfig.from_json(kw["proposal"])
        return TrainConfig(**kw)


def lr_schedule(step: int, cfg: TrainConfig,
                lr_init: float | None = None) -> float:
    """Exponential decay from lr_init to lr_final over max_iterations."""
    base = cfg.lr_init if lr_init is None else lr_init
    # keep the init/final ratio; pose groups scale the whole curve
    ratio = cfg.lr_final / cfg.lr_init
    frac = step / max(cfg.max_iterations, 1)
    return base * ratio ** frac


def make_adam_state(params: list) -> dict:
    return {"step": 0,
            "m": [torch.zeros_like(p) for p in params],
            "v": [torch.zeros_like(p) for p in params]}


def adam_step(params: list, grads: list, state: dict, lr: float,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place.

    A None gradient counts as zero (moments keep decaying).  If any
    gradient in the group is non-finite the whole group update is skipped
    with a NonFiniteGradient warning and the state is left untouched.
    """
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            warnings.warn("non-finite gradient; skipping group update",
                          NonFiniteGradient)
            return
    state["step"] += 1
    b1, b2 = betas
    t = state["step"]
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state["m"], state["v"]):
            if g is None:
                g = torch.zeros_like(p)
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def save_checkpoint(path, field_model: RadianceField, proposals: list,
                    poses: PoseCorrections | None, config: TrainConfig,
                    step: int) -> None:
    """Serialize field + proposal nets + poses into one blob file."""
    box_min = field_model.grid.box_min.numpy()
    box_max = (box_min + field_model.grid.box_size.numpy()).tolist()
    box_min = box_min.tolist()
    tensors = {}
    for k, v in field_model.state_dict().items():
        tensors[f"field.{k}"] = v.numpy()
    for i, prop in enumerate(proposals):
        for k, v in prop.state_dict().items():
            tensors[f"proposal{i}.{k}"] = v.numpy()
    if poses is not None:
        tensors["poses.rvec"] = poses.rvec.detach().numpy()
        tensors["poses.tvec"] = poses.tvec.detach().numpy()
    header = {"kind": "checkpoint", "step": step,
              "box_min": box_min, "box_max": box_max,
              "train_config": config.to_json()}
    write_blob(path, header, tensors)


def load_checkpoint(path) -> dict:
    """Rebuild modules from a checkpoint blob.

    Returns:
        dict with field, proposals, poses (or None), config, step, box.
    """
    header, tensors = read_blob(path)
    if header.get("kind") != "checkpoint":
        raise ValueError("not a training checkpoint blob")
    config = TrainConfig.from_json(header["train_config"])
    box = Aabb(np.asarray(header["box_min"]), np.asarray(header["box_max"]))
    field_model = RadianceField(config.field, box)
    proposals = config.proposal.make_proposal_fields(box)

    def load_into(module, prefix):
        sd = {k[len(prefix):]: torch.as_tensor(v, dtype=DTYPE)
              for k, v in tensors.items() if k.startswith(prefix)}
        module.load_state_dict(sd)

    load_into(field_model, "field.")
    for i, prop in enumerate(proposals):
        load_into(prop, f"proposal{i}.")
    poses = None
    if "poses.rvec" in tensors:
        poses = PoseCorrections(tensors["poses.rvec"].shape[0])
        load_into(poses, "poses.")
    return {"field": field_model, "proposals": proposals, "poses": poses,
            "config": config, "step": header["step"], "box": box}


@dataclass
class RayStore:
    """Flattened train pixels: everything a batch gather needs."""

    origins: np.ndarray     # (P, 3)
    dirs: np.ndarray        # (P, 3)
    colors: np.ndarray      # (P, 3)
    labels: np.ndarray      # (P,)
    cam_index: np.ndarray   # (P,) index into bundle.cameras
    image_index: np.ndarray  # (P,) index into bundle.image_paths


def build_ray_store(bundle: DatasetBundle,
                    indices: list | None = None) -> RayStore:
    """Load images/masks for the given views and flatten valid pixels.

    IGNORE pixels never enter the store, so batches are uniform over
    valid (supervised) pixels only.
    """
    if indices is None:
        indices = bundle.split_train
    parts = {k: [] for k in ("origins", "dirs", "colors", "labels",
                             "cam", "img")}
    for idx in indices:
        cam = bundle.cameras[idx]
        img = bundle.load_image(idx).reshape(-1, 3)
        if bundle.masks_enabled:
            labels = bundle.load_mask(idx).reshape(-1)
        else:
            labels = np.full(img.shape[0], int(MaskLabel.WATER))
        origins, dirs = cam.all_pixel_rays()
        keep = labels != int(MaskLabel.IGNORE)
        parts["origins"].append(origins[keep])
        parts["dirs"].append(dirs[keep])
        parts["colors"].append(img[keep])
        parts["labels"].append(labels[keep])
        parts["cam"].append(np.full(int(keep.sum()), idx))
        parts["img"].append(np.full(int(keep.sum()), idx))
    if not parts["origins"]:
        raise ValueError("no training views")
    return RayStore(origins=np.concatenate(parts["origins"]),
                    dirs=np.concatenate(parts["dirs"]),
                    colors=np.concatenate(parts["colors"]),
                    labels=np.concatenate(parts["labels"]),
                    cam_index=np.concatenate(parts["cam"]),
                    image_index=np.concatenate(parts["img"]))


def sample_batch_indices(store_size: int, batch_size: int, seed: int,
                         step: int) -> np.ndarray:
    """Counter-based uniform pixel draw, reproducible per (seed, step)."""
    rng = np.random.default_rng([seed, step])
    return rng.integers(0, store_size, batch_size)


@dataclass
class FitResult:
    checkpoint_path: Path
    metrics_path: Path
    steps_completed: int
    aborted: bool
    initial_rgb_loss: float
    final_rgb_loss: float


def _batch_psnr(loss_rgb: float) -> float:
    """Train PSNR from the summed-channel MSE (peak 1, 3 channels)."""
    mse = max(loss_rgb / 3.0, 1e-12)
    return min(99.0, float(-10.0 * np.log10(mse)))


def fit(bundle: DatasetBundle, config: TrainConfig, out_dir) -> FitResult:
    """Train the two-media field on a prepared dataset.

    Writes checkpoint.bin (periodically and at the end), config.json,
    and metrics.csv with one row per step.  A NonFiniteLoss aborts the
    loop, leaving the last good checkpoint on disk.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / CHECKPOINT_NAME
    metrics_path = out_dir / METRICS_NAME
    (out_dir / "config.json").write_text(
        json.dumps(config.to_json(), indent=2))

    gen = torch.Generator().manual_seed(config.seed)
    field_model = RadianceField(config.field, bundle.scene_box, gen)
    proposals = config.proposal.make_proposal_fields(bundle.scene_box, gen)
    poses = PoseCorrections(len(bundle.cameras)) \
        if config.optimize_poses else None
    refraction_enabled, two_media = VARIANTS[config.variant]

    store = build_ray_store(bundle)
    field_params = list(field_model.parameters())
    prop_params = [p for prop in proposals for p in prop.parameters()]
    field_state = make_adam_state(field_params)
    prop_state = make_adam_state(prop_params)
    pose_state = make_adam_state(list(poses.parameters())) if poses else None

    save_checkpoint(ckpt_path, field_model, proposals, poses, config, 0)
    initial_rgb = float("nan")
    final_rgb = float("nan")
    aborted = False
    steps_done = 0

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for step in range(config.max_iterations):
            idx = sample_batch_indices(len(store.labels),
                                       config.rays_per_batch,
                                       config.seed, step)
            cam_idx = torch.as_tensor(store.cam_index[idx])
            gt = torch.as_tensor(store.colors[idx], dtype=DTYPE)
            try:
                out, batch, retained = render_rays(
                    store.origins[idx], store.dirs[idx], store.labels[idx],
                    field_model, proposals, bundle.water_plane,
                    bundle.scene_box, config.proposal,
                    cam_indices=cam_idx, poses=poses,
                    refraction_enabled=refraction_enabled,
                    two_media=two_media,
                    anneal=config.proposal.anneal_exponent(step),
                    jitter_key=(config.seed, step))
                l_rgb = rgb_loss(out.rgb, gt, out.valid)
                s_edges = normalize_edges(batch.edges, batch.t_near,
                                          batch.t_far)
                l_dist = distortion_loss(out.weights, s_edges)
                l_inter = interlevel_loss(retained, batch.edges,
                                          out.weights)
                loss = total_loss(l_rgb, l_dist, l_inter, poses,
                                  config.lambda_dist, config.lambda_inter)
            except NonFiniteLoss as exc:
                logger.error("aborting at step %d: %s", step, exc)
                aborted = True
                break
            loss.backward()

            lr = lr_schedule(step, config)
            adam_step(field_params, [p.grad for p in field_params],
                      field_state, lr)
            if config.proposal.update_proposals_at(step):
                adam_step(prop_params, [p.grad for p in prop_params],
                          prop_state, lr)
            if poses is not None:
                pose_params = list(poses.parameters())
                adam_step(pose_params, [p.grad for p in pose_params],
                          pose_state,
                          lr_schedule(step, config, config.pose_lr_init))
            for p in field_params + prop_params:
                p.grad = None
            if poses is not None:
                for p in poses.parameters():
                    p.grad = None

            rgb_val = float(l_rgb.detach())
            if step == 0:
                initial_rgb = rgb_val
            final_rgb = rgb_val
            steps_done = step + 1
            writer.writerow([step, repr(lr), repr(rgb_val),
                             repr(float(l_dist.detach())),
                             repr(float(l_inter.detach())),
                             repr(float(loss.detach())),
                             repr(_batch_psnr(rgb_val))])
            if config.eval_interval > 0 \
                    and (step + 1) % config.eval_interval == 0:
                save_checkpoint(ckpt_path, field_model, proposals, poses,
                                config, step + 1)

    if not aborted:
        save_checkpoint(ckpt_path, field_model, proposals, poses, config,
                        steps_done)
    return FitResult(checkpoint_path=ckpt_path, metrics_path=metrics_path,
                     steps_completed=steps_done, aborted=aborted,
                     initial_rgb_loss=initial_rgb, final_rgb_loss=final_rgb)
