"""Command-line pipeline driver.

Subcommands wire the full flow: synth -> prep -> train -> render/export ->
eval, plus ablate, which trains the three model variants on one dataset
and writes a comparison report.  Exit codes: 0 success, 1 runtime errors,
2 configuration and schema errors (argparse itself exits 2 on bad flags).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from bathyfield.dataprep import (DatasetBundle, SchemaError, build_dataset,
                                 read_manifest)
from bathyfield.evaluation import (C2MResult, MethodEval, ReferenceSurface,
                                   c2m_signed, completeness, icp_align,
                                   psnr, read_mesh_ply, report, sor_filter,
                                   ssim)
from bathyfield.export import (PointCloud, denormalize, export_pointcloud,
                               read_ply, write_ply)
from bathyfield.geom import apply_similarity
from bathyfield.rendering import VARIANTS, render_view, write_pfm
from bathyfield.synthscene import (SyntheticScene, Trajectory,
                                   render_dataset, sample_reference_points)
from bathyfield.training import TrainConfig, fit, load_checkpoint

# CLI-facing variant names, one per evaluated configuration
VARIANT_NAMES = {
    "baseline-single-medium": "single_medium",
    "two-media-refraction-off": "no_refraction",
    "two-media-refraction-on": "full",
}

SOR_MIN_POINTS = 11   # below this the filter precondition (n > k) fails


class CliError(Exception):
    """Runtime failure; exits 1 with a structured message."""


class ConfigError(CliError):
    """Bad configuration or schema; exits 2."""


def _resolve_variant(name: str) -> str:
    if name in VARIANT_NAMES:
        return VARIANT_NAMES[name]
    if name in VARIANTS:
        return name
    raise ConfigError(f"unknown variant {name!r}; choose from "
                      f"{sorted(VARIANT_NAMES)}")


def _load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    if path.suffix == ".json":
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    elif path.suffix == ".toml":
        try:
            import tomllib
        except ImportError:
            try:
                import tomli as tomllib
            except ImportError:
                raise ConfigError("TOML configs need Python >= 3.11 "
                                  "(or the tomli package); use JSON")
        try:
            obj = tomllib.loads(path.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    else:
        raise ConfigError(f"config must be .json or .toml, got {path.name}")
    if not isinstance(obj, dict):
        raise ConfigError("config file must hold a table/object")
    return obj


def _build_train_config(args) -> TrainConfig:
    """Defaults < config file < CLI flags, validated once at the end."""
    base = TrainConfig().to_json()
    if args.config is not None:
        overrides = _load_config_file(args.config)
        for key, value in overrides.items():
            if key in ("field", "proposal"):
                merged = dict(base[key])
                merged.update(value)
                base[key] = merged
            else:
                base[key] = value
    if getattr(args, "iterations", None) is not None:
        base["max_iterations"] = args.iterations
    if getattr(args, "rays", None) is not None:
        base["rays_per_batch"] = args.rays
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    if getattr(args, "variant", None) is not None:
        base["variant"] = _resolve_variant(args.variant)
    if getattr(args, "optimize_poses", None) is not None:
        base["optimize_poses"] = args.optimize_poses == "on"
    try:
        return TrainConfig.from_json(base)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


def _resolve_view(bundle: DatasetBundle, view: str) -> int:
    for i, cam in enumerate(bundle.cameras):
        if cam.cam_id == view:
            return i
    try:
        idx = int(view)
    except ValueError:
        raise ConfigError(f"no camera named {view!r} in the dataset")
    if not 0 <= idx < len(bundle.cameras):
        raise ConfigError(f"view index {idx} out of range "
                          f"(0..{len(bundle.cameras) - 1})")
    return idx


def _load_reference(ref_path, gsd: float):
    """Reference surface + sampled reference points from JSON or PLY."""
    ref_path = Path(ref_path)
    if not ref_path.exists():
        raise CliError(f"reference not found: {ref_path}")
    if ref_path.suffix == ".json":
        try:
            scene = SyntheticScene.from_json(json.loads(ref_path.read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"invalid scene JSON: {exc}") from exc
        return (ReferenceSurface.from_scene(scene),
                sample_reference_points(scene, gsd))
    if ref_path.suffix == ".ply":
        vertices, faces = read_mesh_ply(ref_path)
        return ReferenceSurface.from_mesh(vertices, faces), vertices
    raise ConfigError(f"reference must be .json or .ply, got {ref_path.name}")


def _crop_cloud(cloud: PointCloud, ref: ReferenceSurface) -> PointCloud:
    keep = ref.central_crop_mask(cloud.positions)
    if not keep.any():
        raise CliError("no points inside the evaluation crop")
    return PointCloud(cloud.positions[keep], cloud.colors[keep],
                      frame=cloud.frame)


def _evaluate_cloud(cloud: PointCloud, ref: ReferenceSurface,
                    ref_points: np.ndarray, name: str, *, clip: float,
                    threshold: float, use_sor: bool, use_icp: bool,
                    view_psnr: float | None = None,
                    view_ssim: float | None = None) -> MethodEval:
    if use_sor and len(cloud) >= SOR_MIN_POINTS:
        cloud = sor_filter(cloud)
    if use_icp:
        result = icp_align(cloud, ref_points)
        if not result.converged:
            print("warning: ICP did not converge; alignment kept anyway",
                  file=sys.stderr)
        cloud = PointCloud(apply_similarity(result.transform,
                                            cloud.positions),
                           cloud.colors, frame=cloud.frame)
    cloud = _crop_cloud(cloud, ref)
    ref_crop = ref_points[ref.central_crop_mask(ref_points)]
    c2m = c2m_signed(cloud, ref, clip=clip)
    comp = completeness(ref_crop, cloud, threshold=threshold)
    return MethodEval(name=name, c2m=c2m, completeness=comp,
                      point_count=int(c2m.kept.sum()),
                      psnr=view_psnr, ssim=view_ssim)


def cmd_synth(args) -> int:
    n_nadir = max(2, args.cameras // 6)
    n_ring = args.cameras - n_nadir
    if n_ring < 3:
        raise ConfigError("need at least 5 cameras for the trajectory")
    scene = SyntheticScene()
    cameras = Trajectory(n_ring=n_ring, n_nadir=n_nadir).cameras(
        args.res, args.res)
    out = render_dataset(scene, cameras, args.out, save_truth=args.truth)
    print(f"synth: {len(cameras)} views at {args.res}x{args.res} -> {out}")
    return 0


def cmd_prep(args) -> int:
    bundle = build_dataset(args.cameras, args.markers, args.images,
                           args.out, masks_dir=args.masks,
                           train_fraction=args.train_fraction,
                           seed=args.seed)
    scene_src = Path(args.cameras).parent / "scene.json"
    if scene_src.exists():
        shutil.copyfile(scene_src, Path(args.out) / "scene.json")
    print(f"prep: {len(bundle.cameras)} views "
          f"({len(bundle.split_train)} train / {len(bundle.split_val)} val) "
          f"-> {args.out}")
    return 0


def cmd_train(args) -> int:
    bundle = read_manifest(args.dataset)
    config = _build_train_config(args)
    result = fit(bundle, config, args.out)
    status = "aborted" if result.aborted else "done"
    print(f"train: {status} after {result.steps_completed} steps, "
          f"rgb loss {result.initial_rgb_loss:.4g} -> "
          f"{result.final_rgb_loss:.4g}, checkpoint "
          f"{result.checkpoint_path}")
    return 1 if result.aborted else 0


def cmd_render(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = read_manifest(args.dataset)
    idx = _resolve_view(bundle, args.view)
    labels = bundle.load_mask(idx) if bundle.masks_enabled else None
    out = render_view(ckpt["field"], ckpt["proposals"],
                      bundle.cameras[idx], bundle.water_plane,
                      bundle.scene_box, ckpt["config"].proposal,
                      labels=labels, variant=ckpt["config"].variant,
                      poses=ckpt["poses"],
                      cam_index=idx if ckpt["poses"] is not None else None,
                      image_idx=idx)
    written = []
    for target in args.out.split(","):
        path = Path(target)
        if path.suffix == ".png":
            img = np.clip(np.round(out["rgb"] * 255.0), 0,
                          255).astype(np.uint8)
            path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(path)
        elif path.suffix == ".pfm":
            path.parent.mkdir(parents=True, exist_ok=True)
            write_pfm(path, out["depth"])
        else:
            raise ConfigError(f"render outputs must be .png or .pfm, "
                              f"got {path.name}")
        written.append(str(path))
    print(f"render: view {bundle.cameras[idx].cam_id} -> "
          f"{', '.join(written)}")
    return 0


def cmd_export(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = read_manifest(args.dataset)
    refraction_default, two_media = VARIANTS[ckpt["config"].variant]
    refraction = refraction_default if args.refraction is None \
        else args.refraction == "on"
    cloud = export_pointcloud(ckpt["field"], ckpt["proposals"], bundle,
                              ckpt["config"].proposal,
                              opacity_threshold=args.opacity_threshold,
                              refraction_enabled=refraction,
                              two_media=two_media, stride=args.stride)
    if args.frame == "global":
        cloud = denormalize(cloud, bundle.norm, bundle.chunk)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_ply(cloud, args.out, binary=not args.ascii)
    print(f"export: {len(cloud)} points ({cloud.frame} frame) -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cloud = read_ply(args.cloud)
    ref, ref_points = _load_reference(args.ref, args.gsd)
    name = args.name or Path(args.cloud).stem
    method = _evaluate_cloud(cloud, ref, ref_points, name,
                             clip=args.clip, threshold=args.threshold,
                             use_sor=args.sor == "on",
                             use_icp=args.icp == "on")
    paths = report([method], args.out)
    print(f"eval: {name}: c2m mean {method.c2m.mean:+.4f} "
          f"std {method.c2m.std:.4f}, completeness "
          f"{method.completeness:.3f}, {method.point_count} points -> "
          f"{paths['summary']}")
    return 0


def _view_metrics(ckpt: dict, bundle: DatasetBundle, indices) -> tuple:
    """Mean PSNR/SSIM of rendered vs captured views (IGNORE excluded)."""
    psnrs, ssims = [], []
    for idx in indices:
        labels = bundle.load_mask(idx) if bundle.masks_enabled else None
        out = render_view(ckpt["field"], ckpt["proposals"],
                          bundle.cameras[idx], bundle.water_plane,
                          bundle.scene_box, ckpt["config"].proposal,
                          labels=labels, variant=ckpt["config"].variant,
                          image_idx=idx)
        gt = bundle.load_image(idx)
        valid = out["valid"]
        if not valid.any():
            continue
        psnrs.append(psnr(out["rgb"], gt,
                          np.repeat(valid[..., None], 3, axis=2)))
        try:
            ssims.append(ssim(out["rgb"], gt, valid))
        except ValueError:
            pass   # mask too tight for any full window
    mean_psnr = float(np.mean(psnrs)) if psnrs else None
    mean_ssim = float(np.mean(ssims)) if ssims else None
    return mean_psnr, mean_ssim


def cmd_ablate(args) -> int:
    bundle = read_manifest(args.dataset)
    ref_file = args.ref or Path(args.dataset) / "scene.json"
    ref, ref_points = _load_reference(ref_file, args.gsd)
    out_dir = Path(args.out) if args.out else Path(args.dataset) / "ablation"
    methods = []
    for cli_name, variant in VARIANT_NAMES.items():
        config = dataclasses.replace(_build_train_config(args),
                                     variant=variant)
        run_dir = out_dir / cli_name
        result = fit(bundle, config, run_dir)
        if result.aborted:
            raise CliError(f"training aborted for variant {cli_name}")
        ckpt = load_checkpoint(result.checkpoint_path)
        refraction, two_media = VARIANTS[variant]
        try:
            cloud = export_pointcloud(
                ckpt["field"], ckpt["proposals"], bundle,
                config.proposal, opacity_threshold=args.opacity_threshold,
                refraction_enabled=refraction, two_media=two_media,
                stride=args.stride)
        except ValueError:
            empty = C2MResult(signed=np.zeros(0), kept=np.zeros(0, bool),
                              mean=float("nan"), std=float("nan"),
                              clip=args.clip)
            methods.append(MethodEval(name=cli_name, c2m=empty,
                                      completeness=0.0, point_count=0))
            continue
        cloud = denormalize(cloud, bundle.norm, bundle.chunk)
        write_ply(cloud, run_dir / "cloud.ply", binary=True)
        view_psnr, view_ssim = _view_metrics(ckpt, bundle,
                                             bundle.split_val)
        methods.append(_evaluate_cloud(
            cloud, ref, ref_points, cli_name, clip=args.clip,
            threshold=args.threshold, use_sor=True, use_icp=False,
            view_psnr=view_psnr, view_ssim=view_ssim))
    paths = report(methods, out_dir)
    for m in methods:
        print(f"ablate: {m.name}: c2m mean "
              f"{m.c2m.mean:+.4f} std {m.c2m.std:.4f}, completeness "
              f"{m.completeness:.3f}, {m.point_count} points")
    print(f"ablate: report -> {paths['summary']}")
    return 0


def _add_train_overrides(sub) -> None:
    sub.add_argument("--config", default=None,
                     help="JSON/TOML file with TrainConfig overrides")
    sub.add_argument("--iterations", type=int, default=None)
    sub.add_argument("--rays", type=int, default=None)
    sub.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bathyfield",
        description="Two-media refraction-aware radiance field pipeline")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap torch worker threads "
                             "(default: BATHYFIELD_THREADS)")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--preset", choices=["default"], default="default")
    p.add_argument("--cameras", type=int, default=24)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--truth", action="store_true",
                   help="also save per-view ground-truth arrays")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("prep", help="normalize and package a dataset")
    p.add_argument("--cameras", required=True)
    p.add_argument("--markers", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--masks", default=None)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_prep)

    p = sub.add_parser("train", help="fit a model on a prepared dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    _add_train_overrides(p)
    p.add_argument("--variant", default=None,
                   help=f"one of {sorted(VARIANT_NAMES)}")
    p.add_argument("--optimize-poses", choices=["on", "off"], default=None)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("render", help="render a dataset view")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", required=True,
                   help="camera id or zero-based index")
    p.add_argument("--out", default="rgb.png,depth.pfm",
                   help="comma-separated .png (rgb) / .pfm (depth) paths")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("export", help="export a point cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--opacity-threshold", type=float, default=0.5)
    p.add_argument("--refraction", choices=["on", "off"], default=None,
                   help="override the checkpoint variant's setting")
    p.add_argument("--frame", choices=["normalized", "global"],
                   default="global")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--ascii", action="store_true")
    p.set_defaults(handler=cmd_export)

    p = sub.add_parser("eval", help="evaluate a cloud against a reference")
    p.add_argument("--cloud", required=True)
    p.add_argument("--ref", required=True,
                   help="scene .json or height-field mesh .ply")
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--clip", type=float, default=2.0)
    p.add_argument("--gsd", type=float, default=0.25,
                   help="reference sampling distance")
    p.add_argument("--icp", choices=["on", "off"], default="off")
    p.add_argument("--sor", choices=["on", "off"], default="on")
    p.add_argument("--name", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate",
                       help="train and compare all three variants")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ref", default=None,
                   help="reference scene JSON (default: dataset/scene.json)")
    p.add_argument("--out", default=None)
    _add_train_overrides(p)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--clip", type=float, default=2.0)
    p.add_argument("--gsd", type=float, default=0.25)
    p.add_argument("--opacity-threshold", type=float, default=0.5)
    p.add_argument("--stride", type=int, default=1)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("BATHYFIELD_THREADS"):
        try:
            threads = int(os.environ["BATHYFIELD_THREADS"])
        except ValueError:
            print("error: BATHYFIELD_THREADS must be an integer",
                  file=sys.stderr)
            return 2
    if threads is not None:
        if threads < 1:
            print("error: --threads must be positive", file=sys.stderr)
            return 2
        torch.set_num_threads(threads)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except (CliError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
