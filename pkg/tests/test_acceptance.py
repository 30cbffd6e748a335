"""End-to-end acceptance gate.

One test per criterion; each prints a single `[criterion N] PASS/FAIL`
line (written to the unbuffered real stdout so it survives capture) with
the measured values and the pinned tolerances, then asserts.
"""

import time
from dataclasses import replace

import numpy as np
import torch

from bathyfield.dataprep import (MaskLabel, build_dataset, look_at_camera,
                                 read_manifest, split_dataset)
from bathyfield.evaluation import (ReferenceSurface, c2m_signed,
                                   completeness, icp_align, psnr,
                                   sor_filter)
from bathyfield.export import (PointCloud, backproject, denormalize,
                               export_pointcloud)
from bathyfield.field import DTYPE, FieldConfig, HashGridConfig, \
    RadianceField
from bathyfield.dataprep import normalize_scene
from bathyfield.geom import (Aabb, WaterPlane, apply_similarity,
                             rotation_from_axis_angle)
from bathyfield.rendering import (PoseCorrections, VARIANTS, alpha_weights,
                                  composite, distortion_loss,
                                  interlevel_loss, normalize_edges,
                                  render_rays, render_view, rgb_loss,
                                  total_loss)
from bathyfield.sampling import (ProposalConfig, build_virtual_rays,
                                 hierarchical_sample, refract_dirs)
from bathyfield.synthscene import (SyntheticScene, Trajectory,
                                   analytic_apparent_depth, render_dataset,
                                   sample_reference_points, trace_rays)
from bathyfield.training import TrainConfig, fit, load_checkpoint

N_AIR, N_WATER = 1.0, 1.333


def _report(capsys, criterion: int, ok: bool, detail: str) -> None:
    line = f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
    with capsys.disabled():
        print(line, flush=True)
    assert ok, line


def test_criterion_1_snell_invariant(capsys):
    start = time.time()
    rng = np.random.default_rng(1)
    n = 100_000
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    # guarantee incidence against each normal (air side)
    flip = (dirs * normals).sum(axis=1) > 0
    dirs[flip] *= -1.0
    out = refract_dirs(torch.as_tensor(dirs, dtype=DTYPE),
                       torch.as_tensor(normals, dtype=DTYPE),
                       N_AIR, N_WATER).numpy()

    sin_i = np.linalg.norm(np.cross(dirs, normals), axis=1)
    sin_t = np.linalg.norm(np.cross(out, normals), axis=1)
    snell = np.abs(N_AIR * sin_i - N_WATER * sin_t)
    # refracted direction stays in the incidence plane spanned by (d, n)
    coplanar = np.abs(np.einsum("ij,ij->i", out, np.cross(dirs, normals)))
    elapsed = time.time() - start
    ok = snell.max() < 1e-12 and coplanar.max() < 1e-12 and elapsed < 1.0
    _report(capsys, 1, ok,
            f"1e5 pairs: max |n1 sin t1 - n2 sin t2| = {snell.max():.2e} "
            f"(< 1e-12), max coplanarity residual = {coplanar.max():.2e} "
            f"(< 1e-12), {elapsed:.2f}s (< 1s)")


def test_criterion_2_oracle_depth_export(capsys):
    start = time.time()
    scene = SyntheticScene()
    plane = WaterPlane((0.0, 0.0, 1.0), scene.water_level)
    box = Aabb((-scene.extent, -scene.extent, scene.seabed_z - 1.0),
               (scene.extent, scene.extent, 10.0))

    # refraction ON: true optical ranges through the kinked backprojection
    errs = []
    for cam in Trajectory(n_ring=6, n_nadir=2).cameras(32, 32):
        origins, dirs = cam.all_pixel_rays()
        truth = trace_rays(scene, origins, dirs)
        valid = truth["label"] != int(MaskLabel.IGNORE)
        vrays = build_virtual_rays(origins[valid], dirs[valid],
                                   truth["label"][valid], plane, box)
        points = backproject(vrays, torch.as_tensor(
            truth["range_virtual"][valid], dtype=DTYPE))
        errs.append(np.linalg.norm(points - truth["hit"][valid], axis=1))
    rms_on = float(np.sqrt(np.mean(np.concatenate(errs) ** 2)))

    # refraction OFF: apparent ranges over a flat bottom, nadir views
    flat = SyntheticScene(obstacle_min=None, obstacle_max=None)
    depths = []
    for eye in ((0.0, 0.0, 8.0), (1.0, -1.0, 8.0)):
        cam = look_at_camera("nadir", eye, (eye[0], eye[1], 0.0), 32, 32,
                             fov_deg=2.0)
        origins, dirs = cam.all_pixel_rays()
        truth = trace_rays(flat, origins, dirs)
        water = truth["label"] == int(MaskLabel.WATER)
        vrays = build_virtual_rays(origins[water], dirs[water],
                                   truth["label"][water], plane, box,
                                   refraction_enabled=False)
        points = backproject(vrays, torch.as_tensor(
            truth["range_apparent"][water], dtype=DTYPE),
            refraction_enabled=False)
        depths.append(flat.water_level - points[:, 2])
    mean_apparent = float(np.concatenate(depths).mean())
    expected = analytic_apparent_depth(2.0, 0.0)
    elapsed = time.time() - start
    ok = rms_on < 1e-6 and abs(mean_apparent - expected) < 1e-3 \
        and elapsed < 10.0
    _report(capsys, 2, ok,
            f"refraction ON backprojection RMS = {rms_on:.2e} (< 1e-6); "
            f"refraction OFF mean apparent depth = {mean_apparent:.6f} "
            f"vs h/n = {expected:.6f} (+- 1e-3), {elapsed:.1f}s (< 10s)")


def _run_cloud_metrics(variant, bundle, scene, ref, ref_crop, out_dir):
    """Train one variant, export, filter, crop, and evaluate its cloud."""
    config = replace(TrainConfig(), rays_per_batch=512,
                     max_iterations=5000, eval_interval=2500,
                     variant=variant)
    result = fit(bundle, config, out_dir)
    assert not result.aborted
    ckpt = load_checkpoint(result.checkpoint_path)
    refraction, two_media = VARIANTS[variant]
    cloud = export_pointcloud(ckpt["field"], ckpt["proposals"], bundle,
                              config.proposal, opacity_threshold=0.5,
                              refraction_enabled=refraction,
                              two_media=two_media)
    cloud = denormalize(cloud, bundle.norm, bundle.chunk)
    once = sor_filter(cloud)
    twice = sor_filter(once)
    sor_change = (len(once) - len(twice)) / len(once)
    keep = ref.central_crop_mask(once.positions)
    cropped = PointCloud(once.positions[keep], once.colors[keep],
                         frame=once.frame)
    c2m = c2m_signed(cropped, ref, clip=2.0)
    comp = completeness(ref_crop, cropped, threshold=0.3)
    under = cropped.positions[:, 2] < scene.water_level
    water_kept = c2m.kept & under
    water_mean = float(c2m.signed[water_kept].mean()) if water_kept.any() \
        else float("nan")
    return {"c2m": c2m, "completeness": comp, "water_mean": water_mean,
            "sor_second_pass": sor_change, "points": len(cropped)}


def test_criterion_3_scaled_ablation(tmp_path, capsys):
    start = time.time()
    scene = SyntheticScene()
    cams = Trajectory().cameras(128, 128)   # 18 ring + 6 nadir = 24
    render_dataset(scene, cams, tmp_path / "synth")
    build_dataset(tmp_path / "synth" / "cameras.json",
                  tmp_path / "synth" / "markers.json",
                  tmp_path / "synth" / "images", tmp_path / "dataset",
                  masks_dir=tmp_path / "synth" / "masks")
    bundle = read_manifest(tmp_path / "dataset")
    ref = ReferenceSurface.from_scene(scene)
    ref_points = sample_reference_points(scene, 0.25)
    ref_crop = ref_points[ref.central_crop_mask(ref_points)]

    on = _run_cloud_metrics("full", bundle, scene, ref, ref_crop,
                            tmp_path / "run_on")
    off = _run_cloud_metrics("no_refraction", bundle, scene, ref,
                             ref_crop, tmp_path / "run_off")
    elapsed = time.time() - start

    mean_on, mean_off = abs(on["c2m"].mean), abs(off["c2m"].mean)
    ok = (mean_on <= mean_off / 3.0
          and on["completeness"] >= off["completeness"] + 0.20
          and off["water_mean"] > 0.0
          and elapsed < 7200.0)
    _report(capsys, 3, ok,
            f"C2M |mean| ON {mean_on:.4f} <= OFF/3 = {mean_off / 3.0:.4f} "
            f"(OFF {mean_off:.4f}); completeness ON "
            f"{on['completeness']:.3f} >= OFF {off['completeness']:.3f} "
            f"+ 0.20; OFF underwater signed mean {off['water_mean']:+.4f} "
            f"> 0 (shallowing); SOR 2nd pass ON "
            f"{on['sor_second_pass']:.4%} OFF {off['sor_second_pass']:.4%}"
            f"; {elapsed / 60.0:.1f} min (< 120 min)")


def test_criterion_4_compositing_identities(capsys):
    start = time.time()
    rng = np.random.default_rng(4)
    n_rays, n_samp = 10_000, 24
    sigma_np = rng.uniform(0.0, 30.0, (n_rays, n_samp))
    sigma_np[rng.uniform(size=(n_rays, n_samp)) < 0.2] = 0.0
    sigma = torch.as_tensor(sigma_np, dtype=DTYPE)
    delta = torch.as_tensor(rng.uniform(1e-3, 0.4, (n_rays, n_samp)),
                            dtype=DTYPE)
    t = torch.cumsum(delta, dim=1) - delta
    colors = torch.as_tensor(rng.uniform(size=(n_rays, n_samp, 3)),
                             dtype=DTYPE)

    weights, trans = alpha_weights(sigma, delta)
    t_after = torch.exp(-(sigma * delta).sum(dim=1))
    sum_err = (weights.sum(dim=1) - (1.0 - t_after)).abs().max().item()
    monotone = bool((trans[:, 1:] <= trans[:, :-1] + 1e-15).all())

    # inserting a zero-density sample leaves every output unchanged
    base = composite(sigma, delta, colors, t)
    k = n_samp // 2
    ins = lambda a, v: torch.cat([a[:, :k], v, a[:, k:]], dim=1)
    zeros = torch.zeros(n_rays, 1, dtype=DTYPE)
    sigma2 = ins(sigma, zeros)
    delta2 = ins(delta, torch.full((n_rays, 1), 0.3, dtype=DTYPE))
    t2 = ins(t, t[:, k - 1:k] + 1e-3)
    colors2 = torch.cat([colors[:, :k], torch.rand(n_rays, 1, 3,
                                                   dtype=DTYPE),
                         colors[:, k:]], dim=1)
    spliced = composite(sigma2, delta2, colors2, t2)
    insertion_err = max(
        (spliced.rgb - base.rgb).abs().max().item(),
        (spliced.depth - base.depth).abs().max().item(),
        (spliced.accumulation - base.accumulation).abs().max().item())
    elapsed = time.time() - start
    ok = (sum_err < 1e-9 and monotone and insertion_err < 1e-12
          and elapsed < 5.0)
    _report(capsys, 4, ok,
            f"1e4 rays: max |sum w - (1 - T_final)| = {sum_err:.2e} "
            f"(< 1e-9); T monotone nonincreasing = {monotone}; "
            f"zero-density insertion residual = {insertion_err:.2e} "
            f"(< 1e-12); {elapsed:.1f}s (< 5s)")


def _fd_check(loss_fn, tensors, rng, min_checked=50, h=1e-6):
    """Central-difference vs autograd over random entries of `tensors`.

    Returns (n_checked, max relative error) across parameters whose
    analytic gradient carries signal.
    """
    for p in tensors:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [p.grad.detach().clone() if p.grad is not None
             else torch.zeros_like(p) for p in tensors]
    candidates = [(i, j) for i, p in enumerate(tensors)
                  for j in range(p.numel())]
    order = rng.permutation(len(candidates))
    checked, max_rel = 0, 0.0
    with torch.no_grad():
        for pos in order:
            if checked >= min_checked:
                break
            i, j = candidates[pos]
            ana = grads[i].reshape(-1)[j].item()
            if abs(ana) < 1e-7:
                continue
            flat = tensors[i].data.reshape(-1)
            keep = flat[j].item()
            flat[j] = keep + h
            up = loss_fn().item()
            flat[j] = keep - h
            down = loss_fn().item()
            flat[j] = keep
            fd = (up - down) / (2.0 * h)
            rel = abs(ana - fd) / max(abs(ana), abs(fd), 1e-12)
            max_rel = max(max_rel, rel)
            checked += 1
    return checked, max_rel


def test_criterion_5_gradient_correctness(capsys):
    start = time.time()
    torch.manual_seed(5)
    rng = np.random.default_rng(5)
    box = Aabb((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    plane = WaterPlane((0.0, 0.0, 1.0), 0.0)
    grid = HashGridConfig(levels=4, base_resolution=4, max_resolution=32,
                          features_per_level=2, table_size_log2=10)
    field = RadianceField(FieldConfig(grid=grid, geo_features=7,
                                      density_hidden_dim=16,
                                      color_hidden_dim=16), box)
    pconfig = ProposalConfig(grid=HashGridConfig(
        levels=2, base_resolution=4, max_resolution=8,
        features_per_level=2, table_size_log2=8), hidden_dim=8,
        samples_per_iteration=(12, 8), final_samples=8)
    proposals = pconfig.make_proposal_fields(box)
    poses = PoseCorrections(9)
    with torch.no_grad():
        # magnitudes bounded away from zero so the L2 penalty gives every
        # pose entry measurable gradient signal
        for p in poses.parameters():
            p.uniform_(0.005, 0.02)
            p.mul_((torch.randint(0, 2, p.shape) * 2 - 1).to(DTYPE))

    n_rays = 8
    origins = np.tile([0.1, -0.1, 0.9], (n_rays, 1)) \
        + rng.normal(scale=0.05, size=(n_rays, 3))
    targets = rng.uniform(-0.4, 0.4, (n_rays, 3))
    targets[:, 2] = rng.uniform(-0.8, -0.4, n_rays)
    dirs = targets - origins
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    labels = np.array([1, 1, 1, 1, 0, 0, 1, 1], dtype=np.uint8)
    cam_indices = torch.as_tensor(rng.integers(0, 9, n_rays))
    gt = torch.as_tensor(rng.uniform(size=(n_rays, 3)), dtype=DTYPE)

    def render_loss():
        outputs, batch, _ = render_rays(
            origins, dirs, labels, field, [], plane, box, pconfig,
            cam_indices=cam_indices, poses=poses, uniform_samples=12)
        s_edges = normalize_edges(batch.edges, batch.t_near, batch.t_far)
        return total_loss(rgb_loss(outputs.rgb, gt, outputs.valid),
                          distortion_loss(outputs.weights, s_edges),
                          torch.zeros((), dtype=DTYPE), poses)

    field_checked, field_rel = _fd_check(
        render_loss, list(field.parameters()), rng)
    pose_checked, pose_rel = _fd_check(
        render_loss, list(poses.parameters()), rng,
        min_checked=sum(p.numel() for p in poses.parameters()))

    # proposal group: interlevel consistency at frozen sample edges
    vrays = build_virtual_rays(origins, dirs, labels, plane, box)
    with torch.no_grad():
        batch, retained = hierarchical_sample(vrays, proposals, pconfig,
                                              jitter_key=(5, 1))
        final_sigma, _ = field.density(batch.positions)
        final_w, _ = alpha_weights(final_sigma, batch.delta)
        level_edges = [edges.clone() for edges, _ in retained]
        final_edges = batch.edges.clone()

    def proposal_loss():
        rebuilt = []
        for edges, prop in zip(level_edges, proposals):
            t = edges[:, :-1]
            sigma = prop.density(vrays.positions(t))
            w, _ = alpha_weights(sigma, edges[:, 1:] - edges[:, :-1])
            rebuilt.append((edges, w))
        return interlevel_loss(rebuilt, final_edges, final_w)

    prop_params = [p for prop in proposals for p in prop.parameters()]
    prop_checked, prop_rel = _fd_check(proposal_loss, prop_params, rng)

    elapsed = time.time() - start
    pose_total = sum(p.numel() for p in poses.parameters())
    ok = (field_checked >= 50 and prop_checked >= 50
          and pose_checked == pose_total
          and max(field_rel, prop_rel, pose_rel) < 1e-3
          and elapsed < 30.0)
    _report(capsys, 5, ok,
            f"8-ray loss, rel err < 1e-3: field {field_checked} params "
            f"max {field_rel:.2e}; proposal {prop_checked} params max "
            f"{prop_rel:.2e}; pose {pose_checked}/{pose_total} params "
            f"max {pose_rel:.2e}; {elapsed:.1f}s (< 30s)")


def test_criterion_6_transform_round_trips(capsys):
    start = time.time()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        # random tilted water plane with markers and a camera ring
        axis = rng.normal(size=3) * 0.1
        rot = rotation_from_axis_angle(axis)
        offset = rng.uniform(-20, 20, 3)
        mx = rng.uniform(-8, 8, (40, 2))
        markers = np.column_stack([mx, rng.normal(scale=0.01, size=40)])
        markers = markers @ rot.T + offset
        cams = []
        for k in range(6):
            a = 2 * np.pi * k / 6
            eye = np.array([10 * np.cos(a), 10 * np.sin(a), 9.0])
            cams.append(look_at_camera(f"c{k}", eye @ rot.T + offset,
                                       offset, 32, 32, 60.0))
        norm = normalize_scene(cams, markers)[0]
        pts = rng.uniform(-30, 30, (100, 3))
        back = apply_similarity(norm, pts)
        cloud = PointCloud(back, np.zeros((100, 3)), frame="normalized")
        restored = denormalize(cloud, norm).positions
        worst = max(worst, float(np.abs(restored - pts).max()))
    elapsed = time.time() - start
    ok = worst < 1e-9 and elapsed < 1.0
    _report(capsys, 6, ok,
            f"100 scenes x 100 points: max |denormalize(normalize(x)) - x|"
            f" = {worst:.2e} (< 1e-9); {elapsed:.2f}s (< 1s)")


def test_criterion_7_training_smoke(tmp_path, capsys):
    start = time.time()
    scene = SyntheticScene()
    cams = Trajectory(n_ring=9, n_nadir=3).cameras(64, 64)
    render_dataset(scene, cams, tmp_path / "synth")
    build_dataset(tmp_path / "synth" / "cameras.json",
                  tmp_path / "synth" / "markers.json",
                  tmp_path / "synth" / "images", tmp_path / "dataset",
                  masks_dir=tmp_path / "synth" / "masks")
    bundle = read_manifest(tmp_path / "dataset")
    config = replace(TrainConfig(), rays_per_batch=512,
                     max_iterations=2000, eval_interval=1000)

    result = fit(bundle, config, tmp_path / "run_a")
    repeat = fit(bundle, config, tmp_path / "run_b")
    deterministic = (tmp_path / "run_a" / "metrics.csv").read_bytes() == \
        (tmp_path / "run_b" / "metrics.csv").read_bytes()

    ckpt = load_checkpoint(result.checkpoint_path)
    psnrs = []
    for idx in bundle.split_train[:3]:
        out = render_view(ckpt["field"], ckpt["proposals"],
                          bundle.cameras[idx], bundle.water_plane,
                          bundle.scene_box, ckpt["config"].proposal,
                          labels=bundle.load_mask(idx),
                          variant=ckpt["config"].variant, image_idx=idx)
        gt = bundle.load_image(idx)
        valid3 = np.repeat(out["valid"][..., None], 3, axis=2)
        psnrs.append(psnr(out["rgb"], gt, valid3))
    mean_psnr = float(np.mean(psnrs))
    ratio = result.initial_rgb_loss / max(result.final_rgb_loss, 1e-12)
    elapsed = time.time() - start
    ok = (mean_psnr > 20.0 and ratio > 5.0 and deterministic
          and elapsed < 900.0)
    _report(capsys, 7, ok,
            f"64x64 x 12 cams x 2000 iters: train-view PSNR "
            f"{mean_psnr:.2f} dB (> 20); L_rgb {result.initial_rgb_loss:.4f}"
            f" -> {result.final_rgb_loss:.4f} (ratio {ratio:.1f} > 5); "
            f"metrics byte-identical across reruns = {deterministic}; "
            f"{elapsed / 60.0:.1f} min (< 15 min)")


def test_criterion_8_metric_units(capsys):
    start = time.time()
    ref = np.stack([np.arange(10.0), np.zeros(10), np.zeros(10)], axis=1)
    comp_0 = completeness(ref, np.zeros((0, 3)))
    comp_07 = completeness(ref, ref[:7], threshold=0.3)
    comp_1 = completeness(ref, ref)
    psnr_20 = psnr(np.full((8, 8, 3), 0.1), np.zeros((8, 8, 3)))
    one = torch.ones((), dtype=DTYPE)
    loss = total_loss(one, one, one).item()
    train, val = split_dataset(130, 0.9, seed=42)
    elapsed = time.time() - start
    ok = (comp_0 == 0.0 and abs(comp_07 - 0.7) < 1e-12 and comp_1 == 1.0
          and abs(psnr_20 - 20.0) < 1e-9 and abs(loss - 2.002) < 1e-12
          and (len(train), len(val)) == (117, 13) and elapsed < 1.0)
    _report(capsys, 8, ok,
            f"completeness (0, 0.7, 1.0) = ({comp_0}, {comp_07}, {comp_1});"
            f" PSNR at MSE 0.01 = {psnr_20:.6f} (20); unit-part loss = "
            f"{loss} (2.002); split 130 -> {len(train)}/{len(val)} "
            f"(117/13); {elapsed:.2f}s (< 1s)")


def test_criterion_9_icp_recovery(capsys):
    start = time.time()
    rng = np.random.default_rng(9)
    src = rng.uniform(-1, 1, (500, 3))
    rot = rotation_from_axis_angle(np.array([0.0, 0.0,
                                             np.deg2rad(2.0)]))
    t = np.array([0.05, 0.0, 0.0])
    dst = src @ rot.T + t
    res = icp_align(src, dst)
    rot_err = float(np.abs(res.transform.rotation - rot).max())
    t_err = float(np.abs(res.transform.translation - t).max())
    moved = apply_similarity(res.transform, src)
    rms = float(np.sqrt(((moved - dst) ** 2).sum(axis=1).mean()))
    elapsed = time.time() - start
    ok = (res.converged and rot_err < 1e-3 and t_err < 1e-3
          and rms < 1e-3 and elapsed < 5.0)
    _report(capsys, 9, ok,
            f"2 deg / 0.05 unit perturbation: rotation err {rot_err:.2e}, "
            f"translation err {t_err:.2e}, residual RMS {rms:.2e} "
            f"(all < 1e-3), converged = {res.converged}; "
            f"{elapsed:.2f}s (< 5s)")
