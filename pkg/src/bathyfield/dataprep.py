"""Dataset preparation: cameras, masks, scene normalization and manifests.

A prepared dataset lives in a directory with a `manifest.json` describing
cameras (normalized frame), per-image mask paths, shoreline markers, the
fitted water plane, the scene box and the transforms needed to get back to
metric/global coordinates.
"""

from __future__ import annotations

import enum
import json
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from bathyfield.geom import (
    Aabb,
    SimilarityTransform,
    WaterPlane,
    apply_similarity,
    fit_plane_lsq,
    rotation_plane_to_z,
)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1

# grayscale PNG values encoding each label in mask images
MASK_PNG_VALUES = {0: 0, 1: 255, 2: 128}


class MaskLabel(enum.IntEnum):
    """Per-pixel supervision class."""

    LAND = 0
    WATER = 1
    IGNORE = 2


class SchemaError(ValueError):
    """Manifest is missing fields or has malformed values."""


class MaskMismatch(ValueError):
    """A mask image is missing or does not match its photo's size."""


@dataclass(frozen=True)
class Camera:
    """Pinhole camera, OpenCV axes (+x right, +y down, +z forward)."""

    cam_id: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    camera_to_world: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.camera_to_world, dtype=np.float64)
        if M.shape != (4, 4):
            raise ValueError("camera_to_world must be 4x4")
        object.__setattr__(self, "camera_to_world", M)

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return self.camera_to_world[:3, 2]

    def elevation_deg(self) -> float:
        """View elevation above horizontal; 90 means straight down."""
        fz = float(np.clip(-self.forward[2], -1.0, 1.0))
        return float(np.degrees(np.arcsin(fz)))

    def pixel_rays(self, px, py) -> tuple[np.ndarray, np.ndarray]:
        """World-space origins/unit directions through pixel centers.

        px/py are column/row indices (arrays ok); the +0.5 pixel-center
        offset is applied here.
        """
        px = np.asarray(px, dtype=np.float64)
        py = np.asarray(py, dtype=np.float64)
        x = (px + 0.5 - self.cx) / self.fx
        y = (py + 0.5 - self.cy) / self.fy
        d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        d_world = d_cam @ self.rotation.T
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.center, d_world.shape).copy()
        return origins, d_world

    def all_pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        py, px = np.mgrid[0:self.height, 0:self.width]
        return self.pixel_rays(px.ravel(), py.ravel())

    def transformed(self, transform: SimilarityTransform) -> "Camera":
        """Camera expressed in the similarity-transformed world frame.

        Rotations stay orthonormal (the scale only moves centers), so pixel
        rays in the new frame are the transformed rays of the old frame.
        """
        M = np.eye(4)
        M[:3, :3] = transform.rotation @ self.rotation
        M[:3, 3] = apply_similarity(transform, self.center)
        return replace(self, camera_to_world=M)

    def to_json(self) -> dict:
        return {
            "id": self.cam_id,
            "width": self.width,
            "height": self.height,
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "camera_to_world": self.camera_to_world.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "Camera":
        try:
            return Camera(str(obj["id"]), int(obj["width"]),
                          int(obj["height"]), float(obj["fx"]),
                          float(obj["fy"]), float(obj["cx"]),
                          float(obj["cy"]),
                          np.asarray(obj["camera_to_world"], dtype=np.float64))
        except KeyError as e:
            raise SchemaError(f"camera entry missing field {e}") from e


def look_at_camera(cam_id: str, eye, target, width: int, height: int,
                   fov_deg: float) -> Camera:
    """Camera at `eye` looking at `target`, horizon kept level.

    Straight-down views fall back to +y world as the up hint so the image
    x axis aligns with world x.
    """
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    if abs(f @ up) > 1.0 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    x_cam = np.cross(f, up)
    x_cam /= np.linalg.norm(x_cam)
    y_cam = np.cross(f, x_cam)
    M = np.eye(4)
    M[:3, 0], M[:3, 1], M[:3, 2], M[:3, 3] = x_cam, y_cam, f, eye
    fx = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
    return Camera(cam_id, width, height, fx, fx, width / 2.0, height / 2.0, M)


@dataclass(frozen=True)
class DatasetBundle:
    """A prepared dataset plus the transforms linking its frames.

    All geometry (cameras, markers, plane, box) is stored in the normalized
    frame.  `norm` maps chunk-local metric coordinates into the normalized
    frame; `chunk` maps chunk-local coordinates into the global frame, so a
    normalized point reaches global coordinates via chunk o inverse(norm).
    """

    cameras: list
    image_paths: list
    mask_paths: list | None
    markers: np.ndarray
    water_plane: WaterPlane
    scene_box: Aabb
    norm: SimilarityTransform
    chunk: SimilarityTransform
    split_train: list
    split_val: list
    root: Path = field(default=Path("."))

    @property
    def masks_enabled(self) -> bool:
        return self.mask_paths is not None

    def load_image(self, index: int) -> np.ndarray:
        img = Image.open(self.image_paths[index]).convert("RGB")
        return np.asarray(img, dtype=np.float64) / 255.0

    def load_mask(self, index: int) -> np.ndarray:
        if not self.masks_enabled:
            cam = self.cameras[index]
            return np.full((cam.height, cam.width), int(MaskLabel.LAND),
                           dtype=np.uint8)
        return decode_mask(np.asarray(Image.open(self.mask_paths[index])
                                      .convert("L")))


def encode_mask(labels: np.ndarray) -> np.ndarray:
    """Label array -> 8-bit grayscale PNG values."""
    out = np.empty(labels.shape, dtype=np.uint8)
    for label, value in MASK_PNG_VALUES.items():
        out[labels == label] = value
    return out


def decode_mask(values: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Grayscale PNG values -> labels.

    The exact IGNORE code (128) is recognized first; any other value is
    binarized LAND/WATER at the configurable threshold on [0,1].
    """
    values = np.asarray(values)
    labels = np.where(values.astype(np.float64) / 255.0 >= threshold,
                      int(MaskLabel.WATER), int(MaskLabel.LAND))
    labels = np.where(values == MASK_PNG_VALUES[int(MaskLabel.IGNORE)],
                      int(MaskLabel.IGNORE), labels)
    return labels.astype(np.uint8)


def transform_plane(plane: WaterPlane,
                    transform: SimilarityTransform) -> WaterPlane:
    """Plane {n.x = b} expressed in the transformed frame."""
    n_new = transform.rotation @ plane.normal
    # point p on plane maps to R(s p) + t; its projection on n_new gives
    # the new intercept s*b + n_new.t
    b_new = transform.scale * plane.intercept + float(
        n_new @ transform.translation)
    return WaterPlane(n_new, b_new, plane.n_air, plane.n_water)


def normalize_scene(cameras: list, markers,
                    n_air: float = 1.0, n_water: float = 1.333):
    """Rotate the fitted water plane horizontal, center and rescale.

    Steps: fit the plane to the markers, rotate its normal onto +z (sign
    chosen so the camera centroid ends up above the plane), translate the
    camera centroid to the origin, then scale by 1/max|coordinate| over
    cameras and markers so everything lands in [-1, 1]^3.

    Returns:
        (norm transform, cameras', markers' array, plane').
    """
    if len(cameras) < 2:
        raise ValueError("need at least 2 cameras")
    markers = np.asarray(markers, dtype=np.float64)
    plane = fit_plane_lsq(markers, n_air, n_water)
    centers = np.stack([c.center for c in cameras])
    above = float(np.mean(centers @ plane.normal - plane.intercept))
    if above >= 0.0:
        oriented = plane
    else:
        # flipping {n.x = b} to {-n.x = -b} keeps the same plane but puts
        # the cameras on the positive side
        oriented = WaterPlane(-plane.normal, -plane.intercept, n_air, n_water)
    R = rotation_plane_to_z(oriented.normal)
    centroid = (centers @ R.T).mean(axis=0)
    coords = np.vstack([centers, markers]) @ R.T - centroid
    s_norm = 1.0 / float(np.max(np.abs(coords)))
    norm = SimilarityTransform(R, -s_norm * centroid, s_norm)
    cameras_n = [c.transformed(norm) for c in cameras]
    markers_n = apply_similarity(norm, markers)
    plane_n = transform_plane(oriented, norm)
    return norm, cameras_n, markers_n, plane_n


def derive_scene_box(cameras_n: list, markers_n) -> Aabb:
    """Sampling box: camera x,y extents, camera+marker z range, recentered
    on the marker centroid and grown (symmetrically, so the center stays on
    the centroid) until every marker is inside."""
    markers_n = np.asarray(markers_n, dtype=np.float64)
    centers = np.stack([c.center for c in cameras_n])
    lo = np.empty(3)
    hi = np.empty(3)
    lo[:2] = centers[:, :2].min(axis=0)
    hi[:2] = centers[:, :2].max(axis=0)
    zs = np.concatenate([centers[:, 2], markers_n[:, 2]])
    lo[2], hi[2] = zs.min(), zs.max()
    center = markers_n.mean(axis=0)
    half = np.maximum(0.5 * (hi - lo),
                      np.abs(markers_n - center).max(axis=0))
    return Aabb(center - half, center + half)


def split_dataset(n: int, train_fraction: float, seed: int,
                  elevations_deg=None, nadir_threshold_deg: float = 70.0):
    """Deterministic stratified train/val split.

    Cameras are bucketed into nadir (elevation >= threshold) and oblique
    bands so both splits sample each band as evenly as possible.  Without
    elevations a single band is used.

    Returns:
        (train indices, val indices), each sorted ascending.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    if n < 2:
        raise ValueError("need at least 2 images to split")
    if elevations_deg is None:
        bands = np.zeros(n, dtype=int)
    else:
        bands = (np.asarray(elevations_deg, dtype=np.float64)
                 >= nadir_threshold_deg).astype(int)
    n_train_total = int(round(n * train_fraction))
    n_train_total = min(max(n_train_total, 1), n - 1)
    rng = np.random.default_rng(seed)
    band_ids = sorted(set(bands.tolist()))
    # largest-remainder allocation of the train quota across bands
    sizes = {b: int(np.sum(bands == b)) for b in band_ids}
    quotas = {b: sizes[b] * train_fraction for b in band_ids}
    counts = {b: int(np.floor(quotas[b])) for b in band_ids}
    remainders = sorted(band_ids, key=lambda b: quotas[b] - counts[b],
                        reverse=True)
    i = 0
    while sum(counts.values()) < n_train_total:
        b = remainders[i % len(remainders)]
        if counts[b] < sizes[b]:
            counts[b] += 1
        i += 1
    while sum(counts.values()) > n_train_total:
        b = remainders[i % len(remainders)]
        if counts[b] > 0:
            counts[b] -= 1
        i += 1
    train, val = [], []
    for b in band_ids:
        idx = np.flatnonzero(bands == b)
        perm = rng.permutation(len(idx))
        take = counts[b]
        train.extend(int(idx[p]) for p in perm[:take])
        val.extend(int(idx[p]) for p in perm[take:])
    return sorted(train), sorted(val)


def _transform_to_json(t: SimilarityTransform) -> dict:
    return {"rotation": t.rotation.tolist(),
            "translation": t.translation.tolist(),
            "scale": t.scale}


def _transform_from_json(obj: dict) -> SimilarityTransform:
    try:
        return SimilarityTransform(np.asarray(obj["rotation"], np.float64),
                                   np.asarray(obj["translation"], np.float64),
                                   float(obj["scale"]))
    except KeyError as e:
        raise SchemaError(f"transform missing field {e}") from e


def _require(obj: dict, key: str):
    if key not in obj:
        raise SchemaError(f"manifest missing required field '{key}'")
    return obj[key]


def _check_mask_pairing(root: Path, image_rel: list, mask_rel: list) -> None:
    if len(mask_rel) != len(image_rel):
        raise MaskMismatch(
            f"{len(image_rel)} images but {len(mask_rel)} masks")
    for img, msk in zip(image_rel, mask_rel):
        img_p, msk_p = root / img, root / msk
        if not msk_p.exists():
            raise MaskMismatch(f"mask {msk} missing for image {img}")
        if not img_p.exists():
            raise MaskMismatch(f"image {img} missing")
        if Image.open(img_p).size != Image.open(msk_p).size:
            raise MaskMismatch(
                f"mask {msk} size {Image.open(msk_p).size} != image "
                f"{img} size {Image.open(img_p).size}")


def write_manifest(bundle: DatasetBundle, directory) -> Path:
    """Serialize a bundle to `directory/manifest.json`.

    Image and mask files must already sit inside `directory`; they are
    referenced by relative path and their pairing is validated here.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    image_rel = [str(Path(p).relative_to(directory)) if Path(p).is_absolute()
                 else str(p) for p in bundle.image_paths]
    mask_rel = None
    if bundle.masks_enabled:
        mask_rel = [str(Path(p).relative_to(directory))
                    if Path(p).is_absolute() else str(p)
                    for p in bundle.mask_paths]
        _check_mask_pairing(directory, image_rel, mask_rel)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "cameras": [c.to_json() for c in bundle.cameras],
        "images": image_rel,
        "masks": mask_rel,
        "markers": np.asarray(bundle.markers, np.float64).tolist(),
        "water_plane": {
            "normal": bundle.water_plane.normal.tolist(),
            "intercept": bundle.water_plane.intercept,
            "n_air": bundle.water_plane.n_air,
            "n_water": bundle.water_plane.n_water,
        },
        "scene_box": {"min": bundle.scene_box.min.tolist(),
                      "max": bundle.scene_box.max.tolist()},
        "norm": _transform_to_json(bundle.norm),
        "chunk": _transform_to_json(bundle.chunk),
        "split": {"train": list(bundle.split_train),
                  "val": list(bundle.split_val)},
    }
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(directory) -> DatasetBundle:
    """Load and validate a dataset directory written by write_manifest."""
    directory = Path(directory)
    path = directory / MANIFEST_NAME
    if not path.exists():
        raise SchemaError(f"no {MANIFEST_NAME} in {directory}")
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"manifest is not valid JSON: {e}") from e
    cameras = [Camera.from_json(c) for c in _require(obj, "cameras")]
    image_rel = _require(obj, "images")
    mask_rel = _require(obj, "masks")
    wp = _require(obj, "water_plane")
    try:
        plane = WaterPlane(np.asarray(wp["normal"], np.float64),
                           float(wp["intercept"]), float(wp["n_air"]),
                           float(wp["n_water"]))
        box_obj = _require(obj, "scene_box")
        box = Aabb(np.asarray(box_obj["min"], np.float64),
                   np.asarray(box_obj["max"], np.float64))
        split = _require(obj, "split")
        train, val = list(split["train"]), list(split["val"])
    except KeyError as e:
        raise SchemaError(f"manifest missing field {e}") from e
    if len(image_rel) != len(cameras):
        raise SchemaError("images and cameras lists differ in length")
    if mask_rel is not None:
        _check_mask_pairing(directory, image_rel, mask_rel)
    bundle = DatasetBundle(
        cameras=cameras,
        image_paths=[directory / p for p in image_rel],
        mask_paths=None if mask_rel is None else [directory / p
                                                  for p in mask_rel],
        markers=np.asarray(_require(obj, "markers"), np.float64),
        water_plane=plane,
        scene_box=box,
        norm=_transform_from_json(_require(obj, "norm")),
        chunk=_transform_from_json(_require(obj, "chunk")),
        split_train=train,
        split_val=val,
        root=directory,
    )
    for p in bundle.image_paths:
        if not p.exists():
            raise SchemaError(f"referenced image {p.name} does not exist")
    return bundle


def build_dataset(cameras_json, markers_json, images_dir, out_dir,
                  masks_dir=None, train_fraction: float = 0.9,
                  seed: int = 42, chunk: SimilarityTransform | None = None,
                  n_air: float = 1.0, n_water: float = 1.333
                  ) -> DatasetBundle:
    """Full prep pipeline: fit plane, normalize, split, copy, manifest.

    Camera poses in `cameras_json` and markers in `markers_json` are
    expected in the same (chunk-local) metric frame.
    """
    cameras_json, markers_json = Path(cameras_json), Path(markers_json)
    # resolve() so manifest paths relativize correctly for relative out_dir
    images_dir, out_dir = Path(images_dir), Path(out_dir).resolve()
    cameras = [Camera.from_json(c)
               for c in json.loads(cameras_json.read_text())]
    markers = np.asarray(json.loads(markers_json.read_text()), np.float64)
    norm, cameras_n, markers_n, plane_n = normalize_scene(cameras, markers,
                                                          n_air, n_water)
    box = derive_scene_box(cameras_n, markers_n)
    elev = [c.elevation_deg() for c in cameras_n]
    train, val = split_dataset(len(cameras), train_fraction, seed, elev)

    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    image_rel = []
    for cam in cameras:
        src = images_dir / f"{cam.cam_id}.png"
        if not src.exists():
            raise SchemaError(f"image for camera {cam.cam_id} not found "
                              f"at {src}")
        if Image.open(src).size != (cam.width, cam.height):
            raise SchemaError(f"image {src.name} size does not match "
                              f"camera {cam.cam_id} intrinsics")
        rel = Path("images") / src.name
        shutil.copyfile(src, out_dir / rel)
        image_rel.append(rel)
    mask_rel = None
    if masks_dir is not None:
        masks_dir = Path(masks_dir)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        mask_rel = []
        for cam in cameras:
            src = masks_dir / f"{cam.cam_id}.png"
            if not src.exists():
                raise MaskMismatch(f"mask for camera {cam.cam_id} not found")
            rel = Path("masks") / src.name
            shutil.copyfile(src, out_dir / rel)
            mask_rel.append(rel)

    bundle = DatasetBundle(
        cameras=cameras_n,
        image_paths=[out_dir / p for p in image_rel],
        mask_paths=None if mask_rel is None else [out_dir / p
                                                  for p in mask_rel],
        markers=markers_n,
        water_plane=plane_n,
        scene_box=box,
        norm=norm,
        chunk=chunk if chunk is not None else SimilarityTransform.identity(),
        split_train=train,
        split_val=val,
        root=out_dir,
    )
    write_manifest(bundle, out_dir)
    return bundle
