"""Two-media radiance field: multiresolution hash-grid encoding, a density
head producing (sigma, h), and a medium-conditioned color head.

Torch (CPU, float64) supplies the tensor algebra and reverse-mode
gradients; every numerical contract of the encoding itself (hashing,
trilinear weights, activations) is written out explicitly below.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from bathyfield.geom import Aabb

DTYPE = torch.float64

# XOR spatial-hash primes for (x, y, z) grid coordinates
HASH_PRIMES = (1, 2654435761, 805459861)

BLOB_MAGIC = b"BFLD"
BLOB_VERSION = 1


@dataclass(frozen=True)
class HashGridConfig:
    """Multiresolution hash-grid shape parameters.

    Desk-scale defaults keep CPU training tractable; `full_scale` returns
    the full-size variant (16 levels to resolution 2048, 2^19 tables).
    """

    levels: int = 8
    base_resolution: int = 16
    max_resolution: int = 256
    features_per_level: int = 2
    table_size_log2: int = 15

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.max_resolution < self.base_resolution:
            raise ValueError("max_resolution must be >= base_resolution")

    @staticmethod
    def full_scale() -> "HashGridConfig":
        return HashGridConfig(levels=16, base_resolution=16,
                              max_resolution=2048, features_per_level=2,
                              table_size_log2=19)

    @property
    def table_size(self) -> int:
        return 1 << self.table_size_log2

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def per_level_resolutions(self) -> list[int]:
        """Geometric growth from base to max resolution."""
        if self.levels == 1:
            return [self.base_resolution]
        b = math.exp((math.log(self.max_resolution)
                      - math.log(self.base_resolution)) / (self.levels - 1))
        return [int(math.floor(self.base_resolution * b ** l + 1e-9))
                for l in range(self.levels)]

    def to_json(self) -> dict:
        return {"levels": self.levels,
                "base_resolution": self.base_resolution,
                "max_resolution": self.max_resolution,
                "features_per_level": self.features_per_level,
                "table_size_log2": self.table_size_log2}

    @staticmethod
    def from_json(obj: dict) -> "HashGridConfig":
        return HashGridConfig(**obj)


@dataclass(frozen=True)
class FieldConfig:
    """Radiance-field architecture knobs."""

    grid: HashGridConfig = field(default_factory=HashGridConfig)
    geo_features: int = 15
    density_hidden_dim: int = 32
    density_hidden_layers: int = 1
    color_hidden_dim: int = 32
    color_hidden_layers: int = 2
    appearance_dim: int = 0
    num_images: int = 0

    @staticmethod
    def full_scale(num_images: int = 0) -> "FieldConfig":
        return FieldConfig(grid=HashGridConfig.full_scale(),
                           density_hidden_dim=64, density_hidden_layers=1,
                           color_hidden_dim=64, color_hidden_layers=2,
                           num_images=num_images)

    def to_json(self) -> dict:
        return {"grid": self.grid.to_json(),
                "geo_features": self.geo_features,
                "density_hidden_dim": self.density_hidden_dim,
                "density_hidden_layers": self.density_hidden_layers,
                "color_hidden_dim": self.color_hidden_dim,
                "color_hidden_layers": self.color_hidden_layers,
                "appearance_dim": self.appearance_dim,
                "num_images": self.num_images}

    @staticmethod
    def from_json(obj: dict) -> "FieldConfig":
        kw = dict(obj)
        kw["grid"] = HashGridConfig.from_json(kw["grid"])
        return FieldConfig(**kw)


def _init_linear(lin: nn.Linear, generator: torch.Generator | None) -> None:
    # torch's default Linear reset, made reproducible via the generator
    nn.init.kaiming_uniform_(lin.weight, a=math.sqrt(5), generator=generator)
    bound = 1.0 / math.sqrt(lin.in_features)
    nn.init.uniform_(lin.bias, -bound, bound, generator=generator)


def make_mlp(in_dim: int, hidden_dim: int, hidden_layers: int, out_dim: int,
             generator: torch.Generator | None = None) -> nn.Sequential:
    """ReLU MLP with `hidden_layers` hidden layers and a linear output."""
    dims = [in_dim] + [hidden_dim] * hidden_layers + [out_dim]
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        lin = nn.Linear(dims[i], dims[i + 1], dtype=DTYPE)
        _init_linear(lin, generator)
        layers.append(lin)
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class HashGrid(nn.Module):
    """Instant-NGP style multiresolution hash encoding over a scene box."""

    def __init__(self, config: HashGridConfig, box: Aabb,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.resolutions = config.per_level_resolutions()
        tables = torch.empty(config.levels, config.table_size,
                             config.features_per_level, dtype=DTYPE)
        nn.init.uniform_(tables, -1e-4, 1e-4, generator=generator)
        self.tables = nn.Parameter(tables)
        self.register_buffer("box_min",
                             torch.as_tensor(box.min, dtype=DTYPE))
        self.register_buffer("box_size",
                             torch.as_tensor(box.size, dtype=DTYPE))
        offs = torch.tensor([[i, j, k] for i in (0, 1) for j in (0, 1)
                             for k in (0, 1)], dtype=torch.int64)
        self.register_buffer("corner_offsets", offs)

    @property
    def output_dim(self) -> int:
        return self.config.output_dim

    def hash_corners(self, verts: torch.Tensor) -> torch.Tensor:
        """XOR-fold integer vertex coordinates into table indices."""
        h = verts[..., 0] * HASH_PRIMES[0]
        h = h ^ (verts[..., 1] * HASH_PRIMES[1])
        h = h ^ (verts[..., 2] * HASH_PRIMES[2])
        return h & (self.config.table_size - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Encode (..., 3) positions to (..., levels*features).

        Positions are clamped to the box (proposal jitter may exceed it by
        epsilon); each level trilinearly blends 8 hashed corner features.
        """
        x01 = (x - self.box_min) / self.box_size
        x01 = x01.clamp(0.0, 1.0)
        outputs = []
        for lvl, res in enumerate(self.resolutions):
            scaled = x01 * res
            cell = scaled.floor().long().clamp_(0, res - 1)
            frac = scaled - cell.to(DTYPE)
            verts = cell.unsqueeze(-2) + self.corner_offsets      # (...,8,3)
            idx = self.hash_corners(verts)                        # (...,8)
            frac8 = frac.unsqueeze(-2)
            w = torch.where(self.corner_offsets.bool(), frac8,
                            1.0 - frac8).prod(dim=-1)             # (...,8)
            feats = self.tables[lvl][idx]                         # (...,8,F)
            outputs.append((w.unsqueeze(-1) * feats).sum(dim=-2))
        return torch.cat(outputs, dim=-1)


def spherical_harmonics(d: torch.Tensor) -> torch.Tensor:
    """Real spherical harmonics through degree 3 (16 values) of unit dirs."""
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    return torch.stack([
        torch.full_like(x, 0.28209479177387814),
        0.4886025119029199 * y,
        0.4886025119029199 * z,
        0.4886025119029199 * x,
        1.0925484305920792 * x * y,
        1.0925484305920792 * y * z,
        0.31539156525252005 * (3.0 * zz - 1.0),
        1.0925484305920792 * x * z,
        0.5462742152960396 * (xx - yy),
        0.5900435899266435 * y * (3.0 * xx - yy),
        2.890611442640554 * x * y * z,
        0.4570457994644658 * y * (5.0 * zz - 1.0),
        0.3731763325901154 * z * (5.0 * zz - 3.0),
        0.4570457994644658 * x * (5.0 * zz - 1.0),
        1.445305721320277 * z * (xx - yy),
        0.5900435899266435 * x * (xx - 3.0 * yy),
    ], dim=-1)


DIRECTION_ENCODING_DIM = 16


class RadianceField(nn.Module):
    """Shared geometry + medium-conditioned color.

    density(x) returns (sigma, h); color(h, d, m) appends the one-bit
    medium flag (0 air, 1 water) to [h, SH(d)] and maps through a sigmoid
    head, so the same density field renders differently per medium.
    """

    def __init__(self, config: FieldConfig, box: Aabb,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self.grid = HashGrid(config.grid, box, generator)
        self.density_mlp = make_mlp(self.grid.output_dim,
                                    config.density_hidden_dim,
                                    config.density_hidden_layers,
                                    1 + config.geo_features, generator)
        color_in = (config.geo_features + DIRECTION_ENCODING_DIM + 1
                    + config.appearance_dim)
        self.color_mlp = make_mlp(color_in, config.color_hidden_dim,
                                  config.color_hidden_layers, 3, generator)
        if config.appearance_dim > 0:
            if config.num_images <= 0:
                raise ValueError("appearance embeddings need num_images")
            emb = torch.zeros(config.num_images, config.appearance_dim,
                              dtype=DTYPE)
            nn.init.normal_(emb, std=0.01, generator=generator)
            self.appearance = nn.Parameter(emb)
        else:
            self.appearance = None

    def density(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.density_mlp(self.grid(x))
        sigma = torch.nn.functional.softplus(out[..., 0])
        return sigma, out[..., 1:]

    def color(self, h: torch.Tensor, d: torch.Tensor, m: torch.Tensor,
              image_idx: torch.Tensor | None = None) -> torch.Tensor:
        parts = [h, spherical_harmonics(d), m.to(DTYPE).unsqueeze(-1)]
        if self.appearance is not None:
            if image_idx is None:
                raise ValueError("appearance embeddings need image_idx")
            emb = self.appearance[image_idx]
            while emb.dim() < h.dim():
                emb = emb.unsqueeze(-2)
            parts.append(emb.expand(*h.shape[:-1], -1))
        return torch.sigmoid(self.color_mlp(torch.cat(parts, dim=-1)))

    def forward(self, x: torch.Tensor, d: torch.Tensor, m: torch.Tensor,
                image_idx: torch.Tensor | None = None):
        sigma, h = self.density(x)
        return sigma, self.color(h, d, m, image_idx)


class DensityField(nn.Module):
    """Density-only field used by the proposal sampler."""

    def __init__(self, config: HashGridConfig, box: Aabb,
                 generator: torch.Generator | None = None,
                 hidden_dim: int = 16):
        super().__init__()
        self.grid = HashGrid(config, box, generator)
        self.mlp = make_mlp(self.grid.output_dim, hidden_dim, 1, 1,
                            generator)

    def density(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.softplus(self.mlp(self.grid(x))[..., 0])

    forward = density


def write_blob(path, header: dict, tensors: dict) -> None:
    """Versioned binary dump: JSON header + named little-endian f64 blobs.

    Layout: magic, u32 version, u64 header length, UTF-8 header JSON,
    then each tensor's raw doubles in the header's `tensors` order.
    """
    path = Path(path)
    arrays = {name: np.ascontiguousarray(
        t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else t,
        dtype="<f8") for name, t in tensors.items()}
    header = dict(header)
    header["tensors"] = [{"name": n, "shape": list(a.shape)}
                         for n, a in arrays.items()]
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(np.uint32(BLOB_VERSION).tobytes())
        f.write(np.uint64(len(blob)).tobytes())
        f.write(blob)
        for entry in header["tensors"]:
            f.write(arrays[entry["name"]].tobytes())


def read_blob(path) -> tuple[dict, dict]:
    """Inverse of write_blob; returns (header, name -> float64 ndarray)."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != BLOB_MAGIC:
            raise ValueError(f"{path} is not a parameter blob "
                             f"(magic {magic!r})")
        version = int(np.frombuffer(f.read(4), "<u4")[0])
        if version != BLOB_VERSION:
            raise ValueError(f"unsupported blob version {version}")
        hlen = int(np.frombuffer(f.read(8), "<u8")[0])
        header = json.loads(f.read(hlen).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), "<f8").reshape(shape)
            tensors[entry["name"]] = data.copy()
    return header, tensors
