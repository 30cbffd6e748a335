"""Virtual rays and hierarchical proposal sampling.

A refracting ray is reparameterized by cumulative path length ("virtual
ray"): straight from the near plane to the interface at t_I, then bent
along the refracted direction until it exits the scene box.  Samplers and
density fields only ever see scalar t plus a kink correction, so the whole
proposal machinery is medium-agnostic.

Conventions: per ray, sample t values are the left edges of integration
intervals; delta_i = t_{i+1} - t_i with a terminal edge at t_far_virtual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from bathyfield.dataprep import MaskLabel
from bathyfield.field import DTYPE, DensityField, HashGridConfig
from bathyfield.geom import Aabb, Ray, WaterPlane

DEFAULT_NEAR = 0.05


@dataclass(frozen=True)
class ProposalConfig:
    """Hierarchical sampler shape and schedule.

    Desk-scale sample counts by default; `full_scale` restores the
    (256, 96) proposals + 48 NeRF samples.  The schedule fields follow the
    usual proposal-network semantics: update every step until `warmup`,
    then every `update_every` steps; resampling weights are annealed by an
    exponent ramping 0 to 1 over `anneal_max_iters`.
    """

    samples_per_iteration: tuple = (64, 32)
    final_samples: int = 32
    warmup: int = 5000
    update_every: int = 5
    anneal_max_iters: int = 1000
    grid: HashGridConfig = field(default_factory=lambda: HashGridConfig(
        levels=4, base_resolution=16, max_resolution=64,
        features_per_level=2, table_size_log2=13))
    hidden_dim: int = 16
    near: float = DEFAULT_NEAR

    def __post_init__(self):
        if len(self.samples_per_iteration) < 1:
            raise ValueError("need at least one proposal iteration")
        if any(n <= 0 for n in self.samples_per_iteration) \
                or self.final_samples <= 0:
            raise ValueError("sample counts must be positive")

    @property
    def num_iterations(self) -> int:
        return len(self.samples_per_iteration)

    @staticmethod
    def full_scale() -> "ProposalConfig":
        return ProposalConfig(samples_per_iteration=(256, 96),
                              final_samples=48,
                              grid=HashGridConfig(levels=5,
                                                  base_resolution=16,
                                                  max_resolution=128,
                                                  features_per_level=2,
                                                  table_size_log2=17))

    def anneal_exponent(self, step: int) -> float:
        return min(max(step, 0) / max(self.anneal_max_iters, 1), 1.0)

    def update_proposals_at(self, step: int) -> bool:
        return step < self.warmup or step % self.update_every == 0

    def make_proposal_fields(self, box: Aabb,
                             generator: torch.Generator | None = None
                             ) -> list:
        return [DensityField(self.grid, box, generator, self.hidden_dim)
                for _ in range(self.num_iterations)]

    def to_json(self) -> dict:
        return {"samples_per_iteration": list(self.samples_per_iteration),
                "final_samples": self.final_samples,
                "warmup": self.warmup,
                "update_every": self.update_every,
                "anneal_max_iters": self.anneal_max_iters,
                "grid": self.grid.to_json(),
                "hidden_dim": self.hidden_dim,
                "near": self.near}

    @staticmethod
    def from_json(obj: dict) -> "ProposalConfig":
        kw = dict(obj)
        kw["samples_per_iteration"] = tuple(kw["samples_per_iteration"])
        kw["grid"] = HashGridConfig.from_json(kw["grid"])
        return ProposalConfig(**kw)


@dataclass
class VirtualRays:
    """Batch of (possibly refracting) rays parameterized by path length.

    Non-refracting rows carry t_interface = +inf and dirs_water = dirs, so
    every formula below degenerates to the plain straight ray.
    """

    origins: torch.Tensor
    dirs: torch.Tensor
    t_near: torch.Tensor
    t_far: torch.Tensor
    refracts: torch.Tensor
    t_interface: torch.Tensor
    p_interface: torch.Tensor
    dirs_water: torch.Tensor

    def __len__(self) -> int:
        return self.origins.shape[0]

    def positions(self, t: torch.Tensor) -> torch.Tensor:
        """Kinked position map: straight to t_I, refracted beyond."""
        straight = self.origins[:, None, :] \
            + t[..., None] * self.dirs[:, None, :]
        past = (t - self.t_interface[:, None]).clamp(min=0.0)
        bent = self.p_interface[:, None, :] \
            + past[..., None] * self.dirs_water[:, None, :]
        in_water = (t > self.t_interface[:, None]).unsqueeze(-1)
        return torch.where(in_water, bent, straight)

    def directions(self, t: torch.Tensor) -> torch.Tensor:
        in_water = (t > self.t_interface[:, None]).unsqueeze(-1)
        return torch.where(in_water, self.dirs_water[:, None, :],
                           self.dirs[:, None, :])

    def medium(self, t: torch.Tensor) -> torch.Tensor:
        """Per-sample medium flag: 1 strictly past the interface."""
        return (t > self.t_interface[:, None]).to(DTYPE)

    def row(self, i: int) -> "VirtualRays":
        s = slice(i, i + 1)
        return VirtualRays(self.origins[s], self.dirs[s], self.t_near[s],
                           self.t_far[s], self.refracts[s],
                           self.t_interface[s], self.p_interface[s],
                           self.dirs_water[s])


def intersect_rays_aabb(origins: torch.Tensor, dirs: torch.Tensor,
                        box: Aabb) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched slab test; returns unclipped (t_enter, t_exit)."""
    bmin = torch.as_tensor(box.min, dtype=DTYPE)
    bmax = torch.as_tensor(box.max, dtype=DTYPE)
    safe = torch.where(dirs.abs() < 1e-300,
                       torch.full_like(dirs, 1e-300), dirs)
    t1 = (bmin - origins) / safe
    t2 = (bmax - origins) / safe
    lo = torch.minimum(t1, t2)
    hi = torch.maximum(t1, t2)
    parallel = dirs.abs() < 1e-300
    inside = (origins >= bmin) & (origins <= bmax)
    lo = torch.where(parallel, torch.where(inside, -np.inf, np.inf), lo)
    hi = torch.where(parallel, torch.where(inside, np.inf, -np.inf), hi)
    return lo.amax(dim=-1), hi.amin(dim=-1)


def refract_dirs(dirs: torch.Tensor, normal, n_from: float,
                 n_to: float) -> torch.Tensor:
    """Batched Snell refraction; the normal is re-oriented per ray.

    Callers guarantee transmissibility (air-to-water always transmits).
    """
    n = torch.as_tensor(normal, dtype=DTYPE).expand_as(dirs)
    cos_i = -(n * dirs).sum(dim=-1)
    n = torch.where((cos_i < 0.0)[:, None], -n, n)
    cos_i = cos_i.abs()
    eta = n_from / n_to
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    out = eta * dirs + (eta * cos_i - k.clamp(min=0.0).sqrt())[:, None] * n
    return out / out.norm(dim=-1, keepdim=True)


def build_virtual_rays(origins, dirs, labels, plane: WaterPlane, box: Aabb,
                       refraction_enabled: bool = True,
                       near: float = DEFAULT_NEAR) -> VirtualRays:
    """Vectorized virtual-ray construction.

    A ray refracts iff its pixel is labeled WATER and it crosses the plane
    inside its box-collided [near, far] range; otherwise it is rendered as
    a single-medium air ray.  With refraction disabled the geometry is
    kept straight (dirs_water = dirs) while the medium flags still switch
    at the interface, which is exactly the ablation variant.
    """
    if not torch.is_tensor(origins):
        origins = torch.as_tensor(np.asarray(origins), dtype=DTYPE)
    if not torch.is_tensor(dirs):
        dirs = torch.as_tensor(np.asarray(dirs), dtype=DTYPE)
    origins, dirs = origins.to(DTYPE), dirs.to(DTYPE)
    if torch.is_tensor(labels):
        labels = labels.long()
    else:
        labels = torch.as_tensor(np.asarray(labels)).long()
    n_rays = origins.shape[0]

    t0, t1 = intersect_rays_aabb(origins, dirs, box)
    t_near = t0.clamp(min=near)
    t_far_straight = torch.maximum(t1, t_near)
    misses = t1 < t_near  # degenerate: zero-length interval
    t_far_straight = torch.where(misses, t_near, t_far_straight)

    normal = torch.as_tensor(plane.normal, dtype=DTYPE)
    denom = dirs @ normal
    safe_denom = torch.where(denom.abs() < 1e-12,
                             torch.full_like(denom, 1e-12), denom)
    t_plane = (plane.intercept - origins @ normal) / safe_denom
    crosses = (denom.abs() >= 1e-12) & (t_plane > t_near) \
        & (t_plane < t_far_straight)
    refracts = crosses & (labels == int(MaskLabel.WATER))

    t_interface = torch.where(refracts, t_plane,
                              torch.full_like(t_plane, np.inf))
    p_interface = origins + torch.where(refracts, t_plane,
                                        torch.zeros_like(t_plane))[:, None] \
        * dirs
    if refraction_enabled:
        d_w = refract_dirs(dirs, plane.normal, plane.n_air, plane.n_water)
    else:
        d_w = dirs
    dirs_water = torch.where(refracts[:, None], d_w, dirs)

    # refracted segment runs until the bent ray leaves the box
    _, exit_w = intersect_rays_aabb(p_interface, dirs_water, box)
    exit_w = exit_w.clamp(min=0.0)
    t_far = torch.where(refracts, t_interface + exit_w, t_far_straight)

    assert origins.shape == dirs.shape == (n_rays, 3)
    return VirtualRays(origins, dirs, t_near, t_far, refracts, t_interface,
                       p_interface, dirs_water)


def build_virtual_ray(ray: Ray, plane: WaterPlane, mask_label, box: Aabb,
                      refraction_enabled: bool = True) -> VirtualRays:
    """Single-ray wrapper; expects a ray already collided with the box."""
    return build_virtual_rays(ray.origin[None], ray.direction[None],
                              np.array([int(mask_label)]), plane, box,
                              refraction_enabled, near=ray.t_near)


def kinked_density(t: torch.Tensor, vrays: VirtualRays,
                   density_fn) -> torch.Tensor:
    """Evaluate a density field along virtual rays.

    The caller perceives a standard single-medium ray; the kink correction
    happens entirely inside the position map.
    """
    return density_fn(vrays.positions(t))


def sample_uniform(vrays: VirtualRays, n: int,
                   jitter: torch.Tensor | None = None) -> torch.Tensor:
    """Stratified samples over [t_near, t_far]: midpoints, or jittered
    uniformly within each stratum when `jitter` (N, n) in [0,1) is given."""
    device_kw = {"dtype": DTYPE}
    k = torch.arange(n, **device_kw)
    u = 0.5 * torch.ones(len(vrays), n, **device_kw) if jitter is None \
        else jitter.to(DTYPE)
    frac = (k + u) / n
    span = (vrays.t_far - vrays.t_near)[:, None]
    return vrays.t_near[:, None] + frac * span


def sample_pdf(edges: torch.Tensor, weights: torch.Tensor, n: int,
               jitter: torch.Tensor | None = None) -> torch.Tensor:
    """Inverse-CDF samples of a per-ray weight histogram.

    edges: (N, B+1) sorted; weights: (N, B) nonnegative.  Quantiles are
    stratified midpoints (k+0.5)/n, or (k+u)/n when jittered.  Rays whose
    weights sum to ~zero fall back to a uniform histogram.

    Returns:
        (N, n) sorted sample positions.
    """
    weights = weights.clamp(min=0.0)
    total = weights.sum(dim=-1, keepdim=True)
    weights = torch.where(total < 1e-12, torch.ones_like(weights), weights)
    total = weights.sum(dim=-1, keepdim=True)
    pdf = weights / total
    cdf = torch.cumsum(pdf, dim=-1)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]),
                     cdf[..., :-1], torch.ones_like(pdf[..., :1])], dim=-1)

    k = torch.arange(n, dtype=DTYPE)
    u = 0.5 * torch.ones(weights.shape[0], n, dtype=DTYPE) if jitter is None \
        else jitter.to(DTYPE)
    q = ((k + u) / n).clamp(0.0, 1.0 - 1e-12)

    idx = torch.searchsorted(cdf, q, right=True) - 1
    idx = idx.clamp(0, weights.shape[-1] - 1)
    cdf_lo = torch.gather(cdf, -1, idx)
    cdf_hi = torch.gather(cdf, -1, idx + 1)
    e_lo = torch.gather(edges, -1, idx)
    e_hi = torch.gather(edges, -1, idx + 1)
    span = (cdf_hi - cdf_lo).clamp(min=1e-300)
    t = e_lo + (q - cdf_lo) / span * (e_hi - e_lo)
    # guard monotonicity against roundoff in ultra-narrow bins
    return torch.cummax(t, dim=-1).values


def alpha_weights(sigma: torch.Tensor, delta: torch.Tensor
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """Compositing chain: alpha_i = 1-exp(-sigma_i delta_i), T_1 = 1,
    T_i = T_{i-1}(1 - alpha_{i-1}), w_i = T_i alpha_i.

    Returns:
        (weights, transmittance), both shaped like sigma.
    """
    alpha = 1.0 - torch.exp(-sigma * delta)
    one_minus = (1.0 - alpha).clamp(min=0.0)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), one_minus[..., :-1]],
                  dim=-1), dim=-1)
    return trans * alpha, trans


@dataclass
class SampleBatch:
    """Final per-ray samples ready for compositing."""

    t: torch.Tensor           # (N, S) sorted sample positions
    edges: torch.Tensor       # (N, S+1): t plus the terminal far edge
    delta: torch.Tensor       # (N, S) interval widths (edge diffs)
    positions: torch.Tensor   # (N, S, 3) kink-corrected
    directions: torch.Tensor  # (N, S, 3) d or d_w per sample
    medium: torch.Tensor      # (N, S) flags in {0, 1}
    t_near: torch.Tensor      # (N,) virtual ray span, for s normalization
    t_far: torch.Tensor       # (N,)


def _as_density_fn(field_obj):
    return field_obj.density if hasattr(field_obj, "density") else field_obj


def make_sample_batch(vrays: VirtualRays, t: torch.Tensor) -> SampleBatch:
    edges = torch.cat([t, vrays.t_far[:, None]], dim=-1)
    delta = (edges[..., 1:] - edges[..., :-1]).clamp(min=0.0)
    return SampleBatch(t=t, edges=edges, delta=delta,
                       positions=vrays.positions(t),
                       directions=vrays.directions(t),
                       medium=vrays.medium(t),
                       t_near=vrays.t_near, t_far=vrays.t_far)


def hierarchical_sample(vrays: VirtualRays, proposal_fields: list,
                        config: ProposalConfig, anneal: float = 1.0,
                        jitter_key: tuple | None = None
                        ) -> tuple[SampleBatch, list]:
    """Proposal-network sampling along virtual rays.

    Each proposal level evaluates its (kink-wrapped) density on the
    current samples, converts to compositing weights, and inverse-CDF
    resamples the next level from the annealed, detached weights.  The
    per-level (edges, weights) pairs are retained for the interlevel loss.

    jitter_key = (seed, step) enables counter-based stratified jitter that
    is reproducible per (ray index, step, level); None means midpoints.
    """
    if len(proposal_fields) != config.num_iterations:
        raise ValueError("one proposal field per iteration required")

    def jitter(level: int, n: int):
        if jitter_key is None:
            return None
        seed, step = jitter_key
        g = np.random.Generator(np.random.Philox(
            key=[int(seed), (int(step) << 4) | int(level)]))
        return torch.as_tensor(g.random((len(vrays), n)), dtype=DTYPE)

    n0 = config.samples_per_iteration[0]
    t = sample_uniform(vrays, n0, jitter(0, n0))
    retained = []
    for lvl, field_obj in enumerate(proposal_fields):
        edges = torch.cat([t, vrays.t_far[:, None]], dim=-1)
        delta = (edges[..., 1:] - edges[..., :-1]).clamp(min=0.0)
        sigma = kinked_density(t, vrays, _as_density_fn(field_obj))
        weights, _ = alpha_weights(sigma, delta)
        retained.append((edges, weights))
        n_next = (config.samples_per_iteration[lvl + 1]
                  if lvl + 1 < config.num_iterations
                  else config.final_samples)
        resample_w = weights.detach() ** anneal
        t = sample_pdf(edges.detach(), resample_w, n_next,
                       jitter(lvl + 1, n_next))
    return make_sample_batch(vrays, t), retained
