# app/field.py
"""
Neural SDF: multi-resolution hash grid -> one-hidden-layer ReLU MLP -> s(x).

Scenes live in the unit cube [0,1]^3. ``scene_scale`` converts scene units
to micrometers for reporting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn.functional as F

from app.diffcore import ParamLayout, normalize
from app.utils import NonFiniteError, ValidationError, warn

PRIMES = (1, 2654435761, 805459861)
NO_HIT_WEIGHT = 0.5
MIN_WEIGHT_SUM = 1e-8

CORNER_OFFSETS = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.long
)


@dataclass(frozen=True)
class FieldSpec:
    n_levels: int = 16
    n_features: int = 2
    log2_table_size: int = 16
    base_resolution: int = 16
    growth: float = 1.382
    hidden: int = 64
    init_radius: float = 0.5
    init_sharpness: float = 30.0
    scene_scale: float = 100.0  # micrometers per scene unit

    @property
    def enc_dim(self) -> int:
        return self.n_levels * self.n_features

    @property
    def table_size(self) -> int:
        return 2 ** self.log2_table_size

    def resolutions(self) -> List[int]:
        return [int(math.floor(self.base_resolution * self.growth ** l)) for l in range(self.n_levels)]

    def to_dict(self) -> dict:
        return {
            "n_levels": self.n_levels,
            "n_features": self.n_features,
            "log2_table_size": self.log2_table_size,
            "base_resolution": self.base_resolution,
            "growth": self.growth,
            "hidden": self.hidden,
            "init_radius": self.init_radius,
            "init_sharpness": self.init_sharpness,
            "scene_scale": self.scene_scale,
        }


def register_field(layout: ParamLayout, spec: FieldSpec, prefix: str = "field.") -> None:
    layout.register(prefix + "hash", (spec.n_levels, spec.table_size, spec.n_features))
    layout.register(prefix + "w1", (spec.hidden, spec.enc_dim + 3))
    layout.register(prefix + "b1", (spec.hidden,))
    layout.register(prefix + "w2", (spec.hidden,))
    layout.register(prefix + "b2", (1,))
    layout.register(prefix + "log_sharpness", (1,))


@dataclass
class SdfFieldParams:
    spec: FieldSpec
    hash_tables: torch.Tensor   # (L, T, F)
    w1: torch.Tensor            # (H, enc + 3)
    b1: torch.Tensor            # (H,)
    w2: torch.Tensor            # (H,)
    b2: torch.Tensor            # (1,)
    log_sharpness: torch.Tensor # (1,)
    bounds: Tuple[Tuple[float, ...], Tuple[float, ...]] = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))

    @property
    def sharpness(self) -> torch.Tensor:
        return torch.exp(self.log_sharpness[0])

    @classmethod
    def from_flat(cls, layout: ParamLayout, flat: torch.Tensor, spec: FieldSpec,
                  prefix: str = "field.") -> "SdfFieldParams":
        v = lambda n: layout.view(flat, prefix + n)
        return cls(spec, v("hash"), v("w1"), v("b1"), v("w2"), v("b2"), v("log_sharpness"))

    def to_vector(self) -> torch.Tensor:
        return torch.cat([t.detach().reshape(-1) for t in
                          (self.hash_tables, self.w1, self.b1, self.w2, self.b2, self.log_sharpness)])

    @classmethod
    def from_vector(cls, spec: FieldSpec, vec: torch.Tensor) -> "SdfFieldParams":
        layout = ParamLayout()
        register_field(layout, spec)
        if vec.numel() != layout.size:
            raise ValidationError(f"field vector has {vec.numel()} values, spec needs {layout.size}")
        return cls.from_flat(layout, vec, spec)


def init_field(layout: ParamLayout, flat: torch.Tensor, spec: FieldSpec,
               generator: Optional[torch.Generator] = None, prefix: str = "field.") -> None:
    """Uniform tiny hash features; MLP set up so s(x) ~ |x - c| - init_radius."""
    with torch.no_grad():
        p = SdfFieldParams.from_flat(layout, flat, spec, prefix)
        p.hash_tables.uniform_(-1e-4, 1e-4, generator=generator)
        h = spec.hidden
        p.w1.zero_()
        p.w1[:, spec.enc_dim:].normal_(0.0, math.sqrt(2.0) / math.sqrt(h), generator=generator)
        p.b1.zero_()
        p.w2.normal_(math.sqrt(math.pi) / math.sqrt(h), 1e-4, generator=generator)
        p.b2.fill_(-spec.init_radius)
        p.log_sharpness.fill_(math.log(spec.init_sharpness))


def new_field_params(spec: FieldSpec, seed: int = 0, dtype: torch.dtype = torch.float32) -> SdfFieldParams:
    """Standalone, freshly initialized field (its own flat vector)."""
    layout = ParamLayout()
    register_field(layout, spec)
    flat = layout.zeros(dtype)
    gen = torch.Generator()
    gen.manual_seed(seed)
    init_field(layout, flat, spec, gen)
    return SdfFieldParams.from_flat(layout, flat, spec)


# --------------------------
# Encoding + MLP
# --------------------------
def _corner_index(corners: torch.Tensor, res: int, table_size: int) -> torch.Tensor:
    side = res + 1
    i, j, k = corners[..., 0], corners[..., 1], corners[..., 2]
    if side ** 3 <= table_size:
        return i + j * side + k * side * side
    h = torch.bitwise_xor(torch.bitwise_xor(i * PRIMES[0], j * PRIMES[1]), k * PRIMES[2])
    return torch.remainder(h, table_size)


def hash_encode(x: torch.Tensor, params: SdfFieldParams, warn_outside: bool = True) -> torch.Tensor:
    """(B, 3) points in the unit cube -> (B, L*F) trilinearly interpolated features."""
    if warn_outside:
        outside = (x < 0) | (x > 1)
        if bool(outside.any()):
            warn(f"hash_encode: {int(outside.any(-1).sum())} point(s) outside the unit cube were clamped")
    xc = x.clamp(0.0, 1.0)
    spec = params.spec
    offsets = CORNER_OFFSETS.to(x.device)
    feats = []
    for level, res in enumerate(spec.resolutions()):
        pos = xc * res
        base = torch.floor(pos.detach()).long().clamp(max=res - 1)
        frac = pos - base.to(pos.dtype)                                  # (B, 3)
        corners = base[:, None, :] + offsets[None, :, :]                  # (B, 8, 3)
        idx = _corner_index(corners, res, spec.table_size)                # (B, 8)
        table = params.hash_tables[level]
        corner_feats = table[idx]                                         # (B, 8, F)
        off = offsets.to(frac.dtype)[None]                                # (1, 8, 3)
        w = (off * frac[:, None, :] + (1 - off) * (1 - frac[:, None, :])).prod(-1)  # (B, 8)
        feats.append((w[..., None] * corner_feats).sum(1))
    return torch.cat(feats, dim=-1)


def sdf(x: torch.Tensor, params: SdfFieldParams, warn_outside: bool = True) -> torch.Tensor:
    """(B, 3) -> (B,) signed distances."""
    enc = hash_encode(x, params, warn_outside=warn_outside)
    inp = torch.cat([enc, x - 0.5], dim=-1)
    h = torch.relu(inp @ params.w1.T + params.b1)
    s = h @ params.w2 + params.b2
    if not bool(torch.isfinite(s.detach()).all()):
        raise NonFiniteError("sdf produced a non-finite value")
    return s


SdfQuery = Callable[[torch.Tensor, bool], Tuple[torch.Tensor, torch.Tensor]]


def sdf_gradient(x: torch.Tensor, params: SdfFieldParams, create_graph: bool = True,
                 warn_outside: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Returns (s, grad s). With ``create_graph`` the gradient stays attached to
    the parameters, so losses on normals reach Theta (double backward).
    """
    with torch.enable_grad():
        xq = x.detach().requires_grad_(True)
        s = sdf(xq, params, warn_outside=warn_outside)
        (g,) = torch.autograd.grad(s.sum(), xq, create_graph=create_graph)
    if not create_graph:
        s, g = s.detach(), g.detach()
    return s, g


def field_query(params: SdfFieldParams) -> SdfQuery:
    return lambda x, create_graph: sdf_gradient(x, params, create_graph, warn_outside=False)


# --------------------------
# Rays
# --------------------------
@dataclass
class Ray:
    origin: torch.Tensor
    direction: torch.Tensor
    t_near: float
    t_far: float

    def __post_init__(self) -> None:
        tol = 1e-9 if self.direction.dtype == torch.float64 else 1e-6
        if abs(float(torch.linalg.norm(self.direction)) - 1.0) > tol:
            raise ValidationError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValidationError(f"t_near ({self.t_near}) must be < t_far ({self.t_far})")


@dataclass
class RayBundle:
    origins: torch.Tensor     # (B, 3)
    directions: torch.Tensor  # (B, 3)
    t_near: torch.Tensor      # (B,)
    t_far: torch.Tensor       # (B,)

    def __len__(self) -> int:
        return self.origins.shape[0]

    @classmethod
    def from_ray(cls, ray: Ray) -> "RayBundle":
        dt = ray.origin.dtype
        return cls(ray.origin.reshape(1, 3), ray.direction.reshape(1, 3).to(dt),
                   torch.tensor([ray.t_near], dtype=dt), torch.tensor([ray.t_far], dtype=dt))


def intersect_unit_box(origins: torch.Tensor, directions: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Slab test against [0,1]^3 -> (t_near, t_far, valid)."""
    safe_d = torch.where(directions.abs() < 1e-12, torch.full_like(directions, 1e-12), directions)
    t0 = (0.0 - origins) / safe_d
    t1 = (1.0 - origins) / safe_d
    near = torch.minimum(t0, t1).amax(-1).clamp(min=0.0)
    far = torch.maximum(t0, t1).amin(-1)
    return near, far, far > near


@dataclass
class RaySample:
    positions: torch.Tensor     # (B, N, 3)
    sdf: torch.Tensor           # (B, N)
    sdf_gradient: torch.Tensor  # (B, N, 3)
    weights: torch.Tensor       # (B, N - 1)


@dataclass
class RenderResult:
    depth: torch.Tensor       # (B,)
    normal: torch.Tensor      # (B, 3)
    hit_weight: torch.Tensor  # (B,)
    hit: torch.Tensor         # (B,) bool
    samples: RaySample


def render_with(query: SdfQuery, sharpness: torch.Tensor, rays: RayBundle, n_samples: int,
                generator: Optional[torch.Generator] = None, create_graph: bool = True) -> RenderResult:
    """
    Unbiased, occlusion-aware volume rendering of an arbitrary SDF.

    Stratified samples (jittered when a generator is given, strata centres
    otherwise). Interval k spans samples k and k+1.
    """
    if n_samples < 2:
        raise ValidationError(f"n_samples must be >= 2, got {n_samples}")
    b = len(rays)
    dtype = rays.origins.dtype
    if generator is None:
        jitter = torch.full((b, n_samples), 0.5, dtype=dtype)
    else:
        jitter = torch.rand((b, n_samples), generator=generator, dtype=dtype)
    k = torch.arange(n_samples, dtype=dtype)[None, :]
    span = (rays.t_far - rays.t_near)[:, None]
    t = rays.t_near[:, None] + span * (k + jitter) / n_samples                 # (B, N)

    pos = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    s, g = query(pos.reshape(-1, 3).clamp(0.0, 1.0), create_graph)
    s = s.reshape(b, n_samples)
    g = g.reshape(b, n_samples, 3)

    logc = F.logsigmoid(s * sharpness)
    alpha = (-torch.expm1(logc[:, 1:] - logc[:, :-1])).clamp(min=0.0)       # (B, N-1)
    trans = torch.cumprod(torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], -1), -1)
    w = alpha * trans

    t_mid = 0.5 * (t[:, 1:] + t[:, :-1])
    hit_weight = w.sum(-1)
    depth = (w * t_mid).sum(-1) / hit_weight.clamp(min=MIN_WEIGHT_SUM)
    g_mid = 0.5 * (g[:, 1:] + g[:, :-1])
    normal = normalize((w[..., None] * g_mid).sum(1))
    hit = (hit_weight >= NO_HIT_WEIGHT) & (hit_weight > MIN_WEIGHT_SUM)
    return RenderResult(depth, normal, hit_weight, hit, RaySample(pos, s, g, w))


def render_rays(rays: RayBundle, params: SdfFieldParams, n_samples: int = 1024,
                generator: Optional[torch.Generator] = None, create_graph: bool = True) -> RenderResult:
    return render_with(field_query(params), params.sharpness, rays, n_samples, generator, create_graph)


def render_ray(ray: Ray, params: SdfFieldParams, n_samples: int = 1024) -> Tuple[float, torch.Tensor, float]:
    """Single-ray convenience wrapper -> (depth, unit normal, hit_weight)."""
    out = render_rays(RayBundle.from_ray(ray), params, n_samples, create_graph=False)
    return float(out.depth[0]), out.normal[0].detach(), float(out.hit_weight[0])
