# app/simulator.py
"""
Synthetic 4Q-BSE datasets from analytic scenes.

Per view: sphere-traced ground-truth depth and normals, Monte-Carlo soft
shadows from the four quadrant area lights, noisy shadowed BSE images and a
blurred, noisy coarse depth map with uniform confidence.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from app.photomodel import bse_forward_map, infill_nearest
from app.scenes import SCENE_CENTER, SCENE_EXTENT, Camera, CameraRig, Scene, SdfFn
from app.storage import Dataset, ViewRecord, quantize
from app.utils import ValidationError, log

SIGMA_DEFAULT = 0.9142
TRACE_EPS = 1e-6
TRACE_MAX_STEPS = 512
TRACE_STEP_SCALE = 0.9      # paraboloid cap distance is first-order only
SHADOW_OFFSET = 1e-3
SHADOW_CHUNK = 2048

# quadrant light geometry, in multiples of SCENE_EXTENT
LIGHT_INNER = 2.0
LIGHT_OUTER = 6.0
LIGHT_HEIGHT = 10.0
LIGHT_HALF_ANGLE = math.pi / 4


@dataclass
class SimulateConfig:
    width: int = 128
    height: int = 96
    views: Optional[int] = 9
    every_k: Optional[int] = None
    projection: str = "orthographic"
    pixel_size: Optional[float] = None
    focal: Optional[float] = None
    sigma: float = SIGMA_DEFAULT
    shadows: bool = True
    shadow_samples: int = 64
    blur_radius: float = 3.0
    noise_amp: float = 0.02
    noise_scale: float = 12.0
    confidence: float = 0.2
    scene_scale: float = 100.0
    detector_rotation: float = 0.0
    emission: str = "poly"
    quantize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 2 or self.height < 2:
            raise ValidationError("image size must be at least 2x2")
        if self.sigma < 0 or self.blur_radius < 0 or self.noise_amp < 0:
            raise ValidationError("sigma, blur_radius and noise_amp must be >= 0")
        if self.shadow_samples < 1:
            raise ValidationError("shadow_samples must be >= 1")
        if not 0 < self.confidence <= 1:
            raise ValidationError("confidence must be in (0, 1]")

    def rig(self) -> CameraRig:
        n_views = None if self.every_k is not None else self.views
        return CameraRig(self.width, self.height, self.projection, self.pixel_size, self.focal,
                         every_k=self.every_k, n_views=n_views)


@dataclass
class GroundTruthMaps:
    depth: np.ndarray         # (H, W), NaN on background
    normal: np.ndarray        # (H, W, 3) camera frame, NaN on background
    mask: np.ndarray          # (H, W) bool
    points: np.ndarray        # (H, W, 3) world hit points
    normal_world: np.ndarray  # (H, W, 3)
    shadow: Optional[np.ndarray] = None  # (4, H, W)


# --------------------------
# Sphere tracing
# --------------------------
def _box_span(origins: np.ndarray, dirs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
        t0 = (0.0 - origins) / safe
        t1 = (1.0 - origins) / safe
    near = np.maximum(np.minimum(t0, t1).max(-1), 0.0)
    far = np.maximum(t0, t1).min(-1)
    return near, far


def sphere_trace(sdf: SdfFn, origins: np.ndarray, dirs: np.ndarray, t_start: np.ndarray,
                 t_end: np.ndarray, eps: float = TRACE_EPS,
                 max_steps: int = TRACE_MAX_STEPS) -> Tuple[np.ndarray, np.ndarray]:
    """(N, 3) rays -> (t, hit). Marches from t_start until s < eps or t > t_end."""
    t = t_start.astype(np.float64).copy()
    hit = np.zeros(len(t), dtype=bool)
    active = np.nonzero(t_start < t_end)[0]
    for _ in range(max_steps):
        if active.size == 0:
            break
        s = sdf(origins[active] + t[active, None] * dirs[active])
        done = s < eps
        hit[active[done]] = True
        moving = active[~done]
        t[moving] += TRACE_STEP_SCALE * s[~done]
        active = moving[t[moving] <= t_end[moving]]
    return t, hit


def render_ground_truth(scene: Scene, camera: Camera) -> GroundTruthMaps:
    origins, dirs = camera.rays()
    h, w = origins.shape[:2]
    o, d = origins.reshape(-1, 3), dirs.reshape(-1, 3)
    near, far = _box_span(o, d)
    t, hit = sphere_trace(scene.sdf, o, d, near, far)

    depth = np.full(h * w, np.nan)
    depth[hit] = t[hit]
    points = o + t[:, None] * d
    n_world = np.full((h * w, 3), np.nan)
    n_world[hit] = scene.normals(points[hit])
    n_cam = camera.to_camera(n_world)
    return GroundTruthMaps(
        depth=depth.reshape(h, w),
        normal=n_cam.reshape(h, w, 3),
        mask=hit.reshape(h, w),
        points=points.reshape(h, w, 3),
        normal_world=n_world.reshape(h, w, 3),
    )


# --------------------------
# Shadows
# --------------------------
def _latin_hypercube(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    strata = rng.permuted(np.tile(np.arange(cols), (rows, 1)), axis=1)
    return (strata + rng.random((rows, cols))) / cols


def light_samples(camera: Camera, azimuth: float, rng: np.random.Generator, rows: int,
                  n_samples: int) -> np.ndarray:
    """(rows, S, 3) world points on one quadrant's annular sector above the sample."""
    r_in, r_out = LIGHT_INNER * SCENE_EXTENT, LIGHT_OUTER * SCENE_EXTENT
    r = np.sqrt(r_in ** 2 + _latin_hypercube(rng, rows, n_samples) * (r_out ** 2 - r_in ** 2))
    ang = azimuth + (2.0 * _latin_hypercube(rng, rows, n_samples) - 1.0) * LIGHT_HALF_ANGLE
    local = np.stack([r * np.cos(ang), r * np.sin(ang),
                      np.full_like(r, LIGHT_HEIGHT * SCENE_EXTENT)], -1)
    return SCENE_CENTER + local @ camera.rotation.T


def occluded_fraction(scene: Scene, points: np.ndarray, normals: np.ndarray,
                      lights: np.ndarray) -> np.ndarray:
    """Share of the lights that face each point but are blocked by the scene."""
    to_light = lights - points[:, None, :]
    dist = np.linalg.norm(to_light, axis=-1)
    l = to_light / dist[..., None]
    facing = (l * normals[:, None, :]).sum(-1) > 0

    s = lights.shape[1]
    start = np.repeat(points + SHADOW_OFFSET * normals, s, axis=0)
    dirs = l.reshape(-1, 3)
    _, box_far = _box_span(start, dirs)
    t_end = np.minimum(dist.reshape(-1), box_far)
    trace_rows = np.nonzero(facing.reshape(-1))[0]
    blocked = np.zeros(len(dirs), dtype=bool)
    if trace_rows.size:
        _, hit = sphere_trace(scene.sdf, start[trace_rows], dirs[trace_rows],
                              np.zeros(trace_rows.size), t_end[trace_rows])
        blocked[trace_rows] = hit
    blocked = blocked.reshape(-1, s)
    n_facing = facing.sum(1)
    return np.where(n_facing > 0, blocked.sum(1) / np.maximum(n_facing, 1), 0.0)


def render_shadows(scene: Scene, camera: Camera, gt: GroundTruthMaps, n_samples: int = 64,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """psi (4, H, W) = occluded fraction x shadow-free intensity, 0 off the foreground."""
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = gt.mask.shape
    psi = np.zeros((4, h, w))
    fg = gt.mask
    if not fg.any():
        return psi
    f_free = np.nan_to_num(bse_forward_map(gt.normal, scene.phi_bar), nan=0.0)
    pts, nrm = gt.points[fg], gt.normal_world[fg]
    azimuths = scene.phi_bar.azimuths().numpy()
    for i, az in enumerate(azimuths):
        frac = np.zeros(len(pts))
        for lo in range(0, len(pts), SHADOW_CHUNK):
            hi = min(lo + SHADOW_CHUNK, len(pts))
            lights = light_samples(camera, float(az), rng, hi - lo, n_samples)
            frac[lo:hi] = occluded_fraction(scene, pts[lo:hi], nrm[lo:hi], lights)
        psi[i][fg] = frac * np.maximum(f_free[i][fg], 0.0)
    return psi


# --------------------------
# Images and coarse depth
# --------------------------
def synthesize_bse(gt: GroundTruthMaps, phi_bar, psi: Optional[np.ndarray], sigma: float,
                   rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """b' = F(n; phi_bar) - psi + N(0, sigma^2), clamped to [0, 255]; background e_i + noise."""
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w = gt.mask.shape
    f = bse_forward_map(np.nan_to_num(gt.normal, nan=0.0), phi_bar)
    e = phi_bar.e.numpy()[:, None, None]
    visible = gt.mask[None] & np.isfinite(f)
    clean = np.where(visible, f, np.broadcast_to(e, (4, h, w)))
    if psi is not None:
        clean = clean - np.where(visible, psi, 0.0)
    noise = rng.normal(0.0, sigma, size=(4, h, w)) if sigma > 0 else 0.0
    return np.clip(clean + noise, 0.0, 255.0)


def degrade_depth(depth: np.ndarray, mask: np.ndarray, blur_radius: float = 3.0,
                  noise_amp: float = 0.02, rng: Optional[np.random.Generator] = None,
                  noise_scale: float = 12.0, confidence: float = 0.2) -> Tuple[np.ndarray, np.ndarray]:
    """Blurred depth plus smooth noise scaled to the foreground height range; w = confidence on fg."""
    rng = rng if rng is not None else np.random.default_rng(0)
    z = np.zeros(depth.shape)
    w = np.where(mask, confidence, 0.0)
    if not mask.any():
        return z, w
    filled = infill_nearest(np.where(mask, depth, 0.0), mask)
    if blur_radius > 0:
        filled = ndimage.gaussian_filter(filled, sigma=blur_radius, mode="nearest")
    if noise_amp > 0:
        span = float(depth[mask].max() - depth[mask].min())
        field = ndimage.gaussian_filter(rng.standard_normal(depth.shape), sigma=noise_scale, mode="wrap")
        peak = float(np.abs(field).max())
        if peak > 0 and span > 0:
            filled = filled + noise_amp * span * field / peak
    z[mask] = filled[mask]
    return z, w


def depth_to_normals(depth: np.ndarray, camera: Camera, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Camera-frame normals of a depth map by back-projection; NaN off the mask and on its rim."""
    mask = np.isfinite(depth) if mask is None else (mask & np.isfinite(depth))
    h, w = depth.shape
    out = np.full((h, w, 3), np.nan)
    if not mask.any():
        return out
    d = infill_nearest(np.where(mask, depth, 0.0), mask)
    origins, dirs = camera.rays()
    o_cam, d_cam = camera.to_camera(origins - camera.center), camera.to_camera(dirs)
    p = o_cam + d[..., None] * d_cam
    du = np.gradient(p, axis=1)
    dv = np.gradient(p, axis=0)
    n = np.cross(du, dv)
    flip = (n * d_cam).sum(-1) > 0
    n[flip] *= -1.0
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    interior = ndimage.binary_erosion(mask, structure=np.ones((3, 3)), border_value=0)
    out[interior] = n[interior]
    return out


# --------------------------
# Datasets
# --------------------------
def simulate_view(scene: Scene, camera: Camera, index: int, config: SimulateConfig) -> ViewRecord:
    rng = np.random.default_rng([config.seed, index])
    gt = render_ground_truth(scene, camera)
    psi = render_shadows(scene, camera, gt, config.shadow_samples, rng) if config.shadows else np.zeros((4,) + gt.mask.shape)
    gt.shadow = psi
    bse = synthesize_bse(gt, scene.phi_bar, psi, config.sigma, rng)
    if config.quantize:
        bse = quantize(bse)
    z, w = degrade_depth(gt.depth, gt.mask, config.blur_radius, config.noise_amp, rng,
                         config.noise_scale, config.confidence)
    return ViewRecord(
        index=index,
        camera=camera,
        depth=z.astype(np.float32),
        confidence=w.astype(np.float32),
        bse=bse.astype(np.float32),
        gt_depth=gt.depth.astype(np.float32),
        gt_normal=gt.normal.astype(np.float32),
        gt_shadow=psi.astype(np.float32),
    )


def simulate_dataset(scene: Scene, config: SimulateConfig) -> Dataset:
    rig = config.rig()
    indices = rig.pose_indices()
    views = []
    for index, camera in zip(indices, rig.cameras()):
        views.append(simulate_view(scene, camera, index, config))
        fg = int(views[-1].foreground.sum())
        log(f"view {index}: {fg} foreground px, max shadow {float(views[-1].gt_shadow.max()):.1f}",
            tag="Simulator")
    extra = asdict(config)
    extra["light"] = {"inner": LIGHT_INNER, "outer": LIGHT_OUTER, "height": LIGHT_HEIGHT,
                      "extent": SCENE_EXTENT, "half_angle": LIGHT_HALF_ANGLE}
    return Dataset(
        views=views,
        scene_scale=scene.scene_scale,
        detector_rotation=scene.phi_bar.detector_rotation,
        phi_bar=scene.phi_bar.detach(),
        sigma=config.sigma,
        scene=scene.name,
        extra=extra,
    )
