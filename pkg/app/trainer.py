# app/trainer.py
"""
Three-stage optimisation of the SDF field and the BSE forward model.

  stage 1 (step <= t1)       l1 * depth + l2 * eikonal + l_free * free space
  stage 2 (t1 < step <= t2)  + l3 * BSE(all-ones mask) + l4 * R_phi, phi starts moving
  stage 3 (t2 < step <= t3)  BSE switches to the dynamic shadow mask
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
import torch

from app.diffcore import (AdamState, ParamLayout, Tape, adam_step, forward_backward, normalize, safe_abs,
                          safe_norm)
from app.field import (FieldSpec, RayBundle, RaySample, SdfFieldParams, init_field, intersect_unit_box,
                       register_field, render_rays)
from app.photomodel import (EMISSION_POLY, EMISSION_SEC, ForwardModelParams, bse_forward_all,
                            regularize_phi, shadow_mask)
from app.storage import Dataset, append_jsonl
from app.utils import NonFiniteError, ValidationError, configure_runtime, log, warn

ABLATIONS = ("none", "no_bse_f", "no_poly_r", "no_4q_var", "no_s_mask")
MASK_ALL_ONES = "all_ones"
MASK_DYNAMIC = "dynamic"

PHI_INIT_GAIN = 30.0


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    lambda3: float = 1.0
    lambda4: float = 1.0
    lambda_free: float = 0.5
    t1: int = 1000
    t2: int = 2000
    t3: int = 3000
    alpha: float = 0.25
    rays_per_batch: int = 256
    samples_per_ray: int = 1024
    tilt_cutoff_deg: float = 60.0
    seed: int = 0
    ablation: str = "none"
    learning_rate: float = 0.01
    phi_learning_rate: float = 0.1
    phi_log_every: int = 100
    progress_every: int = 100
    dtype: str = "float32"
    field: FieldSpec = field(default_factory=FieldSpec)

    def __post_init__(self) -> None:
        if not 0 < self.t1 < self.t2 < self.t3:
            raise ValidationError(f"stage boundaries must satisfy 0 < t1 < t2 < t3, got {self.t1}, {self.t2}, {self.t3}")
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda_free"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.alpha <= 0:
            raise ValidationError("alpha must be > 0")
        if self.rays_per_batch < 1 or self.samples_per_ray < 2:
            raise ValidationError("rays_per_batch must be >= 1 and samples_per_ray >= 2")
        if not 0 < self.tilt_cutoff_deg < 90:
            raise ValidationError("tilt_cutoff_deg must be in (0, 90)")
        if self.ablation not in ABLATIONS:
            raise ValidationError(f"unknown ablation {self.ablation!r}; choose one of {', '.join(ABLATIONS)}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["field"] = self.field.to_dict()
        return out


def stage_of(step: int, config: TrainConfig) -> int:
    if step <= config.t1:
        return 1
    if step <= config.t2:
        return 2
    return 3


def mask_mode_of(step: int, config: TrainConfig) -> Optional[str]:
    stage = stage_of(step, config)
    if stage == 1:
        return None
    if stage == 2 or config.ablation == "no_s_mask":
        return MASK_ALL_ONES
    return MASK_DYNAMIC


# --------------------------
# Rays
# --------------------------
@dataclass
class RayBatch:
    view_index: torch.Tensor   # (B,) dataset view ids
    pixel: torch.Tensor        # (B, 2) row, col
    depth: torch.Tensor        # (B,) coarse depth z
    confidence: torch.Tensor   # (B,) w
    bse: torch.Tensor          # (B, 4)
    rays: RayBundle
    rotation: torch.Tensor     # (B, 3, 3) camera-to-world
    foreground: torch.Tensor   # (B,) bool, confidence > 0

    def __len__(self) -> int:
        return len(self.rays)


class RayPool:
    """
    Every pixel of every view whose ray crosses the unit cube, as one flat table.

    Pixels with confidence 0 stay in the pool as background rays: they feed
    the free-space term and the eikonal prior, never the depth or BSE residuals.
    """

    def __init__(self, dataset: Dataset, dtype: torch.dtype = torch.float32) -> None:
        if not dataset.views:
            raise ValidationError("dataset has no views")
        cols = {k: [] for k in ("view", "pixel", "origin", "dir", "depth", "conf", "bse", "rot")}
        for v in dataset.views:
            if v.bse.shape != (4,) + v.depth.shape:
                raise ValidationError(f"view {v.index}: expected 4 BSE images of {v.depth.shape}")
            origins, dirs = v.camera.rays()
            rows, cs = np.indices(v.depth.shape).reshape(2, -1)
            cols["view"].append(np.full(len(rows), v.index))
            cols["pixel"].append(np.stack([rows, cs], -1))
            cols["origin"].append(origins[rows, cs])
            cols["dir"].append(dirs[rows, cs])
            conf = v.confidence[rows, cs]
            cols["depth"].append(np.where(conf > 0, v.depth[rows, cs], 0.0))
            cols["conf"].append(conf)
            cols["bse"].append(v.bse[:, rows, cs].T)
            cols["rot"].append(np.broadcast_to(v.camera.rotation, (len(rows), 3, 3)))
        cat = {k: np.concatenate(val) for k, val in cols.items()}
        t = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=dtype)
        origins, dirs = t(cat["origin"]), t(cat["dir"])
        near, far, ok = intersect_unit_box(origins, dirs)
        keep = torch.nonzero(ok).reshape(-1)
        self.view_index = torch.as_tensor(cat["view"]).long()[keep]
        self.pixel = torch.as_tensor(cat["pixel"]).long()[keep]
        self.origins, self.dirs = origins[keep], dirs[keep]
        self.t_near, self.t_far = near[keep], far[keep]
        self.depth, self.confidence = t(cat["depth"])[keep], t(cat["conf"])[keep]
        self.foreground = self.confidence > 0
        if not bool(self.foreground.any()):
            raise ValidationError("no foreground pixel has a ray through the unit cube")
        self.bse = t(cat["bse"])[keep]
        self.rotation = t(cat["rot"])[keep]

    def __len__(self) -> int:
        return self.origins.shape[0]

    @property
    def n_background(self) -> int:
        return int((~self.foreground).sum())

    def take(self, idx: torch.Tensor) -> RayBatch:
        return RayBatch(
            view_index=self.view_index[idx],
            pixel=self.pixel[idx],
            depth=self.depth[idx],
            confidence=self.confidence[idx],
            bse=self.bse[idx],
            rays=RayBundle(self.origins[idx], self.dirs[idx], self.t_near[idx], self.t_far[idx]),
            rotation=self.rotation[idx],
            foreground=self.foreground[idx],
        )

    def sample(self, generator: torch.Generator, n: int) -> RayBatch:
        return self.take(torch.randint(len(self), (n,), generator=generator))

    def mean_intensity(self) -> torch.Tensor:
        return self.bse[self.foreground].to(torch.float64).mean(0)


def camera_normals(normal_world: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    return torch.einsum("bji,bj->bi", rotation, normal_world)


# --------------------------
# Losses
# --------------------------
def depth_loss(batch: RayBatch, depth_pred: torch.Tensor, hit: torch.Tensor) -> torch.Tensor:
    """(1/M) sum_j w_j |z_hat_j - z_j| over hit foreground rays; M counts those rays only."""
    hit = hit & batch.foreground
    m = hit.sum()
    if int(m) == 0:
        return depth_pred.sum() * 0.0
    diff = torch.where(hit, safe_abs(depth_pred - batch.depth.to(depth_pred.dtype)), torch.zeros_like(depth_pred))
    return (batch.confidence.to(depth_pred.dtype) * diff).sum() / m


def free_space_loss(batch: RayBatch, hit_weight: torch.Tensor, samples: RaySample) -> torch.Tensor:
    """
    Background rays see no surface: mean hit weight plus mean relu(-s) over
    their samples. Zero when the batch holds no background ray.
    """
    bg = ~batch.foreground
    n = int(bg.sum())
    if n == 0:
        return hit_weight.sum() * 0.0
    occupancy = torch.where(bg, hit_weight, torch.zeros_like(hit_weight)).sum() / n
    inside = torch.relu(-samples.sdf) * bg[:, None].to(samples.sdf.dtype)
    return occupancy + inside.sum() / (n * samples.sdf.shape[-1])


def eikonal_loss(samples: RaySample) -> torch.Tensor:
    return ((safe_norm(samples.sdf_gradient) - 1.0) ** 2).mean()


def _supervised(normals_cam: torch.Tensor, hit: torch.Tensor, cutoff_deg: float) -> Tuple[torch.Tensor, torch.Tensor]:
    valid = hit & (normals_cam[:, 2] > math.cos(math.radians(cutoff_deg)))
    up = torch.zeros_like(normals_cam)
    up[:, 2] = 1.0
    return valid, torch.where(valid[:, None], normals_cam, up)


def bse_loss(batch: RayBatch, normals_cam: torch.Tensor, hit: torch.Tensor, phi_params: ForwardModelParams,
             mask_mode: str = MASK_ALL_ONES, alpha: float = 0.25, cutoff_deg: float = 60.0,
             warn_empty: bool = True) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Masked MAE between F(n_hat; phi) and the observed intensities -> (loss, mask).

    Background rays, misses and rays tilted past the cutoff carry a zero mask and leave the
    normaliser; the returned (B, 4) mask is what actually entered the sum.
    """
    if mask_mode not in (MASK_ALL_ONES, MASK_DYNAMIC):
        raise ValidationError(f"unknown mask mode {mask_mode!r}")
    valid, n = _supervised(normals_cam, hit & batch.foreground, cutoff_deg)
    b = batch.bse.to(n.dtype)
    pred = bse_forward_all(n, phi_params)
    if mask_mode == MASK_ALL_ONES:
        s = torch.ones_like(pred)
    else:
        f_now = pred.detach()
        s = torch.stack([shadow_mask(f_now[:, i], b[:, i], i, phi_params, alpha) for i in range(4)], -1)
    s = s * valid[:, None].to(s.dtype)
    m = valid.sum()
    if int(m) == 0:
        return pred.sum() * 0.0, s
    if mask_mode == MASK_DYNAMIC and warn_empty and float(s.sum()) == 0.0:
        warn("bse_loss: dynamic shadow mask excludes every supervised pixel")
    resid = torch.where(s > 0, safe_abs(pred - b), torch.zeros_like(pred))
    return (s * resid).sum() / (4.0 * m), s


def ps_normals(bse: torch.Tensor, ratio_dc: torch.Tensor, detector_rotation: float) -> Tuple[torch.Tensor, torch.Tensor]:
    """Normals from the quadrant ratios with a (learnable) d/c -> ((B, 3), valid)."""
    sx, sy = bse[:, 0] + bse[:, 1], bse[:, 2] + bse[:, 3]
    valid = (sx > 0) & (sy > 0)
    one = torch.ones_like(sx)
    rx = (bse[:, 0] - bse[:, 1]) / torch.where(sx > 0, sx, one) / ratio_dc
    ry = (bse[:, 2] - bse[:, 3]) / torch.where(sy > 0, sy, one) / ratio_dc
    cr, sr = math.cos(detector_rotation), math.sin(detector_rotation)
    return normalize(torch.stack([cr * rx - sr * ry, sr * rx + cr * ry, one], -1)), valid


def ps_normal_loss(batch: RayBatch, normals_cam: torch.Tensor, hit: torch.Tensor, ratio_dc: torch.Tensor,
                   detector_rotation: float = 0.0, cutoff_deg: float = 60.0) -> torch.Tensor:
    """Component MAE between rendered normals and photometric-stereo normals."""
    valid, n = _supervised(normals_cam, hit & batch.foreground, cutoff_deg)
    target, ok = ps_normals(batch.bse.to(n.dtype), ratio_dc, detector_rotation)
    valid = valid & ok
    m = valid.sum()
    if int(m) == 0:
        return n.sum() * 0.0
    err = torch.where(valid[:, None], safe_abs(n - target), torch.zeros_like(n))
    return err.sum() / (3.0 * m)


# --------------------------
# Parameters
# --------------------------
def register_phi(layout: ParamLayout, shared: bool) -> None:
    k = 1 if shared else 4
    layout.register("phi.c", (k,))
    layout.register("phi.log_d", (k,))
    layout.register("phi.e", (k,))
    layout.register("phi.p", (4,))


def phi_from_flat(layout: ParamLayout, flat: torch.Tensor, detector_rotation: float,
                  emission: str) -> ForwardModelParams:
    v = lambda n: layout.view(flat, n)
    return ForwardModelParams(
        c=v("phi.c").expand(4),
        d=torch.exp(v("phi.log_d")).expand(4),
        e=v("phi.e").expand(4),
        p=v("phi.p"),
        detector_rotation=detector_rotation,
        emission=emission,
    )


def init_phi(layout: ParamLayout, flat: torch.Tensor, mean_b: torch.Tensor, ablation: str) -> None:
    """p = 0, c = d = 30, e = mean observed intensity - c; sec form starts with e = 0."""
    with torch.no_grad():
        shared = ablation == "no_4q_var"
        mean_b = mean_b.mean().reshape(1) if shared else mean_b
        layout.view(flat, "phi.log_d").fill_(math.log(PHI_INIT_GAIN))
        layout.view(flat, "phi.p").zero_()
        if ablation == "no_poly_r":
            layout.view(flat, "phi.c").copy_(mean_b)
            layout.view(flat, "phi.e").zero_()
        else:
            layout.view(flat, "phi.c").fill_(PHI_INIT_GAIN)
            layout.view(flat, "phi.e").copy_(mean_b - PHI_INIT_GAIN)


class TrainResult(NamedTuple):
    field: SdfFieldParams
    phi: ForwardModelParams
    logs: List[Dict]


def _trainable(layout: ParamLayout, stage: int, ablation: str, dtype: torch.dtype) -> torch.Tensor:
    m = layout.mask("field.", dtype)
    if stage >= 2:
        if ablation == "no_bse_f":
            m += layout.mask("ps.", dtype)
        else:
            m += layout.mask("phi.c", dtype) + layout.mask("phi.log_d", dtype)
            if ablation != "no_poly_r":
                m += layout.mask("phi.e", dtype) + layout.mask("phi.p", dtype)
    return m


def train(dataset: Dataset, config: TrainConfig, log_path: Optional[str] = None) -> TrainResult:
    """Run t3 steps; returns the field, the forward model and one log record per step."""
    dtype = config.torch_dtype
    gen = configure_runtime(config.seed)
    pool = RayPool(dataset, dtype)
    spec = FieldSpec(**{**config.field.to_dict(), "scene_scale": dataset.scene_scale})
    emission = EMISSION_SEC if config.ablation == "no_poly_r" else EMISSION_POLY
    rotation = dataset.detector_rotation

    layout = ParamLayout()
    register_field(layout, spec)
    register_phi(layout, shared=config.ablation == "no_4q_var")
    if config.ablation == "no_bse_f":
        layout.register("ps.log_ratio", (1,))
    flat = layout.zeros(dtype)
    init_field(layout, flat, spec, gen)
    init_phi(layout, flat, pool.mean_intensity().to(dtype), config.ablation)

    lr = layout.mask("field.", dtype) * config.learning_rate
    lr += (1.0 - layout.mask("field.", dtype)) * config.phi_learning_rate
    if "ps.log_ratio" in layout:
        lr += layout.mask("ps.", dtype) * (config.learning_rate - config.phi_learning_rate)
    state = AdamState.for_params(flat, learning_rate=lr)

    epoch_steps = max(1, math.ceil(len(pool) / config.rays_per_batch))
    empty_run, warned_empty = 0, False
    logs: List[Dict] = []
    log(f"{len(pool)} rays ({pool.n_background} background) from {len(dataset.views)} views, "
        f"{layout.size} parameters, ablation={config.ablation}", tag="Trainer")
    if config.ablation == "no_poly_r":
        log("no_poly_r: secant emission term, phi.e and phi.p frozen at 0", tag="Trainer")
    elif config.ablation == "no_4q_var":
        log("no_4q_var: one c, d, e shared by all quadrants", tag="Trainer")
    elif config.ablation == "no_bse_f":
        log("no_bse_f: BSE loss replaced by photometric-stereo normal loss, phi frozen", tag="Trainer")
    elif config.ablation == "no_s_mask":
        log("no_s_mask: stage 3 keeps the all-ones mask", tag="Trainer")

    for step in range(1, config.t3 + 1):
        stage = stage_of(step, config)
        mode = mask_mode_of(step, config)
        batch = pool.sample(gen, config.rays_per_batch)
        terms: Dict[str, torch.Tensor] = {}
        aux: Dict[str, object] = {}

        def graph(leaf: torch.Tensor, tape: Tape) -> torch.Tensor:
            fp = SdfFieldParams.from_flat(layout, leaf, spec)
            out = render_rays(batch.rays, fp, config.samples_per_ray, generator=gen, create_graph=True)
            tape.record("render.depth", out.depth)
            tape.record("render.normal", out.normal)
            terms["depth"] = tape.record("depth_loss", depth_loss(batch, out.depth, out.hit))
            terms["eikonal"] = tape.record("eikonal_loss", eikonal_loss(out.samples))
            terms["free"] = tape.record("free_space_loss", free_space_loss(batch, out.hit_weight, out.samples))
            total = (config.lambda1 * terms["depth"] + config.lambda2 * terms["eikonal"]
                     + config.lambda_free * terms["free"])
            aux["hit"] = int(out.hit.sum())
            aux["sharpness"] = float(fp.sharpness.detach())
            if stage >= 2:
                n_cam = camera_normals(out.normal, batch.rotation)
                phi = phi_from_flat(layout, leaf, rotation, emission)
                if config.ablation == "no_bse_f":
                    ratio = torch.exp(layout.view(leaf, "ps.log_ratio")[0])
                    terms["bse"] = tape.record("bse_loss", ps_normal_loss(
                        batch, n_cam, out.hit, ratio, rotation, config.tilt_cutoff_deg))
                    aux["mask_fill"] = None
                else:
                    terms["bse"], s = bse_loss(batch, n_cam, out.hit, phi, mode, config.alpha,
                                               config.tilt_cutoff_deg, warn_empty=False)
                    tape.record("bse_loss", terms["bse"])
                    aux["mask_fill"] = float(s.sum()) / float(s.numel())
                terms["phi_reg"] = tape.record("phi_reg", regularize_phi(phi))
                total = total + config.lambda3 * terms["bse"] + config.lambda4 * terms["phi_reg"]
            return tape.record("total", total)

        try:
            loss, grads = forward_backward(graph, flat)
        except NonFiniteError as e:
            raise NonFiniteError(f"step {step} (stage {stage}): {e}") from e
        if not bool(torch.isfinite(grads).all()):
            raise NonFiniteError(f"step {step} (stage {stage}): non-finite gradient")
        flat = adam_step(state, flat, grads * _trainable(layout, stage, config.ablation, dtype))

        weights = {"depth": config.lambda1, "eikonal": config.lambda2, "free": config.lambda_free,
                   "bse": config.lambda3, "phi_reg": config.lambda4}
        record: Dict = {
            "step": step,
            "stage": stage,
            "mask_mode": mode,
            "loss": float(loss),
            "terms": {k: float(v.detach()) for k, v in terms.items()},
            "weighted": {k: weights[k] * float(v.detach()) for k, v in terms.items()},
            "hit_rays": aux["hit"],
            "sharpness": aux["sharpness"],
        }
        if stage >= 2:
            record["mask_fill"] = aux["mask_fill"]
        if step % config.phi_log_every == 0 or step == config.t3:
            record["phi"] = phi_from_flat(layout, flat, rotation, emission).detach().to_dict()
            if "ps.log_ratio" in layout:
                record["ratio_dc"] = float(torch.exp(layout.view(flat, "ps.log_ratio")[0]))
        logs.append(record)
        if log_path:
            append_jsonl(log_path, record)

        if mode == MASK_DYNAMIC and record.get("mask_fill") == 0.0:
            empty_run += 1
            if empty_run >= epoch_steps and not warned_empty:
                warn(f"stage-3 shadow mask was empty for {empty_run} consecutive steps (one epoch)")
                warned_empty = True
        else:
            empty_run = 0

        if step % config.progress_every == 0 or step == config.t3:
            log(f"step {step}/{config.t3} stage {stage} loss {record['loss']:.5f} "
                f"hits {aux['hit']}/{len(batch)} sharpness {aux['sharpness']:.1f}", tag="Trainer")

    field_params = SdfFieldParams.from_flat(layout, flat, spec)
    field_params = SdfFieldParams.from_vector(spec, field_params.to_vector().clone())
    phi_hat = phi_from_flat(layout, flat, rotation, emission).detach()
    return TrainResult(field_params, phi_hat, logs)
