# app/photomodel.py
"""
BSE physics: normal -> quadrant intensity, shadow masks, and the classical
four-quadrant photometric-stereo baseline.

Camera/beam frame: beam travels along -z, quadrant A sits at azimuth
``detector_rotation`` (on +x when the rotation is 0), B opposite A, C and D
a quarter turn on. Heights grow toward the detector, so the normal of a
height field z(x, y) is normalize(-dz/dx, -dz/dy, 1).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from scipy import ndimage, optimize, sparse
from scipy.sparse import linalg as splinalg

from app.diffcore import dot, safe_norm
from app.utils import QUADRANTS, ConvergenceError, FacingAwayError, ValidationError

EMISSION_POLY = "poly"
EMISSION_SEC = "sec"
EMISSIONS = (EMISSION_POLY, EMISSION_SEC)

# azimuth of each quadrant relative to quadrant A
QUADRANT_OFFSETS = (0.0, math.pi, 0.5 * math.pi, 1.5 * math.pi)

Quadrant = Union[int, str]


def quadrant_index(q: Quadrant) -> int:
    if isinstance(q, str):
        if q.upper() not in QUADRANTS:
            raise ValidationError(f"unknown quadrant {q!r}")
        return QUADRANTS.index(q.upper())
    if not 0 <= int(q) < 4:
        raise ValidationError(f"quadrant index out of range: {q}")
    return int(q)


def _t(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class ForwardModelParams:
    c: torch.Tensor
    d: torch.Tensor
    e: torch.Tensor
    p: torch.Tensor
    detector_rotation: float = 0.0
    emission: str = EMISSION_POLY

    def __post_init__(self) -> None:
        self.c, self.d, self.e, self.p = (_t(v) for v in (self.c, self.d, self.e, self.p))
        if self.emission not in EMISSIONS:
            raise ValidationError(f"emission must be one of {EMISSIONS}, got {self.emission!r}")
        for name in ("c", "d", "e", "p"):
            if getattr(self, name).shape != (4,):
                raise ValidationError(f"{name} must have 4 entries, got {tuple(getattr(self, name).shape)}")

    def azimuths(self) -> torch.Tensor:
        return self.detector_rotation + torch.tensor(QUADRANT_OFFSETS, dtype=self.c.dtype)

    def detach(self) -> "ForwardModelParams":
        return ForwardModelParams(self.c.detach().clone(), self.d.detach().clone(), self.e.detach().clone(),
                                  self.p.detach().clone(), self.detector_rotation, self.emission)

    def to_dict(self) -> Dict:
        return {
            "c": [float(v) for v in self.c.detach()],
            "d": [float(v) for v in self.d.detach()],
            "e": [float(v) for v in self.e.detach()],
            "p": [float(v) for v in self.p.detach()],
            "detector_rotation": float(self.detector_rotation),
            "emission": self.emission,
        }

    @classmethod
    def from_dict(cls, raw: Dict) -> "ForwardModelParams":
        try:
            return cls(
                c=torch.tensor(raw["c"], dtype=torch.float64),
                d=torch.tensor(raw["d"], dtype=torch.float64),
                e=torch.tensor(raw["e"], dtype=torch.float64),
                p=torch.tensor(raw["p"], dtype=torch.float64),
                detector_rotation=float(raw.get("detector_rotation", 0.0)),
                emission=raw.get("emission", EMISSION_POLY),
            )
        except KeyError as e:
            raise ValidationError(f"forward-model parameters missing field {e}")


@dataclass
class NormalAngles:
    theta: torch.Tensor
    phi: torch.Tensor


# --------------------------
# Angles
# --------------------------
def normal_to_angles(n) -> NormalAngles:
    n = _t(n)
    if bool((n[..., 2] <= 0).any()):
        raise FacingAwayError("normal faces away from the beam (n_z <= 0)")
    theta = torch.acos(n[..., 2].clamp(-1.0, 1.0))
    polar = (n[..., 0] == 0) & (n[..., 1] == 0)
    phi = torch.where(polar, torch.zeros_like(theta), torch.atan2(n[..., 1], n[..., 0]))
    return NormalAngles(theta, phi)


def angles_to_normal(angles: NormalAngles) -> torch.Tensor:
    st = torch.sin(angles.theta)
    return torch.stack([st * torch.cos(angles.phi), st * torch.sin(angles.phi), torch.cos(angles.theta)], -1)


def emission_gain(theta: torch.Tensor, phi_params: ForwardModelParams) -> torch.Tensor:
    if phi_params.emission == EMISSION_SEC:
        return 1.0 / torch.cos(theta)
    p = phi_params.p
    return 1.0 + theta * (p[0] + theta * (p[1] + theta * (p[2] + theta * p[3])))


# --------------------------
# Forward model
# --------------------------
def bse_forward_all(n: torch.Tensor, phi_params: ForwardModelParams) -> torch.Tensor:
    """
    (..., 3) unit front-facing normals -> (..., 4) intensities for A, B, C, D.

    sin(theta) cos(phi_i - phi) is written as n_x cos(phi_i) + n_y sin(phi_i),
    which stays differentiable at theta = 0.
    """
    n = _t(n)
    az = phi_params.azimuths().to(n.dtype)
    nz = n[..., 2:3]
    detector = torch.stack([torch.cos(az), torch.sin(az)], -1)             # (4, 2)
    tilt = dot(n[..., None, 0:2], detector)                                # (..., 4)
    c, d, e = (v.to(n.dtype) for v in (phi_params.c, phi_params.d, phi_params.e))
    if phi_params.emission == EMISSION_SEC:
        return (d * tilt + c * nz) / nz + e
    theta = torch.atan2(safe_norm(n[..., 0:2], keepdim=True), nz)
    return emission_gain(theta, _cast(phi_params, n.dtype)) * (d * tilt + c * nz) + e


def _cast(phi_params: ForwardModelParams, dtype: torch.dtype) -> ForwardModelParams:
    if phi_params.p.dtype == dtype:
        return phi_params
    return ForwardModelParams(phi_params.c.to(dtype), phi_params.d.to(dtype), phi_params.e.to(dtype),
                              phi_params.p.to(dtype), phi_params.detector_rotation, phi_params.emission)


def bse_forward(n, quadrant: Quadrant, phi_params: ForwardModelParams) -> torch.Tensor:
    return bse_forward_all(n, phi_params)[..., quadrant_index(quadrant)]


def bse_forward_angles(theta: torch.Tensor, phi_params: ForwardModelParams) -> torch.Tensor:
    """Each quadrant evaluated at its own azimuth: (T,) thetas -> (T, 4)."""
    theta = _t(theta)
    az = phi_params.azimuths().to(theta.dtype)
    st, ct = torch.sin(theta)[:, None], torch.cos(theta)[:, None]
    n = torch.stack([st * torch.cos(az), st * torch.sin(az), ct.expand(-1, 4)], -1)  # (T, 4, 3)
    full = bse_forward_all(n, phi_params)                                              # (T, 4, 4)
    return torch.diagonal(full, dim1=-2, dim2=-1)


def bse_forward_map(normals: np.ndarray, phi_params: ForwardModelParams) -> np.ndarray:
    """(H, W, 3) numpy normals -> (4, H, W) intensities; NaN where n_z <= 0."""
    n = torch.as_tensor(normals, dtype=torch.float64)
    front = n[..., 2] > 0
    safe = torch.where(front[..., None], n, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))
    with torch.no_grad():
        out = bse_forward_all(safe, _cast(phi_params, torch.float64))
    out = torch.where(front[..., None], out, torch.full_like(out, float("nan")))
    return out.permute(2, 0, 1).numpy()


def shadow_mask(f_pred, b_obs, quadrant: Quadrant, phi_params: ForwardModelParams, alpha: float):
    """1 where |F - b| < alpha * d_i (strict), else 0."""
    if alpha <= 0:
        raise ValidationError(f"alpha must be > 0, got {alpha}")
    d_i = phi_params.d[quadrant_index(quadrant)]
    if isinstance(f_pred, torch.Tensor) or isinstance(b_obs, torch.Tensor):
        resid = (_t(f_pred) - _t(b_obs)).abs()
        return (resid < alpha * d_i.to(resid.dtype)).to(resid.dtype)
    resid = np.abs(np.asarray(f_pred, dtype=np.float64) - np.asarray(b_obs, dtype=np.float64))
    return (resid < alpha * float(d_i)).astype(np.float64)


def regularize_phi(phi_params: ForwardModelParams) -> torch.Tensor:
    v = lambda t: torch.var(t, unbiased=False)
    return v(phi_params.c) + v(phi_params.d) + v(phi_params.e)


def fit_forward_model(normals: np.ndarray, intensities: np.ndarray, init: ForwardModelParams,
                      max_nfev: int = 2000) -> ForwardModelParams:
    """
    Least-squares fit of (c, d, e, p) to observed (normal, 4-quadrant intensity)
    pairs. ``normals`` (K, 3), ``intensities`` (K, 4).
    """
    n = torch.as_tensor(normals, dtype=torch.float64)
    b = torch.as_tensor(intensities, dtype=torch.float64)
    rot, emission = init.detector_rotation, init.emission

    def unpack(x: torch.Tensor) -> ForwardModelParams:
        return ForwardModelParams(x[0:4], x[4:8], x[8:12], x[12:16], rot, emission)

    def resid(x: torch.Tensor) -> torch.Tensor:
        return (bse_forward_all(n, unpack(x)) - b).reshape(-1)

    x0 = torch.cat([init.c, init.d, init.e, init.p]).to(torch.float64).numpy()
    res = optimize.least_squares(
        lambda x: resid(torch.from_numpy(x)).numpy(),
        x0,
        jac=lambda x: torch.autograd.functional.jacobian(
            resid, torch.from_numpy(x), vectorize=True, strategy="forward-mode").numpy(),
        method="trf",
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=max_nfev,
    )
    return unpack(torch.from_numpy(res.x))


# --------------------------
# Photometric-stereo baseline
# --------------------------
def quadrant_ratios(b_a, b_b, b_c, b_d, ratio_dc: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eq-7 ratios in the detector frame -> (raw_x, raw_y, valid)."""
    b_a, b_b, b_c, b_d = (np.asarray(v, dtype=np.float64) for v in (b_a, b_b, b_c, b_d))
    if ratio_dc <= 0:
        raise ValidationError(f"d/c ratio must be > 0, got {ratio_dc}")
    sx, sy = b_a + b_b, b_c + b_d
    valid = (sx > 0) & (sy > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        raw_x = np.where(valid, (b_a - b_b) / np.where(sx > 0, sx, 1.0), 0.0) / ratio_dc
        raw_y = np.where(valid, (b_c - b_d) / np.where(sy > 0, sy, 1.0), 0.0) / ratio_dc
    return raw_x, raw_y, valid


def infill_nearest(values: np.ndarray, valid: np.ndarray) -> np.ndarray:
    if valid.all() or not valid.any():
        return values
    _, (ri, ci) = ndimage.distance_transform_edt(~valid, return_indices=True)
    return values[ri, ci]


def ps_gradients(b_a, b_b, b_c, b_d, ratio_dc: float, detector_rotation: float = 0.0
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Height-gradient maps (dz/dx, dz/dy), dimensionless, in the image frame.

    The Eq-7 ratio pair equals R(-rotation) (n_x/n_z, n_y/n_z); under the
    height convention above that is -grad z, hence the sign flip.
    Pixels with a zero denominator are infilled from their nearest valid
    neighbour and reported in the returned ``valid`` mask.
    """
    raw_x, raw_y, valid = quadrant_ratios(b_a, b_b, b_c, b_d, ratio_dc)
    cr, sr = math.cos(detector_rotation), math.sin(detector_rotation)
    g_x = -(cr * raw_x - sr * raw_y)
    g_y = -(sr * raw_x + cr * raw_y)
    return infill_nearest(g_x, valid), infill_nearest(g_y, valid), valid


def _difference_operator(valid: np.ndarray) -> Tuple[sparse.csr_matrix, np.ndarray, np.ndarray, np.ndarray]:
    h, w = valid.shape
    index = -np.ones((h, w), dtype=np.int64)
    index[valid] = np.arange(int(valid.sum()))
    rows, cols, vals = [], [], []
    edges = []
    m = 0
    for axis in (1, 0):
        a = index[:, :-1] if axis == 1 else index[:-1, :]
        b = index[:, 1:] if axis == 1 else index[1:, :]
        ok = (a >= 0) & (b >= 0)
        ia, ib = a[ok], b[ok]
        k = ia.size
        r = np.arange(m, m + k)
        rows += [r, r]
        cols += [ia, ib]
        vals += [-np.ones(k), np.ones(k)]
        edges.append((axis, ok))
        m += k
    if m == 0:
        return sparse.csr_matrix((0, int(valid.sum()))), index, np.zeros(0), np.zeros(0)
    op = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(m, int(valid.sum())),
    ).tocsr()
    return op, index, edges[0][1], edges[1][1]


def integrate_gradients(g_x: np.ndarray, g_y: np.ndarray, valid: Optional[np.ndarray] = None,
                        spacing: float = 1.0, tol: float = 1e-8, maxiter: Optional[int] = None) -> np.ndarray:
    """
    Global least-squares integration on the pixel grid.

    Each forward-difference edge between two valid pixels is matched to the
    mean of the gradients at its ends; the normal equations are solved with
    conjugate gradients starting from zero, which keeps every connected
    component at zero mean. Invalid pixels come back as NaN.
    """
    g_x = np.asarray(g_x, dtype=np.float64)
    g_y = np.asarray(g_y, dtype=np.float64)
    if g_x.shape != g_y.shape:
        raise ValidationError(f"gradient maps differ in shape: {g_x.shape} vs {g_y.shape}")
    valid = np.ones(g_x.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if valid.shape != g_x.shape:
        raise ValidationError("valid mask shape does not match gradient maps")
    n = int(valid.sum())
    if n == 0:
        raise ValidationError("integrate_gradients needs at least one valid pixel")

    op, index, ok_x, ok_y = _difference_operator(valid)
    z = np.full(g_x.shape, np.nan)
    if op.shape[0] == 0:
        z[valid] = 0.0
        return z

    ex = 0.5 * (g_x[:, :-1] + g_x[:, 1:])[ok_x]
    ey = 0.5 * (g_y[:-1, :] + g_y[1:, :])[ok_y]
    rhs = spacing * np.concatenate([ex, ey])
    normal_mat = (op.T @ op).tocsr()
    b = op.T @ rhs
    limit = maxiter if maxiter is not None else 10 * g_x.size
    sol, info = splinalg.cg(normal_mat, b, x0=np.zeros(n), rtol=tol, atol=0.0, maxiter=limit)
    if info != 0:
        residual = float(np.linalg.norm(normal_mat @ sol - b))
        raise ConvergenceError(
            f"conjugate gradient did not converge in {limit} iterations "
            f"(residual {residual:.3e}, |b| {float(np.linalg.norm(b)):.3e})"
        )
    sol = sol - sol.mean()
    z[valid] = sol
    return z


def ps_reconstruct(view, ratio_dc: float = 1.0, detector_rotation: float = 0.0) -> np.ndarray:
    """
    Height map of one view from its four BSE images, rescaled so its height
    range matches the coarse model's (height = -depth) over the foreground.
    """
    if view.camera.model != "orthographic":
        raise ValidationError("the photometric-stereo baseline needs an orthographic view")
    fg = view.confidence > 0
    if not fg.any():
        raise ValidationError(f"view {view.index} has no foreground pixels")
    b = view.bse.astype(np.float64)
    g_x, g_y, _ = ps_gradients(b[0], b[1], b[2], b[3], ratio_dc, detector_rotation)
    height = integrate_gradients(g_x, g_y, fg, spacing=view.camera.pixel_size)

    coarse_h = -view.depth[fg].astype(np.float64)
    coarse_range = float(coarse_h.max() - coarse_h.min())
    h_fg = height[fg]
    ps_range = float(h_fg.max() - h_fg.min())
    scale = coarse_range / ps_range if ps_range > 1e-12 else 0.0
    out = np.full(height.shape, np.nan)
    out[fg] = (h_fg - h_fg.mean()) * scale + coarse_h.mean()
    return out
