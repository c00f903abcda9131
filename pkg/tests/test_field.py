# tests/test_field.py
import math

import pytest
import torch

from app.diffcore import AdamState, ParamLayout, adam_step, forward_backward
from app.field import (FieldSpec, Ray, RayBundle, SdfFieldParams, _corner_index, hash_encode, init_field,
                       intersect_unit_box, new_field_params, register_field, render_ray, render_rays, render_with, sdf,
                       sdf_gradient)
from app.utils import ValidationError


def _f64(spec, seed=0, table_scale=None):
    params = new_field_params(spec, seed=seed, dtype=torch.float64)
    if table_scale is not None:
        g = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            params.hash_tables.uniform_(-table_scale, table_scale, generator=g)
            params.w1.normal_(0.0, 0.3, generator=g)
    return params


def test_default_spec_dimensions():
    spec = FieldSpec()
    assert spec.resolutions()[0] == 16
    assert spec.enc_dim == 32
    assert spec.table_size == 65536


def test_encoding_on_shared_grid_corner_picks_that_corner(tiny_spec):
    params = _f64(tiny_spec, table_scale=1.0)
    x = torch.tensor([[0.5, 0.25, 0.75]], dtype=torch.float64)
    enc = hash_encode(x, params)
    for level, res in enumerate(tiny_spec.resolutions()):
        corner = (x * res).long().reshape(1, 1, 3)
        idx = _corner_index(corner, res, tiny_spec.table_size)
        expected = params.hash_tables[level][idx[0, 0]]
        got = enc[0, level * tiny_spec.n_features:(level + 1) * tiny_spec.n_features]
        assert torch.allclose(got, expected, atol=1e-12)


def test_encoding_is_deterministic(tiny_spec):
    params = _f64(tiny_spec, table_scale=1.0)
    x = torch.rand(32, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    assert torch.equal(hash_encode(x, params), hash_encode(x, params))


def test_encoding_gradient_matches_finite_differences(tiny_spec):
    params = _f64(tiny_spec, table_scale=1.0)
    x = torch.tensor([[0.31, 0.62, 0.47], [0.83, 0.14, 0.58]], dtype=torch.float64)
    w = torch.randn(2, tiny_spec.enc_dim, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
    f = lambda pts: (hash_encode(pts, params) * w).sum()

    xq = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(xq), xq)
    h = 1e-6
    for i in range(2):
        for k in range(3):
            e = torch.zeros_like(x)
            e[i, k] = h
            fd = (f(x + e) - f(x - e)) / (2 * h)
            assert float(grad[i, k]) == pytest.approx(float(fd), rel=1e-5, abs=1e-8)


def test_fresh_field_is_finite_and_bounded(tiny_spec):
    params = new_field_params(tiny_spec, seed=1)
    x = torch.rand(500, 3, generator=torch.Generator().manual_seed(0))
    s = sdf(x, params)
    assert torch.isfinite(s).all()
    assert float(s.abs().max()) < 2.0


def test_sdf_gradient_matches_finite_differences(tiny_spec):
    params = _f64(tiny_spec, table_scale=1.0)
    x = torch.tensor([[0.37, 0.52, 0.61], [0.22, 0.71, 0.44], [0.66, 0.33, 0.28]], dtype=torch.float64)
    _, g = sdf_gradient(x, params, create_graph=False)
    h = 1e-6
    fd = torch.zeros_like(x)
    for k in range(3):
        e = torch.zeros(3, dtype=torch.float64)
        e[k] = h
        fd[:, k] = (sdf(x + e, params) - sdf(x - e, params)) / (2 * h)
    assert float((g - fd).norm() / fd.norm()) < 1e-3


def test_output_weight_scaling_scales_gradient(tiny_spec):
    params = _f64(tiny_spec, table_scale=1.0)
    x = torch.tensor([[0.4, 0.5, 0.6]], dtype=torch.float64)
    _, g1 = sdf_gradient(x, params, create_graph=False)
    with torch.no_grad():
        params.w2.mul_(2.0)
    _, g2 = sdf_gradient(x, params, create_graph=False)
    assert torch.allclose(g2, 2.0 * g1, rtol=1e-12)


def test_ray_validation():
    with pytest.raises(ValidationError, match="unit length"):
        Ray(torch.zeros(3), torch.tensor([0.0, 0.0, 2.0]), 0.0, 1.0)
    with pytest.raises(ValidationError):
        Ray(torch.zeros(3), torch.tensor([0.0, 0.0, -1.0]), 1.0, 1.0)


def test_unit_box_intersection():
    o = torch.tensor([[0.5, 0.5, 2.0], [3.0, 0.5, 2.0]], dtype=torch.float64)
    d = torch.tensor([[0.0, 0.0, -1.0], [0.0, 0.0, -1.0]], dtype=torch.float64)
    near, far, ok = intersect_unit_box(o, d)
    assert ok.tolist() == [True, False]
    assert float(near[0]) == pytest.approx(1.0)
    assert float(far[0]) == pytest.approx(2.0)


def _vertical_ray(x=0.5, y=0.5):
    o = torch.tensor([[x, y, 0.95]], dtype=torch.float64)
    d = torch.tensor([[0.0, 0.0, -1.0]], dtype=torch.float64)
    return RayBundle(o, d, torch.tensor([0.0], dtype=torch.float64), torch.tensor([0.9], dtype=torch.float64))


def test_plane_depth_within_two_sample_intervals():
    def plane(x, create_graph):
        g = torch.zeros_like(x)
        g[:, 2] = 1.0
        return x[:, 2] - 0.25, g

    n = 1024
    out = render_with(plane, torch.tensor(500.0, dtype=torch.float64), _vertical_ray(), n)
    assert bool(out.hit[0])
    assert abs(float(out.depth[0]) - 0.7) < 2 * 0.9 / n
    assert float(out.hit_weight[0]) == pytest.approx(1.0, abs=1e-3)
    assert torch.allclose(out.normal[0], torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))


def test_positive_field_reports_no_hit():
    def empty(x, create_graph):
        return torch.ones(x.shape[0], dtype=x.dtype), torch.zeros_like(x)

    out = render_with(empty, torch.tensor(500.0, dtype=torch.float64), _vertical_ray(), 64)
    assert not bool(out.hit[0])
    assert float(out.hit_weight[0]) == pytest.approx(0.0, abs=1e-12)


def test_rendered_sphere_normal_is_radial():
    c = torch.tensor([0.5, 0.5, 0.5], dtype=torch.float64)

    def sphere(x, create_graph):
        r = x - c
        n = r.norm(dim=-1, keepdim=True)
        return n[:, 0] - 0.3, r / n

    out = render_with(sphere, torch.tensor(500.0, dtype=torch.float64), _vertical_ray(0.55, 0.6), 1024)
    z = 0.5 + math.sqrt(0.09 - 0.05 ** 2 - 0.1 ** 2)
    radial = torch.tensor([0.05, 0.1, z - 0.5], dtype=torch.float64) / 0.3
    angle = math.degrees(math.acos(min(1.0, float(out.normal[0] @ radial))))
    assert angle < 2.0


def test_weights_are_a_sub_probability(tiny_spec):
    params = new_field_params(tiny_spec, seed=2)
    o = torch.rand(8, 3, generator=torch.Generator().manual_seed(1)) * 0.2 + 0.4
    o[:, 2] = 0.99
    d = torch.tensor([[0.0, 0.0, -1.0]]).expand(8, 3).contiguous()
    near, far, _ = intersect_unit_box(o, d)
    out = render_rays(RayBundle(o, d, near, far), params, 64, create_graph=False)
    w = out.samples.weights
    assert (w >= 0).all()
    assert (w.sum(-1) <= 1.0 + 1e-6).all()


def test_render_ray_returns_unit_normal(tiny_spec):
    params = new_field_params(tiny_spec, seed=0)
    ray = Ray(torch.tensor([0.5, 0.5, 0.99]), torch.tensor([0.0, 0.0, -1.0]), 0.0, 0.98)
    depth, normal, weight = render_ray(ray, params, 128)
    assert weight > 0.5
    assert 0.0 < depth < 0.98
    assert float(normal.norm()) == pytest.approx(1.0, abs=1e-5)


def test_too_few_samples_rejected(tiny_spec):
    params = new_field_params(tiny_spec, dtype=torch.float64)
    with pytest.raises(ValidationError):
        render_rays(_vertical_ray(), params, 1)


def test_plane_depth_converges_as_samples_grow():
    def plane(x, create_graph):
        g = torch.zeros_like(x)
        g[:, 2] = 1.0
        return x[:, 2] - 0.25, g

    sharp = torch.tensor(500.0, dtype=torch.float64)
    errors = [abs(float(render_with(plane, sharp, _vertical_ray(), n).depth[0]) - 0.7) for n in (128, 512, 2048)]
    assert errors[1] < errors[0]
    assert errors[2] <= errors[1] + 1e-8
    assert errors[2] < 1e-5


@pytest.mark.slow
def test_field_fitted_to_a_plane_has_vertical_normals():
    spec = FieldSpec(n_levels=4, n_features=2, log2_table_size=12, base_resolution=4, growth=2.0, hidden=32)
    layout = ParamLayout()
    register_field(layout, spec)
    flat = layout.zeros(torch.float64)
    gen = torch.Generator().manual_seed(0)
    init_field(layout, flat, spec, gen)
    state = AdamState.for_params(flat, learning_rate=0.01)

    def graph(leaf, tape):
        x = torch.rand(512, 3, generator=gen, dtype=torch.float64)
        s, g = sdf_gradient(x, SdfFieldParams.from_flat(layout, leaf, spec), create_graph=True)
        fit = tape.record("fit", ((s - (x[:, 2] - 0.5)) ** 2).mean())
        return fit + 0.1 * ((g.norm(dim=-1) - 1.0) ** 2).mean()

    for _ in range(1500):
        _, grads = forward_backward(graph, flat)
        flat = adam_step(state, flat, grads)

    near = torch.rand(2000, 3, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    near[:, :2] = 0.1 + 0.8 * near[:, :2]
    near[:, 2] = 0.45 + 0.1 * near[:, 2]
    _, g = sdf_gradient(near, SdfFieldParams.from_flat(layout, flat, spec), create_graph=False)
    cos = (g[:, 2] / g.norm(dim=-1)).clamp(-1.0, 1.0)
    assert float(torch.rad2deg(torch.arccos(cos)).mean()) < 5.0
