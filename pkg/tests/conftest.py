# tests/conftest.py
import math

import numpy as np
import pytest
import torch

from app.field import FieldSpec
from app.photomodel import ForwardModelParams
from app.scenes import Camera, make_scene
from app.simulator import SimulateConfig, simulate_dataset
from app.trainer import TrainConfig


def top_camera(width=64, height=48, pixel_size=None) -> Camera:
    """Untilted orthographic view from above the scene centre."""
    pose = np.eye(4)
    pose[:3, 3] = (0.5, 0.5, 2.0)
    return Camera(pose, width, height, "orthographic", pixel_size or 1.25 / width)


def sec_phi(c=30.0, d=25.0, rotation=0.0) -> ForwardModelParams:
    """Quadrant-shared secant model with no offset: the ratio form holds exactly."""
    return ForwardModelParams(
        c=torch.full((4,), c, dtype=torch.float64),
        d=torch.full((4,), d, dtype=torch.float64),
        e=torch.zeros(4, dtype=torch.float64),
        p=torch.zeros(4, dtype=torch.float64),
        detector_rotation=rotation,
        emission="sec",
    )


def random_front_normals(n, max_tilt_deg=60.0, seed=0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    theta = torch.rand(n, generator=g, dtype=torch.float64) * math.radians(max_tilt_deg)
    phi = (torch.rand(n, generator=g, dtype=torch.float64) * 2.0 - 1.0) * math.pi
    return torch.stack([torch.sin(theta) * torch.cos(phi), torch.sin(theta) * torch.sin(phi), torch.cos(theta)], -1)


@pytest.fixture
def tiny_spec() -> FieldSpec:
    return FieldSpec(n_levels=2, n_features=2, log2_table_size=8, base_resolution=4, growth=2.0, hidden=16)


@pytest.fixture
def tiny_train_config(tiny_spec) -> TrainConfig:
    return TrainConfig(t1=2, t2=4, t3=6, rays_per_batch=16, samples_per_ray=16, phi_log_every=2,
                       progress_every=1000, field=tiny_spec)


@pytest.fixture(scope="session")
def sphere_dataset():
    cfg = SimulateConfig(width=24, height=18, views=3, shadow_samples=4)
    return simulate_dataset(make_scene("sphere"), cfg)


@pytest.fixture(scope="session")
def wall_dataset():
    cfg = SimulateConfig(width=32, height=24, views=3, shadow_samples=8)
    return simulate_dataset(make_scene("wall_occluder"), cfg)
