from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from scenemem import (EngineConfig, RuleReasoner, ScriptedBackend, build_ssm,
                      generate_scene)

settings.register_profile(
    "ci", deadline=None, derandomize=True, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("ci")


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def make_pose(yaw_deg: float = 0.0, position=(0.0, 0.0, 0.0), pitch_deg: float = 0.0):
    """Camera pose: +z optical axis at the given world yaw (0 = +x), x right,
    y down, optionally pitched (positive pitch looks down)."""
    from scenemem import Pose

    yaw = np.radians(yaw_deg)
    pitch = np.radians(pitch_deg)
    fwd = np.array([np.cos(yaw) * np.cos(pitch),
                    np.sin(yaw) * np.cos(pitch),
                    -np.sin(pitch)])
    right = np.array([np.sin(yaw), -np.cos(yaw), 0.0])
    down = np.cross(fwd, right)
    return Pose(np.column_stack([right, down, fwd]), np.asarray(position, float))


@pytest.fixture(scope="session")
def small_scene():
    return generate_scene(2, 3, seed=7)


@pytest.fixture(scope="session")
def small_episode(small_scene):
    return small_scene.episode()


@pytest.fixture(scope="session")
def small_build(small_scene, small_episode):
    """(scene, episode, backend, constructed memory) built once per session.
    Tests must operate on ssm.copy(), never mutate the shared instance."""
    backend = ScriptedBackend(small_scene, reasoner=RuleReasoner())
    ssm = build_ssm(small_episode, backend, EngineConfig())
    return small_scene, small_episode, backend, ssm
