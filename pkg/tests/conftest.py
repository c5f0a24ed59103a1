import numpy as np
import pytest
import torch

from pvp.faceparams import FaceParams
from pvp.genbackend import LatentCode, ToyGenerator, ToyGeneratorSpec, ToyInverter, make_toy_video
from pvp.mappers import make_bundle
from pvp.personalization import PTIConfig, PersonalizedManifold, PivotSet, personalize, select_pivots

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def backend():
    return ToyGenerator(ToyGeneratorSpec())


@pytest.fixture(scope="session")
def tiny_video(backend):
    frames, params = make_toy_video(backend, 60, seed=7)
    return frames, params


@pytest.fixture(scope="session")
def small_manifold(backend, tiny_video):
    """K=6 manifold over a 60-frame toy video; PTI converges immediately."""
    frames, params = tiny_video
    idx = select_pivots(params, 6, seed=0)
    from pvp.faceparams import Image

    targets = [Image(pixels=frames[i]) for i in idx]
    inverter = ToyInverter(backend)
    latents = inverter.invert_batch(targets)
    pivots = PivotSet(frame_indices=tuple(idx), latents=tuple(latents),
                      params=tuple(params[i] for i in idx))
    return personalize(backend, pivots, targets, PTIConfig(max_steps=50, seed=0), beta=0.02)


@pytest.fixture()
def fresh_bundle(small_manifold, tiny_video):
    _, params = tiny_video
    return make_bundle(small_manifold, params)


def rand_latent(rng, scale=0.5):
    return LatentCode(layers=rng.standard_normal((6, 32)) * scale)


def rand_params(rng):
    return FaceParams(
        yaw_deg=float(rng.uniform(-70, 70)),
        pitch_deg=float(rng.uniform(-25, 25)),
        neck_pose=rng.uniform(-0.3, 0.3, 3),
        jaw_pose=rng.uniform(-0.3, 0.3, 3),
        expression=rng.uniform(-1.5, 1.5, 50),
    )
