import numpy as np
import pytest

from maskedit.backend import LatentTensor, ToyBackend


class ZeroNoiseBackend(ToyBackend):
    """Noise prediction identically zero; the inversion round trip is exact."""

    def predict_noise(self, z, timestep, cond, hook=None, capture=None, step_index=0):
        return LatentTensor(np.zeros_like(z.data), timestep_tag=timestep), {}


class LinearNoiseBackend(ToyBackend):
    """eps = M z for a fixed small mixing matrix M; a linear ODE to invert."""

    def __init__(self, seed: int = 0):
        super().__init__(seed=seed)
        n = int(np.prod(self.LATENT_SHAPE))
        rng = np.random.default_rng(seed + 1000)
        self.mixing = 0.05 * rng.normal(size=(n, n)) / np.sqrt(n)

    def predict_noise(self, z, timestep, cond, hook=None, capture=None, step_index=0):
        flat = z.data.reshape(-1)
        eps = (self.mixing @ flat).reshape(z.data.shape)
        return LatentTensor(eps, timestep_tag=timestep), {}


class NonFiniteBackend(ToyBackend):
    """Produces NaNs after a couple of calls; exercises inversion failure paths."""

    def __init__(self, seed: int = 0, fail_after: int = 2):
        super().__init__(seed=seed)
        self.calls = 0
        self.fail_after = fail_after

    def predict_noise(self, z, timestep, cond, hook=None, capture=None, step_index=0):
        self.calls += 1
        if self.calls > self.fail_after:
            return LatentTensor(np.full_like(z.data, np.nan), timestep_tag=timestep), {}
        return super().predict_noise(z, timestep, cond, hook, capture, step_index)


@pytest.fixture(scope="session")
def toy_backend():
    return ToyBackend(seed=0)


@pytest.fixture(scope="session")
def test_image():
    rng = np.random.default_rng(11)
    base = rng.uniform(0.2, 0.8, size=(16, 16, 3))
    rr, cc = np.mgrid[0:16, 0:16]
    blob = (rr - 8) ** 2 + (cc - 8) ** 2 <= 9
    base[blob] = [0.9, 0.3, 0.2]
    return base


@pytest.fixture(scope="session")
def blob_source_mask():
    from maskedit.masks import SpatialMask

    rr, cc = np.mgrid[0:16, 0:16]
    return SpatialMask.from_binary((rr - 8) ** 2 + (cc - 8) ** 2 <= 9)
