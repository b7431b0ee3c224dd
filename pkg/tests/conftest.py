import numpy as np
import pytest
import torch

from dnpm.generator import Generator, GeneratorConfig
from dnpm.synth import SynthConfig, synth_dataset


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset():
    return synth_dataset(SynthConfig(n_train=16, n_test=4, resolution=32, grid=13, seed=3))


def tiny_generator(res=8, d=8, dtype=torch.float64, seed=0, channels=None):
    torch.manual_seed(seed)
    cfg = GeneratorConfig(out_resolution=res, latent_dim=d, channels=channels or {r: 4 for r in (4, 8, 16, 32, 64)})
    g = Generator(cfg).to(dtype)
    # non-zero noise strengths so noise paths are exercised
    with torch.no_grad():
        for layer in g.layers:
            layer.noise_strength.fill_(0.1)
    return g.eval()


@pytest.fixture
def tiny_gen():
    return tiny_generator()


def planar_grid(n=4):
    """n x n vertex grid on the unit square in z = 0, uvs equal to xy."""
    xs = np.linspace(0, 1, n)
    u, v = np.meshgrid(xs, xs)
    verts = np.stack([u.ravel(), v.ravel(), np.zeros(n * n)], 1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            faces += [[a, a + 1, a + n + 1], [a, a + n + 1, a + n]]
    return verts, np.array(faces), verts[:, :2].copy()
