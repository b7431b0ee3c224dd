import numpy as np
import pytest

from dnpm.errors import ConfigError
from dnpm.synth import SynthConfig, synth_dataset, wrinkle_field


def field_oracle(p, w_id, w_exp, res):
    """Texel-by-texel re-evaluation of the documented ridge formula."""
    out = np.zeros((res, res))
    for r in range(res):
        for c in range(res):
            u, v = c / (res - 1), 1 - r / (res - 1)
            total = 0.0
            g_th, g_f, g_ph, g_a = p.id_gain
            for k in range(len(p.amp)):
                act = 1 - np.exp(-np.dot(p.exp_weights[k], w_exp))
                th = p.theta[k] + g_th * np.tanh(np.dot(p.id_theta[k], w_id))
                f = p.freq[k] * (1 + g_f * np.tanh(np.dot(p.id_freq[k], w_id)))
                ph = g_ph * np.tanh(np.dot(p.id_phase[k], w_id))
                a = p.amp[k] * (1 + g_a * np.tanh(np.dot(p.id_amp[k], w_id))) * act
                du, dv = u - p.centers[k, 0], v - p.centers[k, 1]
                env = np.exp(-(du * du + dv * dv) / (2 * p.sigma[k] ** 2))
                total += a * env * np.cos(2 * np.pi * f * (du * np.cos(th) + dv * np.sin(th)) + ph)
            out[r, c] = min(1.0, max(-1.0, total))
    return out


def test_same_seed_identical(small_dataset):
    again = synth_dataset(small_dataset.config)
    np.testing.assert_array_equal(again.maps(), small_dataset.maps())
    np.testing.assert_array_equal(again.core.data, small_dataset.core.data)
    other = synth_dataset(SynthConfig(**{**small_dataset.config.__dict__, "seed": 4}))
    assert not np.array_equal(other.maps(), small_dataset.maps())


def test_zero_expression_flat(small_dataset):
    p = small_dataset.wrinkles
    m = wrinkle_field(p, np.random.default_rng(0).normal(size=small_dataset.config.n_id), np.zeros(52), 32)
    assert np.abs(m).max() <= 0.01 * p.amp.max()


def test_maps_match_closed_form(small_dataset):
    cfg = small_dataset.config
    for s in small_dataset.train[:2]:
        np.testing.assert_allclose(s.displacement, field_oracle(small_dataset.wrinkles, s.w_id, s.w_exp, cfg.resolution), atol=1e-12)


def test_dataset_shapes(small_dataset):
    cfg = small_dataset.config
    assert small_dataset.maps().shape == (cfg.n_train, cfg.resolution, cfg.resolution)
    assert small_dataset.maps("test").shape[0] == cfg.n_test
    assert small_dataset.core.n_id == cfg.n_id and small_dataset.core.n_exp == 52
    assert np.abs(small_dataset.maps()).max() <= 1.0
    for s in small_dataset.train:
        assert np.all((s.w_exp >= 0) & (s.w_exp <= 1))


def test_template_normals_face_outward(small_dataset):
    from dnpm.geometry import compute_vertex_normals

    n = compute_vertex_normals(small_dataset.template).normals
    assert np.all(n[:, 2] > 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(frequency=(5, 2))
    with pytest.raises(ConfigError):
        SynthConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        SynthConfig(id_gain=(0.2, 0.1, 0.5))
    cfg = SynthConfig.from_dict(SynthConfig(seed=9).to_dict())
    assert cfg.seed == 9 and cfg.ridge_count == (12, 18) and cfg.id_gain == (0.2, 0.15, 0.5, 0.3)
