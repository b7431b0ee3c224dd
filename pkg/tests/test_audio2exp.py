import json
import math

import numpy as np
import pytest
import torch

from dnpm.audio2exp import (
    ARKIT_DIM,
    ARKIT_NAMES,
    Audio2ExpDecoder,
    Audio2ExpTrainConfig,
    AudioFeatureSeq,
    Clip,
    DecoderConfig,
    LogMelProvider,
    align_features,
    animate,
    clip_losses,
    decoder_step,
    expression_loss,
    mel_filterbank,
    num_output_frames,
    read_clip_dir,
    rollout,
    sequence_vertices,
    sinusoid_clip,
    train_audio2exp,
    vertex_loss,
    write_clip_dir,
)
from dnpm.errors import ConfigError, EmptyInputError, ShapeError
from dnpm.geometry import bilinear_proxy


def small_decoder(seed=0, audio_dim=6, dtype=torch.float64):
    torch.manual_seed(seed)
    return Audio2ExpDecoder(DecoderConfig(audio_dim=audio_dim, width=16, heads=2, layers=2, ffn=32)).to(dtype).eval()


def random_audio(n=25, dim=6, fps=50.0, seed=0):
    return AudioFeatureSeq(np.random.default_rng(seed).normal(size=(n, dim)), fps)


def test_arkit_layout():
    assert ARKIT_DIM == 52 and len(set(ARKIT_NAMES)) == 52
    assert ARKIT_NAMES[0] == "eyeBlinkLeft" and "jawOpen" in ARKIT_NAMES


def test_frame_count():
    assert num_output_frames(50, 50.0) == 30
    assert num_output_frames(1, 50.0) == 1
    assert num_output_frames(25, 50.0) == 15


def test_align_interpolation_oracle():
    feats = np.arange(10, dtype=float)[:, None] * np.array([[1.0, -2.0]])
    out = align_features(AudioFeatureSeq(feats, 50.0), 6)
    pos = np.arange(6) * 50 / 30
    np.testing.assert_allclose(out, pos[:, None] * np.array([[1.0, -2.0]]), atol=1e-12)
    # past the end clamps to the last raw frame
    short = align_features(AudioFeatureSeq(feats[:2], 50.0), 3)
    np.testing.assert_allclose(short[-1], feats[1])


def test_feature_seq_validation():
    with pytest.raises(ShapeError):
        AudioFeatureSeq(np.zeros(5), 50.0)
    with pytest.raises((ShapeError, EmptyInputError, ConfigError)):
        AudioFeatureSeq(np.zeros((0, 4)), 50.0)


def test_logmel_shapes():
    prov = LogMelProvider()
    seq = prov(np.zeros(16000))
    assert seq.fps == 50.0 and seq.features.shape == (50, 40)
    assert np.isfinite(seq.features).all()
    fb = mel_filterbank(40, 512, 16000)
    assert fb.shape == (40, 257) and (fb >= 0).all()


def test_decoder_determinism_and_range():
    dec, audio = small_decoder(), random_audio()
    a, b = rollout(dec, audio), rollout(dec, audio)
    assert np.array_equal(a, b)
    assert a.shape == (15, 52)
    assert (a >= 0).all() and (a <= 1).all()


def test_rollout_equals_iterated_step():
    dec, audio = small_decoder(), random_audio()
    seq = np.zeros((0, 52))
    for _ in range(num_output_frames(len(audio), audio.fps)):
        seq = np.vstack([seq, decoder_step(dec, seq, audio)])
    assert np.array_equal(rollout(dec, audio), seq)


def test_single_frame():
    dec = small_decoder()
    out = rollout(dec, random_audio(n=1))
    assert out.shape == (1, 52)
    assert np.array_equal(out[0], decoder_step(dec, np.zeros((0, 52)), random_audio(n=1)))


def test_causality_under_future_perturbation():
    dec = small_decoder()
    audio = random_audio(n=40)
    base = rollout(dec, audio)
    n = len(base)
    for t in (0, 3, 10, n - 2):
        cutoff = math.ceil(t * audio.fps / 30.0)
        feats = audio.features.copy()
        feats[cutoff + 1 :] += np.random.default_rng(t).normal(size=feats[cutoff + 1 :].shape) * 5
        pert = rollout(dec, AudioFeatureSeq(feats, audio.fps))
        assert np.array_equal(pert[: t + 1], base[: t + 1])
        if cutoff + 1 < len(feats):
            assert not np.array_equal(pert, base)


def test_teacher_forcing_matches_step():
    # with the ground-truth prefix, the parallel forward equals per-step decoding
    dec = small_decoder()
    audio = random_audio()
    gt = np.random.default_rng(1).uniform(0, 1, size=(15, 52))
    from dnpm.audio2exp import teacher_forced

    par = teacher_forced(dec, Clip(audio, gt)).detach().numpy()
    for t in (0, 5, 14):
        np.testing.assert_allclose(par[t], decoder_step(dec, gt[:t], audio), atol=1e-12)


def test_expression_loss_oracles():
    gt = torch.rand(7, 52, dtype=torch.float64)
    assert expression_loss(gt + 0.1, gt).item() == pytest.approx(0.1 * 7, abs=1e-12)
    assert expression_loss(gt, gt).item() == 0.0


def test_sequence_vertices_matches_proxy(small_dataset):
    core = small_dataset.core
    rng = np.random.default_rng(0)
    w_id = rng.normal(size=core.n_id)
    seq = rng.uniform(0, 1, size=(3, core.n_exp))
    verts = sequence_vertices(core, w_id, torch.tensor(seq))
    for t in range(3):
        np.testing.assert_allclose(verts[t].numpy(), bilinear_proxy(core, w_id, seq[t]).vertices, atol=1e-12)
    assert vertex_loss(verts, verts).item() == 0.0


def toy_clips(n=2):
    rng = np.random.default_rng(0)
    prov = LogMelProvider()
    clips = []
    for _ in range(n):
        s, e = sinusoid_clip(rng, duration=0.5)
        clips.append(Clip(prov(s), e))
    return clips


def test_training_deterministic(tmp_path, small_dataset):
    clips = toy_clips()
    cfg = DecoderConfig(width=16, heads=2, layers=1, ffn=32)
    hyper = Audio2ExpTrainConfig(steps=4, seed=3, checkpoint_every=2)
    for d in ("a", "b"):
        train_audio2exp(clips, small_dataset.core, cfg, hyper, out_dir=tmp_path / d)
    for name in ("audio2exp.bin", "audio2exp_000002.bin", "losses.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert (tmp_path / "a" / "losses.csv").read_text().splitlines()[0] == "step,l_vertex,l_exp"
    with pytest.raises(EmptyInputError):
        train_audio2exp([], None)


def test_training_reduces_loss():
    clips = toy_clips(2)
    res = train_audio2exp(clips, None, DecoderConfig(width=32, heads=2, layers=1, ffn=64),
                          Audio2ExpTrainConfig(steps=60, lr=3e-3, seed=0))
    h = np.array(res.history)
    assert h[-4:, 2].mean() < 0.5 * h[:4, 2].mean()


def test_clip_dir_roundtrip(tmp_path):
    s, e = sinusoid_clip(np.random.default_rng(1), duration=0.3)
    write_clip_dir(tmp_path / "c", s, e)
    clip = read_clip_dir(tmp_path / "c")
    assert clip.expressions.shape == e.shape
    np.testing.assert_allclose(clip.expressions, e, atol=1e-6)
    assert clip.audio.features.shape[1] == 40


def test_serialization(tmp_path):
    dec, audio = small_decoder(), random_audio()
    path = dec.save(tmp_path / "d.bin")
    assert np.array_equal(rollout(Audio2ExpDecoder.load(path), audio), rollout(dec, audio))


class FakeBundle:
    """Stands in for the detailed model: returns the proxy, which animate composes per frame."""

    def __init__(self, core):
        self.core = core

    def generate(self, w_id, w_exp):
        return bilinear_proxy(self.core, w_id, w_exp)


def test_animate_outputs(tmp_path, small_dataset):
    core = small_dataset.core
    dec = small_decoder(audio_dim=6)
    audio = random_audio(n=10)
    w_id = np.zeros(core.n_id)
    meshes = animate(audio, w_id, FakeBundle(core), dec, out_dir=tmp_path)
    track = rollout(dec, audio)
    assert len(meshes) == len(track) == 6
    for m, e in zip(meshes, track):
        np.testing.assert_array_equal(m.vertices, bilinear_proxy(core, w_id, e).vertices)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["frame_count"] == 6 and manifest["fps"] == 30.0
    assert sorted(p.name for p in tmp_path.glob("frame_*.obj")) == manifest["frames"]
    assert (tmp_path / "arkit.csv").read_text().splitlines()[0].split(",")[:2] == list(ARKIT_NAMES[:2])
