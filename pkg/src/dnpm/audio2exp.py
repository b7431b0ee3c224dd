"""Speech -> ARKit expression tracks, and the animation driver on top of Detailed3DMM.

Alignment: audio features at ``fps_audio`` are linearly interpolated to the
output rate. Output frame ``t`` sits at raw position ``p_t = t * fps_audio /
fps_out`` and reads raw frames ``floor(p_t)`` and, when ``p_t`` is fractional,
``floor(p_t) + 1``. Through causal cross-attention, the prediction for frame
``t`` therefore depends only on raw audio frames ``<= ceil(p_t)``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, load_state, save_checkpoint, state_to_tensors
from .errors import ConfigError, EmptyInputError, RangeError, ShapeError, TrainingDivergedError
from .generator import write_loss_csv
from .geometry import CoreTensor, Mesh

logger = logging.getLogger(__name__)

# standard ARKit blendshape order
ARKIT_NAMES = (
    "eyeBlinkLeft", "eyeLookDownLeft", "eyeLookInLeft", "eyeLookOutLeft", "eyeLookUpLeft",
    "eyeSquintLeft", "eyeWideLeft", "eyeBlinkRight", "eyeLookDownRight", "eyeLookInRight",
    "eyeLookOutRight", "eyeLookUpRight", "eyeSquintRight", "eyeWideRight", "jawForward",
    "jawLeft", "jawRight", "jawOpen", "mouthClose", "mouthFunnel", "mouthPucker", "mouthLeft",
    "mouthRight", "mouthSmileLeft", "mouthSmileRight", "mouthFrownLeft", "mouthFrownRight",
    "mouthDimpleLeft", "mouthDimpleRight", "mouthStretchLeft", "mouthStretchRight",
    "mouthRollLower", "mouthRollUpper", "mouthShrugLower", "mouthShrugUpper", "mouthPressLeft",
    "mouthPressRight", "mouthLowerDownLeft", "mouthLowerDownRight", "mouthUpperUpLeft",
    "mouthUpperUpRight", "browDownLeft", "browDownRight", "browInnerUp", "browOuterUpLeft",
    "browOuterUpRight", "cheekPuff", "cheekSquintLeft", "cheekSquintRight", "noseSneerLeft",
    "noseSneerRight", "tongueOut",
)
ARKIT_DIM = len(ARKIT_NAMES)

SAMPLE_RATE = 16000
HOP = 320
FPS_OUT = 30.0


@dataclass
class AudioFeatureSeq:
    features: np.ndarray  # (T_a, d_a)
    fps: float

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("audio features must be (T_a, d_a)")
        if len(self.features) < 1:
            raise EmptyInputError("audio needs at least one feature frame")
        if not np.all(np.isfinite(self.features)):
            raise RangeError("audio features must be finite")
        if self.fps <= 0:
            raise ConfigError("audio fps must be positive")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


class AudioFeatureProvider(Protocol):
    def __call__(self, samples: np.ndarray, sample_rate: int) -> AudioFeatureSeq: ...


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 20.0, fmax: Optional[float] = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, (n_mels, n_fft // 2 + 1)."""
    fmax = fmax or sample_rate / 2
    mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
    inv = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    edges = inv(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    fb = np.zeros((n_mels, len(freqs)))
    for i in range(n_mels):
        lo, mid, hi = edges[i : i + 3]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


@dataclass
class LogMelProvider:
    """Desk-scale speech features: log mel energies, one frame per ``hop`` samples."""

    sample_rate: int = SAMPLE_RATE
    hop: int = HOP
    n_fft: int = 512
    n_mels: int = 40

    @property
    def fps(self) -> float:
        return self.sample_rate / self.hop

    def __call__(self, samples, sample_rate: int = SAMPLE_RATE) -> AudioFeatureSeq:
        if sample_rate != self.sample_rate:
            raise ConfigError(f"expected {self.sample_rate} Hz audio, got {sample_rate}")
        x = np.asarray(samples, dtype=np.float64).ravel()
        if len(x) == 0:
            raise EmptyInputError("empty audio")
        n_frames = max(1, math.ceil(len(x) / self.hop))
        half = self.n_fft // 2
        padded = np.pad(x, (half, half + n_frames * self.hop))
        idx = np.arange(n_frames)[:, None] * self.hop + np.arange(self.n_fft)[None]
        frames = padded[idx] * np.hanning(self.n_fft)
        power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
        fb = mel_filterbank(self.n_mels, self.n_fft, self.sample_rate)
        return AudioFeatureSeq(np.log(power @ fb.T + 1e-6), self.fps)


def num_output_frames(n_audio: int, fps_audio: float, fps_out: float = FPS_OUT) -> int:
    return max(1, int(round(n_audio * fps_out / fps_audio)))


def align_features(audio: AudioFeatureSeq, n_frames: int, fps_out: float = FPS_OUT) -> np.ndarray:
    """Linear interpolation of raw feature frames to ``n_frames`` output frames.

    Positions past the end of the audio clamp to the last raw frame.
    """
    feats = audio.features
    last = len(feats) - 1
    out = np.empty((n_frames, feats.shape[1]))
    for j in range(n_frames):
        p = min(j * audio.fps / fps_out, float(last))
        lo = int(math.floor(p))
        frac = p - lo
        out[j] = feats[lo] if frac == 0.0 else (1.0 - frac) * feats[lo] + frac * feats[lo + 1]
    return out


def sinusoid_table(n: int, width: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    i = torch.arange(0, width, 2, dtype=torch.float64)
    ang = pos / torch.pow(10000.0, i / width)
    table = torch.zeros(n, width, dtype=torch.float64)
    table[:, 0::2] = torch.sin(ang)
    table[:, 1::2] = torch.cos(ang[:, : width // 2])
    return table


@dataclass
class DecoderConfig:
    audio_dim: int = 40
    exp_dim: int = ARKIT_DIM
    width: int = 64
    heads: int = 4
    layers: int = 2
    ffn: int = 128
    max_len: int = 1200
    fps_out: float = FPS_OUT

    def __post_init__(self):
        if self.width % self.heads or self.width % 2:
            raise ConfigError("width must be even and divisible by heads")
        if min(self.audio_dim, self.exp_dim, self.layers, self.ffn, self.max_len) < 1:
            raise ConfigError("decoder sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown DecoderConfig keys: {sorted(unknown)}")
        return cls(**d)


class DecoderBlock(nn.Module):
    """Pre-norm: causal self-attention, cross-attention to aligned audio, feed-forward."""

    def __init__(self, width: int, heads: int, ffn: int):
        super().__init__()
        self.n1, self.n2, self.n3 = nn.LayerNorm(width), nn.LayerNorm(width), nn.LayerNorm(width)
        self.self_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.cross_attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.ff = nn.Sequential(nn.Linear(width, ffn), nn.GELU(), nn.Linear(ffn, width))

    def forward(self, x, memory, mask):
        h = self.n1(x)
        x = x + self.self_attn(h, h, h, attn_mask=mask, need_weights=False)[0]
        # query t sees aligned audio 0..t only
        x = x + self.cross_attn(self.n2(x), memory, memory, attn_mask=mask, need_weights=False)[0]
        return x + self.ff(self.n3(x))


class Audio2ExpDecoder(nn.Module):
    def __init__(self, config: DecoderConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.audio_proj = nn.Linear(config.audio_dim, w)
        self.exp_embed = nn.Linear(config.exp_dim, w)
        self.start = nn.Parameter(torch.zeros(w))
        self.register_buffer("pos", sinusoid_table(config.max_len, w).float(), persistent=False)
        self.blocks = nn.ModuleList(DecoderBlock(w, config.heads, config.ffn) for _ in range(config.layers))
        self.norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, config.exp_dim)

    def forward(self, aligned: torch.Tensor, previous: torch.Tensor) -> torch.Tensor:
        """Teacher-forced pass.

        ``aligned`` (B, T, d_a) output-rate audio; ``previous`` (B, T-1, 52) the
        expressions fed back at steps 1..T-1. Returns (B, T, 52) in [0, 1].
        """
        b, t, _ = aligned.shape
        if t > self.config.max_len:
            raise ShapeError(f"sequence of {t} frames exceeds max_len {self.config.max_len}")
        if previous.shape[1] != t - 1:
            raise ShapeError("previous must hold exactly one frame fewer than aligned")
        pos = self.pos[:t].to(aligned.dtype)
        start = self.start.to(aligned.dtype).expand(b, 1, -1)
        x = torch.cat([start, self.exp_embed(previous)], dim=1) + pos
        memory = self.audio_proj(aligned) + pos
        mask = torch.triu(torch.full((t, t), float("-inf"), dtype=aligned.dtype), diagonal=1)
        for block in self.blocks:
            x = block(x, memory, mask)
        return torch.sigmoid(self.head(self.norm(x)))

    def save(self, path, step: int = 0, seed=None) -> Path:
        return save_checkpoint(path, state_to_tensors(self), kind="audio2exp", config=self.config.to_dict(), step=step, seed=seed)

    @classmethod
    def load(cls, path) -> "Audio2ExpDecoder":
        tensors, meta = load_checkpoint(path, kind="audio2exp")
        net = cls(DecoderConfig.from_dict(meta["config"]))
        load_state(net, tensors)
        return net.eval()


def _check_audio(decoder: Audio2ExpDecoder, audio: AudioFeatureSeq):
    if audio.dim != decoder.config.audio_dim:
        raise ShapeError(f"decoder expects {decoder.config.audio_dim}-dim audio features, got {audio.dim}")


def decoder_step(decoder: Audio2ExpDecoder, past, audio: AudioFeatureSeq) -> np.ndarray:
    """Next-frame expression given the ``past`` (t, 52) prefix; only audio up to frame t is read."""
    _check_audio(decoder, audio)
    past = np.asarray(past, dtype=np.float64).reshape(-1, decoder.config.exp_dim) if np.size(past) else np.zeros((0, decoder.config.exp_dim))
    if np.ndim(past) != 2:
        raise ShapeError("past must be (t, 52)")
    t = len(past)
    dtype = decoder.head.weight.dtype
    aligned = torch.as_tensor(align_features(audio, t + 1, decoder.config.fps_out), dtype=dtype)[None]
    with torch.no_grad():
        out = decoder(aligned, torch.as_tensor(past, dtype=dtype)[None])
    return out[0, -1].double().numpy()


def rollout(decoder: Audio2ExpDecoder, audio: AudioFeatureSeq) -> np.ndarray:
    """Autoregressive generation of ``round(T_a * fps_out / fps_audio)`` frames."""
    _check_audio(decoder, audio)
    n = num_output_frames(len(audio), audio.fps, decoder.config.fps_out)
    seq = np.zeros((0, decoder.config.exp_dim))
    for _ in range(n):
        seq = np.vstack([seq, decoder_step(decoder, seq, audio)[None]])
    return seq


# ------------------------------------------------------------------ losses


def expression_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Sum over frames of the per-frame mean absolute error."""
    return (pred - gt).abs().mean(dim=-1).sum(dim=-1)


def sequence_vertices(core: CoreTensor, w_id, exp_seq: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear contraction for a (T, n_exp) track; returns (T, V, 3)."""
    data = torch.as_tensor(core.data, dtype=exp_seq.dtype)
    wid = torch.as_tensor(np.asarray(w_id), dtype=exp_seq.dtype)
    if core.affine:
        wid = torch.cat([torch.ones(1, dtype=wid.dtype), wid])
        exp_seq = torch.cat([torch.ones(exp_seq.shape[:-1] + (1,), dtype=exp_seq.dtype), exp_seq], dim=-1)
    per_exp = torch.einsum("iek,i->ek", data, wid)
    return (exp_seq @ per_exp).reshape(exp_seq.shape[0], -1, 3)


def vertex_loss(pred_v: torch.Tensor, gt_v: torch.Tensor) -> torch.Tensor:
    """Sum over frames of the per-frame mean absolute vertex coordinate error."""
    return (pred_v - gt_v).abs().flatten(-2).mean(dim=-1).sum(dim=-1)


@dataclass
class Audio2ExpTrainConfig:
    steps: int = 5000
    lr: float = 1e-3
    lambda_exp: float = 10.0
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "Audio2ExpTrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown Audio2ExpTrainConfig keys: {sorted(unknown)}")
        cfg = cls(**d)
        if cfg.steps < 0 or cfg.lr <= 0 or cfg.lambda_exp < 0:
            raise ConfigError("invalid audio2exp training hyper-parameters")
        return cfg


@dataclass
class Clip:
    audio: AudioFeatureSeq
    expressions: np.ndarray  # (T, 52)
    w_id: Optional[np.ndarray] = None


@dataclass
class Audio2ExpTrainResult:
    decoder: Audio2ExpDecoder
    step: int
    history: list = field(default_factory=list)  # (step, l_vertex, l_exp)


def teacher_forced(decoder: Audio2ExpDecoder, clip: Clip) -> torch.Tensor:
    dtype = decoder.head.weight.dtype
    gt = torch.as_tensor(clip.expressions, dtype=dtype)
    aligned = torch.as_tensor(align_features(clip.audio, len(gt), decoder.config.fps_out), dtype=dtype)
    return decoder(aligned[None], gt[None, :-1])[0]


def clip_losses(decoder, clip: Clip, core: Optional[CoreTensor], pred: Optional[torch.Tensor] = None):
    """(L_vertex, L_exp) under teacher forcing; L_vertex is 0 without a core."""
    dtype = decoder.head.weight.dtype
    gt = torch.as_tensor(clip.expressions, dtype=dtype)
    pred = teacher_forced(decoder, clip) if pred is None else pred
    l_exp = expression_loss(pred, gt)
    if core is None:
        return torch.zeros((), dtype=dtype), l_exp
    w_id = clip.w_id if clip.w_id is not None else np.zeros(core.n_id)
    l_vert = vertex_loss(sequence_vertices(core, w_id, pred), sequence_vertices(core, w_id, gt))
    return l_vert, l_exp


def train_audio2exp(
    clips: list,
    core: Optional[CoreTensor],
    config: Optional[DecoderConfig] = None,
    hyper: Optional[Audio2ExpTrainConfig] = None,
    decoder: Optional[Audio2ExpDecoder] = None,
    out_dir=None,
) -> Audio2ExpTrainResult:
    """Teacher-forced training on one clip per step, clips visited in a seeded shuffle."""
    hyper = hyper or Audio2ExpTrainConfig()
    if not clips:
        raise EmptyInputError("no training clips")
    torch.manual_seed(hyper.seed)
    if decoder is None:
        config = config or DecoderConfig(audio_dim=clips[0].audio.dim)
        decoder = Audio2ExpDecoder(config)
    for clip in clips:
        _check_audio(decoder, clip.audio)
        if clip.expressions.shape[1] != decoder.config.exp_dim:
            raise ShapeError("expression tracks must have 52 channels")
    decoder.train()
    opt = torch.optim.Adam(decoder.parameters(), lr=hyper.lr)
    order = np.random.default_rng(hyper.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    history = []
    queue: list = []
    for step in range(1, hyper.steps + 1):
        if not queue:
            queue = list(order.permutation(len(clips)))
        clip = clips[queue.pop()]
        l_vert, l_exp = clip_losses(decoder, clip, core)
        loss = l_vert + hyper.lambda_exp * l_exp
        if not math.isfinite(loss.item()):
            path = decoder.save(out_dir / "diverged" / "audio2exp.bin", step=step) if out_dir else None
            raise TrainingDivergedError(f"non-finite audio2exp loss at step {step}", path)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if hyper.grad_clip:
            nn.utils.clip_grad_norm_(decoder.parameters(), hyper.grad_clip)
        opt.step()
        history.append((step, l_vert.item(), l_exp.item()))
        if out_dir is not None and hyper.checkpoint_every and step % hyper.checkpoint_every == 0:
            decoder.save(out_dir / f"audio2exp_{step:06d}.bin", step=step, seed=hyper.seed)
        if step % 500 == 0:
            logger.info("audio2exp step %d vertex=%.5f exp=%.5f", *history[-1])
    decoder.eval()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        decoder.save(out_dir / "audio2exp.bin", step=hyper.steps, seed=hyper.seed)
        write_loss_csv(out_dir / "losses.csv", history, ("step", "l_vertex", "l_exp"))
    return Audio2ExpTrainResult(decoder, hyper.steps, history)


# ---------------------------------------------------------------- toy clips

# (channel, carrier Hz) pairs; each channel follows the envelope of its tone
TOY_DRIVERS = (("jawOpen", 250.0), ("mouthSmileLeft", 1000.0), ("browInnerUp", 3000.0))


def sinusoid_clip(rng: np.random.Generator, duration: float = 2.0, sample_rate: int = SAMPLE_RATE, fps_out: float = FPS_OUT):
    """Tones whose slow envelopes double as ground-truth ARKit channels.

    Returns (samples, expressions). Expression frame ``j`` is the envelope
    at time ``j / fps_out``; undriven channels stay at 0.
    """
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    n_frames = num_output_frames(math.ceil(n / HOP), sample_rate / HOP, fps_out)
    tf = np.arange(n_frames) / fps_out
    audio = np.zeros(n)
    exps = np.zeros((n_frames, ARKIT_DIM))
    for name, carrier in TOY_DRIVERS:
        f = rng.uniform(0.5, 2.0)
        phase = rng.uniform(0, 2 * np.pi)
        env = lambda tt: 0.5 + 0.4 * np.sin(2 * np.pi * f * tt + phase)
        audio += 0.3 * env(t) * np.sin(2 * np.pi * carrier * t)
        exps[:, ARKIT_NAMES.index(name)] = env(tf)
    return audio, exps


def sinusoid_dataset(n_clips: int = 8, seed: int = 0, duration: float = 2.0, provider=None) -> list:
    provider = provider or LogMelProvider()
    rng = np.random.default_rng(seed)
    clips = []
    for _ in range(n_clips):
        samples, exps = sinusoid_clip(rng, duration)
        clips.append(Clip(provider(samples, SAMPLE_RATE), exps))
    return clips


def write_clip_dir(path, samples, expressions, sample_rate: int = SAMPLE_RATE) -> Path:
    from .io import write_arkit_csv, write_wav

    path = Path(path)
    write_wav(path / "audio.wav", samples, sample_rate)
    write_arkit_csv(path / "arkit.csv", expressions, ARKIT_NAMES)
    return path


def read_clip_dir(path, provider=None) -> Clip:
    from .io import read_arkit_csv, read_wav

    provider = provider or LogMelProvider()
    samples, rate = read_wav(Path(path) / "audio.wav")
    exps, names = read_arkit_csv(Path(path) / "arkit.csv")
    if tuple(names) != ARKIT_NAMES:
        raise ShapeError(f"{path}/arkit.csv header does not list the 52 ARKit channels in order")
    return Clip(provider(samples, rate), exps)


# ---------------------------------------------------------------- animation


def animate(audio: AudioFeatureSeq, w_id, bundle, decoder: Audio2ExpDecoder, out_dir=None) -> list[Mesh]:
    """Roll out expressions and build one detailed mesh per frame with ``w_id`` held fixed.

    With ``out_dir``, writes ``frame_0000.obj``... and ``manifest.json``.
    """
    w_id = np.asarray(w_id, dtype=np.float64)
    track = rollout(decoder, audio)
    meshes = [bundle.generate(w_id, w_exp) for w_exp in track]
    if out_dir is not None:
        from .io import write_arkit_csv, write_obj

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        names = []
        for i, mesh in enumerate(meshes):
            names.append(f"frame_{i:04d}.obj")
            write_obj(out_dir / names[-1], mesh)
        write_arkit_csv(out_dir / "arkit.csv", track, ARKIT_NAMES)
        manifest = {
            "fps": decoder.config.fps_out,
            "frame_count": len(meshes),
            "w_id": [float(x) for x in w_id],
            "frames": names,
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return meshes
