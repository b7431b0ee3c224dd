"""Tiny end-to-end CLI run shared by the CLI tests and the determinism check."""
import hashlib
import json
from pathlib import Path

import numpy as np

from dnpm.cli import main
from dnpm.io import write_wav

CONFIGS = {
    "synth": {"synth": {"n_train": 8, "n_test": 2, "resolution": 16, "grid": 9}},
    "dnpm": {
        "generator": {"out_resolution": 16, "latent_dim": 8, "channels": {"4": 8, "8": 8, "16": 4}, "mapping_layers": 2},
        "train": {"batch_size": 4, "r1_interval": 2},
        "w_avg_samples": 100,
    },
    "encoder": {"train": {"epochs": 2, "batch_size": 4}},
    "restorer": {"degradation": {"mode": "downsample", "factor": 4}, "restorer": {"channels": [4, 4]},
                 "train": {"steps": 3, "batch_size": 4}},
    "audio2exp": {"decoder": {"width": 16, "heads": 2, "layers": 1, "ffn": 32}, "train": {"steps": 3}, "toy_clips": 2},
    "eval": {"degradation": {"mode": "downsample", "factor": 4}},
}


def run(root: Path, seed: int = 7) -> dict:
    """Run every subcommand once under ``root``; returns {relative path: sha256} of all outputs."""
    root = Path(root)
    cfg = root / "cfg"
    cfg.mkdir(parents=True, exist_ok=True)
    for name, body in CONFIGS.items():
        (cfg / f"{name}.json").write_text(json.dumps(body))
    t = np.arange(3200) / 16000
    write_wav(cfg / "speech.wav", 0.3 * np.sin(2 * np.pi * 250 * t) * (0.5 + 0.4 * np.sin(2 * np.pi * t)))
    data, run_dir = root / "data", root / "run"
    s = str(seed)
    gen = str(run_dir / "dnpm" / "generator.bin")
    steps = [
        ["synth-data", "--config", str(cfg / "synth.json"), "--seed", s, "--out", str(data)],
        ["train-dnpm", "--config", str(cfg / "dnpm.json"), "--seed", s, "--data", str(data),
         "--out", str(run_dir / "dnpm"), "--steps", "4"],
        ["train-encoder", "--config", str(cfg / "encoder.json"), "--seed", s, "--data", str(data),
         "--generator", gen, "--out", str(run_dir / "encoder")],
        ["train-restorer", "--config", str(cfg / "restorer.json"), "--seed", s, "--data", str(data),
         "--generator", gen, "--out", str(run_dir / "restorer")],
        ["train-audio2exp", "--config", str(cfg / "audio2exp.json"), "--seed", s, "--data", str(data),
         "--out", str(run_dir / "audio2exp")],
        ["generate", "--seed", s, "--data", str(data), "--generator", gen,
         "--encoder", str(run_dir / "encoder" / "encoder.bin"), "--id", json.dumps([0.1] * 10),
         "--exp", json.dumps([0.2] * 52), "--out", str(run_dir / "generate")],
        ["restore", "--seed", s, "--generator", gen, "--restorer", str(run_dir / "restorer" / "restorer.bin"),
         "--input", str(data / "test" / "00000.png"), "--out", str(run_dir / "restored.png")],
        ["animate", "--seed", s, "--data", str(data), "--generator", gen,
         "--encoder", str(run_dir / "encoder" / "encoder.bin"),
         "--decoder", str(run_dir / "audio2exp" / "audio2exp.bin"), "--audio", str(cfg / "speech.wav"),
         "--id", json.dumps([0.0] * 10), "--out", str(run_dir / "animate")],
        ["eval", "--config", str(cfg / "eval.json"), "--seed", s, "--data", str(data), "--generator", gen,
         "--restorer", str(run_dir / "restorer" / "restorer.bin"), "--out", str(run_dir / "eval.csv")],
    ]
    for argv in steps:
        code = main(argv)
        if code != 0:
            raise AssertionError(f"dnpm {argv[0]} exited with {code}")
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and not p.relative_to(root).parts[0] == "cfg"
    }
