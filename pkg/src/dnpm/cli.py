"""Command line entry point: ``dnpm <subcommand> [--config cfg.json] [--seed N] ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DNPMError

logger = logging.getLogger("dnpm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load_config(args) -> dict:
    if not args.config:
        return {}
    try:
        cfg = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return dict(sec)


def _check_sections(cfg: dict, allowed) -> None:
    unknown = set(cfg) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")


def _vector(text: str, name: str) -> np.ndarray:
    """Inline JSON list or a path to a JSON file holding one."""
    try:
        if text.lstrip().startswith("["):
            raw = json.loads(text)
        else:
            raw = json.loads(Path(text).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"--{name} is neither a JSON list nor a JSON file: {exc}") from exc
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 1:
        raise ConfigError(f"--{name} must be a flat list of numbers")
    return arr


# ----------------------------------------------------------------- dataset dir


def save_dataset(ds, out: Path) -> None:
    from .io import write_map_png, write_obj

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(ds.config.to_dict(), indent=2, sort_keys=True) + "\n")
    save_checkpoint(
        out / "core.bin",
        {"data": ds.core.data, "faces": ds.core.faces, "uvs": ds.core.uvs, "landmark_ids": ds.landmark_ids},
        kind="core",
        config={"affine": ds.core.affine},
        seed=ds.config.seed,
    )
    write_obj(out / "template.obj", ds.template)
    for split in ("train", "test"):
        coeffs = []
        for i, s in enumerate(getattr(ds, split)):
            write_map_png(out / split / f"{i:05d}.png", s.displacement)
            coeffs.append({"w_id": [float(x) for x in s.w_id], "w_exp": [float(x) for x in s.w_exp]})
        (out / f"{split}.json").write_text(json.dumps(coeffs) + "\n")


def load_core(data_dir: Path):
    from .geometry import CoreTensor

    tensors, meta = load_checkpoint(Path(data_dir) / "core.bin", kind="core")
    core = CoreTensor(tensors["data"], tensors["faces"], tensors["uvs"], affine=meta["config"]["affine"])
    return core, tensors["landmark_ids"]


def load_split(data_dir: Path, split: str):
    """(w_id, w_exp, maps) arrays as stored on disk (maps decoded from 16-bit PNG)."""
    from .io import read_map_png

    data_dir = Path(data_dir)
    try:
        coeffs = json.loads((data_dir / f"{split}.json").read_text())
    except OSError as exc:
        raise ConfigError(f"{data_dir} is not a dataset directory: {exc}") from exc
    maps = np.stack([read_map_png(data_dir / split / f"{i:05d}.png") for i in range(len(coeffs))])
    w_id = np.array([c["w_id"] for c in coeffs])
    w_exp = np.array([c["w_exp"] for c in coeffs])
    return w_id, w_exp, maps


def load_w_avg(generator_path) -> torch.Tensor:
    tensors, _ = load_checkpoint(Path(generator_path).with_name("w_avg.bin"), kind="w_avg")
    return torch.from_numpy(tensors["w_avg"])


# ----------------------------------------------------------------- commands


def cmd_synth_data(args, cfg):
    from .synth import SynthConfig, synth_dataset

    _check_sections(cfg, ("synth",))
    sc = _section(cfg, "synth")
    if args.seed is not None:
        sc["seed"] = args.seed
    ds = synth_dataset(SynthConfig.from_dict(sc))
    save_dataset(ds, Path(args.out))
    print(f"wrote {len(ds.train)} train / {len(ds.test)} test maps to {args.out}")


def cmd_train_dnpm(args, cfg):
    from .generator import DNPMTrainConfig, GeneratorConfig, average_latent, train_dnpm

    _check_sections(cfg, ("generator", "train", "w_avg_samples"))
    gc = GeneratorConfig.from_dict(_section(cfg, "generator"))
    tc = _section(cfg, "train")
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.steps is not None:
        tc["steps"] = args.steps
    hyper = DNPMTrainConfig.from_dict(tc)
    _, _, maps = load_split(args.data, "train")
    out = Path(args.out)
    res = train_dnpm(maps, gc, hyper, out_dir=out)
    w_avg = average_latent(res.generator, int(cfg.get("w_avg_samples", 10000)), seed=hyper.seed)
    save_checkpoint(out / "w_avg.bin", {"w_avg": w_avg}, kind="w_avg", config={}, step=res.step, seed=hyper.seed)
    print(f"generator: {out / 'generator.bin'}")


def cmd_train_encoder(args, cfg):
    from .encoder import Detailed3DMMEncoder, EncoderConfig, EncoderTrainConfig, train_encoder
    from .generator import Generator

    _check_sections(cfg, ("encoder", "train"))
    G = Generator.load(args.generator)
    tc = _section(cfg, "train")
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.steps is not None:
        tc["max_steps"] = args.steps
    hyper = EncoderTrainConfig.from_dict(tc)
    w_id, w_exp, maps = load_split(args.data, "train")
    ec = _section(cfg, "encoder")
    torch.manual_seed(hyper.seed)
    enc = Detailed3DMMEncoder(
        EncoderConfig(w_id.shape[1], w_exp.shape[1], G.config.latent_dim, G.num_ws, widths=ec.pop("widths", None))
    )
    if ec:
        raise ConfigError(f"unknown encoder keys: {sorted(ec)}")
    res = train_encoder(w_id, w_exp, maps, G, load_w_avg(args.generator), hyper, encoder=enc, out_dir=args.out)
    print(f"encoder: {Path(args.out) / 'encoder.bin'} final l_pixel={res.history[-1][1]:.5f}" if res.history else "no steps")


def _degraded_pairs(maps, spec):
    from .restoration import degrade

    return np.stack([degrade(m, spec) for m in maps])


def cmd_train_restorer(args, cfg):
    from .generator import Generator
    from .restoration import DegradationSpec, Restorer, RestorerConfig, RestorerTrainConfig, train_restorer

    _check_sections(cfg, ("degradation", "restorer", "train"))
    spec = DegradationSpec.from_dict(_section(cfg, "degradation"))
    tc = _section(cfg, "train")
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.steps is not None:
        tc["steps"] = args.steps
    hyper = RestorerTrainConfig.from_dict(tc)
    G = Generator.load(args.generator)
    _, _, maps = load_split(args.data, "train")
    rc = {"latent_dim": G.config.latent_dim, "num_ws": G.num_ws, "in_resolution": G.config.out_resolution}
    rc.update(_section(cfg, "restorer"))
    torch.manual_seed(hyper.seed)
    net = Restorer(RestorerConfig.from_dict(rc))
    train_restorer(_degraded_pairs(maps, spec), maps, G, load_w_avg(args.generator), hyper, restorer=net, out_dir=args.out)
    (Path(args.out) / "degradation.json").write_text(json.dumps(spec.__dict__, indent=2, sort_keys=True) + "\n")
    print(f"restorer: {Path(args.out) / 'restorer.bin'}")


def cmd_train_audio2exp(args, cfg):
    from .audio2exp import Audio2ExpTrainConfig, DecoderConfig, read_clip_dir, sinusoid_dataset, train_audio2exp

    _check_sections(cfg, ("decoder", "train", "toy_clips"))
    tc = _section(cfg, "train")
    if args.seed is not None:
        tc["seed"] = args.seed
    if args.steps is not None:
        tc["steps"] = args.steps
    hyper = Audio2ExpTrainConfig.from_dict(tc)
    if args.clips:
        clip_dirs = sorted(p for p in Path(args.clips).iterdir() if (p / "audio.wav").is_file())
        if not clip_dirs:
            raise ConfigError(f"no clip directories under {args.clips}")
        clips = [read_clip_dir(p) for p in clip_dirs]
    else:
        clips = sinusoid_dataset(int(cfg.get("toy_clips", 8)), seed=hyper.seed)
    core = load_core(args.data)[0] if args.data else None
    if core is not None:
        for c in clips:
            c.w_id = np.zeros(core.n_id)
    dc = {"audio_dim": clips[0].audio.dim}
    dc.update(_section(cfg, "decoder"))
    torch.manual_seed(hyper.seed)
    res = train_audio2exp(clips, core, DecoderConfig.from_dict(dc), hyper, out_dir=args.out)
    print(f"decoder: {Path(args.out) / 'audio2exp.bin'} final l_exp={res.history[-1][2]:.5f}" if res.history else "no steps")


def _bundle(args, cfg):
    from .encoder import Detailed3DMM, Detailed3DMMEncoder
    from .generator import Generator

    core, _ = load_core(args.data)
    G = Generator.load(args.generator)
    enc = Detailed3DMMEncoder.load(args.encoder)
    return Detailed3DMM(
        core, enc, G, load_w_avg(args.generator),
        s=float(cfg.get("s", 1.0)), subdiv=int(cfg.get("subdiv", 1)), d_max=float(cfg.get("d_max", 0.002)),
    )


def cmd_generate(args, cfg):
    from .io import write_map_png, write_obj

    _check_sections(cfg, ("s", "subdiv", "d_max"))
    bundle = _bundle(args, cfg)
    w_id, w_exp = _vector(args.id, "id"), _vector(args.exp, "exp")
    mesh = bundle.generate(w_id, w_exp)
    out = Path(args.out)
    write_obj(out / "mesh.obj", mesh)
    write_map_png(out / "displacement.png", bundle.displacement(w_id, w_exp))
    print(f"wrote {out / 'mesh.obj'} and {out / 'displacement.png'}")


def cmd_restore(args, cfg):
    from .generator import Generator
    from .io import read_map_png, write_map_png
    from .restoration import Restorer, restore

    _check_sections(cfg, ())
    G = Generator.load(args.generator)
    net = Restorer.load(args.restorer)
    out = restore(net, G, load_w_avg(args.generator), read_map_png(args.input))
    write_map_png(args.out, out)
    print(f"wrote {args.out}")


def cmd_animate(args, cfg):
    from .audio2exp import Audio2ExpDecoder, LogMelProvider, animate
    from .io import read_wav

    _check_sections(cfg, ("s", "subdiv", "d_max"))
    bundle = _bundle(args, cfg)
    decoder = Audio2ExpDecoder.load(args.decoder)
    samples, rate = read_wav(args.audio)
    audio = LogMelProvider()(samples, rate)
    meshes = animate(audio, _vector(args.id, "id"), bundle, decoder, out_dir=args.out)
    print(f"wrote {len(meshes)} frames to {args.out}")


def cmd_eval(args, cfg):
    from .io import read_map_png
    from .metrics import EvalRow, eval_table, format_value, map_metrics, mean_metrics

    _check_sections(cfg, ("degradation", "decimals"))
    decimals = int(cfg.get("decimals", 4))
    if args.pred and args.target:
        p, s = map_metrics(read_map_png(args.pred), read_map_png(args.target))
        print(f"PSNR {format_value(p, decimals)}")
        print(f"SSIM {format_value(s, decimals)}")
        rows = [EvalRow("pair", "-", p, s)]
    elif args.data and args.generator and args.restorer:
        from .generator import Generator
        from .restoration import DegradationSpec, Restorer, bicubic_upsample, restore

        spec = DegradationSpec.from_dict(_section(cfg, "degradation"))
        G = Generator.load(args.generator)
        net = Restorer.load(args.restorer)
        _, _, maps = load_split(args.data, "test")
        lows = _degraded_pairs(maps, spec)
        tag = str(spec.factor) if spec.mode == "downsample" else f"blur{spec.target_resolution}"
        ours = restore(net, G, load_w_avg(args.generator), lows)
        rows = [
            EvalRow("bicubic", tag, *mean_metrics(bicubic_upsample(lows, maps.shape[-1]), maps)),
            EvalRow("restorer", tag, *mean_metrics(ours, maps)),
        ]
    else:
        raise ConfigError("eval needs --pred/--target or --data/--generator/--restorer")
    text = eval_table(rows, args.out, decimals=decimals)
    if not (args.pred and args.target):
        print(text, end="")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-dnpm": cmd_train_dnpm,
    "train-encoder": cmd_train_encoder,
    "train-restorer": cmd_train_restorer,
    "train-audio2exp": cmd_train_audio2exp,
    "generate": cmd_generate,
    "restore": cmd_restore,
    "animate": cmd_animate,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dnpm", description="Detail generation, restoration and animation tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        return p

    p = add("synth-data", "write the procedural dataset")
    p.add_argument("--out", required=True)

    p = add("train-dnpm", "train the displacement generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)

    p = add("train-encoder", "train the (id, exp) -> w+ encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)

    p = add("train-restorer", "train the degraded-map restorer")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)

    p = add("train-audio2exp", "train the speech -> expression decoder")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", help="directory of clip folders (audio.wav + arkit.csv); toy clips if omitted")
    p.add_argument("--data", help="dataset directory whose core supplies the vertex loss")
    p.add_argument("--steps", type=int)

    p = add("generate", "detailed mesh + map for one (id, exp)")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--id", required=True, help="JSON list or file")
    p.add_argument("--exp", required=True, help="JSON list or file")
    p.add_argument("--out", required=True)

    p = add("restore", "restore a degraded 16-bit PNG map")
    p.add_argument("--generator", required=True)
    p.add_argument("--restorer", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = add("animate", "speech WAV -> OBJ frame sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--generator", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--decoder", required=True)
    p.add_argument("--audio", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--out", required=True)

    p = add("eval", "PSNR/SSIM for a map pair or a restorer on the test split")
    p.add_argument("--pred")
    p.add_argument("--target")
    p.add_argument("--data")
    p.add_argument("--generator")
    p.add_argument("--restorer")
    p.add_argument("--out", help="CSV output path")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args)
        COMMANDS[args.command](args, cfg)
    except (ConfigError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DNPMError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
