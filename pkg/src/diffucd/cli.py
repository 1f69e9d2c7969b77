"""Command-line entry point: ``diffucd <command> [--config PATH] [--seed N] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, desk_profile, from_text, load_config, reference_profile
from .data import SceneError
from .pseudo import DegenerateClusteringError
from .synthetic import SynthConfig

PROFILES = {"reference": reference_profile, "desk": desk_profile}


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser, needs_config: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    if needs_config:
        p.add_argument("--config", help="run configuration file (section.key = value lines)")
        p.add_argument("--profile", choices=sorted(PROFILES), default="reference",
                       help="base settings the config file is applied on top of")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config field, e.g. --set stage2.epochs=10")
        p.add_argument("--scene", action="append", help="scene container directory (overrides data.scenes)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffucd", description="Unsupervised hyperspectral change detection")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="stage 1: train the diffusion noise predictor")
    _common(p)
    p.add_argument("--resume", help="predictor checkpoint to continue from")

    p = sub.add_parser("train", help="stage 2: train contrastive encoder and change head")
    _common(p)
    p.add_argument("--predictor", help="pretrained predictor checkpoint")

    p = sub.add_parser("infer", help="produce a change map")
    _common(p)
    p.add_argument("--model", required=True, help="directory written by 'train'")
    p.add_argument("--predictor", help="pretrained predictor checkpoint")

    p = sub.add_parser("evaluate", help="score a change map against scene labels")
    _common(p, needs_config=False)
    p.add_argument("--map", required=True, help="change map directory written by 'infer'")
    p.add_argument("--scene", required=True, help="scene container with labels")

    p = sub.add_parser("pseudo-label", help="PCA + 2-means pseudo change labels")
    _common(p)

    p = sub.add_parser("reconstruct", help="pseudo-color x0 reconstructions at several noise levels")
    _common(p)
    p.add_argument("--predictor", required=True, help="pretrained predictor checkpoint")
    p.add_argument("--t", type=_int_list, default=[200, 50, 10, 5, 0], help="levels, e.g. 200,50,10,5,0")
    p.add_argument("--phase", choices=["T1", "T2"], default="T1")
    p.add_argument("--bands", type=_int_list, help="three band indices for the composite")

    p = sub.add_parser("synth", help="write a synthetic bitemporal scene")
    _common(p, needs_config=False)
    d = SynthConfig()
    p.add_argument("--bands", type=int, default=d.C)
    p.add_argument("--height", type=int, default=d.H)
    p.add_argument("--width", type=int, default=d.W)
    p.add_argument("--materials", type=int, default=d.n_materials)
    p.add_argument("--change-fraction", type=float, default=d.change_fraction)
    p.add_argument("--gain-range", type=float, nargs=2, default=list(d.illumination_gain_range))
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = PROFILES[args.profile]()
    if args.config:
        cfg = load_config(args.config, base=cfg)
    if args.set:
        for item in args.set:
            if "=" not in item:
                raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg = from_text("\n".join(args.set), base=cfg)
    if args.scene:
        cfg = cfg.override(data={"scenes": tuple(args.scene)})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def run(args) -> str:
    if args.command == "synth":
        synth = SynthConfig(C=args.bands, H=args.height, W=args.width, n_materials=args.materials,
                            change_fraction=args.change_fraction,
                            illumination_gain_range=tuple(args.gain_range), noise_sigma=args.noise_sigma,
                            seed=args.seed if args.seed is not None else 0)
        try:
            synth.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        scene = pipeline.cmd_synth(synth, args.out)
        return f"wrote scene {scene.name} ({scene.band_count} x {scene.shape[0]} x {scene.shape[1]}) to {args.out}"
    if args.command == "evaluate":
        rep, _ = pipeline.cmd_evaluate(args.map, args.scene, args.out)
        return f"OA={rep.oa:.4f} KC={rep.kc:.4f} F1={rep.f1:.4f} written to {args.out}"

    cfg = resolve_config(args)
    if args.command == "pretrain":
        path = pipeline.cmd_pretrain(cfg, args.out, resume=args.resume)
        return f"predictor checkpoint written to {path}"
    if args.command == "train":
        out = pipeline.cmd_train(cfg, args.predictor, args.out)
        return f"encoder and head checkpoints written to {out}"
    if args.command == "infer":
        path = pipeline.cmd_infer(cfg, args.model, args.out, predictor_path=args.predictor)
        return f"change map written to {path}"
    if args.command == "pseudo-label":
        pipeline.cmd_pseudo_label(cfg, args.out)
        return f"pseudo labels written to {Path(args.out) / 'pseudo'}"
    if args.command == "reconstruct":
        errors = pipeline.cmd_reconstruct(cfg, args.predictor, args.out, args.t, args.phase, args.bands)
        return "mse " + " ".join(f"t={t}:{e:.4f}" for t, e in errors.items())
    raise AssertionError(args.command)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        print(run(args))
    except (ConfigError, SceneError, CheckpointError, DegenerateClusteringError, ValueError, OSError) as e:
        print(f"diffucd {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
