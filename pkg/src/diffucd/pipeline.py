"""Orchestration of the two training stages, inference, evaluation and demos.

Every command takes a :class:`RunConfig` and writes into an output directory.
All randomness derives from ``cfg.seed`` through named sub-streams.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .config import ConfigError, RunConfig, save_config
from .data import BitemporalScene, BandScaler, ChangeMap, SceneError, load_change_map, load_scene, \
    save_change_map, save_scene
from .diffusion import NoiseSchedule, estimate_x0, forward_diffuse, make_linear_schedule
from .fusion import ChangeHead, infer_map, train_stage2
from .ctcl import SpectralEncoder
from .metrics import Confusion, MetricsReport, confusion, render_map, report, save_png, write_report
from .predictor import NoisePredictor, _cond_id, pretrain, predict_noise
from .pseudo import PseudoLabelMap, TrainingPixels, difference_image, pca_kmeans_pseudolabel, \
    save_pseudo_map, select_training_pixels
from .seeding import numpy_rng, sub_seed, torch_rng
from .synthetic import SynthConfig, generate_scene

logger = logging.getLogger(__name__)

# (use_scdm, contrastive loss on)
VARIANTS = {
    "base": (False, False),
    "base+ctcl": (False, True),
    "base+scdm": (True, False),
    "full": (True, True),
}


def make_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    try:
        return make_linear_schedule(s.T, s.beta_start, s.beta_end)
    except ValueError as e:
        raise ConfigError(f"schedule: {e}") from e


def load_scenes(paths: Sequence[str], field: str = "data.scenes") -> list[BitemporalScene]:
    if not paths:
        raise ConfigError(f"config field {field!r} is empty: at least one scene path is required")
    scenes = []
    for p in paths:
        if not Path(p).exists():
            raise ConfigError(f"config field {field!r}: scene path {p} does not exist")
        scenes.append(load_scene(p))
    return scenes


def _first_scene(cfg: RunConfig, scene: Optional[BitemporalScene]) -> BitemporalScene:
    return scene if scene is not None else load_scenes(cfg.data.scenes)[0]


# --------------------------------------------------------------------------
# building blocks shared by the commands and run_experiment
# --------------------------------------------------------------------------

def fit_predictor(cfg: RunConfig, scenes: Sequence[BitemporalScene], sched: NoiseSchedule,
                  init_state: Optional[NoisePredictor] = None, history: Optional[list[float]] = None):
    pc, _, _ = cfg.for_bands(scenes[0].band_count)
    # a resumed run draws a fresh stream so it does not replay the first epochs
    stream = f"stage1.resume{len(history)}" if history else "stage1"
    return pretrain(scenes, pc, sched, cfg.stage1, seed=sub_seed(cfg.seed, stream),
                    init_state=init_state, history=history)


def pseudo_labels(cfg: RunConfig, scene: BitemporalScene) -> PseudoLabelMap:
    p = cfg.pseudo
    return pca_kmeans_pseudolabel(difference_image(scene), p.block, p.n_components,
                                  seed=sub_seed(cfg.seed, "pseudo") % 2**31)


def training_pixels(cfg: RunConfig, pseudo: PseudoLabelMap) -> TrainingPixels:
    p = cfg.pseudo
    return select_training_pixels(pseudo, p.n_changed, p.n_unchanged, numpy_rng(cfg.seed, "selection"),
                                  ranked=p.ranked)


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    use_scdm, contrastive = VARIANTS[variant]
    lam = cfg.stage2.lambda_con if contrastive else 0.0
    if contrastive and lam == 0:
        raise ConfigError("config field 'stage2.lambda_con' is 0 but the variant uses the contrastive loss")
    return cfg.override(head={"use_scdm": use_scdm}, stage2={"lambda_con": lam})


def fit_stage2(cfg: RunConfig, scene: BitemporalScene, predictor: Optional[NoisePredictor],
               pixels: TrainingPixels, sched: NoiseSchedule):
    _, ec, hc = cfg.for_bands(scene.band_count)
    return train_stage2(scene, predictor if hc.use_scdm else None, pixels, ec, hc, cfg.stage2, sched,
                        seed=sub_seed(cfg.seed, "stage2"), feature_seed=feature_seed(cfg))


def feature_seed(cfg: RunConfig) -> int:
    return sub_seed(cfg.seed, "diffusion.features")


def predict_map(cfg: RunConfig, scene: BitemporalScene, predictor: Optional[NoisePredictor],
                encoder: SpectralEncoder, head: ChangeHead, sched: NoiseSchedule) -> ChangeMap:
    return infer_map(scene, predictor if head.config.use_scdm else None, encoder, head, sched,
                     batch=cfg.stage2.infer_batch, feature_seed=feature_seed(cfg))


@dataclass
class ExperimentResult:
    variant: str
    change_map: ChangeMap
    report: Optional[MetricsReport]
    pseudo_report: Optional[MetricsReport]
    encoder: SpectralEncoder
    head: ChangeHead
    history: list[float]
    pixels: TrainingPixels


def run_experiment(cfg: RunConfig, scene: BitemporalScene, variant: str = "full",
                   predictor: Optional[NoisePredictor] = None) -> ExperimentResult:
    """Pseudo-label, (optionally) pretrain, train stage 2 and map ``scene`` for one ablation variant."""
    vcfg = variant_config(cfg, variant)
    sched = make_schedule(vcfg)
    if vcfg.head.use_scdm and predictor is None:
        predictor, _ = fit_predictor(vcfg, [scene], sched)
    pseudo = pseudo_labels(vcfg, scene)
    pixels = training_pixels(vcfg, pseudo)
    encoder, head, history = fit_stage2(vcfg, scene, predictor, pixels, sched)
    cmap = predict_map(vcfg, scene, predictor, encoder, head, sched)
    rep = prep = None
    if scene.labels is not None:
        rep = report(confusion(cmap.decisions, scene.labels))
        prep = report(confusion(pseudo.labels, scene.labels))
    return ExperimentResult(variant, cmap, rep, prep, encoder, head, history, pixels)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_history(path: Path, history: Sequence[float]) -> None:
    path.write_text("".join(f"{i + 1} {v!r}\n" for i, v in enumerate(history)))


def cmd_pretrain(cfg: RunConfig, out, resume=None, scenes: Optional[Sequence[BitemporalScene]] = None) -> Path:
    """Stage 1. Writes ``out/predictor`` (checkpoint) and ``out/pretrain_loss.txt``.

    With ``resume`` the run continues from that checkpoint's parameters and
    extends its loss history; optimizer moments restart from zero.
    """
    out = _out(out)
    scenes = list(scenes) if scenes is not None else load_scenes(cfg.data.scenes)
    sched = make_schedule(cfg)
    init_state, history = None, None
    if resume is not None:
        pc, _, _ = cfg.for_bands(scenes[0].band_count)
        init_state, _, history, _ = ckpt.load_predictor(resume, expected=pc, schedule=sched)
    state, history = fit_predictor(cfg, scenes, sched, init_state, history)
    path = out / "predictor"
    ckpt.save_predictor(state, path, history, extra={"seed": cfg.seed})
    _write_history(out / "pretrain_loss.txt", history)
    save_config(cfg, out / "run.cfg")
    return path


def _load_predictor_for(cfg: RunConfig, path, bands: int, sched: NoiseSchedule) -> NoisePredictor:
    if path is None:
        raise ConfigError("a pretrained predictor checkpoint is required (--predictor)")
    if not Path(path).exists():
        raise ckpt.CheckpointError(f"predictor checkpoint {path} does not exist")
    pc, _, _ = cfg.for_bands(bands)
    return ckpt.load_predictor(path, expected=pc, schedule=sched)[0]


def cmd_train(cfg: RunConfig, predictor_path, out, scene: Optional[BitemporalScene] = None) -> Path:
    """Stage 2. Writes ``out/encoder``, ``out/head``, ``out/pseudo`` and ``out/stage2_loss.txt``."""
    out = _out(out)
    scene = _first_scene(cfg, scene)
    sched = make_schedule(cfg)
    predictor = None
    if cfg.head.use_scdm:
        predictor = _load_predictor_for(cfg, predictor_path, scene.band_count, sched)
    pseudo = pseudo_labels(cfg, scene)
    pixels = training_pixels(cfg, pseudo)
    encoder, head, history = fit_stage2(cfg, scene, predictor, pixels, sched)
    ckpt.save_encoder(encoder, out / "encoder", history)
    ckpt.save_head(head, out / "head", history)
    save_pseudo_map(pseudo, out / "pseudo")
    _write_history(out / "stage2_loss.txt", history)
    save_config(cfg, out / "run.cfg")
    return out


def load_model(cfg: RunConfig, model_dir, bands: int) -> tuple[SpectralEncoder, ChangeHead]:
    model_dir = Path(model_dir)
    if not model_dir.is_dir():
        raise ckpt.CheckpointError(f"model directory {model_dir} does not exist")
    _, ec, hc = cfg.for_bands(bands)
    encoder = ckpt.load_encoder(model_dir / "encoder", expected=ec)[0]
    head = ckpt.load_head(model_dir / "head", expected=hc)[0]
    return encoder, head


def cmd_infer(cfg: RunConfig, model_dir, out, predictor_path=None,
              scene: Optional[BitemporalScene] = None) -> Path:
    """Writes the change map container ``out/map``."""
    out = _out(out)
    scene = _first_scene(cfg, scene)
    sched = make_schedule(cfg)
    encoder, head = load_model(cfg, model_dir, scene.band_count)
    predictor = None
    if head.config.use_scdm:
        predictor = _load_predictor_for(cfg, predictor_path, scene.band_count, sched)
    cmap = predict_map(cfg, scene, predictor, encoder, head, sched)
    save_change_map(cmap, out / "map")
    return out / "map"


def cmd_evaluate(map_path, scene: BitemporalScene | str, out) -> tuple[MetricsReport, Confusion]:
    """Writes ``out/report.txt`` and the rendered error map ``out/map.png``."""
    out = _out(out)
    if not isinstance(scene, BitemporalScene):
        scene = load_scene(scene)
    if scene.labels is None:
        raise SceneError(f"scene {scene.name!r} has no label map to evaluate against")
    cmap = load_change_map(map_path)
    if cmap.decisions.shape != scene.shape:
        raise SceneError(f"change map {map_path} has shape {cmap.decisions.shape}, scene has {scene.shape}")
    conf = confusion(cmap.decisions, scene.labels)
    rep = report(conf)
    write_report(rep, out / "report.txt", conf)
    save_png(render_map(cmap.decisions, scene.labels), out / "map.png")
    return rep, conf


def cmd_pseudo_label(cfg: RunConfig, out, scene: Optional[BitemporalScene] = None) -> PseudoLabelMap:
    """Writes ``out/pseudo`` and, when labels exist, ``out/report.txt``."""
    out = _out(out)
    scene = _first_scene(cfg, scene)
    pseudo = pseudo_labels(cfg, scene)
    save_pseudo_map(pseudo, out / "pseudo")
    save_change_map(ChangeMap(pseudo.labels, scene.name), out / "map")
    if scene.labels is not None:
        conf = confusion(pseudo.labels, scene.labels)
        write_report(report(conf), out / "report.txt", conf)
    return pseudo


def _pseudo_color(cube: np.ndarray, bands: Sequence[int], lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    rgb = cube[list(bands)].transpose(1, 2, 0)
    rgb = (rgb - lo) / np.where(hi > lo, hi - lo, 1.0)
    return (np.clip(rgb, 0, 1) * 255).round().astype(np.uint8)


def reconstruct(predictor: NoisePredictor, cube: np.ndarray, phase: str, t_list: Sequence[int],
                sched: NoiseSchedule, rng: torch.Generator) -> dict[int, np.ndarray]:
    """Noise a standardized (C, H, W) cube to each level and return its one-shot x0 estimates.

    Levels count diffusion steps taken: ``t = 0`` is the clean input (returned
    as is) and ``t = T`` is the last schedule index. The cube is tiled into
    non-overlapping K x K patches; an edge remainder is copied through.
    """
    K = predictor.config.patch
    C, H, W = cube.shape
    h, w = H - H % K, W - W % K
    tiles = torch.from_numpy(np.ascontiguousarray(cube[:, :h, :w]))
    tiles = tiles.reshape(C, h // K, K, w // K, K).permute(1, 3, 0, 2, 4).reshape(-1, C, K, K)
    cond = _cond_id(phase)
    eps = torch.randn(tiles.shape, generator=rng, dtype=tiles.dtype)
    out = {}
    for t in t_list:
        if not 0 <= t <= sched.T:
            raise ValueError(f"reconstruction level {t} outside [0, {sched.T}]")
        if t == 0:
            out[0] = cube.copy()
            continue
        tt = torch.full((len(tiles),), int(t) - 1)
        with torch.no_grad():
            xt = forward_diffuse(tiles, tt, eps, sched)
            x0 = estimate_x0(xt, tt, predict_noise(predictor, xt, tt, cond), sched)
        rec = cube.copy()
        rec[:, :h, :w] = x0.reshape(h // K, w // K, C, K, K).permute(2, 0, 3, 1, 4).reshape(C, h, w).numpy()
        out[int(t)] = rec
    return out


def cmd_reconstruct(cfg: RunConfig, predictor_path, out, t_list: Sequence[int] = (200, 50, 10, 5, 0),
                    phase: str = "T1", bands: Optional[Sequence[int]] = None,
                    scene: Optional[BitemporalScene] = None) -> dict[int, float]:
    """Pseudo-color x0 reconstructions per timestep; returns the MSE (standardized units) per t."""
    out = _out(out)
    scene = _first_scene(cfg, scene)
    sched = make_schedule(cfg)
    predictor = _load_predictor_for(cfg, predictor_path, scene.band_count, sched)
    std = BandScaler.fit(scene).transform(scene)
    cube = np.array(std.cube(phase), dtype=np.float32)
    C = cube.shape[0]
    bands = list(bands) if bands is not None else [C - 1, C // 2, 0]
    if any(not 0 <= b < C for b in bands) or len(bands) != 3:
        raise ConfigError(f"pseudo-color bands {bands} must be three indices in [0, {C})")
    lo = np.percentile(cube[bands], 2, axis=(1, 2))
    hi = np.percentile(cube[bands], 98, axis=(1, 2))
    save_png(_pseudo_color(cube, bands, lo, hi), out / "input.png")
    recs = reconstruct(predictor, cube, phase, t_list, sched, torch_rng(cfg.seed, "reconstruct"))
    errors = {}
    for t, rec in recs.items():
        save_png(_pseudo_color(rec, bands, lo, hi), out / f"recon_t{t:03d}.png")
        errors[t] = float(np.mean((rec - cube) ** 2))
    (out / "reconstruction_mse.txt").write_text("".join(f"t={t} mse={e!r}\n" for t, e in errors.items()))
    return errors


def cmd_synth(synth: SynthConfig, out) -> BitemporalScene:
    scene = generate_scene(synth)
    save_scene(scene, _out(out))
    return scene
