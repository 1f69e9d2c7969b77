"""Versioned checkpoint directories: a text manifest plus one raw array per parameter.

Layout::

    <dir>/meta          format, version, kind, config.*, schedule.*, param lines
    <dir>/params/<name>.raw   little-endian array in the parameter's dtype
    <dir>/history.raw   optional float64 loss history
"""
from __future__ import annotations

import ast
import dataclasses
import shutil
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from torch import nn

from .ctcl import EncoderConfig, SpectralEncoder
from .data import MalformedContainerError, read_manifest, read_raw, write_manifest, write_raw
from .diffusion import NoiseSchedule, schedule_from_identity
from .fusion import ChangeHead, HeadConfig
from .predictor import NoisePredictor, PredictorConfig

FORMAT = "diffucd-checkpoint"
VERSION = 1
_DTYPES = {torch.float32: "f4", torch.float64: "f8", torch.int64: "i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _encode(v: Any) -> str:
    return repr(tuple(v) if isinstance(v, list) else v)


def _decode(s: str) -> Any:
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def save_state(module: nn.Module, path, kind: str, config: dict, schedule: Optional[dict] = None,
               history: Optional[list[float]] = None, extra: Optional[dict] = None) -> None:
    path = Path(path)
    params_dir = path / "params"
    if params_dir.exists():
        shutil.rmtree(params_dir)
    params_dir.mkdir(parents=True)
    fields: dict[str, Any] = {"format": FORMAT, "version": VERSION, "kind": kind}
    for k, v in config.items():
        fields[f"config.{k}"] = _encode(v)
    for k, v in (schedule or {}).items():
        fields[f"schedule.{k}"] = _encode(v)
    for k, v in (extra or {}).items():
        fields[f"extra.{k}"] = _encode(v)
    names = []
    for i, (name, tensor) in enumerate(module.state_dict().items()):
        t = tensor.detach().cpu()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for parameter {name}")
        shape = "x".join(map(str, t.shape)) or "scalar"
        fields[f"param.{i}"] = f"{name} {_DTYPES[t.dtype]} {shape}"
        write_raw(params_dir / f"{name}.raw", t.numpy(), _DTYPES[t.dtype])
        names.append(name)
    fields["n_params"] = len(names)
    hist = path / "history.raw"
    if history is not None:
        write_raw(hist, np.asarray(history, dtype=np.float64), "f8")
        fields["history_len"] = len(history)
    elif hist.exists():
        hist.unlink()
    write_manifest(path / "meta", fields)


def load_state(path, kind: str) -> tuple[dict[str, torch.Tensor], dict, dict, list[float], dict]:
    """Returns (state_dict, config, schedule, history, extra)."""
    path = Path(path)
    if not path.is_dir():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        meta = read_manifest(path / "meta")
    except MalformedContainerError as e:
        raise CheckpointError(str(e)) from e
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} container")
    if int(meta.get("version", -1)) != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    if meta.get("kind") != kind:
        raise CheckpointError(f"{path}: checkpoint holds a {meta.get('kind')!r}, expected {kind!r}")

    def section(prefix):
        return {k[len(prefix):]: _decode(v) for k, v in meta.items() if k.startswith(prefix)}

    state = {}
    for i in range(int(meta["n_params"])):
        name, dt, shape = meta[f"param.{i}"].split()
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        arr = read_raw(path / "params" / f"{name}.raw", dt, dims, name)
        state[name] = torch.from_numpy(np.ascontiguousarray(arr))
    history = []
    if "history_len" in meta:
        history = read_raw(path / "history.raw", "f8", (int(meta["history_len"]),), "history").tolist()
    return state, section("config."), section("schedule."), history, section("extra.")


def restore(module: nn.Module, state: dict[str, torch.Tensor], path) -> nn.Module:
    own = module.state_dict()
    if own.keys() != state.keys():
        missing = sorted(set(own) ^ set(state))
        raise CheckpointError(f"{path}: parameter set mismatch ({', '.join(missing[:5])})")
    for k, v in state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise CheckpointError(f"{path}: parameter {k} has shape {tuple(v.shape)}, "
                                  f"model expects {tuple(own[k].shape)}")
    dtype = next(iter(state.values())).dtype
    module.to(dtype)
    module.load_state_dict(state)
    return module


def _config_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build_config(cls, raw: dict, path):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise CheckpointError(f"{path}: unknown config field(s) {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"{path}: invalid stored config ({e})") from e


def _check_expected(cfg, expected, path) -> None:
    if expected is None:
        return
    for f in dataclasses.fields(cfg):
        a, b = getattr(cfg, f.name), getattr(expected, f.name)
        if a != b:
            raise CheckpointError(f"{path}: incompatible config field {f.name}: checkpoint has {a!r}, "
                                  f"expected {b!r}")


def save_predictor(state: NoisePredictor, path, history: Optional[list[float]] = None, extra=None) -> None:
    save_state(state, path, "predictor", _config_dict(state.config), state.schedule, history, extra)


def load_predictor(path, expected: Optional[PredictorConfig] = None,
                   schedule: Optional[NoiseSchedule] = None):
    """Returns (predictor, schedule, history, extra)."""
    params, raw, ident, history, extra = load_state(path, "predictor")
    cfg = _build_config(PredictorConfig, raw, path)
    _check_expected(cfg, expected, path)
    try:
        stored = schedule_from_identity(ident)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: unusable schedule identity ({e})") from e
    if schedule is not None and schedule.identity() != stored.identity():
        raise CheckpointError(f"{path}: predictor was trained with schedule {stored.identity()}, "
                              f"run uses {schedule.identity()}")
    model = restore(NoisePredictor(cfg, stored.identity()), params, path)
    model.eval()
    return model, stored, history, extra


def save_encoder(state: SpectralEncoder, path, history=None, extra=None) -> None:
    save_state(state, path, "encoder", _config_dict(state.config), None, history, extra)


def load_encoder(path, expected: Optional[EncoderConfig] = None):
    params, raw, _, history, extra = load_state(path, "encoder")
    cfg = _build_config(EncoderConfig, raw, path)
    _check_expected(cfg, expected, path)
    return restore(SpectralEncoder(cfg), params, path).eval(), history, extra


def save_head(state: ChangeHead, path, history=None, extra=None) -> None:
    save_state(state, path, "head", _config_dict(state.config), None, history, extra)


def load_head(path, expected: Optional[HeadConfig] = None):
    params, raw, _, history, extra = load_state(path, "head")
    cfg = _build_config(HeadConfig, raw, path)
    _check_expected(cfg, expected, path)
    return restore(ChangeHead(cfg), params, path).eval(), history, extra
