"""Scene and patch containers, the raw scene container format, patch extraction."""
from __future__ import annotations

import enum
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

UNCHANGED, CHANGED, UNKNOWN = 0, 1, 2


class Phase(str, enum.Enum):
    T1 = "T1"
    T2 = "T2"


class SceneError(ValueError):
    """Base class for scene validation and loading failures."""


class MalformedContainerError(SceneError):
    pass


class ShapeMismatchError(SceneError):
    pass


class NonFiniteError(SceneError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BitemporalScene:
    t1: np.ndarray
    t2: np.ndarray
    labels: Optional[np.ndarray] = None
    name: str = "scene"

    def __post_init__(self):
        t1 = np.asarray(self.t1, dtype=np.float32)
        t2 = np.asarray(self.t2, dtype=np.float32)
        if t1.ndim != 3:
            raise ShapeMismatchError(f"t1 must be (C, H, W), got shape {t1.shape}")
        if t1.shape != t2.shape:
            raise ShapeMismatchError(f"t1 shape {t1.shape} != t2 shape {t2.shape}")
        for tag, cube in (("t1", t1), ("t2", t2)):
            if not np.isfinite(cube).all():
                raise NonFiniteError(f"{tag} contains non-finite reflectance values")
        labels = self.labels
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape != t1.shape[1:]:
                raise ShapeMismatchError(
                    f"labels shape {labels.shape} != scene shape {t1.shape[1:]}"
                )
            if not np.isin(labels, (UNCHANGED, CHANGED, UNKNOWN)).all():
                raise SceneError("labels must take values in {0, 1, 2}")
            labels = _readonly(labels.astype(np.uint8))
        if "\n" in self.name or "=" in self.name or not self.name:
            raise SceneError(f"invalid scene name {self.name!r}")
        object.__setattr__(self, "t1", _readonly(t1))
        object.__setattr__(self, "t2", _readonly(t2))
        object.__setattr__(self, "labels", labels)

    @property
    def band_count(self) -> int:
        return self.t1.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.t1.shape[1], self.t1.shape[2]

    def cube(self, phase) -> np.ndarray:
        return self.t1 if Phase(phase) is Phase.T1 else self.t2


@dataclass(frozen=True)
class PatchBatch:
    patches: np.ndarray  # (N, C, K, K)
    centers: np.ndarray  # (N, 2) int
    phase: tuple[Phase, ...]
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def patch_size(self) -> int:
        return self.patches.shape[-1]


@dataclass(frozen=True)
class ChangeMap:
    decisions: np.ndarray
    scene_name: str = "scene"

    def __post_init__(self):
        d = np.asarray(self.decisions)
        if d.ndim != 2:
            raise ValueError(f"decisions must be 2-D, got shape {d.shape}")
        if not np.isin(d, (0, 1)).all():
            raise ValueError("decisions must be binary")
        object.__setattr__(self, "decisions", _readonly(d.astype(np.uint8)))


# --------------------------------------------------------------------------
# container I/O
# --------------------------------------------------------------------------

def write_manifest(path: Path, fields: dict) -> None:
    lines = [f"{k}={v}" for k, v in fields.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path: Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise MalformedContainerError(f"missing manifest {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MalformedContainerError(f"{path}:{n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_raw(path: Path, a: np.ndarray, dtype: str) -> None:
    np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tofile(path)


def read_raw(path: Path, dtype: str, shape: Sequence[int], what: str) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise MalformedContainerError(f"missing {what} file {path}")
    dt = np.dtype(dtype).newbyteorder("<")
    expected = int(np.prod(shape)) * dt.itemsize
    size = path.stat().st_size
    if size != expected:
        raise ShapeMismatchError(
            f"{what}: {path.name} holds {size} bytes, expected {expected} for shape {tuple(shape)}"
        )
    return np.fromfile(path, dtype=dt).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def _int_field(meta: dict, key: str, path: Path) -> int:
    if key not in meta:
        raise MalformedContainerError(f"{path}: manifest lacks field {key!r}")
    try:
        v = int(meta[key])
    except ValueError:
        raise MalformedContainerError(f"{path}: field {key!r} is not an integer: {meta[key]!r}")
    if v <= 0:
        raise MalformedContainerError(f"{path}: field {key!r} must be positive")
    return v


def save_scene(scene: BitemporalScene, path) -> None:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        C, H, W = scene.t1.shape
        write_manifest(path / "meta", {
            "name": scene.name,
            "C": C,
            "H": H,
            "W": W,
            "dtype": "float32",
            "byte_order": "little",
            "has_labels": int(scene.labels is not None),
        })
        write_raw(path / "t1.raw", scene.t1, "f4")
        write_raw(path / "t2.raw", scene.t2, "f4")
        if scene.labels is not None:
            write_raw(path / "labels.raw", scene.labels, "u1")
        elif (path / "labels.raw").exists():
            os.remove(path / "labels.raw")
    except OSError as e:
        raise OSError(f"cannot write scene container {path}: {e}") from e


def load_scene(path) -> BitemporalScene:
    path = Path(path)
    if not path.is_dir():
        raise MalformedContainerError(f"scene container {path} is not a directory")
    meta = read_manifest(path / "meta")
    C, H, W = (_int_field(meta, k, path) for k in ("C", "H", "W"))
    if meta.get("dtype", "float32") != "float32":
        raise MalformedContainerError(f"{path}: unsupported dtype {meta['dtype']!r}")
    if meta.get("byte_order", "little") != "little":
        raise MalformedContainerError(f"{path}: unsupported byte order {meta['byte_order']!r}")
    has_labels = meta.get("has_labels", "0")
    if has_labels not in ("0", "1"):
        raise MalformedContainerError(f"{path}: has_labels must be 0 or 1")
    t1 = read_raw(path / "t1.raw", "f4", (C, H, W), "t1")
    t2 = read_raw(path / "t2.raw", "f4", (C, H, W), "t2")
    labels = None
    if has_labels == "1":
        labels = read_raw(path / "labels.raw", "u1", (H, W), "labels")
    for tag, cube in (("t1", t1), ("t2", t2)):
        if not np.isfinite(cube).all():
            raise NonFiniteError(f"{path}: {tag} contains non-finite reflectance values")
    return BitemporalScene(t1, t2, labels, name=meta.get("name", path.name))


# --------------------------------------------------------------------------
# patches
# --------------------------------------------------------------------------

def check_patch_size(K: int) -> int:
    if int(K) != K or K < 1 or K % 2 == 0:
        raise ValueError(f"patch size must be a positive odd integer, got {K}")
    return int(K)


def check_centers(centers, shape: tuple[int, int]) -> np.ndarray:
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    H, W = shape
    bad = (centers[:, 0] < 0) | (centers[:, 0] >= H) | (centers[:, 1] < 0) | (centers[:, 1] >= W)
    if bad.any():
        r, c = centers[np.argmax(bad)]
        raise ValueError(f"center ({r}, {c}) lies outside the {H}x{W} scene")
    return centers


def pad_reflect(cube: np.ndarray, r: int) -> np.ndarray:
    """Reflect-pad the two trailing (spatial) axes by ``r``."""
    widths = [(0, 0)] * (cube.ndim - 2) + [(r, r), (r, r)]
    return np.pad(cube, widths, mode="reflect")


def windows(cube: np.ndarray, centers: np.ndarray, K: int) -> np.ndarray:
    """K x K windows of a (..., H, W) array around ``centers`` with reflect padding.

    Returns shape (N, ..., K, K).
    """
    r = K // 2
    padded = pad_reflect(cube, r)
    view = np.lib.stride_tricks.sliding_window_view(padded, (K, K), axis=(-2, -1))
    out = view[..., centers[:, 0], centers[:, 1], :, :]
    return np.moveaxis(out, -3, 0).copy()


def extract_patches(scene: BitemporalScene, phase, centers, K: int = 7) -> PatchBatch:
    K = check_patch_size(K)
    phase = Phase(phase)
    centers = check_centers(centers, scene.shape)
    patches = windows(scene.cube(phase), centers, K).astype(np.float32)
    labels = None
    if scene.labels is not None:
        labels = scene.labels[centers[:, 0], centers[:, 1]].copy()
    return PatchBatch(patches, centers, (phase,) * len(centers), labels)


def all_centers(shape: tuple[int, int]) -> np.ndarray:
    H, W = shape
    rr, cc = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return np.stack([rr.ravel(), cc.ravel()], axis=1)


@dataclass(frozen=True)
class BandScaler:
    """Per-band standardization fitted jointly on both phases of a scene."""

    mean: np.ndarray
    std: np.ndarray = field(repr=False)

    @classmethod
    def fit(cls, scene: BitemporalScene) -> "BandScaler":
        both = np.concatenate([scene.t1, scene.t2], axis=1).astype(np.float64)
        mean = both.mean(axis=(1, 2))
        std = both.std(axis=(1, 2))
        std[std < 1e-12] = 1.0
        return cls(mean, std)

    def transform(self, scene: BitemporalScene) -> BitemporalScene:
        m = self.mean[:, None, None]
        s = self.std[:, None, None]
        return BitemporalScene(
            ((scene.t1 - m) / s).astype(np.float32),
            ((scene.t2 - m) / s).astype(np.float32),
            scene.labels,
            scene.name,
        )

    def inverse(self, cube: np.ndarray) -> np.ndarray:
        return cube * self.std[:, None, None] + self.mean[:, None, None]


def standardize(scene: BitemporalScene) -> BitemporalScene:
    return BandScaler.fit(scene).transform(scene)


def save_change_map(cmap: ChangeMap, path) -> None:
    """Directory with a ``meta`` manifest and ``map.raw`` (u8, H x W)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W = cmap.decisions.shape
    write_manifest(path / "meta", {"kind": "change_map", "name": cmap.scene_name, "H": H, "W": W,
                                   "dtype": "uint8"})
    write_raw(path / "map.raw", cmap.decisions, "u1")


def load_change_map(path) -> ChangeMap:
    path = Path(path)
    if not path.is_dir():
        raise MalformedContainerError(f"change map {path} is not a directory")
    meta = read_manifest(path / "meta")
    if meta.get("kind") != "change_map":
        raise MalformedContainerError(f"{path}: not a change map container")
    H, W = (_int_field(meta, k, path) for k in ("H", "W"))
    d = read_raw(path / "map.raw", "u1", (H, W), "map")
    if not np.isin(d, (0, 1)).all():
        raise MalformedContainerError(f"{path}: map.raw holds non-binary decisions")
    return ChangeMap(d, meta.get("name", path.name))
