"""PCA + 2-means pseudo change labels and balanced training-pixel selection."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.cluster import KMeans

from .data import (CHANGED, UNCHANGED, BitemporalScene, MalformedContainerError, check_patch_size, pad_reflect,
                   read_manifest, read_raw, write_manifest, write_raw)


class DegenerateClusteringError(ValueError):
    pass


@dataclass(frozen=True)
class PseudoLabelMap:
    labels: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        if self.labels.shape != self.confidence.shape:
            raise ValueError("labels and confidence must share a shape")
        if (self.confidence < 0).any():
            raise ValueError("confidence must be non-negative")


@dataclass(frozen=True)
class TrainingPixels:
    coords: np.ndarray  # (N, 2) rows, cols
    labels: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.labels)


def difference_image(scene: BitemporalScene) -> np.ndarray:
    return np.abs(scene.t1 - scene.t2)


def neighborhood_vectors(image: np.ndarray, h: int) -> np.ndarray:
    """(H*W, h*h) overlapping h x h neighborhoods of a 2-D image (reflect padded)."""
    view = np.lib.stride_tricks.sliding_window_view(pad_reflect(image, h // 2), (h, h))
    return view.reshape(-1, h * h)


def two_means(X: np.ndarray, seed: int = 0, max_iter: int = 100, n_init: int = 10):
    """Seeded 2-means; returns (assignments, centroids). Raises on a single cluster."""
    if np.ptp(X, axis=0).max(initial=0.0) == 0.0:
        raise DegenerateClusteringError("all feature vectors are identical: a single cluster")
    km = KMeans(n_clusters=2, n_init=n_init, max_iter=max_iter, random_state=seed)
    assign = km.fit_predict(X)
    if len(np.unique(assign)) < 2:
        raise DegenerateClusteringError("2-means collapsed to a single cluster")
    return assign, km.cluster_centers_


def pca_kmeans_pseudolabel(diff: np.ndarray, block: int = 5, n_components: int = 3, seed: int = 0) -> PseudoLabelMap:
    diff = np.asarray(diff, dtype=np.float64)
    if diff.ndim != 3:
        raise ValueError(f"difference image must be (C, H, W), got shape {diff.shape}")
    h = check_patch_size(block)
    if not 1 <= n_components <= h * h:
        raise ValueError(f"n_components must lie in [1, {h * h}], got {n_components}")
    _, H, W = diff.shape
    magnitude = np.sqrt((diff ** 2).sum(axis=0))
    vecs = neighborhood_vectors(magnitude, h)
    centered = vecs - vecs.mean(axis=0)
    # principal axes of the neighborhood vectors, largest variance first
    evals, evecs = np.linalg.eigh(centered.T @ centered / len(centered))
    basis = evecs[:, ::-1][:, :n_components]
    basis *= np.where(basis.sum(axis=0) < 0, -1.0, 1.0)
    feats = centered @ basis
    assign, centroids = two_means(feats, seed=seed)
    mean_mag = [magnitude.ravel()[assign == k].mean() for k in (0, 1)]
    changed_cluster = int(np.argmax(mean_mag))
    labels = (assign == changed_cluster).astype(np.uint8)
    d = np.linalg.norm(feats[:, None, :] - centroids[None], axis=2)
    own = d[np.arange(len(d)), assign]
    other = d[np.arange(len(d)), 1 - assign]
    return PseudoLabelMap(labels.reshape(H, W), np.abs(other - own).reshape(H, W))


def select_training_pixels(pseudo: PseudoLabelMap, n_changed: int = 500, n_unchanged: int = 500,
                           rng: np.random.Generator | None = None, ranked: bool = True) -> TrainingPixels:
    """Highest-confidence pixels per class (ties broken by a seeded shuffle).

    With ``ranked=False`` the per-class draw is uniform instead.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    flat_labels = pseudo.labels.ravel()
    flat_conf = pseudo.confidence.ravel()
    W = pseudo.labels.shape[1]
    picks, labs = [], []
    for cls, want in ((CHANGED, n_changed), (UNCHANGED, n_unchanged)):
        idx = np.flatnonzero(flat_labels == cls)
        if len(idx) == 0:
            raise ValueError(f"pseudo-label map has no {'changed' if cls else 'unchanged'} pixels")
        if len(idx) < want:
            warnings.warn(f"requested {want} {'changed' if cls else 'unchanged'} pixels, "
                          f"only {len(idx)} available; selecting all", stacklevel=2)
        idx = rng.permutation(idx)
        if ranked:
            idx = idx[np.argsort(-flat_conf[idx], kind="stable")]
        chosen = idx[:want]
        picks.append(chosen)
        labs.append(np.full(len(chosen), cls, dtype=np.uint8))
    flat = np.concatenate(picks)
    coords = np.stack([flat // W, flat % W], axis=1)
    return TrainingPixels(coords, np.concatenate(labs))


def save_pseudo_map(pseudo: PseudoLabelMap, path) -> None:
    """Directory with ``meta``, ``labels.raw`` (u8) and ``confidence.raw`` (f32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    H, W = pseudo.labels.shape
    write_manifest(path / "meta", {"kind": "pseudo_labels", "H": H, "W": W})
    write_raw(path / "labels.raw", pseudo.labels, "u1")
    write_raw(path / "confidence.raw", pseudo.confidence, "f4")


def load_pseudo_map(path) -> PseudoLabelMap:
    path = Path(path)
    meta = read_manifest(path / "meta")
    if meta.get("kind") != "pseudo_labels":
        raise MalformedContainerError(f"{path}: not a pseudo-label container")
    H, W = (int(meta[k]) for k in ("H", "W"))
    labels = read_raw(path / "labels.raw", "u1", (H, W), "labels")
    conf = read_raw(path / "confidence.raw", "f4", (H, W), "confidence")
    return PseudoLabelMap(labels, conf)
