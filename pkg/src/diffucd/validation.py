"""Input coercion helpers shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np

from .data import CHANGED, UNCHANGED, UNKNOWN, BitemporalScene


def check_scene(X, require_labels: bool = False) -> BitemporalScene:
    """Accept a scene or a ``(t1, t2)`` / ``(t1, t2, labels)`` tuple."""
    if isinstance(X, BitemporalScene):
        scene = X
    elif isinstance(X, (tuple, list)) and len(X) in (2, 3):
        scene = BitemporalScene(*X)
    else:
        raise TypeError(f"expected a BitemporalScene or (t1, t2[, labels]) tuple, got {type(X).__name__}")
    if require_labels and scene.labels is None:
        raise ValueError(f"scene {scene.name!r} carries no label map")
    return scene


def check_label_map(y, shape: tuple[int, int], allow_unknown: bool = True) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != tuple(shape):
        raise ValueError(f"label map shape {y.shape} does not match scene shape {tuple(shape)}")
    allowed = (UNCHANGED, CHANGED, UNKNOWN) if allow_unknown else (UNCHANGED, CHANGED)
    if not np.isin(y, allowed).all():
        raise ValueError(f"label map values must lie in {allowed}")
    return y.astype(np.uint8)


def check_is_fitted(est, attr: str) -> None:
    if not hasattr(est, attr):
        raise RuntimeError(f"{type(est).__name__} is not fitted yet; call fit first")
