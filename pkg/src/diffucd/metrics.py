"""Confusion counts, OA / KC / F1 scores, and error-map rendering."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import CHANGED, UNCHANGED, UNKNOWN, ChangeMap

# TP, TN, FP, FN, unknown
COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (255, 0, 0),
    "fn": (0, 255, 0),
    "unknown": (128, 128, 128),
}


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    oa: float
    kc: float
    pre: float
    f1: float


def _decisions(pred) -> np.ndarray:
    return pred.decisions if isinstance(pred, ChangeMap) else np.asarray(pred)


def confusion(pred, gt) -> Confusion:
    p = _decisions(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    known = g != UNKNOWN
    if not known.any():
        raise ValueError("no evaluable pixels: every ground-truth pixel is unknown")
    p, g = p[known] == CHANGED, g[known] == CHANGED
    return Confusion(
        tp=int(np.sum(p & g)),
        fp=int(np.sum(p & ~g)),
        tn=int(np.sum(~p & ~g)),
        fn=int(np.sum(~p & g)),
    )


def report(c: Confusion) -> MetricsReport:
    n = c.total
    if n == 0:
        raise ValueError("cannot score an empty confusion matrix")
    tp, fp, tn, fn = c.tp, c.fp, c.tn, c.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    oa = (tp + tn) / n
    pre = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / n ** 2
    kc = (oa - pre) / (1 - pre) if pre != 1 else 0.0
    f1 = 2 / (1 / recall + 1 / precision) if tp else 0.0
    return MetricsReport(precision, recall, oa, kc, pre, f1)


def evaluate(pred, gt) -> MetricsReport:
    return report(confusion(pred, gt))


def kappa(pred, gt) -> float:
    return evaluate(pred, gt).kc


def render_map(pred, gt) -> np.ndarray:
    """(H, W, 3) uint8 error map: TP white, TN black, FP red, FN green, unknown gray."""
    p = _decisions(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground-truth shape {g.shape}")
    img = np.empty(p.shape + (3,), dtype=np.uint8)
    masks = {
        "tp": (p == CHANGED) & (g == CHANGED),
        "tn": (p == UNCHANGED) & (g == UNCHANGED),
        "fp": (p == CHANGED) & (g == UNCHANGED),
        "fn": (p == UNCHANGED) & (g == CHANGED),
        "unknown": g == UNKNOWN,
    }
    for key, m in masks.items():
        img[m] = COLORS[key]
    return img


def save_png(img: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(img).save(Path(path), format="PNG")


def write_report(rep: MetricsReport, path, conf: Confusion | None = None) -> None:
    fields = asdict(rep)
    if conf is not None:
        fields.update({k: v for k, v in asdict(conf).items()})
    Path(path).write_text("".join(f"{k}={v!r}\n" for k, v in fields.items()))


def read_report(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            try:
                out[k] = int(v)
            except ValueError:
                out[k] = float(v)
    return out
