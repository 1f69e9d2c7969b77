"""Fusion of contrastive and diffusion features, the change-detection head, stage-2 training."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ctcl import EncoderConfig, SpectralEncoder, build_pairs, init_encoder, nt_xent_loss
from .data import UNKNOWN, UNCHANGED, BitemporalScene, ChangeMap, all_centers, standardize, windows
from .diffusion import NoiseSchedule
from .predictor import NoisePredictor, scdm_estimates
from .pseudo import TrainingPixels
from .seeding import numpy_rng, sub_seed, torch_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HeadConfig:
    feat_dim: int = 16
    bands: int = 16
    patch: int = 7
    n_timesteps: int = 3
    depth: int = 2
    n_heads: int = 4
    use_scdm: bool = True

    def __post_init__(self):
        if (2 * self.feat_dim) % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide 2 * feat_dim={2 * self.feat_dim}")


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 200
    lr: float = 1.0
    batch_size: int = 128
    lambda_con: float = 1.0
    pair_batch: int = 128
    infer_batch: int = 512


class ChangeHead(nn.Module):
    """Difference-branch 1x1 conv, diffusion-feature projection, spatial transformer classifier."""

    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        D, K = config.feat_dim, config.patch
        self.diff_conv = nn.Conv2d(D, 2 * D, kernel_size=1)
        if config.use_scdm:
            self.scdm_proj = nn.Conv2d(config.n_timesteps * config.bands, D, kernel_size=1)
        self.pos_embed = nn.Parameter(torch.randn(1, K * K, 2 * D) * 0.02)
        layer = nn.TransformerEncoderLayer(2 * D, config.n_heads, dim_feedforward=4 * D, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.transformer = nn.TransformerEncoder(layer, config.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(2 * D)
        self.classifier = nn.Linear(2 * D, 2)


def init_head(config: HeadConfig, seed: int = 0, dtype=torch.float32) -> ChangeHead:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ChangeHead(config)
    return model.to(dtype)


def fuse(ctcl_1, ctcl_2, scdm_1, scdm_2, state: ChangeHead) -> torch.Tensor:
    """(Conv(ctcl_1 - ctcl_2) + [ctcl_1, ctcl_2] + [scdm_1, scdm_2]) / 3 on (D, K, K) or (N, D, K, K) maps.

    With ``scdm_1 = scdm_2 = None`` the diffusion branch is dropped and the
    remaining two branches are averaged.
    """
    single = ctcl_1.ndim == 3
    maps = [m if m is None or not single else m[None] for m in (ctcl_1, ctcl_2, scdm_1, scdm_2)]
    c1, c2, s1, s2 = maps
    if c1.shape != c2.shape or (s1 is not None and (s1.shape != c1.shape or s2.shape != c1.shape)):
        raise ValueError("fusion inputs must share one (D, K, K) shape")
    a = state.diff_conv(c1 - c2)
    b = torch.cat([c1, c2], dim=1)
    if s1 is None:
        out = (a + b) / 2
    else:
        out = (a + b + torch.cat([s1, s2], dim=1)) / 3
    return out[0] if single else out


def classify(state: ChangeHead, fused: torch.Tensor) -> torch.Tensor:
    """Logits (unchanged, changed) of each patch's center pixel."""
    single = fused.ndim == 3
    x = fused[None] if single else fused
    D2, K = 2 * state.config.feat_dim, state.config.patch
    if tuple(x.shape[1:]) != (D2, K, K):
        raise ValueError(f"fused map must be {(D2, K, K)}, got {tuple(x.shape[1:])}")
    tokens = x.flatten(2).transpose(1, 2) + state.pos_embed
    h = state.norm(state.transformer(tokens))
    logits = state.classifier(h[:, (K * K) // 2])
    return logits[0] if single else logits


def change_loss(logits, labels, clamp: float = 1e-7):
    """Mean binary cross-entropy of softmax P(changed), probabilities clamped to [clamp, 1 - clamp]."""
    to_t = not isinstance(logits, torch.Tensor)
    if to_t:
        logits = torch.as_tensor(np.asarray(logits, dtype=np.float64))
    y = torch.as_tensor(np.asarray(labels) if not isinstance(labels, torch.Tensor) else labels).to(logits.dtype)
    if logits.shape[0] == 0:
        raise ValueError("change_loss needs a nonempty batch")
    p = torch.softmax(logits, dim=-1)[:, 1].clamp(clamp, 1 - clamp)
    loss = -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()
    return loss.item() if to_t else loss


def total_loss(change, con, lambda_con: float = 1.0):
    if lambda_con < 0:
        raise ValueError(f"lambda_con must be >= 0, got {lambda_con}")
    return change + lambda_con * con


def gather_windows(fmap: torch.Tensor, centers: np.ndarray, K: int) -> torch.Tensor:
    """(N, D, K, K) reflect-padded windows of a (D, H, W) tensor, differentiable."""
    r = K // 2
    padded = F.pad(fmap[None], (r, r, r, r), mode="reflect")[0]
    offs = torch.arange(K)
    rows = torch.as_tensor(centers[:, 0])[:, None] + offs
    cols = torch.as_tensor(centers[:, 1])[:, None] + offs
    out = padded[:, rows[:, :, None], cols[:, None, :]]
    return out.permute(1, 0, 2, 3)


class _Features:
    """Stage-2 inputs for a fixed set of centers of a standardized scene.

    Encoder inputs are kept as flat pixel indices into the scene so a batch
    encodes each distinct pixel once (the encoder is pixelwise).
    """

    def __init__(self, scene: BitemporalScene, centers: np.ndarray, K: int,
                 predictor: Optional[NoisePredictor], sched: Optional[NoiseSchedule],
                 gen: Optional[torch.Generator], batch: int):
        H, W = scene.shape
        C = scene.band_count
        self.spectra1 = torch.from_numpy(scene.t1.reshape(C, -1).T.copy())
        self.spectra2 = torch.from_numpy(scene.t2.reshape(C, -1).T.copy())
        self.index = windows(np.arange(H * W).reshape(H, W), centers, K)  # (N, K, K)
        self.e1 = self.e2 = None
        if predictor is not None:
            e1, e2 = [], []
            for s in range(0, len(centers), batch):
                cb = centers[s:s + batch]
                e1.append(scdm_estimates(predictor, windows(scene.t1, cb, K), "T1", sched, gen))
                e2.append(scdm_estimates(predictor, windows(scene.t2, cb, K), "T2", sched, gen))
            self.e1, self.e2 = torch.cat(e1), torch.cat(e2)

    def encoded(self, encoder: SpectralEncoder, idx) -> tuple[torch.Tensor, torch.Tensor]:
        uniq, inv = np.unique(self.index[np.asarray(idx)], return_inverse=True)
        inv = torch.as_tensor(inv.reshape(len(idx), -1))
        B, K = len(idx), self.index.shape[-1]
        maps = []
        for spectra in (self.spectra1, self.spectra2):
            f = encoder.features(spectra[uniq])
            maps.append(f[inv].reshape(B, K, K, -1).permute(0, 3, 1, 2))
        return maps[0], maps[1]


def _forward(encoder: SpectralEncoder, head: ChangeHead, feats: _Features, idx) -> torch.Tensor:
    c1, c2 = feats.encoded(encoder, idx)
    s1 = s2 = None
    if head.config.use_scdm:
        s1, s2 = head.scdm_proj(feats.e1[idx]), head.scdm_proj(feats.e2[idx])
    return classify(head, fuse(c1, c2, s1, s2, head))


def _snapshot(module: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def train_stage2(scene: BitemporalScene, predictor: Optional[NoisePredictor], pixels: TrainingPixels,
                 enc_cfg: EncoderConfig, head_cfg: HeadConfig, cfg: Stage2Config,
                 sched: Optional[NoiseSchedule] = None, seed: int = 0, feature_seed: int = 0):
    """Train the contrastive encoder and change head on pseudo-labelled pixels.

    The diffusion predictor is frozen; its parameters are verified bit-identical
    afterwards. Returns (encoder, head, history).
    """
    labels = np.asarray(pixels.labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("stage-2 training needs both changed and unchanged pseudo-labelled pixels")
    if head_cfg.use_scdm and (predictor is None or sched is None):
        raise ValueError("use_scdm requires a pretrained predictor and its schedule")
    std = standardize(scene)
    frozen_before = None
    if head_cfg.use_scdm:
        predictor.eval()
        predictor.requires_grad_(False)
        frozen_before = _snapshot(predictor)

    feats = _Features(std, pixels.coords, head_cfg.patch, predictor if head_cfg.use_scdm else None,
                      sched, torch.Generator().manual_seed(int(feature_seed)), cfg.infer_batch)
    y = torch.as_tensor(labels, dtype=torch.long)

    encoder = init_encoder(enc_cfg, seed=sub_seed(seed, "init.encoder"))
    head = init_head(head_cfg, seed=sub_seed(seed, "init.head"))
    params = list(encoder.parameters()) + list(head.parameters())
    opt = torch.optim.Adadelta(params, lr=cfg.lr)
    sched_lr = torch.optim.lr_scheduler.LambdaLR(opt, lambda e: max(0.0, 1.0 - e / cfg.epochs))

    # contrastive pairs come from the selected pseudo-unchanged pixels
    pair_map = np.full(std.shape, UNKNOWN, dtype=np.uint8)
    unchanged = pixels.coords[labels == UNCHANGED]
    pair_map[unchanged[:, 0], unchanged[:, 1]] = UNCHANGED

    order_gen = torch_rng(seed, "data.order")
    pair_rng = numpy_rng(seed, "data.pairs")
    history = []
    n = len(y)
    encoder.train()
    head.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=order_gen)
        tot_change = tot_con = 0.0
        steps = 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            logits = _forward(encoder, head, feats, idx)
            l_change = change_loss(logits, y[idx])
            l_con = torch.zeros((), dtype=logits.dtype)
            if cfg.lambda_con > 0:
                pairs = build_pairs(std, pair_map, cfg.pair_batch, pair_rng)
                _, z1 = encoder(torch.from_numpy(pairs.anchors))
                _, z2 = encoder(torch.from_numpy(pairs.positives))
                l_con = nt_xent_loss(z1, z2, enc_cfg.tau)
            loss = total_loss(l_change, l_con, cfg.lambda_con)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot_change += l_change.item()
            tot_con += l_con.item()
            steps += 1
        sched_lr.step()
        history.append(total_loss(tot_change / steps, tot_con / steps, cfg.lambda_con))
        logger.info("stage2 epoch %d loss %.4f", epoch + 1, history[-1])
    encoder.eval()
    head.eval()

    if frozen_before is not None:
        after = predictor.state_dict()
        if any(not torch.equal(frozen_before[k], after[k]) for k in frozen_before):
            raise RuntimeError("diffusion predictor parameters changed during stage-2 training")
    return encoder, head, history


def infer_map(scene: BitemporalScene, predictor: Optional[NoisePredictor], encoder: SpectralEncoder,
              head: ChangeHead, sched: Optional[NoiseSchedule] = None, batch: int = 512,
              feature_seed: int = 0) -> ChangeMap:
    """Classify every pixel of ``scene`` from its centered patch."""
    K = head.config.patch
    if scene.band_count != encoder.config.bands:
        raise ValueError(f"scene has {scene.band_count} bands, encoder expects {encoder.config.bands}")
    std = standardize(scene)
    use_scdm = head.config.use_scdm
    if use_scdm and (predictor is None or sched is None):
        raise ValueError("head uses diffusion features but no predictor/schedule was given")
    gen = torch.Generator().manual_seed(int(feature_seed))
    centers = all_centers(std.shape)
    preds = []
    with torch.no_grad():
        f1 = encoder.feature_map(torch.from_numpy(std.t1.copy()))
        f2 = encoder.feature_map(torch.from_numpy(std.t2.copy()))
        for s in range(0, len(centers), batch):
            cb = centers[s:s + batch]
            c1, c2 = gather_windows(f1, cb, K), gather_windows(f2, cb, K)
            s1 = s2 = None
            if use_scdm:
                p1 = torch.from_numpy(windows(std.t1, cb, K))
                p2 = torch.from_numpy(windows(std.t2, cb, K))
                s1 = head.scdm_proj(scdm_estimates(predictor, p1, "T1", sched, gen))
                s2 = head.scdm_proj(scdm_estimates(predictor, p2, "T2", sched, gen))
            logits = classify(head, fuse(c1, c2, s1, s2, head))
            preds.append(logits.argmax(dim=1).numpy())
    return ChangeMap(np.concatenate(preds).reshape(std.shape).astype(np.uint8), scene.name)


def cross_phase_similarity(encoder: SpectralEncoder, scene: BitemporalScene, mask: np.ndarray) -> float:
    """Mean cosine similarity of T1/T2 projections over pixels in ``mask``."""
    std = standardize(scene)
    r, c = np.nonzero(mask)
    with torch.no_grad():
        _, z1 = encoder(torch.from_numpy(std.t1[:, r, c].T.copy()))
        _, z2 = encoder(torch.from_numpy(std.t2[:, r, c].T.copy()))
    return F.cosine_similarity(z1, z2, dim=1).mean().item()

