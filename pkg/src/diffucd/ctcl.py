"""Cross-temporal contrastive learning: spectral encoder, projection MLP, NT-Xent."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import UNCHANGED, BitemporalScene


@dataclass(frozen=True)
class EncoderConfig:
    bands: int = 16
    chunk: int = 4
    feat_dim: int = 16
    proj_dim: int = 16
    depth: int = 1
    n_heads: int = 4
    tau: float = 0.5

    def __post_init__(self):
        if self.feat_dim % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide feat_dim={self.feat_dim}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")

    @property
    def n_tokens(self) -> int:
        return -(-self.bands // self.chunk)


class SpectralEncoder(nn.Module):
    """Band-group tokens -> transformer with a learned pooling token -> feature -> MLP projection."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        D = config.feat_dim
        self.band_embed = nn.Linear(config.chunk, D)
        self.pos_embed = nn.Parameter(torch.randn(1, config.n_tokens, D) * 0.02)
        self.pool_token = nn.Parameter(torch.zeros(1, 1, D))
        layer = nn.TransformerEncoderLayer(D, config.n_heads, dim_feedforward=2 * D, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, config.depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(D)
        self.projector = nn.Sequential(nn.Linear(D, D), nn.ReLU(), nn.Linear(D, config.proj_dim))

    def features(self, spectra: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        pad = cfg.n_tokens * cfg.chunk - cfg.bands
        x = F.pad(spectra, (0, pad)) if pad else spectra
        tokens = self.band_embed(x.reshape(-1, cfg.n_tokens, cfg.chunk)) + self.pos_embed
        x = torch.cat([self.pool_token.expand(len(tokens), -1, -1), tokens], dim=1)
        return self.norm(self.encoder(x)[:, 0])

    def forward(self, spectra: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.features(spectra)
        return f, self.projector(f)

    def feature_map(self, cube: torch.Tensor) -> torch.Tensor:
        """Apply the encoder pixelwise to (..., C, H, W) -> (..., D, H, W)."""
        C = cube.shape[-3]
        lead = cube.shape[:-3]
        H, W = cube.shape[-2:]
        flat = cube.movedim(-3, -1).reshape(-1, C)
        f = self.features(flat).reshape(*lead, H, W, -1)
        return f.movedim(-1, -3)


def init_encoder(config: EncoderConfig, seed: int = 0, dtype=torch.float32) -> SpectralEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SpectralEncoder(config)
    return model.to(dtype)


def encode(state: SpectralEncoder, spectra):
    """(features (N, feat_dim), projections (N, proj_dim)) for (N, C) spectra."""
    is_numpy = not isinstance(spectra, torch.Tensor)
    dtype = next(state.parameters()).dtype
    x = torch.as_tensor(np.asarray(spectra), dtype=dtype) if is_numpy else spectra
    if x.ndim != 2 or x.shape[1] != state.config.bands:
        raise ValueError(f"expected spectra of shape (N, {state.config.bands}), got {tuple(x.shape)}")
    if is_numpy:
        with torch.no_grad():
            f, z = state(x)
        return f.numpy(), z.numpy()
    return state(x)


def nt_xent_loss(z1, z2, tau: float = 0.5):
    """Symmetric NT-Xent over Q positive pairs (z1[k], z2[k]).

    The 2Q embeddings are interleaved as (z1[0], z2[0], z1[1], ...). Each
    anchor's denominator runs over all other 2Q - 1 samples, positive included.
    """
    to_t = not isinstance(z1, torch.Tensor)
    if to_t:
        z1 = torch.as_tensor(np.asarray(z1, dtype=np.float64))
        z2 = torch.as_tensor(np.asarray(z2, dtype=np.float64))
    if z1.shape != z2.shape or z1.ndim != 2:
        raise ValueError(f"z1 {tuple(z1.shape)} and z2 {tuple(z2.shape)} must both be (Q, D)")
    Q = z1.shape[0]
    if Q < 2:
        raise ValueError(f"NT-Xent needs at least 2 pairs, got Q={Q}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = torch.stack([z1, z2], dim=1).reshape(2 * Q, -1)
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("zero-norm embedding: cosine similarity undefined")
    u = z / norms
    logits = (u @ u.T) / tau
    eye = torch.eye(2 * Q, dtype=torch.bool)
    logits = logits.masked_fill(eye, float("-inf"))
    partner = torch.arange(2 * Q) ^ 1
    loss = F.cross_entropy(logits, partner, reduction="mean")
    return loss.item() if to_t else loss


@dataclass(frozen=True)
class PairBatch:
    anchors: np.ndarray
    positives: np.ndarray
    locations: np.ndarray

    @property
    def Q(self) -> int:
        return len(self.anchors)


def build_pairs(scene: BitemporalScene, pseudo, batch_size: int, rng: np.random.Generator) -> PairBatch:
    """Cross-phase spectra at ``batch_size`` pseudo-unchanged locations (without replacement)."""
    labels = pseudo.labels if hasattr(pseudo, "labels") else np.asarray(pseudo)
    rows, cols = np.nonzero(labels == UNCHANGED)
    if len(rows) < 2:
        raise ValueError(f"need at least 2 pseudo-unchanged pixels for contrastive pairs, found {len(rows)}")
    q = min(int(batch_size), len(rows))
    pick = rng.choice(len(rows), size=q, replace=False)
    r, c = rows[pick], cols[pick]
    return PairBatch(scene.t1[:, r, c].T.copy(), scene.t2[:, r, c].T.copy(), np.stack([r, c], 1))
