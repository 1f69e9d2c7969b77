"""Token-based transformer noise predictor eps_theta(x_t, t, c).

Every pixel of the noisy K x K patch becomes a token (its C-band spectrum
projected to ``token_dim``); a sinusoidal timestep token and a learned phase
token are prepended. The first half of the blocks are the shallow stream; each
deep block first cross-attends (queries from the deep stream) into the output
of its mirrored shallow block, replacing U-ViT's long skip connections.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import BitemporalScene, Phase, all_centers, standardize, windows
from .diffusion import NoiseSchedule, estimate_x0, forward_diffuse, noise_loss

logger = logging.getLogger(__name__)

CONDITIONS = {"T1": 0, "T2": 1, "none": 2}


@dataclass(frozen=True)
class PredictorConfig:
    bands: int = 16
    patch: int = 7
    token_dim: int = 64
    n_heads: int = 4
    depth: int = 4
    mlp_ratio: int = 2
    feature_timesteps: tuple[int, ...] = (5, 10, 100)

    def __post_init__(self):
        object.__setattr__(self, "feature_timesteps", tuple(int(t) for t in self.feature_timesteps))
        if self.depth < 2 or self.depth % 2:
            raise ValueError(f"depth must be even and >= 2, got {self.depth}")
        if self.token_dim % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide token_dim={self.token_dim}")
        if self.patch % 2 == 0:
            raise ValueError(f"patch must be odd, got {self.patch}")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 1000
    lr: float = 1e-5
    batch_size: int = 128
    weight_decay: float = 1e-2
    conditional: bool = True
    max_patches_per_epoch: Optional[int] = None


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, hidden: int):
        super().__init__(nn.LayerNorm(dim), nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


class Block(nn.Module):
    """Pre-norm transformer block, optionally preceded by cross-attention."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, cross: bool = False):
        super().__init__()
        self.cross = cross
        if cross:
            self.norm_q = nn.LayerNorm(dim)
            self.norm_kv = nn.LayerNorm(dim)
            self.cross_attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.ff = FeedForward(dim, dim * mlp_ratio)

    def forward(self, x: torch.Tensor, skip: Optional[torch.Tensor] = None) -> torch.Tensor:
        if self.cross:
            q, kv = self.norm_q(x), self.norm_kv(skip)
            x = x + self.cross_attn(q, kv, kv, need_weights=False)[0]
        h = self.norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(x)


class NoisePredictor(nn.Module):
    def __init__(self, config: PredictorConfig, schedule: Optional[dict] = None):
        super().__init__()
        self.config = config
        self.schedule = dict(schedule or {})
        D, C, K = config.token_dim, config.bands, config.patch
        self.pixel_embed = nn.Linear(C, D)
        self.pos_embed = nn.Parameter(torch.zeros(1, K * K, D))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.time_mlp = nn.Sequential(nn.Linear(D, D), nn.SiLU(), nn.Linear(D, D))
        self.cond_embed = nn.Embedding(len(CONDITIONS), D)
        half = config.depth // 2
        self.shallow = nn.ModuleList(Block(D, config.n_heads, config.mlp_ratio) for _ in range(half))
        self.deep = nn.ModuleList(Block(D, config.n_heads, config.mlp_ratio, cross=True) for _ in range(half))
        self.norm = nn.LayerNorm(D)
        self.out = nn.Linear(D, C)

    def forward(self, xt: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        B, C, K, _ = xt.shape
        tokens = self.pixel_embed(xt.flatten(2).transpose(1, 2)) + self.pos_embed
        t_tok = self.time_mlp(timestep_embedding(t, self.config.token_dim).to(xt.dtype))[:, None]
        c_tok = self.cond_embed(cond)[:, None]
        x = torch.cat([t_tok, c_tok, tokens], dim=1)
        skips = []
        for blk in self.shallow:
            x = blk(x)
            skips.append(x)
        for blk in self.deep:
            x = blk(x, skips.pop())
        x = self.out(self.norm(x[:, 2:]))
        return x.transpose(1, 2).reshape(B, C, K, K)


def init_predictor(config: PredictorConfig, schedule: Optional[NoiseSchedule] = None, seed: int = 0,
                   dtype=torch.float32) -> NoisePredictor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = NoisePredictor(config, schedule.identity() if schedule is not None else None)
    return model.to(dtype)


def _cond_id(c) -> int:
    key = c.value if isinstance(c, Phase) else str(c)
    if key not in CONDITIONS:
        raise ValueError(f"unknown condition {c!r}; expected one of {sorted(CONDITIONS)}")
    return CONDITIONS[key]


def _cond_tensor(cond, n: int) -> torch.Tensor:
    if isinstance(cond, torch.Tensor):
        return cond.to(torch.long).expand(n) if cond.ndim == 0 else cond.to(torch.long)
    if isinstance(cond, np.ndarray) and cond.dtype.kind in "iu":
        return torch.as_tensor(cond, dtype=torch.long)
    if isinstance(cond, (str, Phase, int, np.integer)):
        value = int(cond) if isinstance(cond, (int, np.integer)) else _cond_id(cond)
        return torch.full((n,), value, dtype=torch.long)
    return torch.as_tensor([_cond_id(c) for c in cond], dtype=torch.long)


def _t_tensor(t, n: int) -> torch.Tensor:
    tt = torch.as_tensor(t.detach() if isinstance(t, torch.Tensor) else np.asarray(t), dtype=torch.long)
    return tt.reshape(1).expand(n) if tt.ndim == 0 else tt


def _param_dtype(state: nn.Module) -> torch.dtype:
    return next(state.parameters()).dtype


def predict_noise(state: NoisePredictor, xt, t, cond):
    """eps_theta for a single (C, K, K) patch or a (N, C, K, K) batch.

    Numpy input gives numpy output; tensors stay in the autograd graph.
    """
    cfg = state.config
    is_numpy = not isinstance(xt, torch.Tensor)
    x = torch.as_tensor(np.asarray(xt), dtype=_param_dtype(state)) if is_numpy else xt
    single = x.ndim == 3
    if single:
        x = x[None]
    if tuple(x.shape[1:]) != (cfg.bands, cfg.patch, cfg.patch):
        raise ValueError(f"expected patches of shape {(cfg.bands, cfg.patch, cfg.patch)}, got {tuple(x.shape[1:])}")
    n = x.shape[0]
    tt = _t_tensor(t, n)
    T = state.schedule.get("T")
    if T is not None and (tt.min() < 0 or tt.max() >= T):
        raise ValueError(f"timestep out of range [0, {T})")
    if is_numpy:
        with torch.no_grad():
            out = state(x, tt, _cond_tensor(cond, n))
        out = out.numpy()
    else:
        out = state(x, tt, _cond_tensor(cond, n))
    return out[0] if single else out


def scdm_estimates(state: NoisePredictor, x0, cond, sched: NoiseSchedule, rng: torch.Generator,
                   timesteps: Optional[Sequence[int]] = None) -> torch.Tensor:
    """x0 estimates at each feature timestep, concatenated on the band axis.

    ``x0`` is (N, C, K, K); returns (N, len(timesteps) * C, K, K).
    """
    if state.schedule and state.schedule.get("T") != sched.T:
        raise ValueError(f"predictor was trained with T={state.schedule.get('T')}, schedule has T={sched.T}")
    timesteps = state.config.feature_timesteps if timesteps is None else timesteps
    x0 = torch.as_tensor(np.asarray(x0) if not isinstance(x0, torch.Tensor) else x0, dtype=_param_dtype(state))
    n = x0.shape[0]
    cond = _cond_tensor(cond, n)
    outs = []
    with torch.no_grad():
        for t in timesteps:
            eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
            xt = forward_diffuse(x0, t, eps, sched)
            eps_hat = state(xt, torch.full((n,), int(t), dtype=torch.long), cond)
            outs.append(estimate_x0(xt, t, eps_hat, sched))
    return torch.cat(outs, dim=1)


def extract_features(state: NoisePredictor, x0_patch, cond, sched: NoiseSchedule, rng: torch.Generator,
                     projection: Optional[nn.Module] = None) -> torch.Tensor:
    """Multi-timestep x0 estimates, optionally mapped through a 1x1 projection.

    Accepts one (C, K, K) patch or a batch. The projection belongs to the
    change-detection head (it is trained in stage 2 while the predictor is frozen).
    """
    x = torch.as_tensor(np.asarray(x0_patch)) if not isinstance(x0_patch, torch.Tensor) else x0_patch
    single = x.ndim == 3
    est = scdm_estimates(state, x[None] if single else x, cond, sched, rng)
    out = projection(est) if projection is not None else est
    return out[0] if single else out


def scene_patches(scene: BitemporalScene, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Every pixel of both phases as a patch; returns (patches, condition ids)."""
    centers = all_centers(scene.shape)
    p1 = windows(scene.t1, centers, K)
    p2 = windows(scene.t2, centers, K)
    conds = np.r_[np.full(len(p1), CONDITIONS["T1"]), np.full(len(p2), CONDITIONS["T2"])]
    return np.concatenate([p1, p2]).astype(np.float32), conds


def pretrain(scenes: Sequence[BitemporalScene], cfg: PredictorConfig, sched: NoiseSchedule,
             opt_cfg: PretrainConfig, seed: int = 0, init_state: Optional[NoisePredictor] = None,
             history: Optional[list[float]] = None):
    """Stage 1: fit eps_theta on patches from all pixels of both phases.

    Returns (state, loss_history) with one mean training loss per epoch.
    Scenes are standardized per band before patching.
    """
    if not scenes:
        raise ValueError("pretrain needs at least one scene")
    patches, conds = [], []
    for s in scenes:
        if s.band_count != cfg.bands:
            raise ValueError(f"scene {s.name} has {s.band_count} bands, config expects {cfg.bands}")
        p, c = scene_patches(standardize(s), cfg.patch)
        patches.append(p)
        conds.append(c)
    X = torch.from_numpy(np.concatenate(patches))
    cond = torch.from_numpy(np.concatenate(conds))
    if not opt_cfg.conditional:
        cond = torch.full_like(cond, CONDITIONS["none"])

    gen = torch.Generator().manual_seed(int(seed))
    state = init_state if init_state is not None else init_predictor(cfg, sched, seed=seed)
    X = X.to(_param_dtype(state))
    opt = torch.optim.AdamW(state.parameters(), lr=opt_cfg.lr, weight_decay=opt_cfg.weight_decay)
    history = list(history or [])
    n = len(X)
    per_epoch = min(n, opt_cfg.max_patches_per_epoch or n)
    state.train()
    for epoch in range(opt_cfg.epochs):
        order = torch.randperm(n, generator=gen)[:per_epoch]
        total, count = 0.0, 0
        for start in range(0, per_epoch, opt_cfg.batch_size):
            idx = order[start:start + opt_cfg.batch_size]
            x0 = X[idx]
            t = torch.randint(0, sched.T, (len(idx),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            xt = forward_diffuse(x0, t, eps, sched)
            loss = noise_loss(eps, state(xt, t, cond[idx]))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.append(total / count)
        logger.info("pretrain epoch %d loss %.4f", len(history), history[-1])
    state.eval()
    return state, history


def validation_loss(state: NoisePredictor, patches, cond, sched: NoiseSchedule, seed: int = 0,
                    batch_size: int = 512) -> float:
    """Mean noise loss on fixed (seeded) timesteps and noise."""
    gen = torch.Generator().manual_seed(int(seed))
    X = torch.as_tensor(np.asarray(patches), dtype=_param_dtype(state))
    cond = _cond_tensor(cond, len(X))
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(X), batch_size):
            x0 = X[start:start + batch_size]
            t = torch.randint(0, sched.T, (len(x0),), generator=gen)
            eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
            xt = forward_diffuse(x0, t, eps, sched)
            total += noise_loss(eps, state(xt, t, cond[start:start + batch_size])).item() * len(x0)
    return total / len(X)
