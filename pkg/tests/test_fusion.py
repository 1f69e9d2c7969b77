import math

import numpy as np
import pytest
import torch

import oracles
from diffucd.checkpoint import load_head, save_head
from diffucd.ctcl import EncoderConfig
from diffucd.data import windows
from diffucd.diffusion import make_linear_schedule
from diffucd.fusion import (HeadConfig, Stage2Config, change_loss, classify, fuse, gather_windows, infer_map,
                            init_head, total_loss, train_stage2)
from diffucd.predictor import PredictorConfig, init_predictor
from diffucd.pseudo import TrainingPixels

SCHED = make_linear_schedule()
HCFG = HeadConfig(feat_dim=4, bands=8, patch=3, n_timesteps=3, depth=1, n_heads=2)


def _maps(rng, n=None, D=4, K=3):
    shape = (D, K, K) if n is None else (n, D, K, K)
    return [torch.as_tensor(rng.normal(size=shape)) for _ in range(4)]


def test_fuse_matches_scripted_formula(rng):
    head = init_head(HCFG, seed=0, dtype=torch.float64)
    c1, c2, s1, s2 = _maps(rng)
    got = fuse(c1, c2, s1, s2, head).detach().numpy()
    w = head.diff_conv.weight.detach().numpy()[:, :, 0, 0]
    b = head.diff_conv.bias.detach().numpy()
    want = oracles.fuse(*(m.numpy() for m in (c1, c2, s1, s2)), w, b)
    assert np.abs(got - want).max() <= 1e-6


def test_fuse_special_cases(rng):
    head = init_head(HCFG, seed=0, dtype=torch.float64)
    with torch.no_grad():
        head.diff_conv.bias.zero_()
    c1, _, s1, s2 = _maps(rng, n=2)
    out = fuse(c1, c1, s1, s2, head)
    assert torch.allclose(out, (torch.cat([c1, c1], 1) + torch.cat([s1, s2], 1)) / 3)
    z = torch.zeros(4, 3, 3, dtype=torch.float64)
    assert torch.equal(fuse(z, z, z, z, head), torch.zeros(8, 3, 3, dtype=torch.float64))
    with pytest.raises(ValueError):
        fuse(c1, c1[:, :3], s1, s2, head)


def test_fuse_without_diffusion_branch(rng):
    head = init_head(HCFG, seed=0, dtype=torch.float64)
    c1, c2, _, _ = _maps(rng)
    out = fuse(c1, c2, None, None, head)
    assert torch.allclose(out, (head.diff_conv(c1[None] - c2[None])[0] + torch.cat([c1, c2])) / 2)


def test_classify_determinism_and_shape(rng):
    head = init_head(HCFG, seed=0)
    x = torch.randn(5, 8, 3, 3)
    a, b = classify(head, x), classify(head, x)
    assert a.shape == (5, 2) and torch.equal(a, b) and torch.isfinite(a).all()
    assert classify(head, x[0]).shape == (2,)
    with pytest.raises(ValueError):
        classify(head, torch.randn(5, 6, 3, 3))


def test_change_loss_values(rng):
    assert change_loss(np.zeros((4, 2)), [0, 1, 1, 0]) == pytest.approx(math.log(2), abs=1e-12)
    perfect = np.array([[50.0, -50.0], [-50.0, 50.0]])
    assert change_loss(perfect, [0, 1]) <= 1e-6
    logits = rng.normal(size=(20, 2)) * 3
    labels = rng.integers(0, 2, 20)
    assert abs(change_loss(logits, labels) - oracles.bce(logits, labels)) <= 1e-10
    with pytest.raises(ValueError):
        change_loss(np.zeros((0, 2)), [])


def test_change_loss_gradient_fd(rng):
    logits = torch.as_tensor(rng.normal(size=(6, 2)), dtype=torch.float64).requires_grad_()
    labels = torch.as_tensor(rng.integers(0, 2, 6))
    change_loss(logits, labels).backward()
    h = 1e-6
    num = np.zeros((6, 2))
    base = logits.detach().numpy()
    for i in range(6):
        for j in range(2):
            up, down = base.copy(), base.copy()
            up[i, j] += h
            down[i, j] -= h
            num[i, j] = (change_loss(up, labels.numpy()) - change_loss(down, labels.numpy())) / (2 * h)
    g = logits.grad.numpy()
    assert np.abs(num - g).max() / np.abs(g).max() <= 1e-5


def test_total_loss():
    assert total_loss(0.5, 0.25, 1.0) == 0.75
    assert total_loss(0.5, 0.0) == 0.5 and total_loss(0.5, 9.0, 0.0) == 0.5
    with pytest.raises(ValueError):
        total_loss(0.5, 0.25, -1.0)


def test_gather_windows_matches_numpy(rng):
    fmap = torch.as_tensor(rng.normal(size=(3, 6, 5)))
    centers = np.array([[0, 0], [5, 4], [2, 3]])
    assert np.array_equal(gather_windows(fmap, centers, 3).numpy(), windows(fmap.numpy(), centers, 3))


@pytest.fixture(scope="module")
def trained(small_scene):
    pc = PredictorConfig(bands=8, patch=3, token_dim=8, n_heads=2, depth=2, feature_timesteps=(5, 10, 100))
    pred = init_predictor(pc, SCHED, seed=0)
    r = np.random.default_rng(0)
    coords = np.stack([r.integers(0, 20, 60), r.integers(0, 20, 60)], 1)
    pixels = TrainingPixels(coords, small_scene.labels[coords[:, 0], coords[:, 1]])
    ec = EncoderConfig(bands=8, feat_dim=4, proj_dim=4, n_heads=2)
    cfg = Stage2Config(epochs=4, batch_size=16, pair_batch=16)
    return pred, pixels, ec, cfg


def test_train_stage2_freezes_and_is_deterministic(small_scene, trained):
    pred, pixels, ec, cfg = trained
    before = {k: v.clone() for k, v in pred.state_dict().items()}
    e1, h1, hist1 = train_stage2(small_scene, pred, pixels, ec, HCFG, cfg, SCHED, seed=1)
    assert all(torch.equal(before[k], v) for k, v in pred.state_dict().items())
    e2, h2, hist2 = train_stage2(small_scene, pred, pixels, ec, HCFG, cfg, SCHED, seed=1)
    assert hist1 == hist2 and len(hist1) == 4
    for a, b in zip(h1.state_dict().values(), h2.state_dict().values()):
        assert torch.equal(a, b)
    m1 = infer_map(small_scene, pred, e1, h1, SCHED)
    m2 = infer_map(small_scene, pred, e2, h2, SCHED)
    assert m1.decisions.shape == small_scene.shape and np.array_equal(m1.decisions, m2.decisions)
    assert set(np.unique(m1.decisions)) <= {0, 1}


def test_train_stage2_errors(small_scene, trained):
    pred, pixels, ec, cfg = trained
    one_class = TrainingPixels(pixels.coords, np.zeros(len(pixels), np.uint8))
    with pytest.raises(ValueError, match="both"):
        train_stage2(small_scene, pred, one_class, ec, HCFG, cfg, SCHED)
    with pytest.raises(ValueError):
        train_stage2(small_scene, None, pixels, ec, HCFG, cfg, SCHED)


def test_head_checkpoint_roundtrip(tmp_path):
    head = init_head(HCFG, seed=2)
    save_head(head, tmp_path / "h", history=[1.0])
    back, hist, _ = load_head(tmp_path / "h", expected=HCFG)
    x = torch.randn(3, 8, 3, 3)
    assert hist == [1.0] and torch.equal(classify(head, x), classify(back, x))
