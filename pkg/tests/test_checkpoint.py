import pytest
import torch

from diffucd.checkpoint import (CheckpointError, load_encoder, load_head, load_predictor, save_encoder,
                                save_predictor)
from diffucd.ctcl import EncoderConfig, init_encoder
from diffucd.diffusion import make_linear_schedule
from diffucd.predictor import PredictorConfig, init_predictor

TINY = PredictorConfig(bands=4, patch=3, token_dim=8, n_heads=2, depth=2)
SCHED = make_linear_schedule()


@pytest.fixture
def saved(tmp_path):
    save_predictor(init_predictor(TINY, SCHED, seed=0), tmp_path / "p", history=[1.0])
    return tmp_path / "p"


def test_kind_mismatch(saved):
    with pytest.raises(CheckpointError, match="expected 'encoder'"):
        load_encoder(saved)
    with pytest.raises(CheckpointError, match="expected 'head'"):
        load_head(saved)


def test_config_incompatibility(saved):
    other = PredictorConfig(bands=4, patch=3, token_dim=16, n_heads=2, depth=2)
    with pytest.raises(CheckpointError, match="token_dim"):
        load_predictor(saved, expected=other)


def test_schedule_incompatibility(saved):
    with pytest.raises(CheckpointError, match="schedule"):
        load_predictor(saved, schedule=make_linear_schedule(100))


def test_version_and_format(saved):
    meta = (saved / "meta").read_text()
    (saved / "meta").write_text(meta.replace("version=1", "version=7"))
    with pytest.raises(CheckpointError, match="version"):
        load_predictor(saved)
    (saved / "meta").write_text(meta.replace("format=diffucd-checkpoint", "format=other"))
    with pytest.raises(CheckpointError, match="container"):
        load_predictor(saved)


def test_truncated_parameter(saved):
    raw = saved / "params" / "out.weight.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(ValueError, match="out.weight"):
        load_predictor(saved)


def test_missing(tmp_path):
    with pytest.raises(CheckpointError, match="does not exist"):
        load_predictor(tmp_path / "nothing")


def test_float64_roundtrip(tmp_path):
    enc = init_encoder(EncoderConfig(bands=5, feat_dim=4, proj_dim=3, n_heads=2), seed=1, dtype=torch.float64)
    save_encoder(enc, tmp_path / "e")
    back, _, _ = load_encoder(tmp_path / "e")
    assert next(back.parameters()).dtype == torch.float64
    for k, v in enc.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])
