import numpy as np
import pytest
from PIL import Image

import oracles
from diffucd.metrics import (COLORS, Confusion, confusion, evaluate, read_report, render_map, report, save_png,
                             write_report)


def test_worked_example():
    rep = report(Confusion(**oracles.WORKED_CONFUSION))
    assert rep.oa == pytest.approx(oracles.WORKED_OA, abs=1e-15)
    assert rep.pre == pytest.approx(oracles.WORKED_PRE, abs=1e-15)
    assert rep.kc == pytest.approx(oracles.WORKED_KC, abs=1e-12)
    assert rep.f1 == pytest.approx(oracles.WORKED_F1, abs=1e-12)
    assert round(rep.kc, 5) == 0.79798 and round(rep.f1, 5) == 0.90909
    assert rep.precision == pytest.approx(50 / 55) and rep.recall == pytest.approx(50 / 55)


def test_kappa_matches_oracle_on_random_tables():
    r = np.random.default_rng(0)
    for _ in range(1000):
        tp, fp, tn, fn = (int(v) for v in r.integers(0, 500, 4))
        if tp + fp + tn + fn == 0:
            continue
        assert abs(report(Confusion(tp, fp, tn, fn)).kc - oracles.cohen_kappa(tp, fp, tn, fn)) <= 1e-12


def test_degenerate_conventions():
    all_neg = report(Confusion(tp=0, fp=0, tn=10, fn=0))
    assert all_neg.oa == 1.0 and all_neg.kc == 0.0 and all_neg.f1 == 0.0 and all_neg.precision == 0.0
    with pytest.raises(ValueError):
        report(Confusion(0, 0, 0, 0))
    with pytest.raises(ValueError):
        Confusion(-1, 0, 0, 0)


def test_confusion_excludes_unknown():
    pred = np.array([[1, 0, 1], [0, 1, 1]])
    gt = np.array([[1, 0, 2], [1, 2, 0]])
    assert confusion(pred, gt) == Confusion(tp=1, fp=1, tn=1, fn=1)
    with pytest.raises(ValueError, match="evaluable"):
        confusion(pred, np.full((2, 3), 2))
    with pytest.raises(ValueError, match="shape"):
        confusion(pred, gt[:, :2])


def test_render_counts_match_confusion(tmp_path):
    r = np.random.default_rng(1)
    pred = r.integers(0, 2, (30, 40))
    gt = r.integers(0, 3, (30, 40))
    img = render_map(pred, gt)
    c = confusion(pred, gt)
    flat = img.reshape(-1, 3)

    def count(key):
        return int((flat == np.array(COLORS[key])).all(axis=1).sum())

    assert (count("tp"), count("fp"), count("tn"), count("fn")) == (c.tp, c.fp, c.tn, c.fn)
    assert count("unknown") == int((gt == 2).sum())
    save_png(img, tmp_path / "m.png")
    assert np.array_equal(np.asarray(Image.open(tmp_path / "m.png")), img)


def test_report_roundtrip(tmp_path):
    pred = np.array([1, 1, 0, 0, 1])
    gt = np.array([1, 0, 0, 1, 1])
    rep = evaluate(pred, gt)
    write_report(rep, tmp_path / "r.txt", confusion(pred, gt))
    back = read_report(tmp_path / "r.txt")
    assert back["kc"] == rep.kc and back["tp"] == 2 and back["fn"] == 1
