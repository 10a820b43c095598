import csv
import json
import statistics
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cldf.metrics import dice, evaluate, format_report, iou, write_report


def test_examples():
    m = np.array([[1, 1], [0, 0]])
    assert dice(m, m) == 1.0 and iou(m, m) == 1.0
    assert dice(m, 1 - m) == 0.0
    p = np.array([1, 1, 0])
    g = np.array([1, 0, 0])
    assert dice(p, g) == pytest.approx(2 / 3)
    assert iou(p, g) == pytest.approx(1 / 2)
    z = np.zeros((3, 3))
    assert dice(z, z) == 1.0 and iou(z, z) == 1.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        dice(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


masks = arrays(np.uint8, (6, 7), elements=st.integers(0, 1))


@settings(max_examples=200)
@given(p=masks, g=masks)
def test_identity_order_symmetry(p, g):
    d, j = dice(p, g), iou(p, g)
    assert 0 <= j <= d <= 1
    assert abs(d - 2 * j / (1 + j)) < 1e-12
    assert d == dice(g, p) and j == iou(g, p)
    inter = int((p & g).sum())
    tot = int(p.sum() + g.sum())
    if tot:
        # exact in rationals
        fd = Fraction(2 * inter, tot)
        fj = Fraction(inter, tot - inter)
        assert fd == 2 * fj / (1 + fj)


def test_evaluate_small():
    one = np.ones((2, 2))
    r = evaluate([(one, one)])
    assert r["n"] == 1 and r["dice_std"] == 0.0
    r = evaluate([(one, one), (one, 1 - one)])
    assert r["dice_mean"] == 0.5 and r["dice_std"] == 0.5
    assert "Dice 0.500" in format_report(r)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate([])


def test_csv_recomputation(tmp_path):
    rng = np.random.default_rng(0)
    pairs = [(rng.random((8, 8)) < 0.4, rng.random((8, 8)) < 0.4) for _ in range(100)]
    report = evaluate(pairs, names=[f"s{i}" for i in range(100)])
    write_report(report, tmp_path / "r.json", tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    dices = [float(r["dice"]) for r in rows]
    ious = [float(r["iou"]) for r in rows]
    assert len(rows) == 100
    assert statistics.fmean(dices) == pytest.approx(report["dice_mean"], abs=1e-12)
    assert statistics.pstdev(dices) == pytest.approx(report["dice_std"], abs=1e-12)
    assert statistics.fmean(ious) == pytest.approx(report["iou_mean"], abs=1e-12)
    assert statistics.pstdev(ious) == pytest.approx(report["iou_std"], abs=1e-12)
    assert json.loads((tmp_path / "r.json").read_text())["n"] == 100
