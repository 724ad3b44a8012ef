import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from fewseg.metrics import aggregate, assd, evaluate_label_maps, iou


def test_iou_identical():
    a = np.zeros((6, 6), bool)
    a[1:4, 2:5] = True
    assert iou(a, a) == 100.0


def test_iou_disjoint():
    a = np.zeros((6, 6), bool)
    b = a.copy()
    a[0, 0] = b[5, 5] = True
    assert iou(a, b) == 0.0


def test_iou_half():
    gt = np.ones((10, 10), bool)
    pred = gt.copy()
    pred[:, 5:] = False
    assert iou(pred, gt) == 50.0


def test_iou_both_empty():
    z = np.zeros((3, 3), bool)
    assert iou(z, z) == 100.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_assd_identical():
    a = np.zeros((8, 8), bool)
    a[2:6, 1:7] = True
    assert assd(a, a) == 0.0


def test_assd_two_points():
    a = np.zeros((10, 10), bool)
    b = a.copy()
    a[2, 2] = True
    b[2, 5] = True
    assert assd(a, b, (1.0, 1.0)) == pytest.approx(3.0)


def test_assd_empty_undefined():
    a = np.zeros((4, 4), bool)
    b = a.copy()
    b[1, 1] = True
    assert assd(a, b) is None


def test_assd_random_vs_bruteforce():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.random((32, 32)) < 0.2
        b = rng.random((32, 32)) < 0.3
        sp = (0.8, 1.7)
        assert assd(a, b, sp) == pytest.approx(oracles.assd(a, b, sp), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, (12, 12)), arrays(np.bool_, (12, 12)), st.integers(-3, 3), st.integers(-3, 3))
def test_symmetry_and_translation(a, b, dr, dc):
    assert iou(a, b) == iou(b, a)
    if a.any() and b.any():
        assert assd(a, b) == pytest.approx(assd(b, a), abs=1e-12)
        pad = 4
        A = np.pad(a, pad)
        B = np.pad(b, pad)
        At, Bt = np.roll(A, (dr, dc), (0, 1)), np.roll(B, (dr, dc), (0, 1))
        assert iou(At, Bt) == iou(A, B)
        assert assd(At, Bt) == pytest.approx(assd(A, B), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.bool_, (10, 10)), arrays(np.bool_, (10, 10)), st.floats(0.1, 10))
def test_spacing_scaling(a, b, k):
    if a.any() and b.any():
        assert assd(a, b, (k * 0.7, k * 1.3)) == pytest.approx(k * assd(a, b, (0.7, 1.3)), rel=1e-12)
    if a.any():
        assert iou(a, a) == 100.0 and assd(a, a) == 0.0


def test_aggregate_two_points():
    r = aggregate({("femur", "IoU"): [50.0, 100.0]}).row("femur", "IoU")
    assert (r.mean, r.std, r.n, r.excluded) == (75.0, 25.0, 2, 0)


def test_aggregate_single_value():
    assert aggregate({("a", "ASSD"): [3.0]}).row("a", "ASSD").std == 0.0


def test_aggregate_with_undefined():
    vals = [1.0, None, 3.0, None, 8.0]
    r = aggregate({("a", "ASSD"): vals}).row("a", "ASSD")
    defined = [v for v in vals if v is not None]
    assert r.mean == pytest.approx(sum(defined) / len(defined))
    assert r.n == 3 and r.excluded == 2


def test_aggregate_no_data_and_outputs():
    rep = aggregate({("a", "ASSD"): [None, None], ("a", "IoU"): [90.0]})
    assert rep.row("a", "ASSD").no_data
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "anatomy,metric,mean,std,n,excluded"
    assert "no data" in csv_text
    doc = json.loads(rep.to_json())
    assert doc["rows"][0]["status"] == "no data"


def test_evaluate_label_maps_rows():
    gt = np.zeros((10, 10), int)
    gt[2:5, 2:5] = 1
    gt[6:9, 6:9] = 2
    rep = evaluate_label_maps([("s0", gt.copy(), gt, (1.0, 1.0))], (1, 2))
    assert len(rep.rows) == 4
    assert rep.row("1", "IoU").mean == 100.0
    assert rep.row("2", "ASSD").mean == 0.0
