import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from appaunet import metrics as M

from _oracles import brute_avg_hausdorff, exhaustive_3x3_mismatches, set_metrics

masks = st.integers(2, 12).flatmap(
    lambda n: st.tuples(arrays(np.uint8, (n, n), elements=st.integers(0, 1)), arrays(np.uint8, (n, n), elements=st.integers(0, 1)))
)


def test_binarize_rules():
    assert M.binarize(np.full((3, 3), 0.7)).all()
    assert M.binarize(np.array([0.5]))[0] == 1
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(16, 16))
    np.testing.assert_array_equal(M.binarize(x, 0.5), (x >= 0.5).astype(np.uint8))
    with pytest.raises(ValueError):
        M.binarize(x, 1.0)


def test_overlap_worked_example():
    y = np.array([[1, 1, 0, 0]])
    p = np.array([[1, 0, 0, 1]])
    m = M.overlap_metrics(y, p)
    assert m["ds"] == pytest.approx(0.5)
    assert m["ji"] == pytest.approx(1 / 3)
    assert m["pr"] == pytest.approx(0.5) and m["rc"] == pytest.approx(0.5)
    assert m["sp"] == pytest.approx(0.5)


def test_overlap_identity():
    y = np.eye(5, dtype=np.uint8)
    m = M.overlap_metrics(y, y)
    for k in ("ds", "ji", "f1", "sn", "pr", "rc", "sp"):
        assert m[k] == 1.0


def test_overlap_exhaustive_3x3():
    assert exhaustive_3x3_mismatches(M.overlap_metrics) == []


def test_overlap_shape_mismatch():
    with pytest.raises(ValueError):
        M.overlap_metrics(np.zeros((2, 2)), np.zeros((3, 3)))


@settings(max_examples=100, deadline=None)
@given(masks)
def test_ji_ds_relation(pair):
    y, p = pair
    m = M.overlap_metrics(y, p)
    assert m["ji"] == pytest.approx(m["ds"] / (2 - m["ds"]), abs=1e-12)
    assert m["ji"] <= m["ds"] + 1e-15
    want = set_metrics(y, p)
    for k in want:
        assert m[k] == pytest.approx(want[k], abs=1e-12)


def test_ji_ds_relation_1000_random_pairs():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        n = rng.integers(2, 20)
        y, p = rng.integers(0, 2, (2, n, n))
        m = M.overlap_metrics(y, p)
        assert abs(m["ji"] - m["ds"] / (2 - m["ds"])) <= 1e-12


def test_hausdorff_examples():
    y = np.zeros((3, 3), np.uint8)
    p = np.zeros((3, 3), np.uint8)
    y[0, 0] = 1
    p[0, 2] = 1
    assert M.avg_hausdorff(y, p) == pytest.approx(2.0)
    assert M.avg_hausdorff(y, y) == 0.0
    assert M.avg_hausdorff(np.zeros((4, 6)), np.zeros((4, 6))) == 0.0
    assert M.avg_hausdorff(y, np.zeros((3, 3))) == pytest.approx(math.hypot(3, 3))


@settings(max_examples=100, deadline=None)
@given(masks)
def test_hausdorff_matches_pairwise_oracle(pair):
    y, p = pair
    got = M.avg_hausdorff(y, p)
    assert got == pytest.approx(brute_avg_hausdorff(y, p), rel=1e-12, abs=1e-12)
    assert got == pytest.approx(M.avg_hausdorff(p, y), rel=1e-12, abs=1e-12)
    assert got >= 0
    assert (got == 0) == bool(np.array_equal(y.astype(bool), p.astype(bool)))


def test_ssim_examples():
    rng = np.random.default_rng(1)
    y = (rng.uniform(size=(32, 32)) > 0.5).astype(float)
    assert M.ssim(y, y) == pytest.approx(1.0, abs=1e-12)
    assert M.ssim(y, 1 - y) < 1
    c = np.full((32, 32), 0.5)
    assert M.ssim(c, c) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("shape", [(11, 11), (20, 31), (64, 64)])
def test_ssim_matches_reference_implementation(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(5):
        a = rng.uniform(size=shape)
        b = np.clip(a + rng.normal(0, 0.2, size=shape), 0, 1)
        want = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False)
        assert M.ssim(a, b) == pytest.approx(want, abs=1e-9)


def test_ssim_small_images_use_global_statistics():
    a = np.array([[0.1, 0.9], [0.4, 0.6]])
    b = np.array([[0.2, 0.8], [0.5, 0.3]])
    c1, c2 = 0.01**2, 0.03**2
    mu_a, mu_b = a.mean(), b.mean()
    cov = np.mean((a - mu_a) * (b - mu_b))
    want = (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (a.var() + b.var() + c2))
    assert M.ssim(a, b) == pytest.approx(want, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (12, 12), elements=st.floats(0, 1)), arrays(np.float64, (12, 12), elements=st.floats(0, 1)))
def test_ssim_range_and_determinism(a, b):
    v = M.ssim(a, b)
    assert -1 < v <= 1 + 1e-12
    assert M.ssim(a, b) == v


def test_classification_examples():
    r = M.classification_metrics([0, 1, 2], [0, 1, 2], 3)
    assert r["accuracy"] == 1.0
    r = M.classification_metrics([0, 0, 0, 0], [0, 1, 0, 1], 2)
    assert r["accuracy"] == 0.5
    assert r["recall"][1] == 0.0
    assert r["precision"][0] == 0.5 and r["recall"][0] == 1.0
    with pytest.raises(ValueError):
        M.classification_metrics([], [], 2)
    with pytest.raises(ValueError):
        M.classification_metrics([2], [0], 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_classification_matches_counting_oracle(pairs, rnd):
    pred, true = map(list, zip(*pairs))
    r = M.classification_metrics(pred, true, 3)
    assert r["accuracy"] == pytest.approx(sum(a == b for a, b in pairs) / len(pairs))
    for c in range(3):
        predicted_c = [t for p, t in pairs if p == c]
        actual_c = [p for p, t in pairs if t == c]
        exp_pr = sum(t == c for t in predicted_c) / len(predicted_c) if predicted_c else 0.0
        exp_re = sum(p == c for p in actual_c) / len(actual_c) if actual_c else 0.0
        assert r["precision"][c] == pytest.approx(exp_pr)
        assert r["recall"][c] == pytest.approx(exp_re)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    p2, t2 = map(list, zip(*shuffled))
    assert M.classification_metrics(p2, t2, 3)["accuracy"] == r["accuracy"]


def test_segmentation_report_fields_and_determinism():
    rng = np.random.default_rng(2)
    y, p = rng.integers(0, 2, (2, 16, 16))
    a = M.segmentation_report(y, p)
    assert set(a) == set(M.SEG_FIELDS)
    assert a == M.segmentation_report(y, p)


def test_metric_report_macro_averages():
    r = M.MetricReport(accuracy=0.5, class_precision=[0.2, 0.4], class_recall=[1.0, 0.0])
    assert r.precision == pytest.approx(0.3)
    assert r.recall == pytest.approx(0.5)
    assert M.MetricReport().precision is None
