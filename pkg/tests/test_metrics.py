"""ROC/AUC against pair counting, report layout, and box-mass geometry."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camnet import metrics
from camnet.attention import AttentionConfig
from camnet.backbone import BackboneConfig, LabelVector
from camnet.data import Dataset, Sample
from camnet.errors import UndefinedCurveError
from camnet.metrics import (EvalReport, auc, box_mass, diagnose, evaluate,
                            localization_report, roc_curve, roc_to_csv,
                            roc_to_svg, scores_report)
from camnet.model import DualBranchModel

from oracles import auc_pair_count


# ---------------------------------------------------------------------------
# diagnosis threshold
# ---------------------------------------------------------------------------


def test_diagnosis_is_strictly_greater_than_half():
    calls = diagnose(np.array([0.0, 0.4999, 0.5, 0.5000001, 1.0]))
    assert calls.tolist() == [0, 0, 0, 1, 1]


def test_diagnosis_accepts_label_vectors():
    scores = LabelVector(np.array([[0.2, 0.8]]), role="fused")
    assert diagnose(scores).tolist() == [[0, 1]]


# ---------------------------------------------------------------------------
# ROC / AUC
# ---------------------------------------------------------------------------


def test_perfect_inverted_and_all_tied_scores():
    labels = np.array([1, 1, 0, 0])
    assert auc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 1.0
    assert auc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 0.0
    assert auc(np.array([0.5, 0.5, 0.5, 0.5]), labels) == 0.5


def test_tied_scores_count_half_by_hand():
    # pos {0.9, 0.5}, neg {0.5, 0.1}: 3 wins + 1 tie out of 4 pairs
    got = auc(np.array([0.9, 0.5, 0.5, 0.1]), np.array([1, 1, 0, 0]))
    assert got == pytest.approx(0.875, abs=1e-12)


def test_curve_runs_from_origin_to_corner_monotonically():
    rng = np.random.default_rng(5)
    curve = roc_curve(rng.uniform(size=50), rng.integers(0, 2, size=50))
    assert curve.points[0] == (0.0, 0.0)
    assert curve.points[-1] == (1.0, 1.0)
    fpr = curve.false_positive_rates()
    tpr = curve.true_positive_rates()
    assert all(a <= b + 1e-12 for a, b in zip(fpr, fpr[1:]))
    assert all(a <= b + 1e-12 for a, b in zip(tpr, tpr[1:]))


def test_single_class_labels_are_rejected_with_counts():
    with pytest.raises(UndefinedCurveError, match=r"class pneumonia.*3 positive, 0 negative"):
        auc(np.array([0.1, 0.2, 0.3]), np.array([1, 1, 1]), class_id="pneumonia")
    with pytest.raises(UndefinedCurveError):
        auc(np.array([0.1]), np.array([0]))


def test_mismatched_lengths_are_rejected():
    with pytest.raises(UndefinedCurveError):
        auc(np.array([0.1, 0.2]), np.array([1]))


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 200),
       levels=st.integers(2, 12))
@settings(max_examples=80, deadline=None)
def test_trapezoid_area_equals_tie_aware_pair_counting(seed, n, levels):
    rng = np.random.default_rng(seed)
    # quantized scores force plenty of exact ties
    scores = rng.integers(0, levels, size=n) / levels
    labels = rng.integers(0, 2, size=n)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    assert auc(scores, labels) == pytest.approx(
        auc_pair_count(scores, labels), abs=1e-9)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def test_report_average_covers_only_defined_classes():
    scores = np.array([[0.9, 0.3, 0.7],
                       [0.8, 0.4, 0.2],
                       [0.1, 0.6, 0.5]])
    labels = np.array([[1, 0, 1],
                       [1, 0, 0],
                       [0, 0, 1]])
    report = scores_report(scores, labels, class_names=["a", "b", "c"])
    assert report.excluded_classes == ["b"]
    assert report.per_class_auc[1] is None
    defined = [report.per_class_auc[0], report.per_class_auc[2]]
    assert report.average_auc == pytest.approx(np.mean(defined))
    assert report.positive_counts == [2, 0, 2]
    assert report.num_samples == 3


def test_report_serializes_to_stable_json_and_readable_text():
    report = scores_report(np.array([[0.9], [0.1]]), np.array([[1], [0]]),
                           class_names=["nodule"], branch="cls")
    payload = json.loads(report.to_json())
    assert payload["branch"] == "cls"
    assert payload["classes"][0] == {"name": "nodule", "auc": 1.0, "positives": 1}
    assert report.to_json() == report.to_json()
    text = report.to_text()
    assert "nodule" in text and "Average" in text and "1.0000" in text


def test_excluded_class_is_marked_in_text():
    report = scores_report(np.array([[0.9], [0.1]]), np.array([[1], [1]]),
                           class_names=["nodule"])
    assert "excluded" in report.to_text()
    assert np.isnan(report.average_auc)


# ---------------------------------------------------------------------------
# curve exports
# ---------------------------------------------------------------------------


def test_csv_round_trips_the_curve_points():
    curve = roc_curve(np.array([0.9, 0.5, 0.5, 0.1]), np.array([1, 1, 0, 0]))
    lines = roc_to_csv(curve).strip().split("\n")
    assert lines[0] == "false_positive_rate,true_positive_rate"
    parsed = [tuple(float(v) for v in line.split(",")) for line in lines[1:]]
    assert parsed == [tuple(map(float, p)) for p in curve.points]


def test_svg_contains_the_polyline_and_frame():
    curve = roc_curve(np.array([0.9, 0.1]), np.array([1, 0]))
    svg = roc_to_svg(curve)
    assert svg.startswith("<svg")
    assert "<polyline" in svg
    assert svg.count(",") >= len(curve.points)


# ---------------------------------------------------------------------------
# branch evaluation on a real model
# ---------------------------------------------------------------------------


def small_model(seed=0):
    backbone = BackboneConfig(input_size=16, stem_channels=4,
                              stage_blocks=[1, 1], stage_channels=[4, 8],
                              num_classes=2)
    attention = AttentionConfig(pre_channels=(3, 3, 3), post_mid_channels=4,
                                map_size=8)
    return DualBranchModel(backbone, attention, seed=seed)


def small_dataset(n=7, size=16, num_classes=2, seed=3, with_boxes=False):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        labels = np.zeros(num_classes)
        labels[i % num_classes] = 1
        boxes = [(i % num_classes, 0, 0, size, size)] if with_boxes else []
        samples.append(Sample(image=rng.uniform(0, 1, size=(1, size, size)),
                              labels=labels, patient_id=f"p{i}",
                              motif_boxes=boxes))
    return Dataset(samples, class_names=[f"c{k}" for k in range(num_classes)])


def test_unknown_branch_is_rejected():
    with pytest.raises(UndefinedCurveError, match="branch"):
        metrics.branch_scores(small_model(), np.zeros((1, 1, 16, 16)), "oracle")


def test_batch_size_does_not_change_scores():
    model = small_model()
    images = small_dataset(n=9).images_array()
    one = metrics.branch_scores(model, images, "fused", batch_size=2)
    other = metrics.branch_scores(model, images, "fused", batch_size=64)
    assert one.shape == (9, 2)
    np.testing.assert_allclose(one, other, rtol=1e-5, atol=1e-7)


def test_evaluate_fills_in_dataset_metadata():
    ds = small_dataset()
    report = evaluate(small_model(), ds, branch="att")
    assert report.branch == "att"
    assert report.num_samples == len(ds)
    assert report.class_names == ds.class_names


# ---------------------------------------------------------------------------
# box mass
# ---------------------------------------------------------------------------


def test_uniform_map_scores_exactly_the_area_fraction():
    uniform = np.full((4, 4), 1 / 16)
    for box in [(0, 0, 16, 16), (5, 9, 20, 11), (0, 0, 64, 64), (63, 63, 1, 1)]:
        mass, baseline = box_mass(uniform, box, image_size=64)
        assert mass == pytest.approx(baseline, abs=1e-12)
        assert baseline == pytest.approx(box[2] * box[3] / 4096)


def test_box_mass_follows_cell_overlap_geometry():
    # 4x4 map over a 64px image: each cell is 16px wide
    point = np.zeros((4, 4))
    point[0, 0] = 1.0
    mass, _ = box_mass(point, (0, 0, 16, 16), image_size=64)
    assert mass == pytest.approx(1.0)
    mass, _ = box_mass(point, (8, 0, 16, 16), image_size=64)  # half a cell over
    assert mass == pytest.approx(0.5)
    mass, _ = box_mass(point, (8, 8, 16, 16), image_size=64)  # quarter overlap
    assert mass == pytest.approx(0.25)
    mass, _ = box_mass(point, (16, 16, 48, 48), image_size=64)
    assert mass == 0.0


def test_whole_image_boxes_give_unit_ratio():
    model = small_model()
    ds = small_dataset(with_boxes=True)
    report = localization_report(model, ds)
    assert report["pairs"] == len(ds)
    # normalized maps sum to one, so a full-frame box captures everything
    assert report["mean_in_box_mass"] == pytest.approx(1.0, abs=1e-4)
    assert report["mean_baseline"] == pytest.approx(1.0)
    assert report["ratio"] == pytest.approx(1.0, abs=1e-4)


def test_empty_box_sets_report_degenerate():
    report = localization_report(small_model(), small_dataset(with_boxes=False))
    assert report == {"pairs": 0, "mean_in_box_mass": None,
                      "mean_baseline": None, "ratio": None}
