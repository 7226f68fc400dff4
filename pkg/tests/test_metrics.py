from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskscope import oracles
from maskscope.metrics import (
    ComponentEvalConfig,
    ConfusionMatrix,
    auprc,
    component_metrics,
    fpr_at_95tpr,
    open_iou,
    panoptic_quality,
    pixel_metrics,
    pr_curve,
)
from maskscope.structures import PanopticMap, Taxonomy


def row(*v):
    return np.array([v], dtype=float)


# ---- pixel level


def test_auprc_examples():
    assert auprc(row(0.9, 0.8, 0.1), row(1, 1, 0)) == 1.0
    assert auprc(row(0.9, 0.8, 0.7, 0.1), row(1, 0, 1, 0), exact=True) == Fraction(5, 6)
    # one positive ranked below three negatives
    assert auprc(row(0.9, 0.8, 0.7, 0.1), row(0, 0, 0, 1), exact=True) == Fraction(1, 4)
    with pytest.raises(ValueError):
        auprc(row(0.1, 0.2), row(0, 0))


def test_fpr_examples():
    s = row(0.9, 0.8, 0.7, 0.6, 0.65, 0.5, 0.4)
    g = row(1, 1, 1, 1, 0, 0, 0)
    assert fpr_at_95tpr(s, g, exact=True) == Fraction(1, 3)
    assert fpr_at_95tpr(row(0.9, 0.8, 0.2), row(1, 1, 0)) == 0.0
    assert fpr_at_95tpr(row(0.5, 0.5, 0.5), row(1, 0, 0)) == 1.0
    with pytest.raises(ValueError):
        fpr_at_95tpr(row(0.5), row(1))


def test_void_pixels_are_ignored():
    s = row(0.9, 0.8, 0.7, 0.1, 0.95)
    g = row(1, 0, 1, 0, 65535)
    assert auprc(s, g, exact=True) == Fraction(5, 6)
    assert pixel_metrics(s, g)["num_negative_pixels"] == 2


def test_pooling_over_images():
    a = auprc([row(0.9, 0.8), row(0.7, 0.1)], [row(1, 0), row(1, 0)], exact=True)
    assert a == Fraction(5, 6)


@settings(max_examples=80)
@given(st.lists(st.tuples(st.integers(0, 9), st.booleans()), min_size=2, max_size=64))
def test_pixel_metrics_match_exhaustive_oracle(pairs):
    scores = [s / 10 for s, _ in pairs]
    labels = [int(y) for _, y in pairs]
    if not 0 < sum(labels) < len(labels):
        return
    s, g = np.array([scores]), np.array([labels])
    assert auprc(s, g, exact=True) == oracles.auprc_exhaustive(scores, labels)
    assert fpr_at_95tpr(s, g, exact=True) == oracles.fpr_exhaustive(scores, labels)
    assert auprc(s, g) == pytest.approx(float(oracles.auprc_exhaustive(scores, labels)))


def test_pr_curve_thresholds_descend():
    c = pr_curve(row(0.2, 0.9, 0.2, 0.5), row(1, 0, 0, 1))
    assert c.thresholds.tolist() == [0.9, 0.5, 0.2]
    assert c.recall[-1] == 1.0


# ---- component level


def test_component_example():
    gt = np.array([[1, 1, 0]])
    pred = np.array([[0, 1, 1]])
    r = component_metrics(pred, gt)
    assert r["siou_mean_exact"] == "1/3" and r["ppv_mean_exact"] == "1/2"
    assert (r["tp"], r["fn"], r["fp"]) == (1, 0, 0) and r["f1_star_exact"] == "1"


def test_component_exact_and_disjoint():
    gt = np.array([[1, 1, 0, 0, 1]])
    r = component_metrics(gt, gt, ComponentEvalConfig(tau=0.9))
    assert r["siou_mean"] == r["ppv_mean"] == r["f1_star"] == r["f1_star_sweep"] == 1.0
    r = component_metrics(np.array([[0, 0, 1]]), np.array([[1, 0, 0]]))
    assert r["siou_mean"] == 0 and r["f1_star"] == 0 and (r["fn"], r["fp"]) == (1, 1)


def test_component_adjustment_term():
    # a prediction spanning two gt components: the other component's pixels are not charged
    gt = np.array([[1, 1, 0, 1, 1]])
    pred = np.array([[1, 1, 1, 1, 1]])
    r = component_metrics(pred, gt, ComponentEvalConfig(connectivity=4))
    assert r["siou_mean_exact"] == "2/3"
    assert r["ppv_mean_exact"] == "4/5"


def test_component_empty_and_ignore():
    r = component_metrics(np.zeros((2, 2)), np.zeros((2, 2)))
    assert r["siou_mean"] is None and r["f1_star"] is None
    ignore = np.array([[0, 0, 1]], dtype=bool)
    r = component_metrics([np.array([[1, 1, 1]])], [np.array([[1, 1, 0]])], ignores=[ignore])
    assert r["siou_mean"] == 1.0


def test_component_config_validation():
    with pytest.raises(ValueError):
        ComponentEvalConfig(tau=1.0)


# ---- open-IoU


def test_open_iou_example():
    r = open_iou(np.array([[0, 1, 1, 1]]), np.array([[0, 0, 1, 2]]), num_classes=2)
    assert r["open_iou_per_class_exact"] == {"0": "1/2", "1": "1/3"}
    assert r["iou_per_class"]["1"] == 0.5  # anomaly confusion is not charged
    r = open_iou(np.array([[0, 1, 2]]), np.array([[0, 1, 2]]), num_classes=2)
    assert r["open_iou_mean"] == 1.0


def test_open_iou_range_and_void():
    with pytest.raises(ValueError):
        open_iou(np.array([[3]]), np.array([[0]]), num_classes=2)
    r = open_iou(np.array([[0, 1]]), np.array([[0, 65535]]), num_classes=2)
    assert r["open_iou_per_class"]["0"] == 1.0 and r["open_iou_per_class"]["1"] is None


@settings(max_examples=40)
@given(st.integers(0, 2**31))
def test_open_iou_never_exceeds_closed_iou(seed):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 4, (2, 5, 5))
    r = open_iou(pred, gt, num_classes=3)
    for k, v in r["open_iou_per_class"].items():
        if v is not None:
            assert v <= r["iou_per_class"][k] + 1e-15


def test_confusion_matrix_merge_is_additive():
    a = ConfusionMatrix(2).update(np.array([0, 1]), np.array([0, 0]))
    b = ConfusionMatrix(2).update(np.array([2]), np.array([1]))
    both = ConfusionMatrix(2).update(np.array([0, 1, 2]), np.array([0, 0, 1]))
    np.testing.assert_array_equal(a.merge(b).counts, both.counts)


# ---- panoptic quality

TAX = Taxonomy(things={0}, stuff={1})


def pan(classes, instances=None):
    classes = np.array([classes])
    if instances is None:
        instances = np.where(classes == 0, 1, 0)
    return PanopticMap(classes, np.array(instances).reshape(classes.shape))


def test_pq_iou_06():
    r = panoptic_quality(pan([1, 0, 0, 0, 0, 1, 1, 1]), pan([0, 0, 0, 0, 1, 1, 1, 1]), TAX)
    assert r["pq_things_exact"] == "3/5" and r["sq_things_exact"] == "3/5"
    assert r["rq_things_exact"] == "1"


def test_pq_iou_04_is_unmatched():
    # gt thing 0-3, prediction thing 2-4 plus pixel 5: IoU 2/6 < 1/2
    r = panoptic_quality(pan([1, 1, 0, 0, 0, 0, 1, 1]), pan([0, 0, 0, 0, 1, 1, 1, 1]), TAX)
    assert r["pq_things"] == 0 and r["per_class"]["0"]["fp"] == 1 and r["per_class"]["0"]["fn"] == 1


def test_pq_identical_and_relabel_invariance():
    g = pan([0, 0, 1, 0, 0], [1, 1, 0, 2, 2])
    r = panoptic_quality(g, g, TAX)
    assert r["pq"] == r["sq"] == r["rq"] == 1.0
    relabeled = pan([0, 0, 1, 0, 0], [7, 7, 0, 3, 3])
    assert panoptic_quality(relabeled, g, TAX)["pq"] == 1.0


def test_pq_unknown_split_and_void():
    tax = Taxonomy(things={0}, stuff={1}, unknown_id=2)
    g = pan([2, 2, 1, 65535], [5, 5, 0, 0])
    p = pan([2, 2, 1, 1], [9, 9, 0, 0])
    r = panoptic_quality(p, g, tax)
    assert r["pq_unknown"] == 1.0
    assert r["pq_stuff"] == 1.0  # the void pixel is removed from the union


def test_pq_rejects_shared_instance_ids():
    bad = pan([0, 1], [1, 1])
    with pytest.raises(ValueError):
        panoptic_quality(bad, bad, TAX)
