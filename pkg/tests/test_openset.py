import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from sklearn.exceptions import NotFittedError

from maskscope import oracles
from maskscope.components import connected_components
from maskscope.openset import (
    KnownSubset,
    OpenSetSegmenter,
    assemble_panoptic,
    background_region,
    mine_unknown_instances,
    ops_inference,
    oss_inference,
    select_known,
    threshold_at_tpr,
)
from maskscope.scoring import mask_anomaly_score, segment_map
from maskscope.selfcheck import MINING_CASES, random_prediction
from maskscope.structures import Prediction, Taxonomy

TAX4 = Taxonomy(things={0, 1}, stuff={2, 3})


# ---- components


def test_component_examples():
    assert connected_components(np.array([[1, 0, 1]])).count == 2
    diag = np.array([[1, 0], [0, 1]])
    assert connected_components(diag, 8).count == 1
    assert connected_components(diag, 4).count == 2
    assert connected_components(np.zeros((3, 3))).count == 0
    with pytest.raises(ValueError):
        connected_components(diag, 6)
    with pytest.raises(ValueError):
        connected_components(np.array([[2, 0]]))


def test_labels_follow_raster_order():
    img = np.array([[0, 0, 1],
                    [1, 0, 1],
                    [1, 0, 0]])
    np.testing.assert_array_equal(connected_components(img, 4).labels,
                                  [[0, 0, 1], [2, 0, 1], [2, 0, 0]])


def test_u_shape_merges():
    img = np.array([[1, 0, 1], [1, 0, 1], [1, 1, 1]])
    cs = connected_components(img, 4)
    assert cs.count == 1 and cs.areas().tolist() == [7]


@settings(max_examples=80)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)),
       st.sampled_from([4, 8]))
def test_matches_flood_fill_and_transpose(img, conn):
    ref, count = oracles.flood_fill_components(img.tolist(), conn)
    cs = connected_components(img, conn)
    np.testing.assert_array_equal(cs.labels, ref)
    assert connected_components(img.T, conn).count == count
    assert connected_components(img, conn, max_iters=200).count == count


def test_sweep_cap_can_split_components():
    # a serpentine needs several sweeps; one sweep leaves it fragmented
    img = np.ones((7, 7), dtype=np.uint8)
    img[1, :6] = img[3, 1:] = img[5, :6] = 0
    assert connected_components(img, 4).count == 1
    assert connected_components(img, 4, max_iters=1).count > 1
    with pytest.raises(ValueError):
        connected_components(img, 4, max_iters=0)


# ---- calibration and OSS


def test_threshold_examples():
    assert threshold_at_tpr([0.9, 0.8], [1, 1]) == 0.8
    assert threshold_at_tpr([0.7], [1]) == 0.7
    scores, labels = [0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]
    tau = threshold_at_tpr(scores, labels)
    assert not any(s >= tau for s, y in zip(scores, labels) if not y)
    with pytest.raises(ValueError):
        threshold_at_tpr([0.5], [0])


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.05, 1.0))
def test_threshold_is_largest_reaching_tpr(pos, tpr):
    tau = threshold_at_tpr(pos, [1] * len(pos), tpr)
    frac = lambda t: sum(s >= t for s in pos) / len(pos)
    assert frac(tau) >= tpr - 1e-9
    assert all(frac(t) < tpr - 1e-9 for t in set(pos) if t > tau)


def confident(cls, n_cls, conf_logit=8.0):
    row = np.zeros(n_cls)
    row[cls] = conf_logit
    return row


def test_oss_examples():
    # pixel 0 has no mask evidence (f ~ 1); pixel 1 belongs to class 0
    M = np.array([[[-8.0, 8.0]]])
    p = Prediction(np.array([confident(0, 2)]), M)
    labels = oss_inference(p, 0.8)
    assert labels.tolist() == [[2, 0]]
    np.testing.assert_array_equal(oss_inference(p, 2.0), segment_map(p)[0])


def test_select_known_and_background():
    C = np.log(np.array([[0.8, 0.2], [0.55, 0.45], [0.3, 0.7]]))
    M = np.zeros((3, 1, 2))
    k = select_known(Prediction(C, M), 0.6)
    assert k.indices == [0, 2]
    B = background_region(KnownSubset(np.log([[0.8, 0.2]]), np.zeros((1, 1, 1))))
    assert B[0, 0] == pytest.approx(0.6)
    assert (background_region(KnownSubset(np.zeros((0, 2)), np.zeros((0, 2, 3)))) == 1).all()


def test_select_known_drops_no_object_winners():
    C = np.array([[3.0, 0.0, 5.0], [3.0, 0.0, 1.0]])
    k = select_known(Prediction(C, np.zeros((2, 1, 1)), no_object=True), 0.5)
    assert k.indices == [1]


def test_background_half_split():
    M = np.full((1, 2, 4), -60.0)
    M[0, :, :2] = 60.0
    k = select_known(Prediction(np.array([[60.0, -60.0]]), M), 0.5)
    B = background_region(k)
    np.testing.assert_allclose(B[:, :2], 0.0, atol=1e-12)
    np.testing.assert_allclose(B[:, 2:], 1.0, atol=1e-12)


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_background_range(seed):
    p = random_prediction(np.random.default_rng(seed))
    B = background_region(select_known(p, 0.3))
    assert (B >= 0).all() and (B <= 1).all()


# ---- mining


def block_prediction(scores, side=8):
    block = np.zeros((side, side), dtype=bool)
    block[1:7, 1:7] = True
    M = np.stack([np.where(block, 6.0, -6.0), np.where(block, -6.0, 6.0)])
    return Prediction(np.log(np.array([scores, [0.01, 0.01, 0.97, 0.01]])), M), block


@pytest.mark.parametrize("case", sorted(MINING_CASES))
def test_mining_examples(case):
    scores, e_s, e_t, unknown = MINING_CASES[case]
    p, block = block_prediction(scores)
    decs, masks, _ = mine_unknown_instances(block, p, TAX4)
    assert len(decs) == 1
    assert round(decs[0].entropy_stuff, 3) == e_s and round(decs[0].entropy_things, 3) == e_t
    assert decs[0].is_unknown is unknown and len(masks) == int(unknown)


def test_mining_exact_entropies():
    p, block = block_prediction([0.45, 0.05, 0.25, 0.25])
    (d,), _, _ = mine_unknown_instances(block, p, TAX4)
    assert d.entropy_stuff == pytest.approx(math.log(2), abs=1e-12)
    assert d.entropy_things == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)))


def test_mining_without_overlap_and_small_components():
    p, block = block_prediction([0.45, 0.05, 0.25, 0.25])
    elsewhere = np.zeros_like(block)
    elsewhere[7, :] = True
    assert mine_unknown_instances(elsewhere, p, TAX4, min_area=1)[0] == []
    assert mine_unknown_instances(block, p, TAX4, min_area=100)[0] == []
    with pytest.raises(ValueError):
        mine_unknown_instances(block, p, Taxonomy(things={0, 1, 2, 3}))


def test_mining_shift_invariance():
    p, block = block_prediction([0.45, 0.05, 0.25, 0.25])
    shifted = Prediction(p.class_logits + 3.7, p.mask_logits)
    a = mine_unknown_instances(block, p, TAX4)[0][0]
    b = mine_unknown_instances(block, shifted, TAX4)[0][0]
    assert a.entropy_stuff == pytest.approx(b.entropy_stuff, abs=1e-12)
    assert a.entropy_things == pytest.approx(b.entropy_things, abs=1e-12)


# ---- panoptic assembly and OPS


def test_assembly_confidence_order_and_unknowns():
    tax = Taxonomy(things={0}, stuff={1})
    C = np.log(np.array([[0.9, 0.1], [0.3, 0.7]]))
    M = np.full((2, 1, 3), -8.0)
    M[0, 0, :2] = 8.0
    M[1, 0, 1:] = 8.0  # both cover pixel 1; query 0 is more confident
    p = Prediction(C, M)
    known = select_known(p, 0.5)
    unknown = [np.array([[False, False, True]]), np.array([[False, True, True]])]
    pan = assemble_panoptic(p, known, unknown, tax)
    assert pan.classes.tolist() == [[0, tax.unknown_id, tax.unknown_id]]
    seg = pan.segments()
    assert len([k for k in seg if k[0] == tax.unknown_id]) == 2
    # the later unknown instance is clipped to pixel 1
    assert pan.instances[0, 1] != pan.instances[0, 2]


def test_assembly_without_unknowns_and_stuff_instances():
    tax = Taxonomy(things={0}, stuff={1})
    C = np.log(np.array([[0.9, 0.1], [0.05, 0.95]]))
    M = np.full((2, 1, 4), -8.0)
    M[0, 0, :2] = 8.0
    M[1, 0, 2:] = 8.0
    p = Prediction(C, M)
    pan = assemble_panoptic(p, select_known(p, 0.5), [], tax)
    assert pan.classes.tolist() == [[0, 0, 1, 1]]
    assert pan.instances[0, 2] == pan.instances[0, 3] == 0
    assert pan.instances[0, 0] > 0


def test_ops_end_to_end():
    p, block = block_prediction([0.45, 0.05, 0.25, 0.25])
    res = ops_inference(p, TAX4, min_area=16)
    assert [d.is_unknown for d in res.decisions] == [True]
    assert (res.panoptic.classes[block] == TAX4.unknown_id).all()
    assert (res.panoptic.classes[~block] == 2).all()
    same = ops_inference(p, TAX4, top_k=None, max_iters=None)
    np.testing.assert_array_equal(same.panoptic.encode(), res.panoptic.encode())


def test_open_set_segmenter():
    p = Prediction(np.array([confident(0, 2)]), np.array([[[-8.0, 8.0, 8.0]]]))
    seg = OpenSetSegmenter()
    with pytest.raises(NotFittedError):
        seg.predict(p)
    gt = np.array([[1, 0, 65535]])
    seg.fit([p], [gt])
    assert seg.threshold_ == pytest.approx(mask_anomaly_score(p)[0, 0])
    assert seg.predict(p).tolist() == [[2, 0, 0]]
    fixed = OpenSetSegmenter(threshold=2.0).fit([p])
    assert fixed.threshold_ == 2.0
    np.testing.assert_array_equal(fixed.predict([p])[0], segment_map(p)[0])
