import numpy as np
import pytest

from maskscope.outliermix import anomaly_mix, outlier_draws, sample_batch


@pytest.fixture
def scene():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 200, (4, 4, 3), dtype=np.uint8)
    lab = rng.integers(0, 5, (4, 4)).astype(np.uint16)
    ood = np.full((4, 4, 3), 255, dtype=np.uint8)
    return img, lab, ood


def test_empty_mask_is_an_error(scene):
    img, lab, ood = scene
    with pytest.raises(ValueError):
        anomaly_mix(img, lab, ood, np.zeros((4, 4)), offset=(0, 0))


def test_single_pixel_paste(scene):
    img, lab, ood = scene
    m = np.zeros((4, 4), dtype=np.uint8)
    m[0, 0] = 1
    c = anomaly_mix(img, lab, ood, m, offset=(0, 0))
    assert c.ood_mask.sum() == 1 and c.ood_mask[0, 0] == 1
    diff = (c.image != img).any(axis=2)
    assert diff.sum() <= 1 and (c.image[0, 0] == 255).all()
    assert c.labels[0, 0] == 65535 and (c.labels[1:] == lab[1:]).all()


def test_half_out_of_frame_is_clipped(scene):
    img, lab, ood = scene
    m = np.zeros((4, 4), dtype=np.uint8)
    m[:2, :2] = 1  # 2x2 object
    c = anomaly_mix(img, lab, ood, m, offset=(3, 2))  # only its top row lands inside
    assert c.ood_mask.sum() == 2
    assert c.ood_mask[3, 2:].tolist() == [1, 1]
    with pytest.raises(ValueError):
        anomaly_mix(img, lab, ood, m, offset=(4, 0))


def test_composite_invariants_and_determinism(scene):
    img, lab, _ = scene
    rng = np.random.default_rng(3)
    ood = rng.integers(0, 255, (3, 3, 3), dtype=np.uint8)
    m = (rng.random((3, 3)) < 0.6).astype(np.uint8)
    m[1, 1] = 1
    a = anomaly_mix(img, lab, ood, m, seed=9)
    b = anomaly_mix(img, lab, ood, m, seed=9)
    assert a.offset == b.offset and a.image.tobytes() == b.image.tobytes()
    on = a.ood_mask == 1
    np.testing.assert_array_equal(a.image[~on], img[~on])
    assert (a.labels[on] == 65535).all() and (a.labels[~on] == lab[~on]).all()
    dr, dc = a.offset
    for r, c in zip(*np.nonzero(on)):
        assert (a.image[r, c] == ood[r - dr, c - dc]).all()


def test_batch_probabilities(scene):
    img, lab, ood = scene
    obj = (ood[..., 0] > 0).astype(np.uint8)
    assert not any(s.ood_mask.any() for s in sample_batch([(img, lab)], [(ood, obj)], 20, 0.0))
    assert all(s.ood_mask.any() for s in sample_batch([(img, lab)], [(ood, obj)], 20, 1.0))
    frac = outlier_draws(10000, 0.2, seed=0).mean()
    assert 0.18 <= frac <= 0.22
    with pytest.raises(ValueError):
        outlier_draws(3, 1.5)


def test_batch_reproducible(scene):
    img, lab, ood = scene
    obj = np.ones((2, 2), dtype=np.uint8)
    a = sample_batch([(img, lab)], [(ood[:2, :2], obj)], 10, 0.5, seed=4)
    b = sample_batch([(img, lab)], [(ood[:2, :2], obj)], 10, 0.5, seed=4)
    assert [s.offset for s in a] == [s.offset for s in b]
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
