import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from embinv import datagen
from embinv import operators as O
from embinv.datagen import (
    Dataset,
    GaussianMixture,
    build_dataset,
    doublewell_problem,
    gen_duathlon,
    gen_shapes,
    load_mnist,
    read_idx,
    regenerate,
    write_idx,
)
from embinv.training import FormatError


def numeric_gradient(f, x, h):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


# -- duathlon ----------------------------------------------------------------------


def test_duathlon_noiseless_sum():
    ds = build_dataset(np.array([[3.0, 4.0]]), O.Summation(2), 0.0, 0, 0.0)
    assert ds.b[0, 0] == 7.0


def test_duathlon_same_seed_identical():
    a, b = gen_duathlon(500, seed=3), gen_duathlon(500, seed=3)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.b, b.b)
    assert np.array_equal(a.val_idx, b.val_idx)
    assert not np.array_equal(a.x, gen_duathlon(500, seed=4).x)


def test_duathlon_component_statistics():
    ds = gen_duathlon(10_000, seed=0)
    labels = np.array(ds.meta["labels"])
    s = datagen.DUATHLON_COV_SCALE
    for k, mean in enumerate(datagen.DUATHLON_MEANS):
        xs = ds.x[labels == k]
        # CLT bound on the empirical mean
        assert np.all(np.abs(xs.mean(axis=0) - mean) <= 3 * s / np.sqrt(10_000 / 3))
        cov = np.cov(xs.T)
        target = s * s * np.eye(2)
        assert np.linalg.norm(cov - target) <= 0.1 * np.linalg.norm(target)
    counts = np.bincount(labels)
    assert np.all(np.abs(counts - 10_000 / 3) < 4 * np.sqrt(10_000 * (1 / 3) * (2 / 3)))


def test_duathlon_errors():
    with pytest.raises(ValueError):
        gen_duathlon(10, means=((1, 1), (1, 1), (2, 2)))
    with pytest.raises(ValueError):
        gen_duathlon(0)


def test_mixture_gradient_matches_fd():
    gmm = GaussianMixture(datagen.DUATHLON_MEANS, 0.5)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = rng.uniform(0, 9, 2)
        num = numeric_gradient(lambda v: float(gmm.neg_log_prior(v)), x, 1e-5)
        np.testing.assert_allclose(gmm.grad(x), num, rtol=1e-6, atol=1e-6)


# -- double well ----------------------------------------------------------------------


def test_doublewell_zero_at_minimum():
    _, f2 = doublewell_problem(mu=1.5, gamma=0.1, sigma=0.5, b=1.5)
    assert f2.value(np.array([1.5, 0.0])) == 0.0


def test_doublewell_gradient_on_ring():
    mu, sigma = 1.5, 0.5
    _, f2 = doublewell_problem(mu=mu, gamma=0.1, sigma=sigma, b=mu)
    np.testing.assert_allclose(f2.grad(np.array([0.0, mu])), [-mu / sigma, 0.0], atol=1e-15)


def test_doublewell_gradients_match_fd():
    f1, f2 = doublewell_problem()
    rng = np.random.default_rng(1)
    for _ in range(10):
        x, z = rng.uniform(-2, 2, 1), rng.uniform(-2, 2, 2)
        for f, p in ((f1, x), (f2, z)):
            num = numeric_gradient(lambda v: float(f.value(v)), p, 1e-5)
            g = f.grad(p)
            assert np.linalg.norm(g - num) <= 1e-8 * max(1.0, np.linalg.norm(g))


@given(st.floats(-10, 10), st.floats(0.1, 3), st.floats(0.01, 2), st.floats(0.01, 2), st.floats(-3, 3))
def test_doublewell_restriction_identity(z1, mu, gamma, sigma, b):
    f1, f2 = doublewell_problem(mu, gamma, sigma, b)
    assert f2.value(np.array([z1, 0.0])) == f1.value(np.array([z1]))


def test_doublewell_rejects_nonpositive():
    for kw in ({"mu": 0}, {"gamma": -1}, {"sigma": 0}):
        with pytest.raises(ValueError):
            doublewell_problem(**kw)


# -- IDX ----------------------------------------------------------------------------


def _idx_bytes(magic, shape, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(shape)}I", *shape) + payload


def test_idx_zero_image(tmp_path):
    p = tmp_path / "img.idx"
    p.write_bytes(_idx_bytes(0x803, (1, 28, 28), bytes(784)))
    imgs, labels = load_mnist(p)
    assert imgs.shape == (1, 28, 28) and not imgs.any() and labels is None


def test_idx_scaling_and_labels(tmp_path):
    img, lab = tmp_path / "i", tmp_path / "l"
    a = np.zeros((2, 28, 28), np.uint8)
    a[1, 3, 4] = 255
    write_idx(img, a)
    write_idx(lab, np.array([7, 1], np.uint8))
    assert img.read_bytes()[:4] == b"\x00\x00\x08\x03"
    assert lab.read_bytes()[:4] == b"\x00\x00\x08\x01"
    imgs, labels = load_mnist(img, lab)
    assert imgs[1, 3, 4] == 1.0 and imgs.sum() == 1.0
    assert labels.tolist() == [7, 1]


def test_idx_rejects_corruption(tmp_path):
    good = _idx_bytes(0x803, (1, 28, 28), bytes(784))
    cases = {
        "magic": _idx_bytes(0x804, (1, 28, 28), bytes(784)),
        "float": _idx_bytes(0x0D03, (1, 28, 28), bytes(784)),
        "short": good[:-1],
        "header": good[:10],
        "long": good + b"\0",
    }
    for name, data in cases.items():
        p = tmp_path / name
        p.write_bytes(data)
        with pytest.raises(FormatError):
            load_mnist(p)


def test_idx_label_count_mismatch(tmp_path):
    img, lab = tmp_path / "i", tmp_path / "l"
    write_idx(img, np.zeros((2, 28, 28), np.uint8))
    write_idx(lab, np.zeros(3, np.uint8))
    with pytest.raises(FormatError):
        load_mnist(img, lab)
    with pytest.raises(FormatError):
        read_idx(lab, datagen.IDX_IMAGES)


# -- shapes and datasets -----------------------------------------------------------------


def test_shapes_basic():
    assert gen_shapes(0, 16, 0) == []
    imgs = gen_shapes(20, 16, 5)
    assert all(im.shape == (16, 16) and im.min() >= 0 and im.max() <= 1 for im in imgs)
    assert all(im.max() >= 0.3 for im in imgs)
    again = gen_shapes(20, 16, 5)
    assert all(np.array_equal(a, b) for a, b in zip(imgs, again))
    with pytest.raises(ValueError):
        gen_shapes(1, 7, 0)


def test_identity_dataset_is_exact():
    x = np.random.default_rng(0).standard_normal((5, 3))
    ds = build_dataset(x, O.Identity(3), 0.0, 0)
    assert np.array_equal(ds.b, x)
    with pytest.raises(ValueError):
        build_dataset(x, O.Identity(4), 0.0, 0)


def test_heavier_blur_departs_more():
    imgs = np.stack(gen_shapes(5, 16, 2))
    for img in imgs:
        b1 = O.apply(O.make_blur(16, 1.0), img).reshape(img.shape)
        b9 = O.apply(O.make_blur(16, 9.0), img).reshape(img.shape)
        assert np.linalg.norm(b9 - img) > np.linalg.norm(b1 - img)


def test_magnetics_data_length():
    digit = np.zeros((1, 28, 28))
    digit[0, 10:18, 12:15] = 1.0
    ds = build_dataset(digit, O.make_magnetics(28), 0.01, 0)
    assert ds.b.shape == (1, 28)


def test_regenerate_and_cache_round_trip(tmp_path):
    ds = build_dataset(np.stack(gen_shapes(6, 8, 0)), O.make_blur(8, 2.0), 0.05, 11, 0.5, {"k": 1})
    again = regenerate(ds)
    assert np.array_equal(ds.b, again.b) and np.array_equal(ds.train_idx, again.train_idx)
    ds.save(tmp_path / "d.bin")
    back = Dataset.load(tmp_path / "d.bin")
    assert np.array_equal(back.b, ds.b) and back.operator == ds.operator and back.meta == ds.meta
    back.save(tmp_path / "e.bin")
    assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "e.bin").read_bytes()


def test_per_sample_noise_is_independent_of_batch():
    x = np.random.default_rng(0).standard_normal((4, 2))
    full = build_dataset(x, O.Summation(2), 0.1, 3)
    head = build_dataset(x[:2], O.Summation(2), 0.1, 3)
    assert np.array_equal(full.b[:2], head.b)
