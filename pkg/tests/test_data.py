import ast
import gzip
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from podnn.data import (DIRECTIONS, MechanismSpec, apply_mechanism, build_dataset, ground_truth_inverse, load_idx,
                        read_idx, sample_minibatch, surviving_mask, synthetic_images, write_idx, write_manifest)

SRC = Path(__file__).resolve().parents[1] / "src" / "podnn"


def test_contrast_invert_value():
    out = apply_mechanism(MechanismSpec("contrast-invert"), np.full((1, 1, 2, 2), 0.3))
    np.testing.assert_allclose(out, 0.7)


def test_translate_right_one_pixel():
    img = np.array([[[[1.0, 0], [0, 0]]]])
    out = apply_mechanism(MechanismSpec("translate", "right", 1), img)
    np.testing.assert_array_equal(out[0, 0], [[0, 1], [0, 0]])


@pytest.mark.parametrize("direction", sorted(DIRECTIONS))
def test_translate_single_pixel_all_directions(direction):
    img = np.zeros((1, 1, 5, 5))
    img[0, 0, 2, 2] = 1
    out = apply_mechanism(MechanismSpec("translate", direction, 2), img)
    dr, dc = DIRECTIONS[direction]
    assert out[0, 0, 2 + 2 * dr, 2 + 2 * dc] == 1 and out.sum() == 1


def test_up_moves_content_towards_row_zero():
    img = np.zeros((1, 1, 4, 4))
    img[0, 0, 3, 1] = 1
    out = apply_mechanism(MechanismSpec("translate", "left-up", 1), img)
    assert out[0, 0, 2, 0] == 1


def test_translation_too_large_rejected():
    with pytest.raises(ValueError, match="smaller than the image"):
        apply_mechanism(MechanismSpec("translate", "down", 4), np.zeros((1, 1, 4, 8)))
    # horizontal shifts only care about the width
    apply_mechanism(MechanismSpec("translate", "right", 4), np.zeros((1, 1, 4, 8)))


def test_spec_validation():
    with pytest.raises(ValueError):
        MechanismSpec("rotate")
    with pytest.raises(ValueError):
        MechanismSpec("translate", "north", 1)
    with pytest.raises(ValueError):
        MechanismSpec("translate", "left", 0)
    with pytest.raises(ValueError):
        MechanismSpec("noise", sigma=0.0)
    with pytest.raises(ValueError, match="unknown mechanism keys"):
        MechanismSpec.from_dict({"kind": "noise", "sgima": 0.1})
    spec = MechanismSpec("translate", "left-down", 3)
    assert MechanismSpec.from_dict(spec.to_dict()) == spec


def test_noise_statistics():
    spec = MechanismSpec("noise", sigma=0.1, seed=11)
    base = np.full((40, 1, 16, 16), 0.5)  # far from the clamp bounds
    diff = (apply_mechanism(spec, base) - base).ravel()
    n = diff.size
    assert n >= 10_000
    assert abs(diff.mean()) < 3 * 0.1 / np.sqrt(n)
    # standard error of the sample std is about sigma / sqrt(2n)
    assert abs(diff.std() - 0.1) < 3 * 0.1 / np.sqrt(2 * n)


def test_noise_determinism_and_seed_dependence():
    base = np.full((2, 1, 8, 8), 0.5)
    a = apply_mechanism(MechanismSpec("noise", seed=1), base)
    b = apply_mechanism(MechanismSpec("noise", seed=1), base)
    c = apply_mechanism(MechanismSpec("noise", seed=2), base)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0 and a.max() <= 1


def test_noise_clamped():
    out = apply_mechanism(MechanismSpec("noise", sigma=2.0), np.ones((1, 1, 8, 8)))
    assert out.min() >= 0 and out.max() <= 1


def test_contrast_involution(rng):
    x = rng.uniform(size=(3, 1, 6, 6))
    spec = MechanismSpec("contrast-invert")
    np.testing.assert_allclose(ground_truth_inverse(spec, apply_mechanism(spec, x)), x)


def test_translate_round_trip_boundary():
    x = np.arange(1, 17, dtype=float).reshape(1, 1, 4, 4)
    spec = MechanismSpec("translate", "right", 2)
    back = ground_truth_inverse(spec, apply_mechanism(spec, x))
    np.testing.assert_array_equal(back[..., :2], x[..., :2])
    np.testing.assert_array_equal(back[..., 2:], 0)
    assert surviving_mask(spec, (4, 4))[:, :2].all() and not surviving_mask(spec, (4, 4))[:, 2:].any()


@settings(max_examples=40, deadline=None)
@given(direction=st.sampled_from(sorted(DIRECTIONS)), severity=st.integers(1, 5), seed=st.integers(0, 1000))
def test_translate_inverse_exact_on_surviving_pixels(direction, severity, seed):
    x = np.random.default_rng(seed).uniform(size=(2, 1, 7, 9))
    spec = MechanismSpec("translate", direction, severity)
    back = ground_truth_inverse(spec, apply_mechanism(spec, x))
    mask = surviving_mask(spec, (7, 9))
    np.testing.assert_array_equal(back[..., mask], x[..., mask])
    assert np.all(back[..., ~mask] == 0)


def test_noise_inverse_needs_pre_images(rng):
    spec = MechanismSpec("noise")
    x = rng.uniform(size=(1, 1, 4, 4))
    with pytest.raises(ValueError):
        ground_truth_inverse(spec, apply_mechanism(spec, x))
    np.testing.assert_array_equal(ground_truth_inverse(spec, apply_mechanism(spec, x), x), x)


# ------------------------------------------------------------------- IDX


def test_idx_single_zero_image(tmp_path):
    p = tmp_path / "z.idx"
    p.write_bytes(bytes([0, 0, 8, 3]) + (1).to_bytes(4, "big") + (3).to_bytes(4, "big") * 2 + bytes(9))
    batch = load_idx(p)
    assert batch.shape == (1, 1, 3, 3) and not batch.any()


def test_idx_round_trip_bytes(tmp_path, rng):
    arr = rng.integers(0, 256, size=(5, 4, 3), dtype=np.uint8)
    p1, p2 = tmp_path / "a.idx", tmp_path / "b.idx"
    write_idx(p1, arr)
    back = read_idx(p1)
    np.testing.assert_array_equal(back, arr)
    write_idx(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    scaled = load_idx(p1)
    assert scaled.shape == (5, 1, 4, 3) and scaled.max() <= 1.0
    np.testing.assert_allclose(scaled[:, 0] * 255, arr)


def test_idx_gzip(tmp_path, rng):
    arr = rng.integers(0, 256, size=(2, 3, 3), dtype=np.uint8)
    write_idx(tmp_path / "a.idx", arr)
    (tmp_path / "a.idx.gz").write_bytes(gzip.compress((tmp_path / "a.idx").read_bytes()))
    np.testing.assert_array_equal(read_idx(tmp_path / "a.idx.gz"), arr)


def test_idx_errors(tmp_path):
    bad = tmp_path / "bad.idx"
    bad.write_bytes(b"\x00\x00\x09\x03" + bytes(12))
    with pytest.raises(ValueError, match="magic.*offset 0"):
        read_idx(bad)
    short = tmp_path / "short.idx"
    short.write_bytes(bytes([0, 0, 8, 3]) + (2).to_bytes(4, "big") + (3).to_bytes(4, "big") * 2 + bytes(10))
    with pytest.raises(ValueError, match="offset 26"):
        read_idx(short)
    tiny = tmp_path / "tiny.idx"
    tiny.write_bytes(bytes([0, 0, 8, 3, 0]))
    with pytest.raises(ValueError, match="offset 5"):
        read_idx(tiny)
    labels = tmp_path / "labels.idx"
    write_idx(labels, np.arange(4, dtype=np.uint8))
    assert read_idx(labels).tolist() == [0, 1, 2, 3]
    with pytest.raises(ValueError, match="image file"):
        load_idx(labels)


MNIST = Path("/root/data/train-images-idx3-ubyte")


@pytest.mark.skipif(not MNIST.exists(), reason="MNIST training images not available")
def test_mnist_shape():
    batch = load_idx(MNIST)
    assert batch.shape == (60000, 1, 28, 28)
    assert batch.min() >= 0 and batch.max() <= 1


# ----------------------------------------------------------------- datasets


def test_synthetic_images_centred():
    x = synthetic_images(50, 16, seed=3)
    assert x.shape == (50, 1, 16, 16)
    assert set(np.unique(x)) <= {0.0, 1.0}
    assert (x.reshape(50, -1).sum(axis=1) > 0).all()
    border = x.copy()
    border[..., 4:12, 4:12] = 0
    assert not border.any()
    np.testing.assert_array_equal(x, synthetic_images(50, 16, seed=3))


SPECS4 = [MechanismSpec("translate", "left", 4), MechanismSpec("translate", "right", 4),
          MechanismSpec("contrast-invert"), MechanismSpec("noise", sigma=0.1, seed=5)]


def test_uniform_stratified_counts():
    pair = build_dataset(synthetic_images(800, seed=0), SPECS4, seed=1, n_points=400)
    assert np.bincount(pair._hidden_labels).tolist() == [100, 100, 100, 100]
    assert pair.d_q.shape == (400, 1, 16, 16) and pair.d_p.shape == (400, 1, 16, 16)


def test_imbalanced_counts():
    specs = SPECS4[:3]
    pair = build_dataset(synthetic_images(1000, seed=0), specs, proportions=[0.6, 0.2, 0.2], seed=1, n_points=500)
    assert np.bincount(pair._hidden_labels).tolist() == [300, 100, 100]


def test_dataset_errors():
    base = synthetic_images(10)
    with pytest.raises(ValueError):
        build_dataset(base, [])
    with pytest.raises(ValueError):
        build_dataset(base, SPECS4[:2], proportions=[0.7, 0.7])
    with pytest.raises(ValueError):
        build_dataset(base, SPECS4[:2], n_points=6)


def test_dataset_split_and_labels():
    base = np.random.default_rng(4).uniform(size=(200, 1, 16, 16))
    pair = build_dataset(base, SPECS4, seed=9)
    assert pair.d_q.min() >= 0 and pair.d_q.max() <= 1
    # every transformed image is its label's mechanism applied to its pre-image
    for m, spec in enumerate(SPECS4):
        sel = pair._hidden_labels == m
        if spec.kind != "noise":
            np.testing.assert_array_equal(pair.d_q[sel], apply_mechanism(spec, pair._pre_images[sel]))
    # D_P and the pre-images come from disjoint halves of the base set
    flat = {x.tobytes(): i for i, x in enumerate(base)}
    p_src = {flat[x.tobytes()] for x in pair.d_p}
    q_src = {flat[x.tobytes()] for x in pair._pre_images}
    assert len(p_src) == 100 and len(q_src) == 100 and p_src.isdisjoint(q_src)


def test_dataset_determinism():
    base = synthetic_images(100, seed=2)
    a, b = build_dataset(base, SPECS4, seed=3), build_dataset(base, SPECS4, seed=3)
    for f in ("d_p", "d_q", "_hidden_labels", "_pre_images"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    c = build_dataset(base, SPECS4, seed=4)
    assert not np.array_equal(a.d_q, c.d_q)


def test_minibatch_shapes_and_determinism():
    pair = build_dataset(synthetic_images(200, seed=2), SPECS4, seed=0)
    x_p, x_q, ids = sample_minibatch(pair, 16, seed=5, iteration=3)
    assert x_p.shape == (16, 1, 16, 16) and x_q.shape == (16, 1, 16, 16) and ids.shape == (16,)
    np.testing.assert_array_equal(x_q, pair.d_q[ids])
    again = sample_minibatch(pair, 16, seed=5, iteration=3)
    np.testing.assert_array_equal(again[1], x_q)
    other = sample_minibatch(pair, 16, seed=6, iteration=3)
    assert not np.array_equal(other[2], ids)


def test_minibatch_no_overlap_within_epoch():
    pair = build_dataset(synthetic_images(200, seed=2), SPECS4, seed=0)
    seen = np.concatenate([sample_minibatch(pair, 16, seed=0, iteration=t)[2] for t in range(100 // 16)])
    assert len(np.unique(seen)) == len(seen)


def test_minibatch_too_large():
    pair = build_dataset(synthetic_images(20), SPECS4[:1], seed=0)
    with pytest.raises(ValueError):
        sample_minibatch(pair, 11, seed=0, iteration=0)


def test_manifest(tmp_path):
    write_manifest(tmp_path / "m.json", {"synthetic": 100}, SPECS4, None, 3)
    assert '"seed": 3' in (tmp_path / "m.json").read_text()


def test_hidden_labels_only_read_by_evaluation():
    """Outside the data and evaluation modules nobody touches the private label fields."""
    for path in SRC.glob("*.py"):
        if path.name in ("data.py", "evaluation.py"):
            continue
        tree = ast.parse(path.read_text())
        names = {n.attr for n in ast.walk(tree) if isinstance(n, ast.Attribute)}
        names |= {n.id for n in ast.walk(tree) if isinstance(n, ast.Name)}
        assert "_hidden_labels" not in names and "_pre_images" not in names, path.name
        assert "hidden_labels" not in names and "pre_images" not in names, path.name
