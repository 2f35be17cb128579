import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from feddetect.boxes import owning_cell
from feddetect.dataio import (
    AUGMENTATIONS,
    GroundTruthObject,
    PartitionSpec,
    Sample,
    augment,
    generate_synthetic,
    load_directory,
    parse_label_file,
    partition,
    partition_manifest,
    preprocess,
    read_pgm,
    resize_nearest,
    split_train_test,
    write_directory,
    write_pgm,
)


def box_sample(bbox, cls=0, size=8):
    return Sample(np.zeros((size, size)), [GroundTruthObject(cls, bbox)], "s")


def labelled(n, classes=3):
    return [box_sample((0.5, 0.5, 0.2, 0.2), k % classes) for k in range(n)]


def raster(box, n):
    """Pixel-center mask of a box on an n x n image (row = y, col = x)."""
    c = (np.arange(n) + 0.5) / n
    cx, cy, w, h = box
    mx = (c >= cx - w / 2) & (c < cx + w / 2)
    my = (c >= cy - h / 2) & (c < cy + h / 2)
    return my[:, None] & mx[None, :]


# --------------------------------------------------------------------------
# synthetic generator
# --------------------------------------------------------------------------


@pytest.fixture(scope="module")
def synth100():
    return generate_synthetic(100, seed=7)


def test_generator_is_deterministic():
    a = generate_synthetic(10, seed=5)
    b = generate_synthetic(10, seed=5)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        assert x.objects == y.objects


def test_generator_seed_matters():
    a = generate_synthetic(3, seed=1)
    b = generate_synthetic(3, seed=2)
    assert not np.array_equal(a[0].image, b[0].image)


def test_class_histogram_near_uniform(synth100):
    counts = Counter(o.class_id for s in synth100 for o in s.objects)
    assert sum(counts.values()) == 100
    for c in range(3):
        assert abs(counts[c] - 100 / 3) <= 10


def test_class_histogram_is_multinomial_across_seeds():
    # P(all three counts within 10 of 33.3) is about 0.89 for Multinomial(100, 1/3)
    ok = 0
    for seed in range(100):
        counts = Counter(s.objects[0].class_id for s in generate_synthetic(100, image_size=16, seed=seed))
        ok += all(abs(counts[c] - 100 / 3) <= 10 for c in range(3))
    assert ok >= 80


def test_generated_samples_are_valid(synth100):
    for s in synth100:
        assert s.image.shape == (64, 64)
        s.validate(grid_size=2, num_classes=3)
        assert np.array_equal(np.round(s.image * 255) / 255, s.image)
        for o in s.objects:
            # pixel-aligned edges
            cx, cy, w, h = o.bbox
            for edge in (cx - w / 2, cx + w / 2, cy - h / 2, cy + h / 2):
                assert edge * 64 == round(edge * 64)


def test_lesion_is_brighter_inside_box(synth100):
    for s in synth100[:20]:
        m = raster(s.objects[0].bbox, 64)
        assert s.image[m].mean() > s.image[~m].mean()


def test_multi_object_images_one_per_cell():
    samples = generate_synthetic(20, seed=3, objects_per_image=(0, 3), grid_size=2)
    assert any(len(s.objects) == 0 for s in samples)
    assert any(len(s.objects) >= 2 for s in samples)
    for s in samples:
        cells = [owning_cell(o.bbox[0], o.bbox[1], 2) for o in s.objects]
        assert len(cells) == len(set(cells))


@pytest.mark.parametrize(
    "kwargs",
    [
        {"count": 0},
        {"count": 5, "class_mix": (0.5, 0.5)},
        {"count": 5, "class_mix": (0.5, 0.5, 0.5)},
        {"count": 5, "objects_per_image": 5, "grid_size": 2},
    ],
)
def test_generator_rejects_bad_arguments(kwargs):
    with pytest.raises(ValueError):
        generate_synthetic(**kwargs)


# --------------------------------------------------------------------------
# P5 + label files
# --------------------------------------------------------------------------


def test_label_line_parses(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("1 0.5 0.5 0.2 0.3\n")
    (obj,) = parse_label_file(f)
    assert obj.class_id == 1
    assert obj.bbox == (0.5, 0.5, 0.2, 0.3)


def test_empty_label_file_means_no_objects(tmp_path):
    f = tmp_path / "a.txt"
    f.write_text("")
    assert parse_label_file(f) == []


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("3 0.5 0.5 0.2 0.2", "out of range"),
        ("1 0.5 0.5 0.2", "expected"),
        ("x 0.5 0.5 0.2 0.2", "invalid literal"),
        ("0 0.95 0.5 0.2 0.2", "outside"),
        ("0 0.5 0.5 0 0.2", "size"),
    ],
)
def test_bad_label_lines(tmp_path, line, fragment):
    f = tmp_path / "a.txt"
    f.write_text("0 0.5 0.5 0.1 0.1\n" + line + "\n")
    with pytest.raises(ValueError, match=fragment) as info:
        parse_label_file(f, num_classes=3)
    assert "a.txt:2" in str(info.value)


def test_pgm_header_with_comments(tmp_path):
    f = tmp_path / "c.pgm"
    f.write_bytes(b"P5\n# a comment\n2 1\n# another\n255\n" + bytes([0, 255]))
    assert read_pgm(f).tolist() == [[0.0, 1.0]]


def test_pgm_sixteen_bit(tmp_path):
    f = tmp_path / "d.pgm"
    f.write_bytes(b"P5 2 1 65535\n" + (0).to_bytes(2, "big") + (65535).to_bytes(2, "big"))
    assert read_pgm(f).tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize(
    "payload, fragment",
    [
        (b"P2\n1 1\n255\n0", "not a binary"),
        (b"P5\n2 2\n255\n\x00", "truncated"),
        (b"P5\n2", "truncated"),
    ],
)
def test_pgm_errors(tmp_path, payload, fragment):
    f = tmp_path / "e.pgm"
    f.write_bytes(payload)
    with pytest.raises(ValueError, match=fragment):
        read_pgm(f)


def test_pgm_round_trip_exact_for_8_and_16_bit(tmp_path):
    rng = np.random.default_rng(0)
    eight = rng.integers(0, 256, size=(5, 7)) / 255
    write_pgm(tmp_path / "a.pgm", eight)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), eight)
    sixteen = rng.integers(0, 65536, size=(5, 7)) / 65535
    write_pgm(tmp_path / "b.pgm", sixteen)
    assert np.array_equal(read_pgm(tmp_path / "b.pgm"), sixteen)


def test_generated_directory_reloads_identically(tmp_path):
    samples = generate_synthetic(12, seed=4, objects_per_image=(0, 2))
    write_directory(samples, tmp_path)
    back = load_directory(tmp_path, grid_size=2)
    assert [s.name for s in back] == [s.name for s in samples]
    for a, b in zip(samples, back):
        assert np.array_equal(a.image, b.image)
        assert a.objects == b.objects


def test_missing_label_file_warns(tmp_path):
    write_pgm(tmp_path / "x.pgm", np.zeros((4, 4)))
    with pytest.warns(UserWarning, match="no label"):
        (s,) = load_directory(tmp_path)
    assert s.objects == []


# --------------------------------------------------------------------------
# preprocessing and augmentation
# --------------------------------------------------------------------------


def test_fliph_example():
    (obj,) = augment(box_sample((0.3, 0.4, 0.2, 0.1)), "fliph").objects
    assert obj.bbox == (0.7, 0.4, 0.2, 0.1)


def test_rot90_example():
    (obj,) = augment(box_sample((0.3, 0.4, 0.2, 0.1)), "rot90").objects
    assert obj.bbox == pytest.approx((0.6, 0.3, 0.1, 0.2), abs=1e-15)


@pytest.mark.parametrize("op", AUGMENTATIONS)
def test_box_maps_agree_with_rasterized_masks(op):
    rng = np.random.default_rng(AUGMENTATIONS.index(op))
    n = 40
    for _ in range(25):
        # pixel-aligned boxes, so the mask transform is exact
        x0, x1 = sorted(rng.choice(n + 1, size=2, replace=False))
        y0, y1 = sorted(rng.choice(n + 1, size=2, replace=False))
        box = ((x0 + x1) / (2 * n), (y0 + y1) / (2 * n), (x1 - x0) / n, (y1 - y0) / n)
        s = Sample(raster(box, n).astype(float), [GroundTruthObject(0, box)], "m")
        out = augment(s, op)
        assert np.array_equal(out.image.astype(bool), raster(out.objects[0].bbox, n))


@pytest.mark.parametrize("op, times", [("fliph", 2), ("flipv", 2), ("rot180", 2), ("rot90", 4), ("rot270", 4)])
def test_augmentation_involutions_exact_on_generated_data(op, times):
    for s in generate_synthetic(10, seed=8):
        out = s
        for _ in range(times):
            out = augment(out, op)
        assert np.array_equal(out.image, s.image)
        assert out.objects == s.objects


dyadic = st.integers(1, 63).map(lambda k: k / 64)


@settings(max_examples=200, deadline=None)
@given(dyadic, dyadic, st.integers(1, 8), st.integers(1, 8))
def test_involutions_exact_on_dyadic_boxes(cx, cy, wk, hk):
    w, h = wk / 64, hk / 64
    if not (w / 2 <= cx <= 1 - w / 2 and h / 2 <= cy <= 1 - h / 2):
        return
    s = box_sample((cx, cy, w, h))
    for op, times in (("fliph", 2), ("rot180", 2), ("rot90", 4)):
        out = s
        for _ in range(times):
            out = augment(out, op)
        assert out.objects == s.objects


def test_rot90_then_rot270_is_identity():
    s = generate_synthetic(1, seed=2)[0]
    out = augment(augment(s, "rot90"), "rot270")
    assert np.array_equal(out.image, s.image)
    assert out.objects == s.objects


def test_preprocess_order_and_resize():
    s = generate_synthetic(1, image_size=32, seed=1)[0]
    out = preprocess(s, 64, ["flipv", "rot90"])
    assert [o.name for o in out] == [s.name, f"{s.name}_rot90", f"{s.name}_flipv"]
    assert all(o.image.shape == (64, 64) for o in out)
    assert out[0].objects == s.objects


def test_resize_nearest_repeats_pixels():
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    assert np.array_equal(resize_nearest(img, (4, 4)), np.kron(img, np.ones((2, 2))))
    assert np.array_equal(resize_nearest(img, (1, 1)), [[0.0]])


def test_preprocess_rejects_unknown_augmentation():
    with pytest.raises(ValueError, match="unknown"):
        preprocess(box_sample((0.5, 0.5, 0.2, 0.2)), 8, ["shear"])


# --------------------------------------------------------------------------
# splitting and partitioning
# --------------------------------------------------------------------------


def test_split_sizes_ten():
    train, test = split_train_test(labelled(10), 0.8, seed=0)
    assert (len(train), len(test)) == (8, 2)


@pytest.mark.parametrize("n", [2, 7, 10, 99, 600])
def test_split_is_a_disjoint_cover(n):
    samples = labelled(n)
    train, test = split_train_test(samples, 0.8, seed=n)
    ids = {id(s) for s in train} | {id(s) for s in test}
    assert len(ids) == n
    assert len(train) + len(test) == n
    assert 1 <= len(test)


def test_split_is_stratified_and_deterministic():
    samples = labelled(600)
    train, test = split_train_test(samples, 0.8, seed=3)
    assert Counter(s.class_key() for s in test) == {0: 40, 1: 40, 2: 40}
    again = split_train_test(samples, 0.8, seed=3)
    assert [id(s) for s in again[0]] == [id(s) for s in train]


def test_split_errors():
    with pytest.raises(ValueError):
        split_train_test(labelled(1), 0.8)
    with pytest.raises(ValueError):
        split_train_test(labelled(10), 1.0)


def test_iid_partition_round_robin_sizes():
    parts = partition(labelled(100), PartitionSpec("iid", 4, seed=9))
    assert [len(p) for p in parts] == [25, 25, 25, 25]
    assert sorted(i for p in parts for i in p) == list(range(100))


def test_single_client_holds_everything():
    for mode in ("iid", "dirichlet"):
        (part,) = partition(labelled(30), PartitionSpec(mode, 1, seed=2))
        assert part == list(range(30))


def test_dirichlet_golden_fixture():
    parts = partition(labelled(99), PartitionSpec("dirichlet", 4, alpha=0.1, seed=0))
    assert [len(p) for p in parts] == [37, 24, 16, 22]
    majority = [Counter(i % 3 for i in p).most_common(1)[0][1] / len(p) for p in parts]
    assert max(majority) > 0.6
    assert sorted(i for p in parts for i in p) == list(range(99))


@settings(max_examples=50, deadline=None)
@given(st.integers(30, 90), st.integers(1, 4), st.floats(0.3, 5.0), st.integers(0, 2**32))
def test_dirichlet_partition_is_disjoint_cover(n, k, alpha, seed):
    parts = partition(labelled(n), PartitionSpec("dirichlet", k, alpha, seed))
    assert all(parts)
    assert sorted(i for p in parts for i in p) == list(range(n))


def test_dirichlet_gives_up_when_a_client_stays_empty():
    with pytest.raises(ValueError, match="100 draws"):
        partition(labelled(4, classes=1), PartitionSpec("dirichlet", 4, alpha=0.01, seed=0))


def test_partition_errors():
    with pytest.raises(ValueError):
        partition(labelled(3), PartitionSpec("iid", 4))
    with pytest.raises(ValueError):
        PartitionSpec("shards", 2)
    with pytest.raises(ValueError):
        PartitionSpec("dirichlet", 2, alpha=0.0)


def test_manifest_format():
    data = json.loads(partition_manifest([[0, 2], [1]]))
    assert data == {"client_0": [0, 2], "client_1": [1]}
