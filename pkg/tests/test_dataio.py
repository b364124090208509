import csv
import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from tactile_moco import dataio as D
from tactile_moco.errors import ConfigError, ContractError, FormatError

QUIET = dict(jitter_strength=0.0, grayscale_prob=0.0, blur_prob=0.0, flip_prob=0.0)


def write_png(path, arr01):
    Image.fromarray(np.clip(np.rint(arr01 * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0), "RGB").save(path)


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(D.MANIFEST_HEADER)
        w.writerows(rows)


@pytest.fixture
def two_rows(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("a0", "a1", "b0", "b1"):
        write_png(tmp_path / f"{name}.png", rng.random((3, 8, 8)))
    rows = [["s0", "a0.png", "a1.png", "1", "left"], ["s1", "b0.png", "b1.png", "0", "right"]]
    write_manifest(tmp_path / "manifest.csv", rows)
    return tmp_path


def test_load_two_rows(two_rows):
    samples = D.load_dataset(two_rows / "manifest.csv")
    assert [s.id for s in samples] == ["s0", "s1"]
    assert [s.label for s in samples] == [1, 0]
    assert samples[1].sensor == "right"
    assert samples[0].image_before.shape == (3, 8, 8)
    assert samples[0].image_before.dtype == np.float32
    assert 0 <= samples[0].image_after.min() and samples[0].image_after.max() <= 1


def test_load_bad_label_names_row(two_rows):
    write_manifest(two_rows / "bad.csv", [["s0", "a0.png", "a1.png", "1", "left"], ["s9", "b0.png", "b1.png", "2", "left"]])
    with pytest.raises(FormatError, match=r"bad.csv:3 \(id s9\)"):
        D.load_dataset(two_rows / "bad.csv")


def test_load_missing_file_names_it(two_rows):
    write_manifest(two_rows / "m.csv", [["s0", "a0.png", "nope.png", "1", "left"]])
    with pytest.raises(FileNotFoundError, match="nope.png"):
        D.load_dataset(two_rows / "m.csv")


def test_load_shape_mismatch(two_rows):
    write_png(two_rows / "big.png", np.zeros((3, 9, 8)))
    write_manifest(two_rows / "m.csv", [["s0", "a0.png", "big.png", "1", "left"]])
    with pytest.raises(FormatError):
        D.load_dataset(two_rows / "m.csv")


def test_load_bad_header(two_rows):
    (two_rows / "h.csv").write_text("id,before,after,label,sensor\n")
    with pytest.raises(FormatError):
        D.load_dataset(two_rows / "h.csv")


def test_make_diff_cases():
    rng = np.random.default_rng(1)
    img = rng.random((3, 5, 5)).astype(np.float32)
    assert not D.make_diff(D.GraspSample("x", img, img.copy(), 0)).data.any()
    ones = D.make_diff(D.GraspSample("y", np.zeros((3, 4, 4), np.float32), np.ones((3, 4, 4), np.float32), 1))
    np.testing.assert_array_equal(ones.data, 1.0)
    assert ones.source_id == "y"
    after = rng.random((3, 5, 5)).astype(np.float32)
    d = D.make_diff(D.GraspSample("z", img, after, 1))
    assert np.abs(d.data - (after - img)).max() == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_prop_diff_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    a = (rng.integers(0, 4, (3, 4, 4)) / 3).astype(np.float32)
    b = (rng.integers(0, 4, (3, 4, 4)) / 3).astype(np.float32)
    if rng.random() < 0.5:
        b = a.copy()
    assert (not D.make_diff(D.GraspSample("s", a, b, 0)).data.any()) == np.array_equal(a, b)


def test_augment_config_validation():
    with pytest.raises(ConfigError):
        D.AugmentConfig(resize_to=32, crop_to=40)
    with pytest.raises(ConfigError):
        D.AugmentConfig(blur_prob=1.5)
    assert D.AugmentConfig.paper().resize_to == 256 and D.AugmentConfig.paper().crop_to == 224


def _diff(seed=0, size=32):
    rng = np.random.default_rng(seed)
    return D.DiffImage(rng.uniform(-1, 1, (3, size, size)).astype(np.float32), f"id{seed}")


def test_augment_same_seed_is_bitwise_identical():
    cfg = D.AugmentConfig(resize_to=40, crop_to=32)
    p1 = D.augment_pair(_diff(), cfg, D.sample_stream(7, 3, "id0"))
    p2 = D.augment_pair(_diff(), cfg, D.sample_stream(7, 3, "id0"))
    assert p1.view_a.tobytes() == p2.view_a.tobytes()
    assert p1.view_b.tobytes() == p2.view_b.tobytes()
    p3 = D.augment_pair(_diff(), cfg, D.sample_stream(7, 4, "id0"))
    assert p3.view_a.tobytes() != p1.view_a.tobytes()


def test_augment_degenerate_config_returns_resized():
    diff = _diff(size=24)
    cfg = D.AugmentConfig(resize_to=20, crop_to=20, **QUIET)
    pair = D.augment_pair(diff, cfg, np.random.default_rng(0))
    resized = D.resize_bilinear(diff.data, 20)
    np.testing.assert_array_equal(pair.view_a, resized)
    np.testing.assert_array_equal(pair.view_b, resized)


def test_augment_paper_geometry():
    pair = D.augment_pair(_diff(size=64), D.AugmentConfig.paper(), np.random.default_rng(0))
    assert pair.view_a.shape == pair.view_b.shape == (3, 224, 224)


def test_augment_views_share_source_and_differ():
    pair = D.augment_pair(_diff(3), D.AugmentConfig(resize_to=40, crop_to=32), np.random.default_rng(5), "t")
    assert pair.source_id == "id3" and pair.seed_trace == "t"
    assert not np.array_equal(pair.view_a, pair.view_b)


@settings(max_examples=25, deadline=None)
@given(st.integers(8, 70), st.integers(8, 70), st.integers(0, 2**32 - 1))
def test_prop_resize_then_crop_dims(size_in, resize_to, seed):
    crop = max(1, resize_to - (seed % 9))
    img = np.random.default_rng(seed).uniform(-1, 1, (3, size_in, size_in + 3)).astype(np.float32)
    pair = D.augment_pair(D.DiffImage(img, "x"), D.AugmentConfig(resize_to=resize_to, crop_to=crop), np.random.default_rng(seed))
    assert pair.view_a.shape == (3, crop, crop)
    assert np.isfinite(pair.view_a).all()
    assert pair.view_a.min() >= -1.0001 and pair.view_a.max() <= 1.0001


def test_resize_bilinear_constant_and_identity():
    img = np.full((3, 7, 7), 0.25, np.float32)
    np.testing.assert_allclose(D.resize_bilinear(img, 13), 0.25)
    x = np.random.default_rng(0).random((3, 9, 9)).astype(np.float32)
    np.testing.assert_array_equal(D.resize_bilinear(x, 9), x)


def test_resize_bilinear_half_pixel_convention():
    # 2 -> 4 upsampling with half-pixel centres: [a, .75a+.25b, .25a+.75b, b]
    img = np.zeros((3, 1, 2), np.float32)
    img[:, 0, 1] = 1.0
    row = D.resize_bilinear(np.repeat(img, 2, axis=1), 4)[0, 0]
    np.testing.assert_allclose(row, [0.0, 0.25, 0.75, 1.0])


def test_hsv_roundtrip():
    x = np.random.default_rng(0).random((3, 6, 6))
    np.testing.assert_allclose(D._hsv_to_rgb(D._rgb_to_hsv(x)), x, atol=1e-12)


def test_sample_streams_are_independent_per_id():
    a = D.sample_stream(1, 1, "a").random(4)
    b = D.sample_stream(1, 1, "b").random(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, D.sample_stream(1, 1, "a").random(4))


# synthetic generator -------------------------------------------------------------


def _digest_dir(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_generator_is_deterministic(tmp_path):
    D.generate_synthetic(10, 32, 3, tmp_path / "a")
    D.generate_synthetic(10, 32, 3, tmp_path / "b")
    assert _digest_dir(tmp_path / "a") == _digest_dir(tmp_path / "b")
    D.generate_synthetic(10, 32, 4, tmp_path / "c")
    assert _digest_dir(tmp_path / "a") != _digest_dir(tmp_path / "c")


def test_generator_zero_amplitude_gives_failures(tmp_path):
    D.generate_synthetic(40, 32, 1, tmp_path, amplitude_scale=0.0, label_noise=0.0)
    log = json.loads((tmp_path / "gen_log.json").read_text())
    assert log["clean_label_counts"] == {"0": 40, "1": 0}
    assert all(s.label == 0 for s in D.load_dataset(tmp_path / "manifest.csv"))


def test_generator_512_balance_and_counts(tmp_path):
    manifest = D.generate_synthetic(512, 64, 7, tmp_path)
    samples = D.load_dataset(manifest)
    log = json.loads((tmp_path / "gen_log.json").read_text())
    positives = sum(s.label for s in samples)
    assert len(samples) == 512
    assert positives == log["label_counts"]["1"] and 512 - positives == log["label_counts"]["0"]
    assert 0.45 <= positives / 512 <= 0.55
    assert len(list((tmp_path / "images").glob("*.png"))) == 1024
    assert log["seed"] == 7 and log["threshold"] > 0


def test_generator_contact_region_only_changes(tmp_path):
    D.generate_synthetic(4, 32, 2, tmp_path, label_noise=0.0)
    s = D.load_dataset(tmp_path / "manifest.csv")[0]
    diff = D.make_diff(s).data
    assert diff.max() > 0.1  # a visible contact blob
    assert (np.abs(diff) <= 1.5 / 255 + 1e-6).mean() > 0.3  # background unchanged up to quantisation


def test_generator_preconditions(tmp_path):
    with pytest.raises(ContractError):
        D.generate_synthetic(1, 32, 0, tmp_path)
    with pytest.raises(ContractError):
        D.generate_synthetic(4, 16, 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        D.generate_synthetic(4, 32, 0, blocker / "sub")
