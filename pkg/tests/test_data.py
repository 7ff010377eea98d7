import math

import numpy as np
import pytest
from conftest import sort_median
from hypothesis import given, settings
from hypothesis import strategies as st

from crcnn import data
from crcnn.dataset import find_videos, frame_number, open_video
from crcnn.errors import DataError, ShapeError
from crcnn.imageio import decode_pnm, encode_pnm, list_images, read_image, write_image


# --- grayscale, background, normalisation ---------------------------------


def test_grayscale_bt601_rounding():
    rgb = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255], [10, 20, 30], [255, 255, 255]]],
                   dtype=np.uint8)
    expected = [math.floor(0.299 * r + 0.587 * g + 0.114 * b + 0.5) for r, g, b in rgb[0].tolist()]
    assert data.to_grayscale(rgb)[0].tolist() == expected == [76, 150, 29, 18, 255]
    gray = np.arange(6, dtype=np.uint8).reshape(2, 3)
    assert data.to_grayscale(gray) is gray
    with pytest.raises(DataError):
        data.to_grayscale(np.zeros((2, 2), np.float32))


@settings(max_examples=60, deadline=None)
@given(k=st.integers(1, 7), h=st.integers(1, 8), w=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_background_equals_sort_median(k, h, w, seed):
    stack = np.random.default_rng(seed).integers(0, 256, (k, h, w), dtype=np.uint8)
    bg = data.compute_background(list(stack))
    assert bg.shape == (1, 1, h, w) and bg.dtype == np.float32
    np.testing.assert_array_equal(bg[0, 0], (sort_median(stack) / 255.0).astype(np.float32))


def test_background_even_count_averages_middle_pair():
    frames = [np.full((1, 1), v, np.uint8) for v in (10, 200, 20, 90)]
    assert data.compute_background(frames)[0, 0, 0, 0] == np.float32(55 / 255)


def test_background_rejects_mixed_shapes():
    with pytest.raises(ShapeError):
        data.compute_background([np.zeros((2, 2), np.uint8), np.zeros((2, 3), np.uint8)])
    with pytest.raises(DataError):
        data.compute_background([])


def test_normalize_round_trip(rng):
    frame = rng.integers(0, 256, (9, 7), dtype=np.uint8)
    mean = data.dataset_mean([frame, 255 - frame])
    assert mean == pytest.approx(0.5)
    f = data.normalize(frame, mean)
    assert f.shape == (1, 1, 9, 7) and f.dtype == np.float32
    np.testing.assert_array_equal(data.denormalize(f, mean)[0, 0], frame)
    with pytest.raises(ValueError):
        data.normalize(frame, 1.5)


def test_binarize_mask_threshold():
    gt = np.array([[0, 50, 85, 127], [128, 170, 254, 255]], np.uint8)
    np.testing.assert_array_equal(data.binarize_mask(gt), [[0, 0, 0, 0], [1, 1, 1, 1]])


# --- patches ----------------------------------------------------------------


def test_patch_stride_examples():
    assert data.patch_stride(48, 0.5) == 24
    assert data.patch_stride(32, 0.5) == 16
    assert data.patch_stride(50, 0.75) == 13  # 12.5 rounds half up
    assert data.patch_stride(5, 0.5) == 2  # 2.5 -> 3 exceeds floor(5/2), clamped
    assert data.patch_stride(1, 0.5) == 1


@settings(max_examples=200, deadline=None)
@given(h=st.integers(1, 120), w=st.integers(1, 120), p=st.integers(1, 50),
       overlap=st.floats(0.5, 0.75))
def test_patch_coverage_property(h, w, p, overlap):
    if p > min(h, w):
        with pytest.raises(ValueError):
            data.extract_patches(np.zeros((h, w), np.float32), p, overlap)
        return
    img = np.arange(h * w, dtype=np.float32).reshape(h, w)
    ps = data.extract_patches(img, p, overlap)
    hits = np.zeros((h, w), int)
    for (y, x), patch in zip(ps.origins, ps.patches):
        assert 0 <= y <= h - p and 0 <= x <= w - p
        np.testing.assert_array_equal(patch[0], img[y:y + p, x:x + p])
        hits[y:y + p, x:x + p] += 1
    assert hits.min() >= 1
    if p > 1:
        assert 0.5 <= ps.overlap <= 0.75
    np.testing.assert_array_equal(data.reassemble(ps)[0], img)


def test_patch_grid_counts():
    ps = data.extract_patches(np.zeros((64, 64), np.float32), 32, 0.5)
    assert len(ps) == 9 and ps.stride == 16
    assert sorted({y for y, _ in ps.origins}) == [0, 16, 32]
    ps = data.extract_patches(np.zeros((50, 70), np.float32), 48, 0.5)
    assert sorted({y for y, _ in ps.origins}) == [0, 2]
    assert sorted({x for _, x in ps.origins}) == [0, 22]


def test_patch_bounds_are_enforced():
    img = np.zeros((60, 60), np.float32)
    with pytest.raises(ValueError):
        data.extract_patches(img, 51)
    with pytest.raises(ValueError):
        data.extract_patches(img, 16, 0.4)
    with pytest.raises(ValueError):
        data.extract_patches(img, 16, 0.8)


def test_background_patches_follow_layout(rng):
    frame = rng.standard_normal((1, 1, 20, 20)).astype(np.float32)
    bg = rng.standard_normal((20, 20)).astype(np.float32)
    layout = data.extract_patches(frame, 8, 0.5, frame_id=3)
    bgp = data.replicate_background_patches(bg, layout)
    assert bgp.origins == layout.origins and len(bgp) == len(layout)
    assert np.all(bgp.frame_ids == 3)
    for (y, x), patch in zip(bgp.origins, bgp.patches):
        np.testing.assert_array_equal(patch[0], bg[y:y + 8, x:x + 8])
    with pytest.raises(ShapeError):
        data.replicate_background_patches(bg[:10], layout)


def test_multichannel_patches_and_concat(rng):
    c = rng.standard_normal((1, 2, 12, 12)).astype(np.float32)
    a = data.extract_patches(c, 8, 0.5, frame_id=0)
    b = data.extract_patches(c, 8, 0.5, frame_id=1)
    both = data.concat_patchsets([a, b])
    assert both.patches.shape == (2 * len(a), 2, 8, 8)
    assert both.frame_ids.tolist() == [0] * len(a) + [1] * len(b)
    with pytest.raises(ShapeError):
        data.concat_patchsets([a, data.extract_patches(c, 6, 0.5)])


# --- split and batching -----------------------------------------------------


@pytest.mark.parametrize("count", [1, 2, 5, 144, 1000, 1001])
def test_split_is_80_20_and_disjoint(count):
    split = data.split_and_batch(count, 0.8, 128, seed=3)
    n_train = len(split.train_indices)
    assert n_train == math.ceil(0.8 * count)
    assert abs(n_train - 0.8 * count) <= 1
    both = np.concatenate([split.train_indices, split.val_indices])
    assert sorted(both.tolist()) == list(range(count))


def test_batches_have_size_128_except_last():
    split = data.split_and_batch(1000, 0.8, 128, seed=0)
    for epoch in (1, 2):
        sizes = [len(b) for b in split.epoch_batches(epoch)]
        assert all(s == 128 for s in sizes[:-1]) and 0 < sizes[-1] <= 128
        assert sum(sizes) == 800
    assert not np.array_equal(np.concatenate(split.epoch_batches(1)),
                              np.concatenate(split.epoch_batches(2)))


def test_split_is_seeded():
    a, b, c = (data.split_and_batch(50, seed=s) for s in (1, 1, 2))
    np.testing.assert_array_equal(a.train_indices, b.train_indices)
    np.testing.assert_array_equal(a.epoch_batches(4)[0], b.epoch_batches(4)[0])
    assert not np.array_equal(a.train_indices, c.train_indices)


def test_split_rejects_bad_arguments():
    with pytest.raises(DataError):
        data.split_and_batch(0)
    with pytest.raises(ValueError):
        data.split_and_batch(10, 1.0)
    with pytest.raises(ValueError):
        data.split_and_batch(10, batch_size=0)


# --- image files ------------------------------------------------------------


def test_pnm_round_trip(rng, tmp_path):
    gray = rng.integers(0, 256, (5, 7), dtype=np.uint8)
    rgb = rng.integers(0, 256, (4, 3, 3), dtype=np.uint8)
    np.testing.assert_array_equal(decode_pnm(encode_pnm(gray)), gray)
    np.testing.assert_array_equal(decode_pnm(encode_pnm(rgb)), rgb)
    write_image(tmp_path / "a.pgm", gray)
    np.testing.assert_array_equal(read_image(tmp_path / "a.pgm"), gray)
    assert not list(tmp_path.glob("*.tmp"))


def test_pnm_header_comments_and_errors():
    raster = bytes(range(6))
    img = decode_pnm(b"P5 # comment\n3 # w\n2\n255\n" + raster)
    assert img.tolist() == [[0, 1, 2], [3, 4, 5]]
    for bad in (b"P2\n3 2\n255\n", b"P5\n3 2\n65535\n" + raster, b"P5\n3 2\n255\n" + raster[:4],
                b"P5\n3", b"P5\nx 2\n255\n" + raster):
        with pytest.raises(DataError):
            decode_pnm(bad)


def test_png_round_trip_and_jpeg_refused(rng, tmp_path):
    gray = rng.integers(0, 256, (6, 5), dtype=np.uint8)
    write_image(tmp_path / "g.png", gray)
    np.testing.assert_array_equal(read_image(tmp_path / "g.png"), gray)
    with pytest.raises(ValueError):
        write_image(tmp_path / "g.jpg", gray)
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(DataError):
        read_image(tmp_path / "junk.png")
    with pytest.raises(DataError):
        read_image(tmp_path / "missing.png")


def test_jpeg_inputs_are_readable(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((8, 8, 3), 128, np.uint8)).save(tmp_path / "in000001.jpg")
    img = read_image(tmp_path / "in000001.jpg")
    assert img.shape == (8, 8, 3) and abs(int(img.mean()) - 128) <= 2


# --- CD2014 directories -----------------------------------------------------


def _video(root, n=5, gt_from=1, roi=None):
    (root / "input").mkdir(parents=True)
    (root / "groundtruth").mkdir()
    for i in range(1, n + 1):
        write_image(root / "input" / f"in{i:06d}.pgm", np.full((4, 4), i, np.uint8))
        if i >= gt_from:
            write_image(root / "groundtruth" / f"gt{i:06d}.png", np.zeros((4, 4), np.uint8))
    if roi:
        (root / "temporalROI.txt").write_text(f"{roi[0]} {roi[1]}\n")
    return root


def test_open_video_pairs_frames(tmp_path):
    v = open_video(_video(tmp_path / "cat" / "vid", n=6, gt_from=3, roi=(2, 5)))
    assert v.numbers == [1, 2, 3, 4, 5, 6]
    assert v.name == "vid" and v.category == "cat"
    assert v.scored_numbers() == [3, 4, 5]
    assert v.frame(4)[0, 0] == 4
    with pytest.raises(DataError):
        v.mask(1)
    assert v.background_image() is None


def test_find_videos_walks_tree(tmp_path):
    _video(tmp_path / "b" / "v2")
    _video(tmp_path / "a" / "v1")
    (tmp_path / "notes").mkdir()
    assert [v.name for v in find_videos(tmp_path)] == ["v1", "v2"]
    with pytest.raises(DataError):
        find_videos(tmp_path / "nope")
    with pytest.raises(DataError):
        open_video(tmp_path / "notes")


def test_frame_number_and_listing(tmp_path):
    assert frame_number(tmp_path / "in000123.jpg") == 123
    assert frame_number(tmp_path / "cam2_frame0042.png") == 42
    with pytest.raises(DataError):
        frame_number(tmp_path / "frame.png")
    (tmp_path / "x.txt").write_text("")
    write_image(tmp_path / "b.pgm", np.zeros((1, 1), np.uint8))
    assert [p.name for p in list_images(tmp_path)] == ["b.pgm"]


def test_malformed_roi(tmp_path):
    root = _video(tmp_path / "v")
    (root / "temporalROI.txt").write_text("one two")
    with pytest.raises(DataError):
        open_video(root)
