import numpy as np
import pytest

from crcnn import synthetic as S
from crcnn.dataset import open_video


def test_acceptance_scene_shape_and_labels():
    cfg = S.acceptance_scene(0)
    seq = S.generate(cfg)
    assert len(seq) == 120
    for lf in seq:
        assert lf.frame.shape == (64, 64) and lf.frame.dtype == np.uint8
        assert set(np.unique(lf.mask)) <= {0, 255}
        assert (lf.mask == 255).sum() == 100 == S.foreground_count(cfg, lf.index)
        assert np.all(lf.frame[lf.mask == 255] == 230)


def test_generation_is_seeded():
    a = S.generate(S.acceptance_scene(3))
    b = S.generate(S.acceptance_scene(3))
    c = S.generate(S.acceptance_scene(4))
    assert all(np.array_equal(x.frame, y.frame) and np.array_equal(x.mask, y.mask)
               for x, y in zip(a, b))
    assert not np.array_equal(a[0].frame, c[0].frame)


def test_static_background_is_constant_outside_objects():
    cfg = S.acceptance_scene(1)
    seq = S.generate(cfg)
    bg = [lf.frame[lf.mask == 0] for lf in seq[:2]]
    both = (seq[0].mask == 0) & (seq[1].mask == 0)
    np.testing.assert_array_equal(seq[0].frame[both], seq[1].frame[both])
    assert bg[0].std() > 10  # textured


def test_bounce_keeps_objects_inside():
    for t in range(300):
        assert 0 <= S._bounce(5, 3, t, 54) <= 54
    assert [S._bounce(0, 2, t, 4) for t in range(6)] == [0, 2, 4, 2, 0, 2]
    assert S._bounce(3, 1, 7, 0) == 0


def test_disc_footprint_and_clipping():
    obj = S.SceneObject("disc", 7)
    fp = S.footprint(obj, 2, 2, 16, 16)
    assert fp[5, 5] and not fp[2, 2]
    assert fp.sum() == S.footprint(obj, 5, 6, 16, 16).sum()
    clipped = S.footprint(S.SceneObject("rect", 4), -2, 14, 16, 16)
    assert clipped.sum() == 2 * 2


def test_shadows_are_labelled_and_darker():
    cfg = S.SceneConfig(32, 32, 5, seed=2, background_kind="static",
                        objects=[S.SceneObject("rect", 6, (4, 4), (1, 1), cast_shadow=True)])
    lf = S.generate(cfg)[0]
    shadow = lf.mask == S.SHADOW
    assert shadow.sum() > 0
    assert np.all(lf.frame[shadow] == 55)  # 110 * 0.5
    assert not np.any(shadow & (lf.mask == S.FOREGROUND))


def test_dynamic_noise_jitter_and_drift():
    cfg = S.SceneConfig(24, 24, 3, seed=5, background_kind="dynamic_noise", noise_sigma=5.0,
                        jitter_amplitude=2, illumination_drift=1.0)
    seq = S.generate(cfg)
    assert not np.array_equal(seq[0].frame, seq[1].frame)
    assert all(np.all(lf.mask == 0) for lf in seq)


def test_config_validation():
    with pytest.raises(ValueError):
        S.SceneConfig(background_kind="lava")
    with pytest.raises(ValueError):
        S.SceneConfig(width=8, height=8, objects=[S.SceneObject(size=9)])
    with pytest.raises(ValueError):
        S.SceneConfig(objects=[{"shape": "star"}])
    with pytest.raises(ValueError):
        S.SceneConfig(frame_count=0)


@pytest.mark.parametrize("ext", ["png", "pgm"])
def test_cd2014_layout_round_trip(tmp_path, ext):
    cfg = S.SceneConfig(16, 12, 4, seed=1, objects=[S.SceneObject(size=3, start=(1, 1))])
    seq = S.generate(cfg)
    manifest = S.write_cd2014_layout(seq, tmp_path, cfg, ext=ext)
    assert [e["number"] for e in manifest["frames"]] == [1, 2, 3, 4]
    assert manifest["frames"][0]["foreground_pixels"] == 9
    back = S.load_layout(tmp_path)
    for a, b in zip(seq, back):
        np.testing.assert_array_equal(a.frame, b.frame)
        np.testing.assert_array_equal(a.mask, b.mask)
    video = open_video(tmp_path)
    assert video.numbers == [1, 2, 3, 4]
    np.testing.assert_array_equal(video.mask(2), seq[1].mask)
