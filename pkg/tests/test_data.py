import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sanetkit import data as D
from sanetkit.errors import DataError, PipelineError


def test_palette_round_trip():
    lab = np.arange(6, dtype=np.uint8).reshape(2, 3)
    rgb = D.encode_labels(lab)
    assert tuple(rgb[0, 0]) == (255, 255, 255) and tuple(rgb[0, 1]) == (0, 0, 255)
    assert tuple(rgb[1, 2]) == (255, 0, 0)
    np.testing.assert_array_equal(D.decode_labels(rgb), lab)


def test_unknown_colour_rejected():
    rgb = D.encode_labels(np.zeros((2, 2), np.uint8))
    rgb[1, 0] = (1, 2, 3)
    with pytest.raises(DataError, match=r"\(1, 2, 3\).*\(1, 0\)"):
        D.decode_labels(rgb)
    with pytest.raises(DataError):
        D.encode_labels(np.array([[7]]))


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    D.write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    np.testing.assert_array_equal(D.read_ppm(tmp_path / "a.ppm"), img)
    (tmp_path / "b.ppm").write_bytes(b"P6\n# comment\n2 1\n255\n" + bytes(6))
    assert D.read_ppm(tmp_path / "b.ppm").shape == (1, 2, 3)
    (tmp_path / "c.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(DataError):
        D.read_ppm(tmp_path / "c.ppm")


def test_window_starts_shift_to_fit():
    assert D.window_starts(6000) == [512 * i for i in range(11)] + [5488]
    assert D.window_starts(512) == [0]
    assert D.window_starts(1000) == [0, 488]
    with pytest.raises(PipelineError):
        D.window_starts(500)


@settings(max_examples=100, deadline=None)
@given(st.integers(32, 3000), st.integers(32, 3000), st.sampled_from([32, 64, 512]))
def test_windows_cover_tile_in_bounds(h, w, patch):
    if min(h, w) < patch:
        return
    man = D.crop_patches((h, w), 1.0, patch=patch)
    assert len(man) == -(-h // patch) * -(-w // patch)
    cover = np.zeros((h, w), bool)
    for win in man.windows:
        assert 0 <= win.x0 and win.x0 + win.w <= w and 0 <= win.y0 and win.y0 + win.h <= h
        cover[win.y0:win.y0 + win.h, win.x0:win.x0 + win.w] = True
    assert cover.all()
    keys = [(win.y0, win.x0) for win in man.windows]
    assert keys == sorted(keys)


@pytest.mark.parametrize("factor,count", [(1.0, 2016), (0.75, 1134), (0.5, 504), (0.25, 126)])
def test_fourteen_tile_patch_counts(factor, count):
    assert D.count_patches([(6000, 6000)] * 14, factor) == count


def test_resampled_sizes():
    assert D.resampled_size(6000, 0.5) == 3000
    assert D.resampled_size(6000, 0.75) == 4500
    assert D.resampled_size(6000, 0.25) == 1500


def test_undersized_result_is_pipeline_error():
    with pytest.raises(PipelineError, match="pad"):
        D.crop_patches((1000, 1000), 0.25)
    with pytest.raises(PipelineError):
        D.resample_tile(np.zeros((600, 600, 3), np.uint8), np.zeros((600, 600), np.uint8), 0.5)
    with pytest.raises(PipelineError):
        D.resample_tile(np.zeros((600, 600, 3), np.uint8), np.zeros((600, 600), np.uint8), 0.0)


def test_resample_identity_and_constant():
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, (96, 96, 3), dtype=np.uint8)
    lab = rng.integers(0, 6, (96, 96)).astype(np.uint8)
    i1, l1 = D.resample_tile(img, lab, 1.0, patch=32)
    assert i1.tobytes() == img.tobytes() and l1.tobytes() == lab.tobytes()
    const = np.full((96, 96, 3), 77, np.uint8)
    for f in (0.75, 0.5, 0.25):
        out, ol = D.resample_tile(const, lab, f, patch=16)
        assert out.shape[:2] == ol.shape == (D.resampled_size(96, f),) * 2
        assert np.all(out == 77)
        assert set(np.unique(ol)) <= set(np.unique(lab))


def test_label_resize_is_nearest():
    lab = np.repeat(np.repeat(np.arange(4, dtype=np.uint8).reshape(2, 2), 4, 0), 4, 1)
    small = D.resize_labels(lab, 2, 2)
    np.testing.assert_array_equal(small, [[0, 1], [2, 3]])


def test_manifest_round_trip(tmp_path):
    man = D.crop_patches((700, 600), 1.0, "tile_a")
    man.extend(D.crop_patches((1100, 1100), 0.5, "tile_b"))
    man.write(tmp_path / "m.txt")
    back = D.PatchManifest.read(tmp_path / "m.txt")
    assert back.windows == man.windows and back.tiles == man.tiles
    (tmp_path / "bad.txt").write_text("tile 1.0 0 0\n")
    with pytest.raises(DataError, match="bad.txt:1"):
        D.PatchManifest.read(tmp_path / "bad.txt")


def test_resample_dataset_on_disk(tmp_path):
    spec = D.SyntheticSceneSpec(seed=3, size=256, min_patch=64)
    img, lab = D.render_scene(spec)
    D.write_tile(tmp_path / "src", "t0", img, lab)
    man = D.resample_dataset(tmp_path / "src", 0.5, patch=64)
    out = tmp_path / "src_s0.5"
    assert len(man) == 4 and (out / "manifest.txt").exists()
    patches = D.load_patches(out)
    assert len(patches) == 4 and patches[0][0].shape == (64, 64, 3)
    D.resample_dataset(tmp_path / "src", 1.0, tmp_path / "same", patch=64)
    assert (tmp_path / "same/images/t0.ppm").read_bytes() == (tmp_path / "src/images/t0.ppm").read_bytes()


def test_synthetic_determinism_and_classes():
    spec = D.SyntheticSceneSpec(seed=11)
    a, b = D.render_scene(spec), D.render_scene(spec)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[0].shape == (512, 512, 3) and a[0].dtype == np.uint8
    other = D.render_scene(D.SyntheticSceneSpec(seed=12))
    assert other[0].tobytes() != a[0].tobytes()


@pytest.mark.parametrize("seed", range(8))
def test_default_grammar_has_five_classes(seed):
    _, lab = D.render_scene(D.SyntheticSceneSpec(seed=seed))
    assert np.count_nonzero(D.class_histogram(lab)) >= 5
    assert lab.max() <= 5


def test_scene_precondition():
    with pytest.raises(PipelineError):
        D.SyntheticSceneSpec(size=600, scales=(1.0, 0.5))
    D.SyntheticSceneSpec(size=100, min_patch=None)


def test_generate_scene_scales():
    out = D.generate_scene(D.SyntheticSceneSpec(seed=2, size=256, scales=(1.0, 0.5, 0.25), min_patch=64))
    assert {f: v[1].shape for f, v in out.items()} == {1.0: (256, 256), 0.5: (128, 128), 0.25: (64, 64)}


def test_augment_flip_applies_same_flip():
    rng = np.random.default_rng(0)
    img = np.arange(2 * 3 * 3).reshape(2, 3, 3).astype(np.uint8)
    lab = img[..., 0].copy()
    for _ in range(10):
        i2, l2 = D.augment_flip(img, lab, rng)
        np.testing.assert_array_equal(i2[..., 0], l2)


def test_dataset_digest_sensitive(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "a/x").write_bytes(b"1")
    d1 = D.dataset_digest(tmp_path / "a")
    (tmp_path / "a/x").write_bytes(b"2")
    assert D.dataset_digest(tmp_path / "a") != d1
