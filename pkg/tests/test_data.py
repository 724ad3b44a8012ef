import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewseg.arrayio import CorruptArrayError, decode_array, encode_array, read_array, write_array
from fewseg.data import (Axis, ClipRange, ImageSlice, LabelMask, PercentileClip, SliceRecord,
                         SyntheticDatasetSpec, Volume, clip_and_rescale, extract_slices,
                         generate_synthetic_dataset, labels_to_native, load_volume,
                         model_to_native_coords, native_to_model_coords, parse_clip_policy,
                         read_slice_dir, resample_mask, resample_volume, stack_slices,
                         to_model_input, write_slice_dir)


def test_array_roundtrip(tmp_path):
    a = np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32)
    write_array(tmp_path / "a.arr", a)
    np.testing.assert_array_equal(read_array(tmp_path / "a.arr"), a)


def test_array_header_layout():
    buf = encode_array(np.zeros((2, 3)))
    assert buf[:4] == b"FSEG"
    assert int.from_bytes(buf[4:6], "little") == 1
    assert int.from_bytes(buf[6:8], "little") == 2
    assert int.from_bytes(buf[8:16], "little") == 2
    assert len(buf) == 8 + 16 + 6 * 4


def test_truncated_array_rejected():
    buf = encode_array(np.ones(10))
    with pytest.raises(CorruptArrayError):
        decode_array(buf[:-3])


def test_volume_validation():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((0, 2, 2)), (1, 1, 1))


def test_resample_doubles_dims():
    v = Volume(np.random.default_rng(0).random((8, 9, 10)), (2, 2, 2))
    out = resample_volume(v, 1.0)
    assert out.spacing == (1.0, 1.0, 1.0)
    for n_in, n_out in zip(v.voxels.shape, out.voxels.shape):
        assert abs(n_out - 2 * n_in) <= 1


def test_resample_identity():
    v = Volume(np.random.default_rng(1).random((6, 7, 8)), (0.8, 0.8, 3.0))
    out = resample_volume(v, (0.8, 0.8, 3.0))
    np.testing.assert_allclose(out.voxels, v.voxels, atol=1e-6)


@pytest.mark.parametrize("target", [0.7, 1.3, (0.5, 2.0, 1.1)])
def test_resample_preserves_constant(target):
    v = Volume(np.full((5, 6, 7), 3.25), (1.0, 1.5, 2.5))
    out = resample_volume(v, target)
    np.testing.assert_allclose(out.voxels, 3.25, atol=1e-12)


def test_resample_in_plane_keeps_z():
    v = Volume(np.zeros((10, 10, 4)), (1.0, 1.0, 5.0))
    out = resample_volume(v, (0.5, 0.5, 1.0), mode="in_plane_only")
    assert out.spacing == (0.5, 0.5, 5.0)
    assert out.voxels.shape == (20, 20, 4)


def test_resample_rejects_degenerate():
    with pytest.raises(ValueError, match="too small"):
        resample_volume(Volume(np.zeros((1, 5, 5)), (1, 1, 1)), 0.5)


def test_mask_resampling_is_nearest():
    rng = np.random.default_rng(0)
    v = Volume(rng.random((7, 8, 9)), (1.7, 1.0, 2.3))
    m = rng.integers(0, 3, size=v.voxels.shape)
    out = resample_mask(m, v, 1.0)
    assert set(np.unique(out)) <= {0, 1, 2}
    # each output voxel copies the input voxel at round(j * step)
    step = 1.0 / np.array([1.7, 1.0, 2.3])
    for idx in [(0, 0, 0), (5, 3, 7), tuple(s - 1 for s in out.shape)]:
        src = tuple(min(int(np.floor(j * s + 0.5)), n - 1) for j, s, n in zip(idx, step, m.shape))
        assert out[idx] == m[src]


def test_clip_fixed_range():
    v = Volume(np.array([-1000.0, -500, 400, 1300, 2000]).reshape(5, 1, 1), (1, 1, 1))
    out = clip_and_rescale(v, ClipRange(-500, 1300)).voxels.ravel()
    np.testing.assert_allclose(out, [0.0, 0.0, 0.5, 1.0, 1.0])


def test_clip_percentile_matches_sorted_oracle():
    rng = np.random.default_rng(3)
    x = rng.gamma(2.0, 100.0, size=(10, 10, 10))
    out = clip_and_rescale(Volume(x, (1, 1, 1), "MRI"), PercentileClip(0.5, 99.5)).voxels
    s = np.sort(x.ravel())
    n = s.size

    def pct(p):  # linear interpolation between closest ranks
        pos = p / 100 * (n - 1)
        lo = int(np.floor(pos))
        return s[lo] + (pos - lo) * (s[min(lo + 1, n - 1)] - s[lo])

    lo, hi = pct(0.5), pct(99.5)
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all(out[x <= lo] == 0.0)
    np.testing.assert_allclose(out, (np.clip(x, lo, hi) - lo) / (hi - lo), atol=1e-12)


def test_percentile_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        clip_and_rescale(Volume(np.ones((3, 3, 3)), (1, 1, 1)), PercentileClip())


def test_parse_clip_policy():
    assert parse_clip_policy([-500, 1300]) == ClipRange(-500, 1300)
    assert parse_clip_policy(["0.5%", "99.5%"]) == PercentileClip(0.5, 99.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-2000, 0), st.floats(1, 3000))
def test_clip_output_in_unit_interval_and_idempotent(seed, lo, width):
    x = np.random.default_rng(seed).normal(0, 1000, size=(4, 4, 4))
    once = clip_and_rescale(Volume(x, (1, 1, 1)), ClipRange(lo, lo + width))
    assert once.voxels.min() >= 0 and once.voxels.max() <= 1
    twice = clip_and_rescale(once, ClipRange(0, 1))
    np.testing.assert_array_equal(twice.voxels, once.voxels)


def test_extract_axial_count():
    v = Volume(np.random.default_rng(0).random((64, 64, 10)), (1, 1, 2))
    sl = extract_slices(v, "axial")
    assert len(sl) == 10
    assert sl[0][0].pixels.shape == (64, 64)
    assert sl[0][0].spacing == (1.0, 1.0)
    assert sl[3][0].provenance == ("", "axial", 3)


def test_extract_coronal_locality():
    v = Volume(np.zeros((8, 6, 5)), (1, 1, 1), subject_id="s")
    m = np.zeros((8, 6, 5), int)
    m[2:4, 3, 1:3] = 1
    pairs = extract_slices(v, Axis.coronal, m)
    assert len(pairs) == 6
    nonempty = [i for i, (_, mask) in enumerate(pairs) if mask.labels.any()]
    assert nonempty == [3]
    assert len(extract_slices(v, "coronal", m, skip_empty=True)) == 1


@pytest.mark.parametrize("axis", list(Axis))
def test_extract_stack_roundtrip(axis):
    x = np.random.default_rng(4).random((5, 6, 7)).astype(np.float32)
    pairs = extract_slices(Volume(x, (1, 1, 1)), axis)
    np.testing.assert_array_equal(stack_slices([p[0] for p in pairs], axis), x)


def test_extract_bad_axis():
    with pytest.raises(ValueError):
        extract_slices(Volume(np.zeros((2, 2, 2)), (1, 1, 1)), "oblique")


def test_resample_then_extract_keeps_pairing():
    rng = np.random.default_rng(5)
    v = Volume(rng.random((6, 6, 4)), (1.0, 1.0, 2.0), subject_id="p")
    m = rng.integers(0, 2, size=v.voxels.shape)
    rv = resample_volume(v, 1.0)
    rm = resample_mask(m, v, 1.0)
    pairs = extract_slices(rv, "axial", rm, label_set=(1,))
    assert len(pairs) == rv.voxels.shape[2]
    for k, (img, mask) in enumerate(pairs):
        np.testing.assert_array_equal(mask.labels, rm[:, :, k])


def test_to_model_input_scale():
    mi = to_model_input(ImageSlice(np.random.default_rng(0).random((512, 512))))
    assert mi.image.shape == (1024, 1024, 3)
    assert mi.scale_meta.factors == (2.0, 2.0)


def test_to_model_input_constant():
    mi = to_model_input(ImageSlice(np.full((100, 37), 0.3)))
    np.testing.assert_allclose(mi.image, 0.3, atol=1e-6)


def test_to_model_input_identity_at_1024():
    x = np.random.default_rng(1).random((1024, 1024)).astype(np.float32)
    mi = to_model_input(ImageSlice(x))
    for c in range(3):
        np.testing.assert_array_equal(mi.image[:, :, c], x)


@settings(max_examples=40, deadline=None)
@given(st.integers(8, 300), st.integers(8, 300), st.data())
def test_model_coordinate_roundtrip(h, w, data):
    mi = to_model_input(ImageSlice(np.zeros((h, w))))
    r = data.draw(st.integers(0, h - 1))
    c = data.draw(st.integers(0, w - 1))
    back = model_to_native_coords(native_to_model_coords([r, c], mi.scale_meta), mi.scale_meta)
    assert np.all(np.abs(back - [r, c]) <= 0.5)
    # the label map sampled back from the model grid returns the native mask
    lab = np.zeros((h, w), int)
    lab[r, c] = 1
    from fewseg.data import mask_to_model_grid
    grid = mask_to_model_grid(LabelMask(lab, (1,)))
    np.testing.assert_array_equal(labels_to_native(grid, mi.scale_meta), lab)


def test_synthetic_deterministic():
    spec = SyntheticDatasetSpec(num_subjects=3, rng_seed=7)
    a, b = generate_synthetic_dataset(spec), generate_synthetic_dataset(spec)
    for (ia, ma), (ib, mb) in zip(a, b):
        np.testing.assert_array_equal(ia.pixels, ib.pixels)
        np.testing.assert_array_equal(ma.labels, mb.labels)


def test_synthetic_noiseless_uniform_intensity():
    spec = SyntheticDatasetSpec(num_subjects=2, shapes_per_slice=1, shape_kinds=("disk",),
                                label_assignment={"disk": 1}, noise_sigma=0.0)
    for img, mask in generate_synthetic_dataset(spec):
        assert len(np.unique(img.pixels[mask.labels == 1])) == 1
        assert mask.label_set == (1,)


def test_disk_area_brute_force():
    # rasterise a radius-10 disk at the centre of 128x128 by counting pixels
    spec = SyntheticDatasetSpec(num_subjects=1, shapes_per_slice=1, shape_kinds=("disk",),
                                label_assignment={"disk": 1}, noise_sigma=0.0,
                                size_range=(10, 10))
    _, mask = generate_synthetic_dataset(spec)[0]
    area = int((mask.labels == 1).sum())
    count = sum(1 for r in range(-12, 13) for c in range(-12, 13) if r * r + c * c <= 100)
    assert area == count
    assert abs(area - np.pi * 100) <= 40


def test_synthetic_all_kinds_and_labels():
    spec = SyntheticDatasetSpec(num_subjects=4, shapes_per_slice=4,
                                shape_kinds=("disk", "rectangle", "ring", "capsule"),
                                label_assignment={"disk": 1, "rectangle": 2, "ring": 3, "capsule": 4},
                                size_range=(6, 12))
    for img, mask in generate_synthetic_dataset(spec):
        assert set(mask.present()) == {1, 2, 3, 4}
        assert 0 <= img.pixels.min() and img.pixels.max() <= 1


def test_synthetic_placement_failure():
    spec = SyntheticDatasetSpec(num_subjects=1, shapes_per_slice=30, image_size=40, size_range=(8, 8))
    with pytest.raises(RuntimeError, match="could not place shapes"):
        generate_synthetic_dataset(spec)


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(num_subjects=0)
    with pytest.raises(ValueError):
        SyntheticDatasetSpec(label_assignment={"disk": 1, "rectangle": 1})


def test_label_mask_validation():
    with pytest.raises(ValueError):
        LabelMask(np.array([[0, 3]]), (1, 2))


def test_raw_sidecar_volume(tmp_path):
    x = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    seg = (x > 10).astype(np.uint8)
    x.astype("<i2").tofile(tmp_path / "a.raw")
    seg.tofile(tmp_path / "a_seg.raw")
    (tmp_path / "a.json").write_text(json.dumps({
        "shape": [2, 3, 4], "spacing": [1, 1, 2.5], "modality": "MRI", "dtype": "int16",
        "label": "a_seg.raw"}))
    v, labels = load_volume(tmp_path / "a.json")
    np.testing.assert_array_equal(v.voxels, x)
    assert v.spacing == (1.0, 1.0, 2.5)
    assert v.modality.value == "MRI" and v.subject_id == "a"
    np.testing.assert_array_equal(labels, seg)


def test_raw_sidecar_size_mismatch(tmp_path):
    np.zeros(5, "<f4").tofile(tmp_path / "b.raw")
    (tmp_path / "b.json").write_text(json.dumps({"shape": [2, 2, 2], "spacing": [1, 1, 1]}))
    with pytest.raises(ValueError):
        load_volume(tmp_path / "b.json")


def test_slice_dir_roundtrip(tmp_path):
    data = generate_synthetic_dataset(SyntheticDatasetSpec(num_subjects=3, rng_seed=2))
    recs = [SliceRecord(img.slice_id, img, m, "test" if i == 2 else "train")
            for i, (img, m) in enumerate(data)]
    manifest = write_slice_dir(recs, tmp_path, (1, 2))
    assert manifest["schema"] == 1 and len(manifest["slices"]) == 3
    back = read_slice_dir(tmp_path)
    for r, (img, m) in zip(back, data):
        np.testing.assert_array_equal(r.image.pixels, img.pixels)
        np.testing.assert_array_equal(r.mask.labels, m.labels)
        assert r.image.provenance == img.provenance
    assert [r.slice_id for r in read_slice_dir(tmp_path, split="test")] == [recs[2].slice_id]
