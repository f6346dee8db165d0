import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stcloud.cloudsense import Label, classify_crop
from stcloud.errors import ContractError
from stcloud.imagecore import MultispectralImage, load_image
from stcloud.pairforge import check_group, read_manifest
from stcloud.synthgen import (
    CLASS_NAMES,
    CloudField,
    SynthSceneSpec,
    apply_clouds,
    perlin,
    read_labels,
    synth_clear,
    synth_dataset,
    synth_group,
)


def flat_field(value, n=8):
    return CloudField(n, n, np.full((n, n), value), 0, 1)


def test_lattice_points_sit_at_half():
    a = perlin(64, 64, octaves=1, seed=5, cells=4).alpha
    np.testing.assert_allclose(a[::16, ::16], 0.5, atol=1e-12)


def test_perlin_determinism_and_seed_sensitivity():
    a, b, c = perlin(64, 64, seed=1).alpha, perlin(64, 64, seed=1).alpha, perlin(64, 64, seed=2).alpha
    np.testing.assert_array_equal(a, b)
    assert np.any(a != c)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_perlin_range_and_continuity(seed, octaves):
    a = perlin(64, 64, octaves=octaves, seed=seed).alpha
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert np.abs(np.diff(a, axis=0)).max() < 0.25
    assert np.abs(np.diff(a, axis=1)).max() < 0.25


def test_perlin_contracts():
    with pytest.raises(ContractError):
        perlin(0, 8)
    with pytest.raises(ContractError):
        perlin(8, 8, octaves=0)


def test_scene_spec_contracts():
    with pytest.raises(ContractError):
        SynthSceneSpec(0, class_id=10)
    with pytest.raises(ContractError):
        SynthSceneSpec(0, size=16)


def test_synth_clear_deterministic_and_four_band():
    spec = SynthSceneSpec(seed=9, size=64, class_id=3)
    a, b = synth_clear(spec), synth_clear(spec)
    assert a == b and a.shape == (64, 64, 4)


def test_forest_is_green():
    img = synth_clear(SynthSceneSpec(seed=1, class_id=CLASS_NAMES.index("Forest"))).samples.astype(float)
    assert img[..., 1].mean() > img[..., 0].mean()


def test_classes_have_distinct_colors():
    means = [synth_clear(SynthSceneSpec(seed=4, class_id=c)).samples[..., :3].mean(axis=(0, 1)) for c in range(10)]
    for i in range(10):
        for j in range(i + 1, 10):
            assert np.abs(means[i] - means[j]).max() > 1.0


@pytest.mark.parametrize("class_id", range(10))
def test_clear_ground_is_clear(class_id):
    for seed in range(3):
        assert classify_crop(synth_clear(SynthSceneSpec(seed, 64, class_id))).label == Label.CLEAR


def test_apply_clouds_examples():
    img = MultispectralImage(np.full((8, 8, 4), 50, np.uint8))
    assert apply_clouds(img, flat_field(0.7), 0.0) == img
    full = apply_clouds(img, flat_field(1.0)).samples
    assert np.all(full[..., :3] == 250) and np.all(full[..., 3] == 230)
    assert np.all(apply_clouds(img, flat_field(0.5)).samples[..., :3] == 150)
    with pytest.raises(ContractError):
        apply_clouds(img, flat_field(0.5, n=4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1))
def test_apply_clouds_stays_in_range_and_brightens(seed, scale):
    rng = np.random.default_rng(seed)
    img = MultispectralImage(rng.integers(0, 256, (16, 16, 4), dtype=np.uint8))
    field = CloudField(16, 16, rng.uniform(0, 1, (16, 16)), seed, 1)
    out = apply_clouds(img, field, scale).samples.astype(int)
    src = img.samples.astype(int)
    # moves toward the cloud colour, never past it
    target = np.array([250, 250, 250, 230])
    assert np.all(np.abs(out - target) <= np.abs(src - target) + 1)


def test_group_views_differ_and_are_cloudy():
    g = synth_group(3, T=3, size=64, seed=11)
    for img in g.cloudy:
        lab = classify_crop(img)
        assert lab.label == Label.CLOUDY
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.mean(np.abs(g.fields[i].alpha - g.fields[j].alpha)) > 0.05


def test_one_group_dataset(tmp_path):
    m = synth_dataset(1, T=3, size=32, seed=0, out_dir=tmp_path)
    assert len(m) == 1 and m.groups[0].T == 3
    assert len(list((tmp_path / "images").glob("*.msi"))) == 4
    assert len(read_manifest(tmp_path / "manifest.tsv")) == 1
    assert len(read_labels(tmp_path / "labels.tsv")) == 1


def test_small_dataset_invariants(small_synth):
    out, m = small_synth
    back = read_manifest(out / "manifest.tsv")
    assert back == m
    labels = read_labels(out / "labels.tsv")
    assert set(labels) == {g.group_id for g in m.groups}
    for g in back.groups:
        check_group(g)
        assert classify_crop(load_image(back.resolve(g.clear.path))).label == Label.CLEAR
        for z in g.cloudy:
            lab = classify_crop(load_image(back.resolve(z.path)))
            assert lab.label == Label.CLOUDY
            assert lab.cover_fraction == pytest.approx(z.cover_fraction)


def test_dataset_is_deterministic(tmp_path, small_synth):
    out, _ = small_synth
    synth_dataset(20, 3, 64, 7, tmp_path)
    for name in ("manifest.tsv", "manifest_single.tsv", "labels.tsv"):
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()
    for f in sorted((out / "images").iterdir()):
        assert (tmp_path / "images" / f.name).read_bytes() == f.read_bytes()
