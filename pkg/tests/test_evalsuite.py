import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import const_image
from oracles import mse_oracle, psnr_oracle, ssim_oracle
from stcloud.cloudsense import CloudMask
from stcloud.errors import ContractError
from stcloud.evalsuite import (
    BASELINES,
    composite_filter,
    evaluate,
    format_table,
    mean_filter,
    median_filter,
    mse,
    psnr,
    psnr_from_mse,
    ssim,
    write_report,
)
from stcloud.imagecore import MultispectralImage
from stcloud.pairforge import read_manifest

images = st.integers(0, 2**32 - 1).map(
    lambda s: MultispectralImage(np.random.default_rng(s).integers(0, 256, (16, 16, 3), dtype=np.uint8))
)


def test_mse_examples():
    a = const_image(0, 8, 8, 3)
    assert mse(a, a) == 0
    assert mse(a, const_image(255, 8, 8, 3)) == 65025
    assert mse(const_image(7, 8, 8, 3), const_image(8, 8, 8, 3)) == 1


@pytest.mark.parametrize("err,db", [(65025, 0.0), (1, 48.1308), (0, 48.1308), (0.3, 48.1308), (100, 28.1308)])
def test_psnr_examples(err, db):
    assert psnr_from_mse(err) == pytest.approx(db, abs=1e-4)


def test_psnr_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(const_image(0, 8, 8, 3), const_image(0, 8, 9, 3))


def test_ssim_examples():
    a = const_image(0, 16, 16, 3)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c1 = (0.01 * 255) ** 2
    assert ssim(a, const_image(255, 16, 16, 3)) == pytest.approx(c1 / (255**2 + c1), rel=1e-9)
    with pytest.raises(ContractError):
        ssim(const_image(0, 8, 8, 3), const_image(0, 8, 8, 3))


@settings(max_examples=15, deadline=None)
@given(images, images)
def test_metrics_match_oracles(x, y):
    assert mse(x, y) == pytest.approx(mse_oracle(x.samples, y.samples), abs=1e-9)
    assert abs(psnr(x, y) - psnr_oracle(x.samples, y.samples)) < 1e-6
    assert abs(ssim(x, y) - ssim_oracle(x.samples, y.samples)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(images, images)
def test_metrics_symmetric(x, y):
    assert psnr(x, y) == psnr(y, x)
    assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)


@given(st.floats(1.0, 65025.0), st.floats(1.0, 65025.0))
def test_psnr_monotone(a, b):
    if a < b:
        assert psnr_from_mse(a) > psnr_from_mse(b)


def test_mean_filter_examples():
    out = mean_filter([const_image(v) for v in (30, 60, 90)])
    assert np.all(out.samples == 60)
    out = mean_filter([const_image(v) for v in (0, 0, 255)])
    assert np.all(out.samples == 85)
    rng = np.random.default_rng(0)
    img = MultispectralImage(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8))
    assert mean_filter([img, img, img]) == img


def test_median_filter_examples():
    imgs = [const_image(v) for v in (10, 20, 200)]
    assert np.all(median_filter(imgs).samples == 20)
    assert median_filter(imgs[::-1]) == median_filter(imgs)
    assert np.all(median_filter([const_image(10), const_image(21)]).samples == 16)  # 15.5 rounds half up


@settings(max_examples=30, deadline=None)
@given(st.lists(images, min_size=3, max_size=3), st.permutations([0, 1, 2]))
def test_filters_permutation_invariant(imgs, perm):
    shuffled = [imgs[i] for i in perm]
    assert mean_filter(imgs) == mean_filter(shuffled)
    assert median_filter(imgs) == median_filter(shuffled)
    rng = np.random.default_rng(len(perm))
    masks = [CloudMask.from_binary(rng.random((16, 16)) < 0.5) for _ in imgs]
    a, ma = composite_filter(imgs, masks)
    b, mb = composite_filter(shuffled, [masks[i] for i in perm])
    assert a == b and np.array_equal(ma, mb)


def half_masks(n=8):
    top = np.zeros((n, n), bool)
    top[: n // 2] = True
    return CloudMask.from_binary(top), CloudMask.from_binary(~top)


def test_composite_examples():
    a, b = const_image(40, 8, 8, 3), const_image(120, 8, 8, 3)
    top_cloudy, bottom_cloudy = half_masks()
    out, missing = composite_filter([a, b], [top_cloudy, bottom_cloudy])
    assert np.all(out.samples[:4] == 120) and np.all(out.samples[4:] == 40)
    assert not missing.any()

    out, missing = composite_filter([a, b], [top_cloudy, top_cloudy])
    assert np.all(out.samples[:4] == 0) and missing[:4].all() and not missing[4:].any()
    assert np.all(out.samples[4:] == 80)

    empty = CloudMask.from_binary(np.zeros((8, 8), bool))
    c = const_image(81, 8, 8, 3)
    assert composite_filter([a, b, c], [empty] * 3)[0] == mean_filter([a, b, c])


def test_composite_contracts():
    a = const_image(40, 8, 8, 3)
    with pytest.raises(ContractError):
        composite_filter([a, a], [half_masks()[0]])
    with pytest.raises(ContractError):
        composite_filter([a], [half_masks(4)[0]])


def test_clear_identity_report(small_synth):
    root, _ = small_synth
    m = read_manifest(root / "manifest.tsv")
    rep = evaluate("clear", m, "train")
    assert rep.n_samples == len(m.split("train"))
    assert rep.mean_ssim == pytest.approx(1.0, abs=1e-12)
    assert rep.mean_psnr == pytest.approx(48.1308, abs=1e-4)


def test_baseline_reports(small_synth, tmp_path):
    root, _ = small_synth
    m = read_manifest(root / "manifest.tsv")
    for name in BASELINES:
        rep = evaluate(name, m, "train")
        assert rep.n_samples == len(m.split("train"))
        assert rep.mean_psnr < 48.1308
        assert rep.mean_psnr == pytest.approx(np.mean([s.psnr for s in rep.samples]))
    csv_path, txt_path = write_report(rep, tmp_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "group_id,psnr,ssim"
    assert lines[-2].startswith("mean_psnr=") and lines[-1].startswith("mean_ssim=")
    assert len(lines) == rep.n_samples + 3
    assert "composite" in txt_path.read_text()


def test_missing_files_are_counted(small_synth, tmp_path):
    import shutil

    root, _ = small_synth
    copy = tmp_path / "copy"
    shutil.copytree(root, copy)
    m = read_manifest(copy / "manifest.tsv")
    victim = m.split("train")[0]
    (copy / victim.cloudy[1].path).unlink()
    rep = evaluate("mean", m, "train")
    assert rep.n_samples == len(m.split("train")) - 1
    assert [gid for gid, _ in rep.errors] == [victim.group_id]
    assert format_table([rep]).splitlines()[1].split()[-1] == "1"


def test_callable_source(small_synth):
    root, _ = small_synth
    m = read_manifest(root / "manifest.tsv")

    def brightest(cloudy):
        return MultispectralImage(np.max([c.rgb().samples for c in cloudy], axis=0))

    rep = evaluate(brightest, m, "val")
    assert rep.model_name == "brightest" and rep.n_samples == len(m.split("val"))
    assert not math.isnan(rep.mean_ssim)
    with pytest.raises(ContractError):
        evaluate("nonsense", m, "val")
