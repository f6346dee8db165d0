import numpy as np
import pytest

from stcloud.cli import main
from stcloud.cloudsense import Label, classify_crop
from stcloud.imagecore import MultispectralImage, save_image
from stcloud.pairforge import read_manifest
from stcloud.synthgen import SynthSceneSpec, cloudy_view, synth_clear

TINY = [
    "--base-width", "4", "--res-blocks", "1",
    "--set", "model.branch_features=4", "--set", "model.d_widths=8,16,32,64",
]  # fmt: skip


@pytest.fixture(scope="module")
def tile_dir(tmp_path_factory):
    """One 512x512 tile seen clear on day 2 and cloudy 10 days earlier."""
    d = tmp_path_factory.mktemp("tiles")
    clear = np.zeros((512, 512, 4), np.uint8)
    cloudy = np.zeros_like(clear)
    for k, (y, x) in enumerate([(0, 0), (0, 256), (256, 0), (256, 256)]):
        patch = synth_clear(SynthSceneSpec(seed=k, size=256, class_id=k))
        clear[y : y + 256, x : x + 256] = patch.samples
        view, _, _ = cloudy_view(patch, seed=100 + k, target_cover=0.2)
        assert classify_crop(view).label == Label.CLOUDY
        cloudy[y : y + 256, x : x + 256] = view.samples
    save_image(MultispectralImage(clear), d / "T31ABC_20200120.msi")
    save_image(MultispectralImage(cloudy), d / "T31ABC_20200110.msi")
    return d


def test_forge_pairs_dated_tiles(tile_dir, tmp_path, capsys):
    code = main(["forge", str(tile_dir), "--crops", "4", "--t", "1", "--out", str(tmp_path)])
    assert code == 0
    m = read_manifest(tmp_path / "manifest_single.tsv")
    assert len(m) == 4
    assert all(g.cloudy[0].timestamp == g.clear.timestamp - 10 for g in m.groups)
    assert (m.resolve(m.groups[0].clear.path)).exists()
    out = capsys.readouterr().out
    assert "Clear=4" in out and "Cloudy=4" in out
    assert (tmp_path / "config.lock").exists()


def test_forge_skips_unreadable_tile(tile_dir, tmp_path, capsys):
    import shutil

    d = tmp_path / "tiles"
    shutil.copytree(tile_dir, d)
    (d / "T31XYZ_20200105.msi").write_bytes(b"garbage")
    code = main(["forge", str(d), "--crops", "4", "--t", "1", "--out", str(tmp_path / "o")])
    assert code == 0
    assert "T31XYZ_20200105.msi" in capsys.readouterr().err
    assert len(read_manifest(tmp_path / "o/manifest_single.tsv")) == 4


def test_forge_empty_dir(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["forge", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2
    assert "no tiles found" in capsys.readouterr().err


def test_unknown_flag(capsys):
    with pytest.raises(SystemExit) as info:
        main(["synth", "--bogus"])
    assert info.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    assert main(["synth", "--set", "no.such=1", "--out", str(tmp_path)]) == 1
    (tmp_path / "c.cfg").write_text("synth.groups=2\nbogus=3\n")
    assert main(["synth", "--config", str(tmp_path / "c.cfg"), "--out", str(tmp_path)]) == 1


def test_missing_manifest(tmp_path):
    assert main(["eval", "--manifest", str(tmp_path / "nope.tsv"), "--all", "--out", str(tmp_path)]) == 2


def test_pipeline_smoke(tmp_path, capsys):
    data = tmp_path / "data"
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# small run\nsynth.groups=10\nseed=3\n")
    assert main(["synth", "--config", str(cfg), "--size", "64", "--out", str(data)]) == 0
    lock = (data / "config.lock").read_text()
    assert "synth.groups=10\n" in lock and "seed=3\n" in lock and "synth.size=64\n" in lock

    manifest = str(data / "manifest.tsv")
    run = tmp_path / "run"
    assert main(["train", "--manifest", manifest, "--arch", "stgan-resnet", "--ir", "off", "--steps", "50",
                 "--out", str(run)] + TINY) == 0  # fmt: skip
    assert len((run / "losses.csv").read_text().splitlines()) == 51

    ev = tmp_path / "eval"
    ckpt = str(run / "checkpoint.ckpt")
    assert main(["eval", "--manifest", manifest, "--all", "--ckpt", f"stgan-resnet={ckpt}", "--out", str(ev)]) == 0
    table = (ev / "eval_val.txt").read_text().splitlines()
    assert len(table) == 1 + 5
    assert [row.split()[0] for row in table[1:]] == ["raw-cloudy", "mean", "median", "composite", "stgan-resnet"]

    assert main(["infer", "--checkpoint", ckpt, "--manifest", manifest, "--split", "val", "--out", str(tmp_path / "p")]) == 0
    assert len(list((tmp_path / "p").glob("*.png"))) == 1
    assert main(["baseline", "--manifest", manifest, "--method", "median", "--out", str(tmp_path / "b")]) == 0
    assert len(list((tmp_path / "b/median").glob("*.msi"))) == 1

    labels = str(data / "labels.tsv")
    ds = tmp_path / "ds"
    assert main(["downstream", "train", "--manifest", manifest, "--labels", labels, "--steps", "5", "--out", str(ds)]) == 0
    assert main(["downstream", "eval", "--manifest", manifest, "--labels", labels, "--split", "val",
                 "--classifier", str(ds / "classifier.pt"), "--ckpt", f"stgan-resnet={ckpt}", "--out", str(ds)]) == 0  # fmt: skip
    rows = (ds / "downstream.txt").read_text().splitlines()
    assert [r.split()[0] for r in rows[1:]] == ["Cloudy", "Cloud-free", "stgan-resnet"]


def test_arch_ir_mismatch_is_contract_error(tmp_path):
    data = tmp_path / "data"
    assert main(["synth", "--groups", "2", "--t", "1", "--out", str(data)]) == 0
    code = main(["train", "--manifest", str(data / "manifest.tsv"), "--arch", "stgan-unet", "--steps", "1",
                 "--out", str(tmp_path / "r")] + TINY)  # fmt: skip
    assert code == 1
