import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from stcloud.errors import ContractError, CorruptionError, FormatError
from stcloud.imagecore import (
    HEADER_SIZE,
    SIGNED,
    UNIT,
    MultispectralImage,
    denormalize,
    export_png,
    file_size,
    load_image,
    normalize,
    save_image,
)


def test_round_trip_small_u8(tmp_path):
    img = MultispectralImage(np.arange(12, dtype=np.uint8).reshape(2, 2, 3))
    save_image(img, tmp_path / "a.msi")
    back = load_image(tmp_path / "a.msi")
    assert back == img
    assert back.samples.tolist() == img.samples.tolist()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.msi"
    p.write_bytes(b"XXXX" + bytes(16) + bytes(12))
    with pytest.raises(FormatError):
        load_image(p)


def test_truncated_payload(tmp_path):
    img = MultispectralImage(np.zeros((4, 4, 3), dtype=np.uint8))
    save_image(img, tmp_path / "t.msi")
    data = (tmp_path / "t.msi").read_bytes()
    (tmp_path / "t.msi").write_bytes(data[:-5])
    with pytest.raises(CorruptionError):
        load_image(tmp_path / "t.msi")


def test_256_four_channel_file_size(tmp_path):
    img = MultispectralImage(np.zeros((256, 256, 4), dtype=np.uint8))
    save_image(img, tmp_path / "big.msi")
    # 20-byte header + 256*256*4 = 262144 sample bytes
    assert (tmp_path / "big.msi").stat().st_size == 20 + 256 * 256 * 4 == 20 + 262144
    assert load_image(tmp_path / "big.msi").channels == 4


def test_header_layout(tmp_path):
    img = MultispectralImage(np.zeros((3, 5, 4), dtype=np.uint8))
    save_image(img, tmp_path / "h.msi")
    raw = (tmp_path / "h.msi").read_bytes()
    assert raw[:4] == b"MSI1"
    assert struct.unpack("<HHBB", raw[4:10]) == (5, 3, 4, 0)
    assert raw[10:20] == bytes(10)


@settings(max_examples=30, deadline=None)
@given(
    h=st.integers(1, 12),
    w=st.integers(1, 12),
    c=st.sampled_from([1, 3, 4]),
    dtype=st.sampled_from(["u8", UNIT, SIGNED]),
    seed=st.integers(0, 2**16),
)
def test_round_trip_and_size_property(tmp_path_factory, h, w, c, dtype, seed):
    rng = np.random.default_rng(seed)
    if dtype == "u8":
        arr = rng.integers(0, 256, size=(h, w, c), dtype=np.uint8)
    elif dtype == UNIT:
        arr = rng.random((h, w, c)).astype(np.float32)
    else:
        arr = rng.uniform(-1, 1, (h, w, c)).astype(np.float32)
    img = MultispectralImage(arr, dtype)
    path = tmp_path_factory.mktemp("rt") / "x.msi"
    save_image(img, path)
    assert path.stat().st_size == file_size(w, h, c, dtype)
    assert path.stat().st_size == HEADER_SIZE + w * h * c * (1 if dtype == "u8" else 4)
    back = load_image(path)
    assert back.dtype == dtype
    assert back.samples.tobytes() == img.samples.tobytes()


def test_normalize_endpoints():
    img = MultispectralImage(np.array([[[0, 255, 128]]], dtype=np.uint8))
    n = normalize(img)
    assert n.dtype == SIGNED
    assert n.samples[0, 0, 0] == -1.0
    assert n.samples[0, 0, 1] == 1.0
    assert n.samples[0, 0, 2] == pytest.approx(128 / 127.5 - 1, abs=1e-7)
    assert n.samples[0, 0, 2] == pytest.approx(0.00392157, abs=1e-7)


def test_denormalize_values():
    img = MultispectralImage(np.array([[[-1.0, 1.0, 0.0]]], dtype=np.float32), SIGNED)
    assert denormalize(img).samples.tolist() == [[[0, 255, 128]]]


def test_normalize_round_trip_exhaustive():
    img = MultispectralImage(np.arange(256, dtype=np.uint8).reshape(16, 16, 1))
    assert denormalize(normalize(img)) == img


def test_dtype_contracts():
    with pytest.raises(ContractError):
        normalize(MultispectralImage(np.zeros((1, 1, 3), np.float32), SIGNED))
    with pytest.raises(ContractError):
        denormalize(MultispectralImage(np.zeros((1, 1, 3), np.uint8)))


def test_invariants_enforced():
    with pytest.raises(ContractError):
        MultispectralImage(np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(ContractError):
        MultispectralImage(np.full((2, 2, 3), 1.5, np.float32), UNIT)
    with pytest.raises(ContractError):
        MultispectralImage(np.full((2, 2, 3), 300, np.int32))
    img = MultispectralImage(np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(ValueError):
        img.samples[0, 0, 0] = 1


def test_png_single_pixel(tmp_path):
    img = MultispectralImage(np.zeros((1, 1, 3), np.uint8))
    (path,) = export_png(img, tmp_path / "p.png")
    assert np.asarray(Image.open(path)).tolist() == [[[0, 0, 0]]]


def test_png_four_channel_two_files(tmp_path):
    arr = np.zeros((2, 2, 4), np.uint8)
    arr[..., 3] = 77
    files = export_png(MultispectralImage(arr), tmp_path / "q.png")
    assert [f.name for f in files] == ["q.png", "q_ir.png"]
    assert np.asarray(Image.open(files[1])).tolist() == [[77, 77], [77, 77]]


def test_png_two_channel_is_contract_error(tmp_path):
    with pytest.raises(ContractError):
        export_png(MultispectralImage(np.zeros((2, 2, 2), np.uint8)), tmp_path / "r.png")
