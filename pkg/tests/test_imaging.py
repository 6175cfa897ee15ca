import numpy as np
import pytest
from PIL import Image

from lumisplit import imaging


def make_png(path, value):
    arr = np.full((8, 8, 3), value, dtype=np.uint8)
    Image.fromarray(arr).save(path)


def test_load_white_png(tmp_path):
    p = tmp_path / "w.png"
    make_png(p, 255)
    f = imaging.load_frame(p)
    assert np.allclose(f.data, 1.0)


def test_load_black_png(tmp_path):
    p = tmp_path / "b.png"
    make_png(p, 0)
    f = imaging.load_frame(p)
    assert np.allclose(f.data, 0.0)


def test_load_midgray_degamma(tmp_path):
    p = tmp_path / "g.png"
    make_png(p, 128)
    f = imaging.load_frame(p)
    expected = (128.0 / 255.0) ** 2.2  # direct evaluation of the transfer function
    assert np.allclose(f.data, expected, atol=1e-12)


def test_load_missing_file(tmp_path):
    with pytest.raises(IOError):
        imaging.load_frame(tmp_path / "nope.png")


def test_load_unsupported_format(tmp_path):
    p = tmp_path / "x.tiff"
    p.write_bytes(b"not an image")
    with pytest.raises(imaging.FormatError):
        imaging.load_frame(p)


def test_frame_too_small():
    with pytest.raises(imaging.FrameError):
        imaging.Frame(np.zeros((4, 4, 3)))


def test_chromaticity_basic():
    img = np.zeros((8, 8, 3))
    img[:] = [0.6, 0.3, 0.1]
    c = imaging.chromaticity(imaging.Frame(img))
    assert np.allclose(c.chroma[0, 0], [0.6, 0.3])
    assert not c.dark.any()


def test_chromaticity_gray_is_neutral():
    img = np.full((8, 8, 3), 0.2)
    c = imaging.chromaticity(imaging.Frame(img))
    assert np.allclose(c.chroma, 1.0 / 3.0)


def test_chromaticity_dark_pixel():
    img = np.full((8, 8, 3), 0.5)
    img[2, 3] = 0.0
    c = imaging.chromaticity(imaging.Frame(img))
    assert c.dark[2, 3]
    assert np.allclose(c.chroma[2, 3], 1.0 / 3.0)
    assert c.dark.sum() == 1


def test_chroma_simplex_property():
    rng = np.random.default_rng(7)
    img = rng.uniform(0, 1, size=(16, 16, 3))
    c = imaging.chromaticity(imaging.Frame(img))
    r, g = c.chroma[~c.dark, 0], c.chroma[~c.dark, 1]
    assert np.all(r >= 0) and np.all(g >= 0)
    assert np.all(r + g <= 1 + 1e-12)


def test_log_reflectance_unity():
    assert np.allclose(imaging.log_reflectance(np.ones((4, 4, 3))), 0.0)


def test_log_reflectance_roundtrip():
    rng = np.random.default_rng(3)
    x = rng.uniform(imaging.LOG_FLOOR, 1.0, size=(8, 8, 3))
    back = np.exp(imaging.log_reflectance(x))
    assert np.max(np.abs(back - x) / x) < 1e-6


def test_log_reflectance_clamps_zero():
    out = imaging.log_reflectance(np.zeros((2, 2)))
    assert np.allclose(out, np.log(imaging.LOG_FLOOR))


def test_gradient_constant_zero():
    g = imaging.gradient(np.full((10, 12), 3.7))
    assert np.all(g.gx == 0) and np.all(g.gy == 0)


def test_gradient_ramp():
    w = 16
    img = np.tile(np.arange(w) / w, (8, 1))
    g = imaging.gradient(img)
    assert np.allclose(g.gx[:, :-1], 1.0 / w)
    assert np.all(g.gx[:, -1] == 0)
    assert np.all(g.gy == 0)


def test_gradient_single_bright_pixel():
    img = np.zeros((8, 8))
    img[3, 4] = 1.0
    g = imaging.gradient(img)
    # brute-force stencil: forward differences touch the pixel and its
    # left/top neighbors only
    expect_gx = np.zeros((8, 8))
    expect_gy = np.zeros((8, 8))
    for i in range(8):
        for j in range(7):
            expect_gx[i, j] = img[i, j + 1] - img[i, j]
    for i in range(7):
        for j in range(8):
            expect_gy[i, j] = img[i + 1, j] - img[i, j]
    assert np.array_equal(g.gx, expect_gx)
    assert np.array_equal(g.gy, expect_gy)
    nz = {(3, 4), (3, 3)}
    assert set(zip(*np.nonzero(g.gx))) == nz
    assert set(zip(*np.nonzero(g.gy))) == {(3, 4), (2, 4)}


def test_pfm_roundtrip_color(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.uniform(0, 1, size=(12, 9, 3))
    p = tmp_path / "x.pfm"
    imaging.save_pfm(p, data)
    back = imaging.load_pfm(p)
    assert back.shape == data.shape
    assert np.max(np.abs(back - data)) <= 1e-6


def test_pfm_roundtrip_gray(tmp_path):
    rng = np.random.default_rng(1)
    data = rng.uniform(0, 2, size=(9, 12))
    p = tmp_path / "x.pfm"
    imaging.save_pfm(p, data)
    back = imaging.load_pfm(p)
    assert back.shape == data.shape
    assert np.max(np.abs(back - data)) <= 2e-6


def test_load_frame_pfm(tmp_path):
    data = np.full((8, 8, 3), 0.25)
    p = tmp_path / "f.pfm"
    imaging.save_pfm(p, data)
    f = imaging.load_frame(p)  # float sources are taken as linear
    assert np.allclose(f.data, 0.25)
