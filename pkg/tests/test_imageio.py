import numpy as np
import pytest

from octcodec.imageio import ImageError, ImageFile, decode_ppm, encode_ppm, list_images, read_image, write_image


@pytest.fixture
def pixels(rng):
    return rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)


@pytest.mark.parametrize("suffix", [".ppm", ".png"])
def test_write_of_unmodified_read_keeps_pixels(pixels, tmp_path, suffix):
    src = tmp_path / f"a{suffix}"
    write_image(src, ImageFile(pixels))
    im = read_image(src)
    assert (im.width, im.height) == (7, 5)
    np.testing.assert_array_equal(im.pixels, pixels)
    dst = tmp_path / f"b{suffix}"
    write_image(dst, im)
    assert read_image(dst).pixels.tobytes() == pixels.tobytes()


def test_ppm_bytes_round_trip(pixels):
    data = encode_ppm(pixels)
    assert encode_ppm(decode_ppm(data)) == data


def test_ppm_header_comments():
    data = b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6))
    np.testing.assert_array_equal(decode_ppm(data).reshape(-1), np.arange(6))


def test_float_conversion_is_exact_division(pixels):
    x = ImageFile(pixels).to_float()
    assert x.shape == (3, 5, 7) and x.dtype == np.float32
    np.testing.assert_array_equal(x, pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255))
    np.testing.assert_array_equal(ImageFile.from_float(x).pixels, pixels)


@pytest.mark.parametrize("data,msg", [(b"P3\n1 1\n255\n", "binary PPM"), (b"P6\n2 2\n65535\n", "8-bit"),
                                      (b"P6\n2 2\n255\n" + bytes(5), "truncated")])
def test_bad_ppm_rejected(data, msg):
    with pytest.raises(ImageError, match=msg):
        decode_ppm(data)


def test_unknown_formats_and_missing_files(tmp_path):
    (tmp_path / "x.png").write_bytes(b"GIF89a")
    with pytest.raises(ImageError, match="unsupported"):
        read_image(tmp_path / "x.png")
    with pytest.raises(ImageError):
        read_image(tmp_path / "missing.ppm")
    with pytest.raises(ImageError, match=".ppm or .png"):
        write_image(tmp_path / "out.jpg", np.zeros((3, 2, 2)))


def test_list_images_is_sorted_and_filtered(tmp_path):
    for name in ("b.ppm", "a.PNG", "notes.txt"):
        (tmp_path / name).write_bytes(b"")
    assert [p.name for p in list_images(tmp_path)] == ["a.PNG", "b.ppm"]
    with pytest.raises(ImageError, match="not a directory"):
        list_images(tmp_path / "nope")
