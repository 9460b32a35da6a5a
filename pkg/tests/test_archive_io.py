"""Weight archive framing and PNG round-trip contracts."""

import numpy as np
import pytest

from texsyn.archive import (
    ArchiveError,
    archive_bytes,
    load_archive,
    parse_archive,
    save_archive,
)
from texsyn.imageio import load_image, quantize, save_image_png, save_grayscale_png
from texsyn.tensor import Tensor


class TestArchive:
    def test_roundtrip_f32(self, tmp_path, rng):
        tensors = {
            "a.weight": rng.standard_normal((2, 3, 3, 3)).astype(np.float32),
            "a.bias": rng.standard_normal(2).astype(np.float32),
            "z.scalar": np.array([1.5], dtype=np.float32),
        }
        path = tmp_path / "w.bin"
        save_archive(path, tensors)
        loaded, header = load_archive(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])
        assert header["dtype"] == "f32"

    def test_roundtrip_f64(self, rng):
        tensors = {"x": rng.standard_normal((4, 4))}
        loaded, header = parse_archive(archive_bytes(tensors))
        assert header["dtype"] == "f64"
        assert np.array_equal(loaded["x"], tensors["x"])

    def test_offsets_contiguous_enforced(self, rng):
        blob = bytearray(archive_bytes({"x": np.zeros(4, np.float32),
                                        "y": np.ones(4, np.float32)}))
        # corrupt the second entry's byte_offset in the JSON header
        raw = bytes(blob)
        hlen = int.from_bytes(raw[:4], "little")
        header = raw[4:4 + hlen].replace(b'"byte_offset": 16', b'"byte_offset": 8')
        with pytest.raises(ArchiveError):
            parse_archive(raw[:4] + header + raw[4 + hlen:])

    def test_truncation_detected(self, rng):
        raw = archive_bytes({"x": np.zeros(8, np.float32)})
        with pytest.raises(ArchiveError):
            parse_archive(raw[:-4])

    def test_unknown_header_keys_ignored(self, rng):
        raw = archive_bytes({"x": np.ones(2, np.float32)},
                            extra={"future_field": {"nested": 1}})
        loaded, header = parse_archive(raw)
        assert np.array_equal(loaded["x"], np.ones(2))
        assert header["future_field"] == {"nested": 1}

    def test_bitwise_stable_serialization(self, rng):
        tensors = {"x": rng.standard_normal((3, 3)).astype(np.float32)}
        assert archive_bytes(tensors) == archive_bytes(tensors)

    def test_empty_rejected(self):
        with pytest.raises(ArchiveError):
            archive_bytes({})


class TestPng:
    def test_roundtrip_exact_post_quantization(self, tmp_path, rng):
        img = Tensor(rng.random((1, 3, 20, 24)).astype(np.float32))
        path = tmp_path / "img.png"
        save_image_png(path, img)
        back = load_image(path)
        # re-quantizing the decoded image reproduces the file bytes
        assert np.array_equal(quantize(back), quantize(img))
        save_image_png(tmp_path / "img2.png", back)
        assert (tmp_path / "img.png").read_bytes() == (tmp_path / "img2.png").read_bytes()

    def test_quantize_round_half_up(self):
        x = np.zeros((1, 3, 1, 2), dtype=np.float32)
        x[0, :, 0, 0] = 0.5 / 255.0   # exactly half -> rounds up to 1
        x[0, :, 0, 1] = 2.0           # clamps to 1.0 -> 255
        q = quantize(Tensor(x))
        assert q[0, 0, 0] == 1 and q[0, 1, 2 - 1] == 255

    def test_grayscale_and_rgb_decode(self, tmp_path):
        from PIL import Image

        gray = Image.fromarray(np.full((8, 8), 100, np.uint8), mode="L")
        gray.save(tmp_path / "gray.png")
        t = load_image(tmp_path / "gray.png")
        assert t.dims == (1, 3, 8, 8)
        assert np.allclose(t.data, 100 / 255.0, atol=1e-6)
        rgba = Image.fromarray(np.full((4, 4, 4), 32, np.uint8), mode="RGBA")
        rgba.save(tmp_path / "rgba.png")
        assert load_image(tmp_path / "rgba.png").dims == (1, 3, 4, 4)

    def test_grayscale_map_constant(self, tmp_path):
        save_grayscale_png(tmp_path / "m.png", np.full((5, 5), 3.0))
        from PIL import Image

        arr = np.asarray(Image.open(tmp_path / "m.png"))
        assert (arr == arr[0, 0]).all()
