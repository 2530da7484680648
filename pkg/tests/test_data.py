import struct
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from paumer.data import (DatasetFormatError, SegSample, SyntheticTaskConfig, convert_png_dir,
                         generate_dataset, generate_sample, iter_dataset, load_arrays, rasterize,
                         read_dataset, sample_digest, shape_mask, write_dataset, Shape)
from paumer.model import ConfigError


class TestGenerator:
    def test_constant_scene(self, rng):
        cfg = SyntheticTaskConfig(height=8, width=8, num_classes=3, shapes=(0, 0), noise=0.0)
        s = generate_sample(rng, cfg)
        assert (s.labels == s.background).all()
        assert (s.image == s.image[0, 0]).all()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 9))
    def test_labels_in_range(self, seed, k):
        s = generate_sample(np.random.default_rng(seed), SyntheticTaskConfig(height=32, width=24, num_classes=k))
        assert s.labels.dtype == np.uint8 and s.labels.max() < k
        assert s.image.shape == (32, 24, 3) and 0 <= s.image.min() and s.image.max() <= 1

    def test_seed_byte_identical(self):
        cfg = SyntheticTaskConfig(occluders=(1, 2))
        a = generate_sample(np.random.default_rng(42), cfg)
        b = generate_sample(np.random.default_rng(42), cfg)
        assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()

    def test_rerasterize_oracle(self):
        rng = np.random.default_rng(0)
        cfg = SyntheticTaskConfig(shapes=(2, 5))
        for _ in range(20):
            s = generate_sample(rng, cfg)
            # Topmost shape wins: walk the list backwards, first hit is the label.
            ref = np.full(s.labels.shape, s.background)
            for y in range(0, 64, 3):
                for x in range(0, 64, 3):
                    for shape in reversed(s.shapes):
                        if shape_mask(shape, 64, 64)[y, x]:
                            ref[y, x] = shape.cls
                            break
                    assert s.labels[y, x] == ref[y, x]

    def test_shapes_differ_from_background(self):
        for s in generate_dataset(3, SyntheticTaskConfig(), 30):
            assert all(sh.cls != s.background for sh in s.shapes)

    def test_ellipse_mask_hand_case(self):
        # Centre (2, 2), radii 2.5: a corner sits at (2/2.5)^2 * 2 = 1.28 > 1, outside.
        m = shape_mask(Shape("ellipse", 1, 0, 0, 5, 5), 5, 5)
        edge = [0, 1, 1, 1, 0]
        np.testing.assert_array_equal(m, [edge, [1] * 5, [1] * 5, [1] * 5, edge])

    def test_occluders_leave_labels_alone(self):
        base = SyntheticTaskConfig(noise=0.0)
        occ = SyntheticTaskConfig(noise=0.0, occluders=(2, 2))
        a = generate_sample(np.random.default_rng(9), occ)
        assert np.array_equal(a.labels, rasterize(a.shapes, a.background, 64, 64))
        assert (np.abs(a.image - 0.5).max(axis=-1) == 0).sum() >= 12 * 12
        b = generate_sample(np.random.default_rng(9), base)
        assert not (np.abs(b.image - 0.5).max(axis=-1) == 0).any()

    def test_bad_configs(self):
        with pytest.raises(ConfigError):
            SyntheticTaskConfig(num_classes=1)
        with pytest.raises(ConfigError):
            SyntheticTaskConfig(shapes=(3, 1))
        with pytest.raises(ConfigError):
            SyntheticTaskConfig(noise=-1)


class TestFormat:
    def test_empty_roundtrip(self, tmp_path):
        write_dataset([], tmp_path / "e.pmseg", height=4, width=5, num_classes=3)
        images, labels, hdr = load_arrays(tmp_path / "e.pmseg")
        assert hdr.count == 0 and images.shape == (0, 4, 5, 3) and labels.shape == (0, 4, 5)

    def test_single_sample_bitwise(self, tmp_path, rng):
        s = SegSample(rng.random((4, 6, 3)).astype(np.float32), rng.integers(0, 3, (4, 6)).astype(np.uint8))
        write_dataset([s], tmp_path / "one.pmseg", num_classes=3)
        (back,) = read_dataset(tmp_path / "one.pmseg")
        assert back.image.tobytes() == s.image.tobytes() and back.labels.tobytes() == s.labels.tobytes()

    def test_float64_images_quantised(self, tmp_path, rng):
        s = SegSample(rng.random((4, 4, 3)), np.zeros((4, 4), dtype=np.uint8))
        write_dataset([s], tmp_path / "q.pmseg")
        (back,) = read_dataset(tmp_path / "q.pmseg")
        np.testing.assert_array_equal(back.image, s.image.astype(np.float32))

    def test_header_layout(self, tmp_path):
        write_dataset(generate_dataset(0, SyntheticTaskConfig(height=8, width=16, num_classes=4), 3),
                      tmp_path / "h.pmseg", num_classes=4)
        raw = (tmp_path / "h.pmseg").read_bytes()
        assert raw[:7] == b"PMSEG1\x00"
        assert struct.unpack("<IIII", raw[7:23]) == (3, 8, 16, 4)
        assert len(raw) == 23 + 3 * (8 * 16 * 3 * 4 + 8 * 16)

    def test_digests_100(self, tmp_path):
        samples = generate_dataset(5, SyntheticTaskConfig(height=16, width=16), 100)
        digests = write_dataset(samples, tmp_path / "d.pmseg", num_classes=5)
        assert [sample_digest(s.image, s.labels) for s in iter_dataset(tmp_path / "d.pmseg")] == digests
        assert len(set(digests)) == 100

    def test_truncated(self, tmp_path):
        write_dataset(generate_dataset(0, SyntheticTaskConfig(height=8, width=8), 2), tmp_path / "t.pmseg")
        raw = (tmp_path / "t.pmseg").read_bytes()
        (tmp_path / "t.pmseg").write_bytes(raw[:-5])
        with pytest.raises(DatasetFormatError, match="byte"):
            read_dataset(tmp_path / "t.pmseg")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "m.pmseg").write_bytes(b"PMSEG2\x00" + bytes(16))
        with pytest.raises(DatasetFormatError, match="magic"):
            read_dataset(tmp_path / "m.pmseg")

    def test_reader_rejects_out_of_range_labels(self, tmp_path):
        s = SegSample(np.zeros((2, 2, 3)), np.array([[0, 1], [255, 7]], dtype=np.uint8))
        write_dataset([s], tmp_path / "l.pmseg", num_classes=3)
        with pytest.raises(DatasetFormatError, match="7"):
            read_dataset(tmp_path / "l.pmseg")

    def test_ignore_label_passes(self, tmp_path):
        s = SegSample(np.zeros((2, 2, 3)), np.array([[0, 1], [255, 2]], dtype=np.uint8))
        write_dataset([s], tmp_path / "i.pmseg", num_classes=3)
        assert read_dataset(tmp_path / "i.pmseg")[0].labels[1, 0] == 255

    def test_streaming_is_lazy(self, tmp_path):
        write_dataset(generate_dataset(0, SyntheticTaskConfig(height=8, width=8), 3), tmp_path / "s.pmseg")
        it = iter_dataset(tmp_path / "s.pmseg")
        first = next(it)
        assert first.image.shape == (8, 8, 3)
        it.close()

    def test_concurrent_readers(self, tmp_path):
        samples = generate_dataset(1, SyntheticTaskConfig(height=16, width=16), 20)
        digests = write_dataset(samples, tmp_path / "c.pmseg")

        def read_all(_):
            return [sample_digest(s.image, s.labels) for s in iter_dataset(tmp_path / "c.pmseg")]

        with ThreadPoolExecutor(4) as pool:
            assert all(r == digests for r in pool.map(read_all, range(8)))

    def test_inconsistent_shapes(self, tmp_path):
        a = SegSample(np.zeros((2, 2, 3)), np.zeros((2, 2), dtype=np.uint8))
        b = SegSample(np.zeros((3, 2, 3)), np.zeros((3, 2), dtype=np.uint8))
        with pytest.raises(ConfigError):
            write_dataset([a, b], tmp_path / "x.pmseg")


class TestConvert:
    def test_png_pairs(self, tmp_path, rng):
        from PIL import Image
        img = rng.integers(0, 256, (6, 5, 3)).astype(np.uint8)
        lab = rng.integers(0, 4, (6, 5)).astype(np.uint8)
        Image.fromarray(img).save(tmp_path / "a_image.png")
        Image.fromarray(lab).save(tmp_path / "a_label.png")
        assert convert_png_dir(tmp_path, tmp_path / "out.pmseg", num_classes=4) == 1
        (s,) = read_dataset(tmp_path / "out.pmseg")
        np.testing.assert_array_equal(s.labels, lab)
        np.testing.assert_allclose(s.image, img / 255.0, atol=1e-7)

    def test_missing_label(self, tmp_path):
        from PIL import Image
        Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "b_image.png")
        with pytest.raises(FileNotFoundError):
            convert_png_dir(tmp_path, tmp_path / "o.pmseg", num_classes=2)

    def test_bad_label_value(self, tmp_path):
        from PIL import Image
        Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8)).save(tmp_path / "c_image.png")
        Image.fromarray(np.full((2, 2), 9, dtype=np.uint8)).save(tmp_path / "c_label.png")
        with pytest.raises(ConfigError):
            convert_png_dir(tmp_path, tmp_path / "o.pmseg", num_classes=2)
