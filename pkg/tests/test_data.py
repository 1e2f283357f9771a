"""Synthetic generator determinism, rasterization oracles, and file formats."""

import numpy as np
import pytest

from mergeseg.data import (gen_synthetic, image_from_u8, image_to_u8,
                           load_dataset, paint_disk, read_pbm, read_pgm,
                           read_ppm, save_dataset, write_pbm, write_pgm,
                           write_ppm)
from mergeseg.errors import ConfigurationError, DataError


class TestGenerator:
    def test_same_seed_bit_identical(self):
        a = gen_synthetic(123, 4, 32, 3)
        b = gen_synthetic(123, 4, 32, 3)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.labels, sb.labels)
            assert np.array_equal(sa.boundary.mask, sb.boundary.mask)

    def test_different_seed_differs(self):
        a = gen_synthetic(1, 2, 32, 3)
        b = gen_synthetic(2, 2, 32, 3)
        assert not np.array_equal(a[0].labels, b[0].labels)

    def test_single_disk_histogram_matches_pixel_count_oracle(self):
        samples = gen_synthetic(9, 5, 64, 2, shape_kinds=("disk",), shapes_per_image=(1, 1))
        for s in samples:
            kind, cls, (cy, cx, r) = s.shapes[0]
            assert kind == "disk" and cls == 1
            yy, xx = np.mgrid[0:64, 0:64]
            oracle = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).sum()
            assert (s.labels == 1).sum() == oracle
            # rasterized area stays within one perimeter of the analytic value
            assert abs(oracle - np.pi * r * r) <= 2 * np.pi * r + 8

    def test_empty_dataset_valid(self):
        assert gen_synthetic(0, 0, 32, 3) == []

    def test_invalid_size(self):
        with pytest.raises(ConfigurationError):
            gen_synthetic(0, 1, 0, 3)

    def test_labels_in_range_and_quantized_images(self):
        for s in gen_synthetic(5, 3, 32, 4):
            assert s.labels.min() >= 0 and s.labels.max() < 4
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            # 8-bit quantization: exact round trip through the PPM encoding
            assert np.array_equal(image_from_u8(image_to_u8(s.image)), s.image)

    def test_disk_helper_paints_exact_predicate(self):
        labels = np.zeros((16, 16), dtype=np.int64)
        paint_disk(labels, 8, 8, 4, 2)
        yy, xx = np.mgrid[0:16, 0:16]
        assert np.array_equal(labels == 2, (yy - 8) ** 2 + (xx - 8) ** 2 <= 16)


class TestPortableFormats:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        img = rng.integers(0, 256, (10, 7, 3)).astype(np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        assert np.array_equal(read_ppm(path), img)

    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 5, (9, 11)).astype(np.uint8)
        path = tmp_path / "x.pgm"
        write_pgm(path, img)
        assert np.array_equal(read_pgm(path), img)

    def test_pbm_round_trip_odd_width(self, tmp_path):
        rng = np.random.default_rng(2)
        bits = rng.integers(0, 2, (6, 13)).astype(np.uint8)
        path = tmp_path / "x.pbm"
        write_pbm(path, bits)
        assert np.array_equal(read_pbm(path), bits)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(DataError):
            read_ppm(path)


class TestDatasetDirectory:
    def test_save_load_round_trip(self, tmp_path):
        samples = gen_synthetic(3, 4, 32, 3)
        save_dataset(tmp_path / "ds", samples, seed=3, num_classes=3, boundary_radius=1)
        loaded, manifest = load_dataset(tmp_path / "ds")
        assert manifest["count"] == "4"
        assert manifest["size"] == "32"
        assert manifest["generator_seed"] == "3"
        assert manifest["classes"] == "background,class1,class2"
        for orig, back in zip(samples, loaded):
            assert np.array_equal(orig.image, back.image)
            assert np.array_equal(orig.labels, back.labels)
            assert np.array_equal(orig.boundary.mask, back.boundary.mask)

    def test_byte_identical_rerun(self, tmp_path):
        for name in ("a", "b"):
            save_dataset(tmp_path / name, gen_synthetic(7, 2, 32, 3), seed=7,
                         num_classes=3, boundary_radius=1)
        for rel in ("manifest", "images/0000.ppm", "labels/0001.pgm", "boundaries/0000.pbm"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_label_range_validated(self, tmp_path):
        samples = gen_synthetic(3, 1, 32, 3)
        save_dataset(tmp_path / "ds", samples, seed=3, num_classes=3, boundary_radius=1)
        manifest = (tmp_path / "ds" / "manifest").read_text().replace(
            "num_classes: 3", "num_classes: 2")
        (tmp_path / "ds" / "manifest").write_text(manifest)
        if samples[0].labels.max() >= 2:
            with pytest.raises(DataError):
                load_dataset(tmp_path / "ds")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path)
