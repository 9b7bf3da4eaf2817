import numpy as np
import pytest
import torch
from PIL import Image

from vartok.data import (DatasetError, ImageDataset, ingest_dataset, make_blob_images,
                         make_quantization_ladder, quantize_levels, save_images)
from vartok.metrics import shannon_entropy
from scipy import stats


class TestIngest:
    def test_skips_corrupt_files(self, tmp_path):
        save_images(make_blob_images(3, 16, seed=0), tmp_path)
        (tmp_path / "broken.png").write_bytes(b"not an image at all")
        ds = ingest_dataset(tmp_path, 16)
        assert len(ds) == 3
        assert ds.skipped == 1

    def test_empty_dataset_fatal(self, tmp_path):
        with pytest.raises(DatasetError):
            ingest_dataset(tmp_path, 16)

    def test_deterministic_ordering(self, tmp_path):
        save_images(make_blob_images(5, 16, seed=1), tmp_path)
        a = ingest_dataset(tmp_path, 16)
        b = ingest_dataset(tmp_path, 16)
        assert a.image_ids == b.image_ids
        assert torch.equal(a.images, b.images)

    def test_sixteen_bit_png_scaled(self, tmp_path):
        arr = (np.linspace(0, 1, 16 * 16).reshape(16, 16) * 65535).astype(np.uint16)
        Image.fromarray(arr).save(tmp_path / "deep.png")
        ds = ingest_dataset(tmp_path, 16)
        assert float(ds.images.max()) <= 1.0
        assert float(ds.images.max()) > 0.9  # 65535 maps to ~1.0, not 255/65535

    def test_resize_and_range(self, tmp_path):
        save_images(make_blob_images(2, 24, seed=2), tmp_path)
        ds = ingest_dataset(tmp_path, 16)
        assert ds.images.shape == (2, 3, 16, 16)
        assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0

    def test_parallel_ingest_matches_serial(self, tmp_path):
        save_images(make_blob_images(6, 16, seed=3), tmp_path)
        serial = ingest_dataset(tmp_path, 16, workers=1)
        parallel = ingest_dataset(tmp_path, 16, workers=4)
        assert torch.equal(serial.images, parallel.images)
        assert serial.image_ids == parallel.image_ids


class TestSynthetic:
    def test_blobs_shape_and_range(self):
        imgs = make_blob_images(4, 32, seed=0)
        assert imgs.shape == (4, 3, 32, 32)
        assert float(imgs.min()) >= 0 and float(imgs.max()) <= 1

    def test_blobs_seeded(self):
        assert torch.equal(make_blob_images(3, 16, seed=5), make_blob_images(3, 16, seed=5))
        assert not torch.equal(make_blob_images(3, 16, seed=5), make_blob_images(3, 16, seed=6))

    def test_quantize_levels(self):
        x = torch.linspace(0, 1, 100).reshape(1, 1, 10, 10)
        q = quantize_levels(x, 2)
        assert set(q.unique().tolist()) == {0.0, 1.0}

    def test_ladder_entropy_rises_with_level(self):
        images, ids, levels = make_quantization_ladder(8, 32, seed=4)
        entropies = [shannon_entropy(images[i]) for i in range(images.shape[0])]
        rho = stats.spearmanr(levels, entropies).statistic
        assert rho > 0.85, rho
        per_rung = [sum(entropies[k * 8:(k + 1) * 8]) / 8 for k in range(8)]
        assert per_rung[-1] - per_rung[0] > 4.0  # wide dynamic range in bits
        assert all(b > a for a, b in zip(per_rung[:4], per_rung[1:5]))  # strict low rungs

    def test_ladder_ids_and_levels_align(self):
        images, ids, levels = make_quantization_ladder(2, 16, seed=0)
        assert images.shape[0] == len(ids) == len(levels) == 16
        assert ids[0].startswith("L002") and ids[-1].startswith("L256")
