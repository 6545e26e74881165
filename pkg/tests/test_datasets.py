import gzip
import hashlib
import struct

import numpy as np
import pytest
from PIL import Image

from dda import datasets
from dda.datasets import DataError, Dataset, PatchBank
from dda.experiment import bundled_data


def write_raw_idx(tmp_path, pixels, labels, image_magic=0x803, label_magic=0x801, count=None, label_count=None):
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, h, w = pixels.shape
    img = struct.pack(">IIII", image_magic, n if count is None else count, h, w) + pixels.tobytes()
    lab = struct.pack(">II", label_magic, len(labels) if label_count is None else label_count)
    lab += bytes(labels)
    (tmp_path / "img").write_bytes(img)
    (tmp_path / "lab").write_bytes(lab)
    return tmp_path / "img", tmp_path / "lab"


def digits(n=4, seed=0, size=6):
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(size=(n, 3, size, size)), np.arange(n) % 10, "source", "d")


class TestLoadIdx:
    def test_two_by_two_scaling(self, tmp_path):
        paths = write_raw_idx(tmp_path, [[[0, 255], [0, 255]]], [7])
        d = datasets.load_idx(*paths)
        np.testing.assert_array_equal(d.images, [[[[0, 1], [0, 1]]]])
        np.testing.assert_array_equal(d.labels, [7])
        assert d.domain_tag == "source"

    def test_gzipped(self, tmp_path):
        img, lab = write_raw_idx(tmp_path, np.full((2, 3, 3), 51), [1, 2])
        for p in (img, lab):
            p.with_suffix(".gz").write_bytes(gzip.compress(p.read_bytes()))
        d = datasets.load_idx(img.with_suffix(".gz"), lab.with_suffix(".gz"))
        np.testing.assert_allclose(d.images, 0.2)

    @pytest.mark.parametrize("magic", [0x801, 0x802, 0x804, 0x803 << 8])
    def test_bad_image_magic(self, tmp_path, magic):
        paths = write_raw_idx(tmp_path, np.zeros((1, 2, 2)), [0], image_magic=magic)
        with pytest.raises(DataError, match="magic.*offset 0"):
            datasets.load_idx(*paths)

    def test_bad_label_magic(self, tmp_path):
        paths = write_raw_idx(tmp_path, np.zeros((1, 2, 2)), [0], label_magic=0x803)
        with pytest.raises(DataError, match="magic"):
            datasets.load_idx(*paths)

    def test_truncated_payload(self, tmp_path):
        paths = write_raw_idx(tmp_path, np.zeros((2, 2, 2)), [0, 1], count=3, label_count=3)
        with pytest.raises(DataError, match="truncated payload.*offset 16"):
            datasets.load_idx(*paths)

    def test_truncated_header(self, tmp_path):
        (tmp_path / "img").write_bytes(b"\0\0\x08")
        (tmp_path / "lab").write_bytes(b"")
        with pytest.raises(DataError, match="truncated header"):
            datasets.load_idx(tmp_path / "img", tmp_path / "lab")

    def test_count_mismatch(self, tmp_path):
        paths = write_raw_idx(tmp_path, np.zeros((2, 2, 2)), [0, 1, 2])
        with pytest.raises(DataError, match="count mismatch.*offset 4"):
            datasets.load_idx(*paths)

    def test_write_read_round_trip(self, tmp_path):
        pixels = np.random.default_rng(1).integers(0, 256, size=(5, 4, 3)).astype(np.uint8)
        datasets.write_idx(tmp_path / "i", tmp_path / "l", pixels, [3, 1, 4, 1, 5])
        d = datasets.load_idx(tmp_path / "i", tmp_path / "l")
        np.testing.assert_array_equal(np.rint(d.images[:, 0] * 255).astype(np.uint8), pixels)
        np.testing.assert_array_equal(d.labels, [3, 1, 4, 1, 5])

    def test_idx_header(self, tmp_path):
        img, lab = write_raw_idx(tmp_path, np.zeros((3, 5, 4)), [1, 1, 2])
        assert datasets.idx_header(img) == {"kind": "images", "magic": 0x803, "count": 3, "dims": (5, 4)}
        info = datasets.idx_header(lab)
        assert (info["kind"], info["count"]) == ("labels", 3)
        np.testing.assert_array_equal(info["labels"], [1, 1, 2])


class TestBundledFixture:
    def test_shapes_and_balance(self):
        train = datasets.load_idx(bundled_data("train-images-idx3-ubyte.gz"), bundled_data("train-labels-idx1-ubyte.gz"))
        test = datasets.load_idx(bundled_data("t10k-images-idx3-ubyte.gz"), bundled_data("t10k-labels-idx1-ubyte.gz"))
        assert train.images.shape == (4000, 1, 28, 28)
        assert test.images.shape == (1000, 1, 28, 28)
        np.testing.assert_array_equal(np.bincount(train.labels), [400] * 10)
        np.testing.assert_array_equal(np.bincount(test.labels), [100] * 10)
        assert 0.0 <= train.images.min() and train.images.max() == 1.0

    def test_rgb_geometry(self):
        test = datasets.load_idx(bundled_data("t10k-images-idx3-ubyte.gz"), bundled_data("t10k-labels-idx1-ubyte.gz"))
        assert datasets.to_rgb(test).geometry == (3, 28, 28)

    def test_frozen_content(self):
        labels = datasets.idx_header(bundled_data("t10k-labels-idx1-ubyte.gz"))["labels"]
        assert datasets.label_checksum(labels) == 1637857598
        pixels = gzip.decompress(open(bundled_data("t10k-images-idx3-ubyte.gz"), "rb").read())
        assert hashlib.sha256(pixels).hexdigest()[:16] == "540509082a594c58"


class TestToRgb:
    def test_constant(self):
        d = Dataset(np.full((1, 1, 2, 2), 0.5), [0], "source")
        np.testing.assert_array_equal(datasets.to_rgb(d).images, np.full((1, 3, 2, 2), 0.5))

    def test_channels_equal(self):
        d = Dataset(np.random.default_rng(2).uniform(size=(4, 1, 5, 5)), [0, 1, 2, 3], "source")
        out = datasets.to_rgb(d)
        assert np.all(out.images[:, 0] == out.images[:, 1])
        assert np.all(out.images[:, 1] == out.images[:, 2])
        assert datasets.label_checksum(out.labels) == datasets.label_checksum(d.labels)

    def test_rejects_multichannel(self):
        with pytest.raises(DataError, match="channels"):
            datasets.to_rgb(digits())


class TestSynthesizeTarget:
    def bank(self, n=3, size=6):
        return PatchBank(np.random.default_rng(3).uniform(size=(n, 3, size, size)), "test")

    def test_black_digit_gives_patch(self):
        bank = self.bank(n=1)
        d = Dataset(np.zeros((2, 3, 6, 6)), [4, 5], "source")
        out = datasets.synthesize_target(d, bank, 0)
        np.testing.assert_array_equal(out.images, np.stack([bank.patches[0]] * 2))
        assert out.domain_tag == "target"

    def test_white_digit_gives_inverse(self):
        bank = self.bank(n=1)
        d = Dataset(np.ones((1, 3, 6, 6)), [4], "source")
        np.testing.assert_allclose(datasets.synthesize_target(d, bank, 0).images[0], 1 - bank.patches[0])

    def test_deterministic_and_label_preserving(self):
        d = digits(8)
        a = datasets.synthesize_target(d, self.bank(), 11)
        b = datasets.synthesize_target(d, self.bank(), 11)
        np.testing.assert_array_equal(a.images, b.images)
        assert datasets.label_checksum(a.labels) == datasets.label_checksum(d.labels)
        assert 0 <= a.images.min() and a.images.max() <= 1

    def test_geometry_mismatch(self):
        with pytest.raises(DataError, match="geometry"):
            datasets.synthesize_target(digits(size=5), self.bank(), 0)

    def test_needs_rgb(self):
        d = Dataset(np.zeros((1, 1, 6, 6)), [0], "source")
        with pytest.raises(DataError, match="3-channel"):
            datasets.synthesize_target(d, self.bank(), 0)


class TestPatchBanks:
    def test_procedural_range_and_determinism(self):
        a = datasets.procedural_patch_bank(20, 28, 28, 5)
        b = datasets.procedural_patch_bank(20, 28, 28, 5)
        np.testing.assert_array_equal(a.patches, b.patches)
        assert a.patches.shape == (20, 3, 28, 28)
        assert 0 <= a.patches.min() and a.patches.max() <= 1
        assert "procedural" in a.origin

    def test_achromatic_setting(self):
        bank = datasets.procedural_patch_bank(5, 12, 12, 1, chroma=0.0, color_texture=0.0)
        np.testing.assert_allclose(bank.patches[:, 0], bank.patches[:, 1], atol=1e-15)
        np.testing.assert_allclose(bank.patches[:, 1], bank.patches[:, 2], atol=1e-15)

    def test_patches_are_colored_by_default(self):
        bank = datasets.procedural_patch_bank(5, 12, 12, 1)
        assert np.abs(bank.patches[:, 0] - bank.patches[:, 1]).max() > 0.01

    def test_validation(self):
        with pytest.raises(DataError):
            PatchBank(np.zeros((0, 3, 2, 2)), "empty")
        with pytest.raises(DataError, match=r"\[0, 1\]"):
            PatchBank(np.full((1, 3, 2, 2), 1.5), "bright")

    def test_photo_crops(self, tmp_path):
        rng = np.random.default_rng(6)
        for k in range(2):
            Image.fromarray(rng.integers(0, 256, size=(20, 30, 3)).astype(np.uint8)).save(tmp_path / f"p{k}.png")
        bank = datasets.photo_patch_bank(tmp_path, 4, 8, 8, 0)
        assert bank.patches.shape == (4, 3, 8, 8)
        np.testing.assert_array_equal(bank.patches, datasets.photo_patch_bank(tmp_path, 4, 8, 8, 0).patches)

    def test_photo_too_small(self, tmp_path):
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "small.png")
        with pytest.raises(DataError, match="small.png"):
            datasets.photo_patch_bank(tmp_path, 1, 8, 8, 0)


class TestImageDir:
    def test_empty_manifest(self, tmp_path):
        (tmp_path / "labels.tsv").write_text("")
        d = datasets.load_image_dir(tmp_path, tmp_path / "labels.tsv")
        assert len(d) == 0

    def test_missing_file(self, tmp_path):
        (tmp_path / "labels.tsv").write_text("nope.png\t3\n")
        with pytest.raises(DataError, match="nope.png"):
            datasets.load_image_dir(tmp_path, tmp_path / "labels.tsv")

    def test_round_trip_ten_images(self, tmp_path):
        rng = np.random.default_rng(7)
        images = np.rint(rng.uniform(size=(10, 3, 7, 5)) * 255) / 255
        labels = rng.integers(0, 10, size=10)
        manifest = datasets.save_image_dir(images, labels, tmp_path)
        d = datasets.load_image_dir(tmp_path, manifest)
        assert len(d) == 10
        np.testing.assert_array_equal(d.labels, labels)
        np.testing.assert_allclose(d.images, images, atol=1e-12)

    def test_label_out_of_range(self, tmp_path):
        datasets.save_image_dir(np.zeros((1, 3, 2, 2)), [0], tmp_path)
        (tmp_path / "labels.tsv").write_text("img00000.png\t10\n")
        with pytest.raises(DataError, match="img00000.png.*label 10"):
            datasets.load_image_dir(tmp_path, tmp_path / "labels.tsv")

    def test_unreadable_image(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        (tmp_path / "labels.tsv").write_text("bad.png\t1\n")
        with pytest.raises(DataError, match="bad.png"):
            datasets.load_image_dir(tmp_path, tmp_path / "labels.tsv")

    def test_malformed_line(self, tmp_path):
        (tmp_path / "labels.tsv").write_text("just-a-name\n")
        with pytest.raises(DataError, match="labels.tsv:1"):
            datasets.load_image_dir(tmp_path, tmp_path / "labels.tsv")


class TestSubsample:
    def labeled(self, per_class=5, classes=10):
        labels = np.repeat(np.arange(classes), per_class)
        images = np.arange(labels.size, dtype=float).reshape(-1, 1, 1, 1) * np.ones((1, 1, 2, 2))
        return Dataset(images, labels, "source")

    def test_full_size_is_permutation(self):
        d = self.labeled()
        out = datasets.subsample(d, 5, 0)
        assert sorted(out.images[:, 0, 0, 0]) == sorted(d.images[:, 0, 0, 0])

    def test_one_per_class(self):
        out = datasets.subsample(self.labeled(), 1, 3)
        assert len(out) == 10
        assert sorted(out.labels) == list(range(10))

    def test_deterministic(self):
        d = self.labeled()
        a, b = datasets.subsample(d, 3, 9), datasets.subsample(d, 3, 9)
        np.testing.assert_array_equal(a.images, b.images)
        assert not np.array_equal(a.images, datasets.subsample(d, 3, 10).images)

    def test_pairs_stay_intact(self):
        out = datasets.subsample(self.labeled(), 2, 4)
        np.testing.assert_array_equal(out.images[:, 0, 0, 0] // 5, out.labels)

    def test_balanced(self):
        out = datasets.subsample(self.labeled(), 4, 1)
        np.testing.assert_array_equal(np.bincount(out.labels), [4] * 10)

    def test_insufficient_members(self):
        with pytest.raises(DataError, match=r"\{0: 5"):
            datasets.subsample(self.labeled(), 6, 0)


class TestDataset:
    def test_length_mismatch(self):
        with pytest.raises(DataError, match="labels"):
            Dataset(np.zeros((2, 1, 2, 2)), [0], "source")

    def test_unknown_tag(self):
        with pytest.raises(DataError, match="domain_tag"):
            Dataset(np.zeros((1, 1, 2, 2)), [0], "both")
