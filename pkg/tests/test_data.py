import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smaformer import smt
from smaformer.data import (BACKGROUND, ORGAN, TUMOR, augment, canonical_json, generate_sample,
                            hflip, make_dataset, read_dataset, read_mask, rotate90, select,
                            split_counts, write_dataset)


class TestGenerateSample:
    def test_deterministic(self):
        assert generate_sample(7) == generate_sample(7)
        assert generate_sample(7).image.tobytes() == generate_sample(7).image.tobytes()

    def test_seeds_differ(self):
        assert not np.array_equal(generate_sample(1).mask, generate_sample(2).mask)

    def test_types_and_range(self):
        s = generate_sample(0, 32, 48)
        assert s.image.shape == (3, 32, 48) and s.image.dtype == np.float32
        assert s.mask.shape == (32, 48) and s.mask.dtype == np.int64
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert set(np.unique(s.mask)) <= {BACKGROUND, ORGAN, TUMOR}

    @pytest.mark.parametrize("size", [(16, 16), (31, 64), (64, 40), (8, 8)])
    def test_invalid_size(self, size):
        with pytest.raises(ValueError, match="size"):
            generate_sample(0, *size)

    def test_class_fractions(self):
        for seed in range(100):
            m = generate_sample(seed).mask
            n = m.size
            organ_or_tumor = (m > 0).sum() / n
            tumor = (m == TUMOR).sum() / n
            assert 0.005 <= tumor <= 0.05
            assert 0.10 <= organ_or_tumor <= 0.40
            assert (m == ORGAN).sum() > 0

    def test_class_means_separated(self):
        means = {c: [] for c in (BACKGROUND, ORGAN, TUMOR)}
        for seed in range(20):
            s = generate_sample(seed)
            gray = s.image.mean(0)
            for c in means:
                means[c].append(gray[s.mask == c].mean())
        m = {c: np.mean(v) for c, v in means.items()}
        assert abs(m[ORGAN] - m[BACKGROUND]) >= 0.1
        assert abs(m[TUMOR] - m[BACKGROUND]) >= 0.1
        assert abs(m[ORGAN] - m[TUMOR]) >= 0.1


class TestAugmentation:
    @given(st.integers(0, 50))
    def test_hflip_involution(self, seed):
        s = generate_sample(seed, 32, 32)
        assert hflip(hflip(s)) == s

    @given(st.integers(0, 50), st.integers(0, 3))
    def test_rotation_inverse(self, seed, k):
        s = generate_sample(seed, 32, 32)
        assert rotate90(rotate90(s, k), (4 - k) % 4) == s

    def test_four_quarter_turns(self):
        s = generate_sample(3, 32, 32)
        r = s
        for _ in range(4):
            r = rotate90(r, 1)
        assert r == s

    def test_pairs_stay_aligned(self):
        s = generate_sample(4, 32, 32)
        rng = np.random.default_rng(0)
        for _ in range(8):
            a = augment(s, rng)
            hist_s = [np.sort(s.image[:, s.mask == c].ravel()) for c in range(3)]
            hist_a = [np.sort(a.image[:, a.mask == c].ravel()) for c in range(3)]
            for x, y in zip(hist_s, hist_a):
                np.testing.assert_array_equal(x, y)

    def test_histogram_preserved(self):
        s = generate_sample(5, 32, 32)
        a = augment(s, np.random.default_rng(1))
        np.testing.assert_array_equal(np.sort(s.image.ravel()), np.sort(a.image.ravel()))
        np.testing.assert_array_equal(np.bincount(s.mask.ravel(), minlength=3),
                                      np.bincount(a.mask.ravel(), minlength=3))

    def test_bad_rotation(self):
        with pytest.raises(ValueError):
            rotate90(generate_sample(0, 32, 32), 4)


class TestDataset:
    def test_split_counts(self):
        assert split_counts(100) == (80, 15, 5)
        assert split_counts(8) == (7, 1, 0)
        assert split_counts(1) == (1, 0, 0)
        assert sum(split_counts(37)) == 37

    def test_splits_partition(self):
        manifest, samples = make_dataset(20, seed=3, height=32, width=32)
        ids = sorted(s.sample_id for s in samples)
        split_ids = sorted(sum(manifest.splits.values(), []))
        assert split_ids == ids
        assert [len(manifest.splits[k]) for k in ("train", "val", "test")] == [16, 3, 1]

    def test_deterministic(self):
        a = make_dataset(5, seed=1, height=32, width=32)
        b = make_dataset(5, seed=1, height=32, width=32)
        assert a[0] == b[0] and a[1] == b[1]

    def test_prefix_stable(self):
        small = make_dataset(3, seed=2, height=32, width=32)[1]
        big = make_dataset(6, seed=2, height=32, width=32)[1]
        assert big[:3] == small

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            make_dataset(0)

    def test_round_trip(self, tmp_path):
        manifest, samples = make_dataset(4, seed=5, height=32, width=32)
        write_dataset(tmp_path, manifest, samples)
        m2, s2 = read_dataset(tmp_path)
        assert m2 == manifest
        assert s2 == samples

    def test_manifest_is_canonical(self, tmp_path):
        manifest, samples = make_dataset(2, seed=0, height=32, width=32)
        write_dataset(tmp_path, manifest, samples)
        text = (tmp_path / "manifest.json").read_text()
        assert text == canonical_json(json.loads(text))

    def test_truncated_file(self, tmp_path):
        manifest, samples = make_dataset(2, seed=0, height=32, width=32)
        write_dataset(tmp_path, manifest, samples)
        f = tmp_path / "images" / f"{samples[0].sample_id}.smt"
        f.write_bytes(f.read_bytes()[:-3])
        with pytest.raises(smt.FormatError, match="payload"):
            read_dataset(tmp_path)

    def test_corrupt_manifest(self, tmp_path):
        manifest, samples = make_dataset(2, seed=0, height=32, width=32)
        write_dataset(tmp_path, manifest, samples)
        (tmp_path / "manifest.json").write_text("{}")
        with pytest.raises(smt.FormatError):
            read_dataset(tmp_path)

    def test_read_mask_rejects_fractions(self, tmp_path):
        smt.save(tmp_path / "m.smt", np.full((2, 2), 0.5, np.float32))
        with pytest.raises(smt.FormatError):
            read_mask(tmp_path / "m.smt")

    def test_select(self):
        _, samples = make_dataset(4, seed=0, height=32, width=32)
        assert [s.sample_id for s in select(samples, ["00002", "00000"])] == ["00002", "00000"]
        with pytest.raises(KeyError):
            select(samples, ["nope"])
