
import numpy as np
import pytest

from saor import data as D


class TestDetectionFilter:
    def test_good_detection_kept(self):
        meta = D.DetectionMeta(bbox=(220, 165, 200, 150), confidence=0.9,
                               image_size=(640, 480))
        keep, reason = D.filter_detection(meta)
        assert keep and reason == "ok"

    def test_low_confidence_rejected(self):
        meta = D.DetectionMeta(bbox=(220, 165, 200, 150), confidence=0.79,
                               image_size=(640, 480))
        keep, reason = D.filter_detection(meta)
        assert not keep and reason == "confidence"

    def test_small_margin_rejected(self):
        meta = D.DetectionMeta(bbox=(5, 100, 200, 150), confidence=0.95,
                               image_size=(640, 480))
        keep, reason = D.filter_detection(meta)
        assert not keep and reason == "margin"

    def test_min_side_rejected(self):
        meta = D.DetectionMeta(bbox=(100, 100, 20, 300), confidence=0.95,
                               image_size=(640, 480))
        keep, reason = D.filter_detection(meta)
        assert not keep and reason == "min_side"

    def test_max_side_rejected(self):
        # both sides in [32, 128): the max-side rule fires
        meta = D.DetectionMeta(bbox=(100, 100, 100, 100), confidence=0.95,
                               image_size=(640, 480))
        keep, reason = D.filter_detection(meta)
        assert not keep and reason == "max_side"


def make_sample_files(tmp_path, rng, size=96, with_kp=True, empty_mask=False):
    img = rng.uniform(size=(3, size, size)).astype(np.float32)
    mask = np.zeros((size, size), dtype=np.float32)
    if not empty_mask:
        mask[20:70, 25:75] = 1.0
    depth = rng.uniform(1, 5, size=(size, size)).astype(np.float32)
    D.write_image(tmp_path / "img.png", img)
    D.write_image(tmp_path / "mask.png", mask)
    D.write_pfm(tmp_path / "depth.pfm", depth)
    rec = {"image": "img.png", "mask": "mask.png", "depth": "depth.pfm",
           "bbox": [25, 20, 50, 50], "confidence": 1.0}
    if with_kp:
        D.write_keypoints(tmp_path / "kp.jsonl",
                          [{"name": "nose", "x": 40.0, "y": 30.0,
                            "visible": True},
                           {"name": "hidden", "x": 10.0, "y": 10.0,
                            "visible": False}])
        rec["keypoints"] = "kp.jsonl"
    return rec


class TestFileFormats:
    def test_pfm_roundtrip(self, tmp_path, rng):
        data = rng.normal(size=(17, 23)).astype(np.float32)
        D.write_pfm(tmp_path / "d.pfm", data)
        back = D.read_pfm(tmp_path / "d.pfm")
        np.testing.assert_array_equal(back, data)

    def test_png_roundtrip_8bit(self, tmp_path):
        img = np.linspace(0, 1, 3 * 16 * 16).reshape(3, 16, 16).astype(
            np.float32)
        D.write_image(tmp_path / "i.png", img)
        back = D.read_image(tmp_path / "i.png")
        assert back.shape == (3, 16, 16)
        np.testing.assert_allclose(back, img, atol=1 / 255 / 2 + 1e-6)

    def test_manifest_roundtrip(self, tmp_path):
        records = [{"image": "a.png", "bbox": [1, 2, 3, 4]},
                   {"image": "b.png", "cluster_id": 3}]
        D.write_manifest(tmp_path / "m.jsonl", records)
        assert D.read_manifest(tmp_path / "m.jsonl") == records

    def test_bad_manifest_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"image": "a.png"}\nnot json\n')
        with pytest.raises(D.DataError):
            D.read_manifest(tmp_path / "m.jsonl")


class TestLoadSample:
    def test_output_shapes(self, tmp_path, rng):
        rec = make_sample_files(tmp_path, rng)
        s = D.load_sample(rec, 128, tmp_path)
        assert s.image.shape == (3, 128, 128)
        assert s.mask.shape == (128, 128)
        assert s.depth.shape == (128, 128)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}

    def test_keypoint_roundtrip_within_half_pixel(self, tmp_path, rng):
        rec = make_sample_files(tmp_path, rng)
        s = D.load_sample(rec, 128, tmp_path)
        kp = {k.name: k for k in s.keypoints}
        x, y = D.untransform_keypoint(kp["nose"].x, kp["nose"].y, s.crop, 128)
        assert abs(x - 40.0) < 0.51 and abs(y - 30.0) < 0.51

    def test_invisible_keypoint_preserved_as_invisible(self, tmp_path, rng):
        rec = make_sample_files(tmp_path, rng)
        s = D.load_sample(rec, 128, tmp_path)
        kp = {k.name: k for k in s.keypoints}
        assert not kp["hidden"].visible

    def test_empty_mask_flagged_unusable(self, tmp_path, rng):
        rec = make_sample_files(tmp_path, rng, empty_mask=True)
        s = D.load_sample(rec, 64, tmp_path)
        assert not s.usable

    def test_unreadable_file_raises(self, tmp_path, rng):
        rec = make_sample_files(tmp_path, rng)
        rec["image"] = "missing.png"
        with pytest.raises(D.DataError):
            D.load_sample(rec, 64, tmp_path)

    def test_modality_shape_mismatch(self, tmp_path, rng):
        rec = make_sample_files(tmp_path, rng)
        D.write_pfm(tmp_path / "depth.pfm", np.zeros((10, 10),
                                                     dtype=np.float32))
        with pytest.raises(D.DataError):
            D.load_sample(rec, 64, tmp_path)


def blob_mask(rng, cx, cy, r, size=48):
    yy, xx = np.mgrid[:size, :size]
    noise = rng.uniform(-1.5, 1.5)
    return ((xx - cx) ** 2 + (yy - cy) ** 2 < (r + noise) ** 2).astype(
        np.float64)


class TestGmm:
    def test_separable_families_recovered(self, rng):
        left = [blob_mask(rng, 12, 24, 8) for _ in range(20)]
        right = [blob_mask(rng, 36, 24, 8) for _ in range(20)]
        model = D.fit_gmm(left + right, k=2, seed=0)
        ids = D.assign_clusters(model, left + right)
        assert len(set(ids[:20])) == 1
        assert len(set(ids[20:])) == 1
        assert ids[0] != ids[20]

    def test_mixing_weights_sum_to_one(self, rng):
        masks = [blob_mask(rng, rng.integers(10, 38), 24, 8)
                 for _ in range(30)]
        model = D.fit_gmm(masks, k=3, seed=1)
        assert model.weights.sum() == pytest.approx(1.0, abs=1e-8)

    def test_log_likelihood_nondecreasing(self, rng):
        masks = [blob_mask(rng, rng.integers(8, 40), rng.integers(12, 36), 7)
                 for _ in range(40)]
        model = D.fit_gmm(masks, k=4, seed=2)
        diffs = np.diff(model.log_likelihoods)
        assert np.all(diffs >= -1e-7 * np.abs(model.log_likelihoods[:-1]))

    def test_variance_floor(self, rng):
        masks = [blob_mask(rng, 24, 24, 9) for _ in range(12)]
        model = D.fit_gmm(masks, k=2, seed=0)
        assert model.variances.min() >= D.VARIANCE_FLOOR

    def test_too_few_masks_rejected(self, rng):
        with pytest.raises(D.DataError):
            D.fit_gmm([blob_mask(rng, 24, 24, 9)] * 3, k=5, seed=0)

    def test_identical_grids_get_identical_ids(self, rng):
        masks = [blob_mask(rng, rng.integers(10, 38), 24, 8)
                 for _ in range(20)]
        model = D.fit_gmm(masks, k=3, seed=3)
        dup = [masks[0], masks[0].copy(), masks[5], masks[5].copy()]
        ids = D.assign_clusters(model, dup)
        assert ids[0] == ids[1] and ids[2] == ids[3]


class TestBalancedBatches:
    def test_quota_split_96_over_10(self):
        ids = np.repeat(np.arange(10), 50)
        stream = D.balanced_batches(ids, 96, seed_or_rng=0)
        for _ in range(20):
            batch = next(stream)
            assert len(batch) == 96
            counts = np.bincount(ids[batch], minlength=10)
            assert set(counts) <= {9, 10}

    def test_empty_cluster_redistributed(self):
        ids = np.repeat([0, 1, 2], 30)  # clusters 3..9 empty
        stream = D.balanced_batches(ids, 20, seed_or_rng=0, n_clusters=10)
        batch = next(stream)
        assert len(batch) == 20
        assert set(ids[batch]) <= {0, 1, 2}

    def test_underfull_cluster_samples_with_replacement(self):
        ids = np.array([0] * 50 + [1])  # cluster 1 has one member
        stream = D.balanced_batches(ids, 16, seed_or_rng=0, n_clusters=2)
        batch = next(stream)
        assert len(batch) == 16
        assert (ids[batch] == 1).sum() == 8

    def test_deterministic_given_seed(self):
        ids = np.repeat(np.arange(10), 20)
        a = [next(D.balanced_batches(ids, 24, seed_or_rng=42))
             for _ in range(1)]
        s1 = D.balanced_batches(ids, 24, seed_or_rng=42)
        s2 = D.balanced_batches(ids, 24, seed_or_rng=42)
        for _ in range(5):
            np.testing.assert_array_equal(next(s1), next(s2))

    def test_near_uniform_frequency(self):
        ids = np.repeat(np.arange(10), 30)
        stream = D.balanced_batches(ids, 96, seed_or_rng=7)
        counts = np.zeros(10)
        n_batches = 200
        for _ in range(n_batches):
            counts += np.bincount(ids[next(stream)], minlength=10)
        freq = counts / counts.sum()
        assert np.abs(freq - 0.1).max() / 0.1 < 0.02

    def test_all_empty_rejected(self):
        with pytest.raises(D.DataError):
            next(D.balanced_batches(np.array([]), 8, seed_or_rng=0,
                                    n_clusters=4))


class TestWorkerLanes:
    def test_default_is_one(self, monkeypatch):
        monkeypatch.delenv("SAOR_THREADS", raising=False)
        assert D.worker_lanes() == 1

    def test_env_override(self, monkeypatch):
        monkeypatch.setenv("SAOR_THREADS", "4")
        assert D.worker_lanes() == 4

    def test_parallel_load_matches_serial(self, tmp_path, rng, monkeypatch):
        recs = []
        for i in range(4):
            sub = tmp_path / f"s{i}"
            sub.mkdir()
            rec = make_sample_files(sub, rng, with_kp=False)
            rec = {k: (f"s{i}/{v}" if isinstance(v, str) else v)
                   for k, v in rec.items()}
            recs.append(rec)
        D.write_manifest(tmp_path / "m.jsonl", recs)
        monkeypatch.delenv("SAOR_THREADS", raising=False)
        serial = D.load_records(tmp_path / "m.jsonl", 32)
        monkeypatch.setenv("SAOR_THREADS", "3")
        parallel = D.load_records(tmp_path / "m.jsonl", 32)
        for a, b in zip(serial, parallel):
            np.testing.assert_array_equal(a.image, b.image)
