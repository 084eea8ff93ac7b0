import dataclasses

import numpy as np
import pytest

from xmodal_vit import pnm
from xmodal_vit.data import (
    AugmentParams, DataError, ManifestError, PairedSample, SyntheticGenConfig, apply_augment, augment,
    check_pair_sync, class_counts, crop, crop_bbox, generate_synthetic, hflip, load_manifest, mirror_bbox,
    resize_bilinear, sample_augment_params, subject_kfold, write_dataset,
)

HEADER = "wl_path,nbi_path,label,subject_id,bbox_wl,bbox_nbi\n"


def _img(rng, h=8, w=8):
    return np.rint(rng.uniform(size=(h, w, 3)) * 255) / 255


# -- pnm ------------------------------------------------------------------

def test_ppm_round_trip(tmp_path):
    img = _img(np.random.default_rng(0), 5, 7)
    pnm.write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(pnm.read_ppm(tmp_path / "a.ppm"), img)


def test_pnm_header_comments_and_16bit():
    raw = b"P6\n# comment\n2 1\n65535\n" + np.array([0, 1, 2, 65535, 4, 5], ">u2").tobytes()
    arr, maxval = pnm.decode(raw)
    assert maxval == 65535 and arr.shape == (1, 2, 3) and arr[0, 1, 0] == 65535


def test_pnm_errors():
    with pytest.raises(pnm.PNMError):
        pnm.decode(b"P3\n1 1\n255\n")
    with pytest.raises(pnm.PNMError):
        pnm.decode(b"P6\n2 2\n255\n\x00\x01")


def test_pgm_round_trip(tmp_path):
    g = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    pnm.write_pgm(tmp_path / "g.pgm", g)
    assert np.array_equal(pnm.read_pgm(tmp_path / "g.pgm"), g)


# -- manifest -------------------------------------------------------------

def test_empty_manifest(tmp_path):
    (tmp_path / "m.csv").write_text(HEADER)
    assert load_manifest(tmp_path / "m.csv") == []


def test_missing_image_names_path(tmp_path):
    (tmp_path / "m.csv").write_text(HEADER + "nope_wl.ppm,nope_nbi.ppm,1,s1,,\n")
    with pytest.raises(ManifestError, match="nope_wl.ppm"):
        load_manifest(tmp_path / "m.csv")


def test_bad_rows_strict_and_lenient(tmp_path):
    rng = np.random.default_rng(1)
    pnm.write_ppm(tmp_path / "a.ppm", _img(rng))
    (tmp_path / "m.csv").write_text(HEADER + "a.ppm,a.ppm,1,s1,,\n" + "a.ppm,a.ppm,7,s1,,\n"
                                    + "a.ppm,a.ppm,0,s2,0:0:99:99,\n")
    with pytest.raises(ManifestError) as exc:
        load_manifest(tmp_path / "m.csv")
    assert exc.value.row == 3
    with pytest.warns(UserWarning):
        assert len(load_manifest(tmp_path / "m.csv", strict=False)) == 1


def test_bad_header(tmp_path):
    (tmp_path / "m.csv").write_text("a,b,c\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.csv")


def test_reference_composition_loads(tmp_path):
    # 307 adenomatous + 116 hyperplastic pairs
    rng = np.random.default_rng(2)
    (tmp_path / "img").mkdir()
    rows = []
    for i in range(423):
        label = 1 if i < 307 else 0
        for mod in ("wl", "nbi"):
            pnm.write_ppm(tmp_path / "img" / f"{i}_{mod}.ppm", _img(rng, 4, 4))
        rows.append(f"img/{i}_wl.ppm,img/{i}_nbi.ppm,{label},p{i % 60},,")
    (tmp_path / "m.csv").write_text(HEADER + "\n".join(rows) + "\n")
    samples = load_manifest(tmp_path / "m.csv")
    assert len(samples) == 423
    assert class_counts(samples) == {1: 307, 0: 116}


def test_write_dataset_round_trip(tmp_path):
    samples = generate_synthetic(SyntheticGenConfig(samples_per_class=3, n_subjects=2, with_bbox=True))
    back = load_manifest(write_dataset(samples, tmp_path))
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.wl, b.wl)
        np.testing.assert_array_equal(a.nbi, b.nbi)
        assert (a.label, a.subject_id, a.bbox_wl) == (b.label, b.subject_id, b.bbox_wl)


def test_sample_validation():
    img = np.zeros((8, 8, 3))
    with pytest.raises(DataError):
        PairedSample(img, img, 2, "s")
    with pytest.raises(DataError):
        PairedSample(img, img, 1, "s", bbox_wl=(4, 4, 8, 8))


# -- geometry -------------------------------------------------------------

def test_full_bbox_is_resize_only():
    img = _img(np.random.default_rng(3), 16, 16)
    s = PairedSample(img, img, 0, "s", (0, 0, 16, 16), (0, 0, 16, 16))
    np.testing.assert_allclose(crop_bbox(s, 8).wl, resize_bilinear(img, 8, 8))


def test_unit_bbox_gives_constant_image():
    img = _img(np.random.default_rng(4), 16, 16)
    s = PairedSample(img, img, 0, "s", (3, 5, 1, 1), (3, 5, 1, 1))
    out = crop_bbox(s, 8).wl
    assert out.shape == (8, 8, 3)
    np.testing.assert_allclose(out, np.broadcast_to(img[5, 3], (8, 8, 3)))


def test_crop_flip_commutes_with_mirrored_crop():
    rng = np.random.default_rng(5)
    img = _img(rng, 20, 24)
    for _ in range(20):
        w, h = int(rng.integers(1, 24)), int(rng.integers(1, 20))
        box = (int(rng.integers(0, 24 - w + 1)), int(rng.integers(0, 20 - h + 1)), w, h)
        a = hflip(resize_bilinear(crop(img, box), 12, 12))
        b = resize_bilinear(crop(hflip(img), mirror_bbox(box, 24)), 12, 12)
        np.testing.assert_allclose(a, b, atol=1e-6)


def test_resize_identity():
    img = _img(np.random.default_rng(6), 9, 11)
    np.testing.assert_allclose(resize_bilinear(img, 9, 11), img, atol=1e-12)


# -- augmentation ---------------------------------------------------------

def test_flip_twice_is_identity():
    img = _img(np.random.default_rng(7), 16, 16)
    p = AugmentParams(0.0, 0.0, 1.0, 1.0, True)
    np.testing.assert_array_equal(apply_augment(apply_augment(img, p), p), img)


def test_augment_deterministic_and_synchronised():
    s = generate_synthetic(SyntheticGenConfig(samples_per_class=1, n_subjects=1))[0]
    a, pa = augment(s, np.random.default_rng(8))
    b, pb = augment(s, np.random.default_rng(8))
    assert pa == pb and np.array_equal(a.wl, b.wl) and np.array_equal(a.nbi, b.nbi)
    np.testing.assert_array_equal(apply_augment(s.wl, pa), a.wl)
    np.testing.assert_array_equal(apply_augment(s.nbi, pa), a.nbi)


def test_identical_pair_stays_identical_under_augment():
    img = _img(np.random.default_rng(9), 32, 32)
    s = PairedSample(img, img.copy(), 1, "s")
    rng = np.random.default_rng(10)
    for _ in range(50):
        out, p = augment(s, rng)
        assert np.array_equal(out.wl, out.nbi)
        check_pair_sync(s, p)


def test_augment_window_ranges():
    rng = np.random.default_rng(11)
    flips = 0
    for _ in range(2000):
        p = sample_augment_params(rng, 64, 64)
        area = p.w * p.h
        assert 0.7 - 0.03 <= area <= 1.0 + 1e-9
        assert 0 <= p.x and p.x + p.w <= 1 + 1e-9 and 0 <= p.y and p.y + p.h <= 1 + 1e-9
        flips += p.flip
    assert 900 < flips < 1100


# -- folds ----------------------------------------------------------------

def test_ten_subjects_five_folds():
    split = subject_kfold([f"s{i}" for i in range(10)], 5, seed=0)
    assert [len(f) for f in split.folds] == [2] * 5
    assert sorted(s for f in split.folds for s in f) == sorted(f"s{i}" for i in range(10))


def test_same_seed_same_split():
    ids = [f"s{i}" for i in range(23)]
    assert subject_kfold(ids, 5, 3).folds == subject_kfold(ids, 5, 3).folds


def test_no_subject_leakage_many_seeds():
    samples = generate_synthetic(SyntheticGenConfig(samples_per_class=20, n_subjects=13, image_size=8))
    subjects = {s.subject_id for s in samples}
    for seed in range(1000):
        split = subject_kfold(samples, 5, seed)
        seen = []
        for i in range(5):
            tr, va = split.split(samples, i)
            tr_s, va_s = {s.subject_id for s in tr}, {s.subject_id for s in va}
            assert not tr_s & va_s
            assert tr_s | va_s == subjects
            seen += sorted(va_s)
        assert sorted(seen) == sorted(subjects)


def test_too_few_subjects():
    with pytest.raises(DataError):
        subject_kfold(["a", "b"], 5)


def test_single_fold_trains_on_everything():
    split = subject_kfold(["a", "b", "c"], 1)
    assert split.train_subjects(0) == split.val_subjects(0) == {"a", "b", "c"}


# -- synthetic generator --------------------------------------------------

def test_synthetic_deterministic_and_balanced():
    cfg = SyntheticGenConfig(samples_per_class=10, n_subjects=4)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    assert all(np.array_equal(x.wl, y.wl) and np.array_equal(x.nbi, y.nbi) for x, y in zip(a, b))
    assert class_counts(a) == {0: 10, 1: 10}
    assert {s.subject_id for s in a} == {"s000", "s001", "s002", "s003"}


def test_no_attenuation_no_noise_gives_identical_modalities():
    cfg = SyntheticGenConfig(samples_per_class=4, n_subjects=2, wl_attenuation=1.0, wl_noise=0.0)
    for s in generate_synthetic(cfg):
        assert np.array_equal(s.wl, s.nbi)


def test_default_dataset_knn_oracle_gap():
    """5-NN in pixel space, subject-grouped CV: NBI is easy and WL is hard."""
    from sklearn.model_selection import GroupKFold, cross_val_score
    from sklearn.neighbors import KNeighborsClassifier

    samples = generate_synthetic()
    assert len(samples) == 400 and len({s.subject_id for s in samples}) == 40
    y = np.array([s.label for s in samples])
    groups = [s.subject_id for s in samples]
    acc = {}
    for m in ("nbi", "wl"):
        X = np.stack([getattr(s, m).ravel() for s in samples])
        acc[m] = cross_val_score(KNeighborsClassifier(5), X, y, cv=GroupKFold(5), groups=groups).mean()
    assert acc["nbi"] >= 0.90
    assert acc["wl"] <= 0.75
