import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bubbleattack.data import (BubbleImage, Dataset, DatasetError, DatasetFormatError, Label, Provenance, SwatchSpec,
                               balanced_batches, export_directory, gen_bubble, gen_swatch, load_dataset,
                               make_bubbles, make_swatches, read_pgm, save_dataset, train_val_split, write_pgm)


def test_bubble_image_validates_shape():
    with pytest.raises(DatasetError):
        BubbleImage(np.ones((40, 49)), Label.Mark, Provenance.Bubble)


def test_at_rest_values_are_8bit():
    img = gen_bubble(True, seed=4)
    assert img.pixels.size == 2000
    assert np.array_equal(np.rint(img.pixels * 255) / 255, img.pixels)


def test_filled_is_darker_than_empty():
    for s in range(20):
        assert gen_bubble(True, s).pixels.mean() < gen_bubble(False, s).pixels.mean()


def test_bubble_is_deterministic():
    assert np.array_equal(gen_bubble(True, 9).pixels, gen_bubble(True, 9).pixels)


def _dark_count(ds, level):
    return (ds.pixels < level).sum(axis=(1, 2))


def test_threshold_classifier_separates_easy_bubbles():
    fit, held = make_bubbles(2000, seed=5), make_bubbles(2000, seed=6)
    assert np.sum(fit.labels == Label.Mark) == 1000
    # fit: histogram level and cut with the widest gap between classes
    best = None
    for level in np.arange(1, 16) / 16:
        f = _dark_count(fit, level)
        gap = f[fit.labels == Label.Mark].min() - f[fit.labels == Label.NonMark].max()
        if best is None or gap > best[0]:
            cut = (f[fit.labels == Label.Mark].min() + f[fit.labels == Label.NonMark].max()) / 2
            best = (gap, level, cut)
    _, level, cut = best
    pred = np.where(_dark_count(held, level) > cut, Label.Mark, Label.NonMark)
    assert np.mean(pred == held.labels) == 1.0


def test_swatch_extremes():
    assert np.all(gen_swatch(SwatchSpec(0.0, 1)).pixels == 1.0)
    assert np.all(gen_swatch(SwatchSpec(2000.0, 1)).pixels == 0.0)
    with pytest.raises(DatasetError):
        gen_swatch(SwatchSpec(2001.0, 1))


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2000 * 255), st.integers(0, 2 ** 32 - 1))
def test_swatch_mass_is_exact(quanta, seed):
    img = gen_swatch(SwatchSpec(quanta / 255, seed))
    codes = np.rint(img.pixels * 255).astype(np.int64)
    assert int((255 - codes).sum()) == quanta


def test_swatch_labels_follow_threshold():
    assert gen_swatch(SwatchSpec(500.0, 0)).label == Label.Mark
    assert gen_swatch(SwatchSpec(499.9, 0)).label == Label.NonMark
    ds = make_swatches(500, seed=6)
    mass = (1 - ds.pixels).sum(axis=(1, 2))
    assert not np.any((mass > 450 + 1e-9) & (mass < 550 - 1e-9))


def _imbalanced():
    labels = np.array([0] * 100 + [1] * 900)
    return Dataset(np.zeros((1000, 40, 50)), labels, np.zeros(1000))


def test_balanced_batches_are_half_and_half():
    ds = _imbalanced()
    batches = list(balanced_batches(ds, 10, seed=1))
    for b in batches:
        assert np.sum(ds.labels[b] == 0) == 5
    again = list(balanced_batches(ds, 10, seed=1))
    assert all(np.array_equal(a, b) for a, b in zip(batches, again))


def test_minority_draws_are_uniform():
    ds = _imbalanced()
    draws = np.concatenate(list(balanced_batches(ds, 10, seed=2)))
    counts = np.bincount(draws[ds.labels[draws] == 0], minlength=100)
    assert counts.sum() == 900
    assert stats.chisquare(counts).pvalue > 0.01


def test_balanced_batches_need_both_classes():
    ds = Dataset(np.zeros((4, 40, 50)), [0, 0, 0, 0], np.zeros(4))
    with pytest.raises(DatasetError):
        next(balanced_batches(ds, 2, 0))


def test_split_counts_and_partition():
    labels = np.array([0] * 37 + [1] * 63)
    ds = Dataset(np.arange(100)[:, None, None] * np.ones((1, 40, 50)), labels, np.zeros(100))
    tr, va = train_val_split(ds, 0.8, seed=0)
    assert (len(tr), len(va)) == (80, 20)
    ids = lambda d: set(d.codes[:, 0, 0].tolist())
    assert ids(tr) | ids(va) == set(range(100)) and not ids(tr) & ids(va)
    for c, n in ((0, 37), (1, 63)):
        assert abs(np.sum(tr.labels == c) - 0.8 * n) <= 1


def test_dataset_roundtrip(tmp_path):
    ds = make_bubbles(10, seed=0)
    p = tmp_path / "d.bbld"
    save_dataset(ds, p)
    first = p.read_bytes()
    back = load_dataset(p)
    assert np.array_equal(back.codes, ds.codes) and np.array_equal(back.labels, ds.labels)
    save_dataset(back, p)
    assert p.read_bytes() == first


def test_dataset_truncation_and_magic(tmp_path):
    ds = make_bubbles(5, seed=0)
    p = tmp_path / "d.bbld"
    save_dataset(ds, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-2002])
    with pytest.raises(DatasetFormatError, match="truncat"):
        load_dataset(p)
    p.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(p)


def test_pgm_roundtrip_with_comment(tmp_path):
    codes = np.random.default_rng(0).integers(0, 256, size=(40, 50)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", codes, comment="config_hash=abc seed=1")
    assert b"# config_hash=abc" in (tmp_path / "a.pgm").read_bytes()
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), codes)


def test_export_directory(tmp_path):
    ds = make_bubbles(3, seed=1)
    out = export_directory(ds, tmp_path / "x", comment="stamp")
    lines = (out / "labels.csv").read_text().splitlines()
    assert lines[0] == "# stamp" and lines[1] == "file,label,provenance"
    assert np.array_equal(read_pgm(out / "000002.pgm"), ds.codes[2])
