import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsrag.core import (
    STD_EPS,
    GlobalScaler,
    Series,
    SplitSpec,
    denormalize,
    generate_motif_corpus,
    load_csv,
    load_csv_channels,
    load_store,
    make_motif_bank,
    make_pairs,
    save_store,
    split,
    store_from_bytes,
    store_to_bytes,
    window_stats,
    zscore,
)
from tsrag.errors import FormatError, IOFailure


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- ingestion ---------------------------------------------------------------


def test_load_csv_three_rows(tmp_path):
    p = write(tmp_path, "tiny.csv", "date,v\n2020-01-01,1.0\n2020-01-02,2.0\n2020-01-03,3.0\n")
    s = load_csv(p, "v")
    np.testing.assert_array_equal(s.values, [1.0, 2.0, 3.0])
    assert s.source_tag == "tiny"


def test_load_csv_drops_nan_rows_with_warning(tmp_path):
    rows = [f"{i},{'nan' if i == 50 else float(i)}" for i in range(100)]
    p = write(tmp_path, "gap.csv", "t,v\n" + "\n".join(rows) + "\n")
    with pytest.warns(UserWarning, match="dropped 1"):
        s = load_csv(p, "v")
    assert len(s) == 99


def test_load_csv_empty_file(tmp_path):
    with pytest.raises(FormatError, match="zero usable rows"):
        load_csv(write(tmp_path, "empty.csv", ""), "v")


def test_load_csv_header_only(tmp_path):
    with pytest.raises(FormatError, match="zero usable rows"):
        load_csv(write(tmp_path, "hdr.csv", "t,v\n"), "v")


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(IOFailure):
        load_csv(tmp_path / "nope.csv", "v")


def test_load_csv_missing_column(tmp_path):
    p = write(tmp_path, "a.csv", "t,v\n0,1\n")
    with pytest.raises(FormatError, match="column 'w'"):
        load_csv(p, "w")


def test_load_csv_unparseable_value(tmp_path):
    p = write(tmp_path, "bad.csv", "t,v\n0,abc\n")
    with pytest.raises(FormatError):
        load_csv(p, "v")


def test_channels_ingested_independently(tmp_path):
    p = write(tmp_path, "multi.csv", "date,a,b\nx,1,10\ny,2,20\n")
    a, b = load_csv_channels(p)
    np.testing.assert_array_equal(a.values, [1, 2])
    np.testing.assert_array_equal(b.values, [10, 20])
    assert a.id != b.id


def test_series_rejects_non_finite():
    with pytest.raises(ValueError):
        Series("x", [1.0, np.inf])
    with pytest.raises(ValueError):
        Series("x", [])


# --- windowing ---------------------------------------------------------------


def ramp(n, sid="s"):
    return Series(sid, np.arange(n, dtype=float))


def test_make_pairs_640():
    pairs = make_pairs(ramp(640), 512, 64, 64)
    # valid starts: 0 and 64 (64 + 576 = 640)
    assert [p.origin[1] for p in pairs] == [0, 64]


def test_make_pairs_exact_fit():
    assert len(make_pairs(ramp(576), 512, 64, 1)) == 1


def test_make_pairs_too_short_warns():
    with pytest.warns(UserWarning):
        assert make_pairs(ramp(100), 512, 64) == []


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 300), T=st.integers(1, 40), L=st.integers(1, 20), stride=st.integers(1, 30))
def test_windowing_count_and_contiguity(n, T, L, stride):
    s = Series("s", np.arange(n, dtype=float) * 0.5, offset=7)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pairs = make_pairs(s, T, L, stride)
    expected = (n - T - L) // stride + 1 if n >= T + L else 0
    assert len(pairs) == expected
    for j, p in enumerate(pairs):
        start = j * stride
        assert p.origin == ("s", 7 + start)
        joined = np.concatenate([p.context, p.horizon])
        np.testing.assert_array_equal(joined, s.values[start:start + T + L])
        assert p.norm_stats == window_stats(p.context)


# --- normalisation -----------------------------------------------------------


def test_zscore_unit_moments():
    x = np.array([1.0, 2.0, 3.0])
    z = zscore(x, window_stats(x))
    assert abs(z.mean()) < 1e-12 and abs(z.std() - 1) < 1e-12


def test_constant_window_guard():
    stats = window_stats([5.0, 5.0, 5.0])
    assert stats.std == STD_EPS
    np.testing.assert_array_equal(zscore([5.0, 5.0, 5.0], stats), 0.0)


def test_roundtrip_1000_windows(rng):
    worst = 0.0
    for _ in range(1000):
        x = rng.normal(rng.normal(0, 10), rng.uniform(0.1, 5), size=64)
        s = window_stats(x)
        worst = max(worst, float(np.max(np.abs(denormalize(zscore(x, s), s) - x))))
    assert worst < 1e-10


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=50))
def test_roundtrip_property(values):
    x = np.array(values)
    s = window_stats(x)
    if np.std(x) > 1e-3:
        np.testing.assert_allclose(denormalize(zscore(x, s), s), x, atol=1e-10, rtol=0)


# --- splitting ---------------------------------------------------------------


@pytest.mark.parametrize("n,fr,sizes", [
    (1000, (0.6, 0.2, 0.2), (600, 200, 200)),
    (10, (0.7, 0.1, 0.2), (7, 1, 2)),
])
def test_split_sizes(n, fr, sizes):
    segs = split(ramp(n), SplitSpec(*fr))
    assert tuple(len(s) for s in segs) == sizes
    assert [s.offset for s in segs] == [0, sizes[0], sizes[0] + sizes[1]]


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        SplitSpec(1.2, -0.2, 0.0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(200, 2000), T=st.integers(4, 40), L=st.integers(1, 16))
def test_train_and_test_pairs_never_share_an_index(n, T, L):
    train, _, test = split(ramp(n), SplitSpec(0.6, 0.2, 0.2))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = make_pairs(train, T, L, 1)
        b = make_pairs(test, T, L, 1)
    used_train = {p.origin[1] + i for p in a for i in range(T + L)}
    used_test = {p.origin[1] + i for p in b for i in range(T + L)}
    assert not used_train & used_test


def test_global_scaler_fits_on_train():
    segs = split(ramp(100), SplitSpec(0.6, 0.2, 0.2))
    sc = GlobalScaler.fit([segs[0]])
    assert sc.fitted_on == "train"
    assert sc.mean == pytest.approx(29.5)
    np.testing.assert_allclose(sc.inverse(sc.transform(segs[2].values)), segs[2].values)


# --- motif corpus ------------------------------------------------------------


def test_corpus_deterministic():
    a = generate_motif_corpus(3, 5, 300)
    b = generate_motif_corpus(3, 5, 300)
    assert store_to_bytes(a) == store_to_bytes(b)
    assert store_to_bytes(a) != store_to_bytes(generate_motif_corpus(4, 5, 300))


def test_corpus_empty():
    assert generate_motif_corpus(0, 0, 100) == []


def test_noiseless_single_motif_is_periodic():
    for seed in range(4):
        (s,) = generate_motif_corpus(seed, 1, 2000, motif_bank_size=4, noise_std=0.0, max_motifs=1,
                                     kinds=("sine", "sawtooth"))
        # recover the motif period from the bank that generated this series
        periods = {m.period for m in make_motif_bank(seed, 4, kinds=("sine", "sawtooth")).motifs}
        x = s.values
        best = None
        for P in periods:
            a, b = x[:-P], x[P:]
            if np.std(a) > 0 and np.allclose(a, b, atol=1e-9):
                best = np.corrcoef(a, b)[0, 1]
        assert best is not None and abs(best - 1) < 1e-9


def test_store_roundtrip(tmp_path):
    corpus = generate_motif_corpus(1, 3, 50) + [Series("x", [1.0, 2.0], "tag", offset=5)]
    p = tmp_path / "s.tsrs"
    save_store(corpus, p)
    back = load_store(p)
    assert store_to_bytes(back) == p.read_bytes()
    assert back[-1].offset == 5 and back[-1].source_tag == "tag"
    with pytest.raises(FormatError):
        store_from_bytes(p.read_bytes()[:-3])
