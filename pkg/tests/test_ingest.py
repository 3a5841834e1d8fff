import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from imudiff import PIDS
from imudiff.errors import ConfigError, DegenerateError, InsufficientDataError, ParseError, TooShortError
from imudiff.ingest import (
    Activity,
    AxisStats,
    RawRecording,
    WindowSet,
    destandardize,
    fit_stats,
    format_recording,
    load_manifest,
    make_folds,
    parse_recording,
    segment,
    select_training_subset,
    standardize,
    window_count,
    write_manifest,
)


def _text(n, rng):
    return format_recording(rng.normal(size=(n, 6)))


def test_parse_well_formed(rng):
    rec = parse_recording(_text(3000, rng), 3, "Walking")
    assert rec.samples.shape == (3000, 6)
    assert rec.activity is Activity.Walking


def test_parse_bytes_and_stream(rng):
    text = _text(200, rng)
    a = parse_recording(text.encode(), 1, 0)
    b = parse_recording(io.StringIO(text), 1, 0)
    np.testing.assert_array_equal(a.samples, b.samples)


def test_parse_error_cites_row(rng):
    lines = _text(300, rng).splitlines()
    lines[6] = "1 2 3 x 5 6"
    with pytest.raises(ParseError, match="line 7"):
        parse_recording("\n".join(lines), 1, 0)


def test_parse_wrong_field_count(rng):
    lines = _text(300, rng).splitlines()
    lines[10] = "1 2 3"
    with pytest.raises(ParseError) as e:
        parse_recording("\n".join(lines), 1, 0)
    assert e.value.line == 11


def test_parse_too_short(rng):
    with pytest.raises(TooShortError):
        parse_recording(_text(100, rng), 1, 0)


def test_raw_recording_validates():
    with pytest.raises(TooShortError):
        RawRecording(1, Activity.Walking, np.zeros((10, 6)))
    with pytest.raises(Exception):
        RawRecording(1, Activity.Walking, np.zeros((200, 5)))


@pytest.mark.parametrize("n,expected", [(160, 1), (467, 8), (5151, 125), (199, 1), (200, 2)])
def test_window_count_examples(n, expected):
    assert window_count(n) == expected
    rec = RawRecording(1, Activity.Cycling, np.zeros((n, 6)))
    assert len(segment(rec)) == expected


@given(st.integers(160, 3000))
def test_window_count_matches_enumeration(n):
    offsets = [o for o in range(0, n) if o % 40 == 0 and o + 160 <= n]
    assert window_count(n) == len(offsets)


@given(st.integers(200, 800), st.integers(0, 2**32 - 1))
def test_adjacent_windows_overlap(n, seed):
    x = np.random.default_rng(seed).normal(size=(n, 6))
    ws = segment(RawRecording(2, Activity.Running, x))
    for a, b in zip(ws, ws[1:]):
        np.testing.assert_array_equal(a.data[40:], b.data[:120])
        assert b.source_offset - a.source_offset == 40
    np.testing.assert_array_equal(ws[0].data, x[:160])


def test_stats_degenerate_axis(rng):
    w = np.zeros((1, 160, 6))
    w[0, :, 0] = rng.normal(size=160)
    with pytest.raises(DegenerateError, match="acc_y"):
        fit_stats(w)


def test_stats_symmetric_perturbation():
    w = np.ones((2, 160, 6)) * 3.5
    w[:, :, :] += np.where(np.arange(160) % 2, 1.0, -1.0)[None, :, None] * 1e-3
    s = fit_stats(w)
    np.testing.assert_allclose(s.mean, 3.5, atol=1e-12)


def test_stats_match_flattened(rng):
    a = rng.normal(size=(3, 160, 6)) * 2 + 1
    b = rng.normal(size=(5, 160, 6))
    s = fit_stats(np.concatenate([a, b]))
    flat = np.concatenate([a.reshape(-1, 6), b.reshape(-1, 6)])
    for i in range(6):
        col = flat[:, i]
        m = sum(col) / len(col)
        v = sum((c - m) ** 2 for c in col) / len(col)
        assert s.mean[i] == pytest.approx(m, abs=1e-12)
        assert s.std[i] == pytest.approx(np.sqrt(v), abs=1e-12)


def test_standardize_mean_window_is_zero(rng):
    s = fit_stats(rng.normal(size=(4, 160, 6)))
    w = np.broadcast_to(s.mean, (160, 6))
    np.testing.assert_allclose(standardize(w, s), 0.0, atol=1e-15)


@given(st.integers(0, 2**32 - 1))
def test_standardize_round_trip(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 160, 6)) * rng.uniform(0.1, 10, 6) + rng.normal(size=6) * 5
    s = fit_stats(x)
    np.testing.assert_allclose(destandardize(standardize(x, s), s), x, atol=1e-10)
    np.testing.assert_allclose(standardize(destandardize(x, s), s), x, atol=1e-10)
    z = standardize(x, s).reshape(-1, 6)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-9)


def test_standardize_keeps_windowset_metadata(rng):
    ws = WindowSet(rng.normal(size=(2, 160, 6)), np.array([1, 2]), np.array([0, 3]), np.array([0, 40]))
    out = standardize(ws, fit_stats(ws))
    np.testing.assert_array_equal(out.pid, [1, 2])
    np.testing.assert_array_equal(out.label, [0, 3])


def test_axis_stats_json_round_trip(rng):
    s = fit_stats(rng.normal(size=(2, 160, 6)))
    t = AxisStats.from_json(s.to_json())
    np.testing.assert_array_equal(s.mean, t.mean)
    np.testing.assert_array_equal(s.std, t.std)


def test_subset_all_when_exactly_n():
    items = list(range(22))
    for seed in range(5):
        assert select_training_subset(items, 22, seed, randomize=True) == items


def test_subset_deterministic_and_contiguous():
    items = list(range(125))
    a = select_training_subset(items, 22, seed=7, randomize=True)
    b = select_training_subset(items, 22, seed=7, randomize=True)
    assert a == b and len(a) == 22
    assert a == list(range(a[0], a[0] + 22))
    starts = {select_training_subset(items, 22, s, randomize=True)[0] for s in range(50)}
    assert starts <= set(range(0, 125 - 22 + 1)) and len(starts) > 1
    assert select_training_subset(items, 22) == list(range(22))


def test_subset_insufficient():
    with pytest.raises(InsufficientDataError):
        select_training_subset(list(range(10)), 22)


def test_folds_default():
    folds = make_folds(PIDS)
    assert len(folds) == 12
    f16 = [f for f in folds if f.held_out_pid == 16][0]
    assert len(f16.train_pids) == 11 and 16 not in f16.train_pids


@given(st.sets(st.integers(1, 100), min_size=2, max_size=20))
def test_folds_partition(pids):
    folds = make_folds(sorted(pids))
    assert {f.held_out_pid for f in folds} == pids
    for f in folds:
        assert set(f.train_pids) | {f.held_out_pid} == pids
        assert f.held_out_pid not in f.train_pids


def test_folds_reject_duplicates():
    with pytest.raises(ConfigError):
        make_folds([1, 1, 2])


def _manifest(tmp_path, rng, pids, skip=None):
    entries = []
    for pid in pids:
        for a in Activity:
            if (pid, a) == skip:
                continue
            p = tmp_path / f"p{pid}_{a.name}.txt"
            p.write_text(_text(200, rng))
            entries.append((pid, a, p.name))
    write_manifest(tmp_path / "m.json", entries)
    return tmp_path / "m.json"


def test_manifest_complete(tmp_path, rng):
    m = _manifest(tmp_path, rng, [1, 2, 99])
    entries = load_manifest(m, [1, 2])
    assert len(entries) == 8
    assert {e.participant_id for e in entries} == {1, 2}


def test_manifest_missing_pair(tmp_path, rng):
    m = _manifest(tmp_path, rng, [1, 2], skip=(2, Activity.Cycling))
    with pytest.raises(ConfigError, match=r"\(2, Cycling\)"):
        load_manifest(m, [1, 2])


def test_manifest_bad_json(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_manifest(tmp_path / "m.json", [1])
    obj = {"version": 1, "recordings": []}
    (tmp_path / "m.json").write_text(json.dumps(obj))
    with pytest.raises(ConfigError, match="missing"):
        load_manifest(tmp_path / "m.json", [1])
