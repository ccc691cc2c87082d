"""Tests for the recording data model, matrix building, normalization,
patching, windowing, splits, and file round-trips."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colonmixer.data import (
    MARKER_COUNT,
    SENSOR_COUNT,
    ClampCounter,
    ColonFrame,
    ColonoscopeFrame,
    InsertionRecording,
    NormalizationStats,
    RecordingFormatError,
    ShortRecordingWarning,
    build_directional_matrix,
    build_positional_matrix,
    compute_normalization_stats,
    denormalize,
    extract_patches,
    load_recording,
    loocv_split,
    make_window_samples,
    normalize,
    reassemble_patches,
    save_recording,
)

WINDOW = 18


def unit_rows(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_scope_frame(t, rng, length=None):
    return ColonoscopeFrame(
        t=t,
        positions=rng.normal(scale=100.0, size=(SENSOR_COUNT, 3)),
        directions=unit_rows(rng, SENSOR_COUNT),
        insertion_length=float(length if length is not None else rng.uniform(0, 1300)),
    )


def make_colon_frame(t, rng):
    return ColonFrame(t=t, markers=rng.normal(scale=150.0, size=(MARKER_COUNT, 3)))


def make_recording(n_frames, seed=0, rec_id="rec", lengths=None):
    rng = np.random.default_rng(seed)
    frames = []
    for i in range(n_frames):
        t = i + 1
        length = None if lengths is None else lengths[i]
        frames.append((make_scope_frame(t, rng, length), make_colon_frame(t, rng)))
    return InsertionRecording(id=rec_id, frames=tuple(frames))


def newest_first(rec, head_t):
    scope = rec.scope_frames
    return [scope[head_t - 1 - k] for k in range(WINDOW)]


class TestFrameTypes:
    def test_direction_norm_checked(self):
        rng = np.random.default_rng(0)
        dirs = unit_rows(rng, SENSOR_COUNT)
        dirs[2] *= 0.5
        with pytest.raises(ValueError, match="direction 3"):
            ColonoscopeFrame(1, rng.normal(size=(6, 3)), dirs, 10.0)

    def test_negative_insertion_length_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="insertion length"):
            ColonoscopeFrame(1, rng.normal(size=(6, 3)), unit_rows(rng, 6), -1.0)

    def test_marker_count_enforced(self):
        with pytest.raises(ValueError, match="12 markers"):
            ColonFrame(1, np.zeros((11, 3)))

    def test_arrays_frozen(self):
        rng = np.random.default_rng(1)
        frame = make_scope_frame(1, rng)
        with pytest.raises(ValueError):
            frame.positions[0, 0] = 99.0

    def test_recording_requires_consecutive_times(self):
        rng = np.random.default_rng(2)
        frames = [(make_scope_frame(1, rng), make_colon_frame(1, rng)),
                  (make_scope_frame(3, rng), make_colon_frame(3, rng))]
        with pytest.raises(ValueError, match="t=3, expected 2"):
            InsertionRecording(id="bad", frames=tuple(frames))

    def test_recording_requires_aligned_pairs(self):
        rng = np.random.default_rng(3)
        frames = [(make_scope_frame(1, rng), make_colon_frame(2, rng))]
        with pytest.raises(ValueError, match="colon frame"):
            InsertionRecording(id="bad", frames=tuple(frames))


class TestWindowMatrices:
    def test_paper_config_shape(self):
        rec = make_recording(WINDOW)
        window = newest_first(rec, WINDOW)
        assert build_positional_matrix(window, WINDOW).shape == (18, 18)
        assert build_directional_matrix(window, WINDOW).shape == (18, 18)

    def test_identical_frames_give_identical_columns(self):
        rng = np.random.default_rng(4)
        pos = rng.normal(size=(6, 3))
        dirs = unit_rows(rng, 6)
        frames = [ColonoscopeFrame(WINDOW - k, pos, dirs, 5.0) for k in range(WINDOW)]
        mat = build_positional_matrix(frames, WINDOW)
        assert np.all(mat == mat[:, :1])

    def test_index_map_oracle(self):
        """Entry (3*(n-1)+axis, k) must equal sensor n's axis coordinate at
        the frame k steps before the window head."""
        rec = make_recording(WINDOW, seed=5)
        window = newest_first(rec, WINDOW)
        pos = build_positional_matrix(window, WINDOW)
        dim = build_directional_matrix(window, WINDOW)
        for n in range(SENSOR_COUNT):
            for axis in range(3):
                for k in range(WINDOW):
                    assert pos[3 * n + axis, k] == window[k].positions[n, axis]
                    assert dim[3 * n + axis, k] == window[k].directions[n, axis]
        # Spot check from the row layout: 1-based row 4 is sensor 2's x.
        assert pos[3, 0] == window[0].positions[1, 0]

    def test_newest_first_column_order(self):
        lengths = [float(t) for t in range(1, WINDOW + 1)]
        rec = make_recording(WINDOW, seed=6, lengths=lengths)
        window = newest_first(rec, WINDOW)
        assert [f.t for f in window] == list(range(WINDOW, 0, -1))
        mat = build_positional_matrix(window, WINDOW)
        assert mat[0, 0] == rec.scope_frames[-1].positions[0, 0]
        assert mat[0, -1] == rec.scope_frames[0].positions[0, 0]

    def test_constant_direction_pattern(self):
        pos = np.zeros((6, 3))
        dirs = np.tile([0.0, 0.0, 1.0], (6, 1))
        frames = [ColonoscopeFrame(WINDOW - k, pos, dirs, 0.0) for k in range(WINDOW)]
        mat = build_directional_matrix(frames, WINDOW)
        expect_col = np.tile([0.0, 0.0, 1.0], 6)
        np.testing.assert_array_equal(mat, np.tile(expect_col[:, None], (1, WINDOW)))

    def test_wrong_frame_count_rejected(self):
        rec = make_recording(WINDOW)
        with pytest.raises(ValueError, match="exactly 18"):
            build_positional_matrix(rec.scope_frames[:10][::-1], WINDOW)

    def test_gapped_window_rejected(self):
        rec = make_recording(WINDOW + 2)
        scope = rec.scope_frames
        window = [scope[-1]] + scope[:-2][::-1][: WINDOW - 1]
        with pytest.raises(ValueError, match="newest first"):
            build_positional_matrix(window, WINDOW)


@pytest.fixture
def stats():
    return NormalizationStats(
        pos_min=np.array([-10.0, 0.0, 5.0]),
        pos_max=np.array([10.0, 40.0, 25.0]),
        len_min=100.0,
        len_max=1300.0,
    )


class TestNormalization:
    def test_position_endpoints(self, stats):
        col = np.array([[-10.0], [0.0], [5.0], [10.0], [40.0], [25.0]])
        out = normalize(col, stats, "position")
        np.testing.assert_allclose(out[:, 0], [0, 0, 0, 1, 1, 1], atol=0)

    def test_direction_endpoints(self, stats):
        out = normalize(np.array([-1.0, 0.0, 1.0]), stats, "direction")
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=0)

    def test_length_endpoints(self, stats):
        assert normalize(np.array([100.0]), stats, "length")[0] == 0.0
        assert normalize(np.array([1300.0]), stats, "length")[0] == 1.0

    @pytest.mark.parametrize("kind", ["position", "direction", "length"])
    def test_round_trip(self, stats, kind):
        rng = np.random.default_rng(7)
        if kind == "position":
            x = rng.uniform(0, 1, size=(18, 5))
            lo = np.tile(stats.pos_min, 6)[:, None]
            hi = np.tile(stats.pos_max, 6)[:, None]
            x = lo + x * (hi - lo)
        elif kind == "direction":
            x = rng.uniform(-1, 1, size=(18, 5))
        else:
            x = rng.uniform(stats.len_min, stats.len_max, size=18)
        back = denormalize(normalize(x, stats, kind), stats, kind)
        np.testing.assert_allclose(back, x, atol=1e-12)

    def test_out_of_range_clamped_and_counted(self, stats):
        counter = ClampCounter()
        out = normalize(np.array([2000.0, 50.0, 500.0]), stats, "length", counter=counter)
        assert counter.count == 2
        assert out[0] == 1.0 and out[1] == 0.0
        assert 0.0 < out[2] < 1.0

    def test_degenerate_stats_rejected(self):
        with pytest.raises(ValueError, match="axis y"):
            NormalizationStats(
                pos_min=np.array([0.0, 3.0, 0.0]),
                pos_max=np.array([1.0, 3.0, 1.0]),
                len_min=0.0,
                len_max=1.0,
            )
        with pytest.raises(ValueError, match="length"):
            NormalizationStats(
                pos_min=np.zeros(3), pos_max=np.ones(3), len_min=2.0, len_max=2.0
            )

    def test_unknown_kind(self, stats):
        with pytest.raises(ValueError, match="unknown"):
            normalize(np.zeros(3), stats, "velocity")

    def test_stats_dict_round_trip(self, stats):
        again = NormalizationStats.from_dict(stats.to_dict())
        np.testing.assert_array_equal(again.pos_min, stats.pos_min)
        np.testing.assert_array_equal(again.pos_max, stats.pos_max)
        assert again.len_min == stats.len_min and again.len_max == stats.len_max


class TestPatches:
    def test_paper_config_patch_count(self):
        mat = np.random.default_rng(8).normal(size=(18, 18))
        patches = extract_patches(mat, 6, 3)
        assert patches.shape == (18, 18)

    def test_whole_matrix_single_patch(self):
        mat = np.arange(12.0).reshape(3, 4)
        patches = extract_patches(mat, 3, 4)
        assert patches.shape == (1, 12)
        np.testing.assert_array_equal(patches[0], mat.reshape(-1))

    def test_grid_order_and_flattening(self):
        # Encode (row, col) into values so tile order is visible.
        mat = np.arange(24.0).reshape(4, 6)
        patches = extract_patches(mat, 2, 3)
        # Grid is 2x2 tiles, row-major: top-left, top-right, bottom-left, bottom-right.
        np.testing.assert_array_equal(patches[0], [0, 1, 2, 6, 7, 8])
        np.testing.assert_array_equal(patches[1], [3, 4, 5, 9, 10, 11])
        np.testing.assert_array_equal(patches[2], [12, 13, 14, 18, 19, 20])
        np.testing.assert_array_equal(patches[3], [15, 16, 17, 21, 22, 23])

    def test_non_divisible_rows_named(self):
        with pytest.raises(ValueError, match="rows"):
            extract_patches(np.zeros((18, 18)), 5, 3)

    def test_non_divisible_cols_named(self):
        with pytest.raises(ValueError, match="columns"):
            extract_patches(np.zeros((18, 18)), 6, 5)

    @settings(max_examples=60, deadline=None)
    @given(data=st.data())
    def test_reassembly_is_identity(self, data):
        rows = data.draw(st.sampled_from([2, 4, 6, 12, 18]), label="rows")
        cols = data.draw(st.sampled_from([2, 3, 6, 9, 18]), label="cols")
        s1 = data.draw(st.sampled_from([d for d in range(1, rows + 1) if rows % d == 0]), label="s1")
        s2 = data.draw(st.sampled_from([d for d in range(1, cols + 1) if cols % d == 0]), label="s2")
        seed = data.draw(st.integers(0, 10_000), label="seed")
        mat = np.random.default_rng(seed).normal(size=(rows, cols))
        patches = extract_patches(mat, s1, s2)
        assert patches.shape == (rows * cols // (s1 * s2), s1 * s2)
        np.testing.assert_array_equal(reassemble_patches(patches, rows, cols, s1, s2), mat)


class TestWindowSamples:
    def test_counts(self):
        rec = make_recording(20, seed=9)
        stats = compute_normalization_stats([rec])
        samples = make_window_samples(rec, stats, WINDOW, 6, 3)
        assert len(samples) == 3
        assert [s.t_c for s in samples] == [18, 19, 20]

    def test_exactly_one_window(self):
        rec = make_recording(WINDOW, seed=10)
        stats = compute_normalization_stats([rec])
        samples = make_window_samples(rec, stats, WINDOW, 6, 3)
        assert len(samples) == 1
        assert samples[0].t_c == WINDOW

    def test_short_recording_warns_and_yields_nothing(self):
        rec = make_recording(WINDOW - 1, seed=11)
        stats = compute_normalization_stats([rec])
        with pytest.warns(ShortRecordingWarning):
            samples = make_window_samples(rec, stats, WINDOW, 6, 3)
        assert samples == []

    def test_first_window_covers_frames_one_to_window(self):
        lengths = [float(100 + t) for t in range(1, 26)]
        rec = make_recording(25, seed=12, lengths=lengths)
        stats = compute_normalization_stats([rec])
        samples = make_window_samples(rec, stats, WINDOW, 6, 3)
        first = samples[0]
        assert first.t_c == WINDOW
        raw = denormalize(first.lengths, stats, "length")
        np.testing.assert_allclose(raw, [100.0 + t for t in range(WINDOW, 0, -1)], atol=1e-9)

    def test_sample_shapes_and_target(self):
        rec = make_recording(WINDOW, seed=13)
        stats = compute_normalization_stats([rec])
        s = make_window_samples(rec, stats, WINDOW, 6, 3)[0]
        assert s.xi.shape == (36, 18)
        assert s.lengths.shape == (WINDOW,)
        assert s.target_norm.shape == (36,)
        assert s.target is rec.colon_frames[-1]
        assert s.recording_id == rec.id
        back = denormalize(s.target_norm, stats, "position").reshape(12, 3)
        np.testing.assert_allclose(back, s.target.markers, atol=1e-9)

    def test_xi_stacks_positions_then_directions(self):
        rec = make_recording(WINDOW, seed=14)
        stats = compute_normalization_stats([rec])
        s = make_window_samples(rec, stats, WINDOW, 6, 3)[0]
        window = newest_first(rec, WINDOW)
        pos = normalize(build_positional_matrix(window, WINDOW), stats, "position")
        dirs = normalize(build_directional_matrix(window, WINDOW), stats, "direction")
        np.testing.assert_array_equal(s.xi[:18], extract_patches(pos, 6, 3))
        np.testing.assert_array_equal(s.xi[18:], extract_patches(dirs, 6, 3))


class TestLoocvSplit:
    def test_eight_recordings_eight_folds(self):
        recs = [make_recording(WINDOW, seed=20 + i, rec_id=f"r{i}") for i in range(8)]
        folds = loocv_split(recs)
        assert len(folds) == 8
        for fold in folds:
            assert len(fold.train) == 7
            assert fold.test not in fold.train

    def test_test_sets_cover_all_recordings_once(self):
        recs = [make_recording(WINDOW, seed=30 + i, rec_id=f"r{i}") for i in range(5)]
        folds = loocv_split(recs)
        held_out = [fold.test.id for fold in folds]
        assert sorted(held_out) == sorted(r.id for r in recs)
        assert len(set(held_out)) == len(recs)

    def test_two_recordings(self):
        recs = [make_recording(WINDOW, seed=40 + i, rec_id=f"r{i}") for i in range(2)]
        folds = loocv_split(recs)
        assert folds[0].test.id == "r0" and folds[0].train[0].id == "r1"
        assert folds[1].test.id == "r1" and folds[1].train[0].id == "r0"

    def test_fewer_than_two_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            loocv_split([make_recording(WINDOW)])

    def test_stats_exclude_held_out_recording(self):
        recs = [make_recording(WINDOW, seed=50 + i, rec_id=f"r{i}") for i in range(3)]
        # Push one recording's lengths far outside the others' range.
        rng = np.random.default_rng(99)
        frames = []
        for i in range(WINDOW):
            t = i + 1
            frames.append((make_scope_frame(t, rng, length=9000.0 + t), make_colon_frame(t, rng)))
        outlier = InsertionRecording(id="outlier", frames=tuple(frames))
        folds = loocv_split(recs + [outlier])
        outlier_fold = next(f for f in folds if f.test.id == "outlier")
        assert outlier_fold.stats.len_max < 9000.0
        other_fold = next(f for f in folds if f.test.id != "outlier")
        assert other_fold.stats.len_max > 9000.0


class TestRecordingIO:
    def test_round_trip_exact(self, tmp_path):
        rec = make_recording(3, seed=60, rec_id="trip")
        path = tmp_path / "trip.jsonl"
        save_recording(rec, path)
        again = load_recording(path)
        assert again.id == "trip"
        assert again.sample_rate == rec.sample_rate
        assert len(again) == 3
        for (s1, c1), (s2, c2) in zip(rec.frames, again.frames):
            assert s1.t == s2.t
            np.testing.assert_array_equal(s1.positions, s2.positions)
            np.testing.assert_array_equal(s1.directions, s2.directions)
            assert s1.insertion_length == s2.insertion_length
            np.testing.assert_array_equal(c1.markers, c2.markers)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(RecordingFormatError, match="no frames"):
            load_recording(path)

    def test_bad_direction_names_frame(self, tmp_path):
        rec = make_recording(8, seed=61, rec_id="bad")
        path = tmp_path / "bad.jsonl"
        save_recording(rec, path)
        lines = path.read_text().splitlines()
        obj = json.loads(lines[6])
        obj["scope"]["dir"][0] = [0.5, 0.0, 0.0]
        lines[6] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(RecordingFormatError, match="frame 7"):
            load_recording(path)

    def test_invalid_json_names_line(self, tmp_path):
        rec = make_recording(2, seed=62)
        path = tmp_path / "rec.jsonl"
        save_recording(rec, path)
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(RecordingFormatError, match=":3:"):
            load_recording(path)

    def test_missing_field_named(self, tmp_path):
        rec = make_recording(2, seed=63)
        path = tmp_path / "rec.jsonl"
        save_recording(rec, path)
        lines = path.read_text().splitlines()
        obj = json.loads(lines[1])
        del obj["scope"]["len"]
        lines[1] = json.dumps(obj)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(RecordingFormatError, match="len"):
            load_recording(path)

    def test_wrong_sensor_count_named(self, tmp_path):
        rec = make_recording(1, seed=64)
        path = tmp_path / "rec.jsonl"
        save_recording(rec, path)
        obj = json.loads(path.read_text())
        obj["scope"]["pos"] = obj["scope"]["pos"][:4]
        path.write_text(json.dumps(obj) + "\n")
        with pytest.raises(RecordingFormatError, match="scope.pos"):
            load_recording(path)

    def test_sidecar_defaults(self, tmp_path):
        rec = make_recording(WINDOW, seed=65, rec_id="named")
        path = tmp_path / "named.jsonl"
        save_recording(rec, path)
        (tmp_path / "named.meta.json").unlink()
        again = load_recording(path)
        assert again.id == "named"
        assert again.sample_rate == 6.0
