"""Recording data model, file I/O, matrix construction, normalization,
patching, windowing, and cross-validation splits.

A recording is a time-ordered sequence of paired frames: what the scope's
sensors saw (positions, unit directions, insertion length) and where the
colon markers were. All coordinates are millimetres in one fixed frame.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "MARKER_COUNT",
    "SENSOR_COUNT",
    "ClampCounter",
    "ColonFrame",
    "ColonoscopeFrame",
    "Fold",
    "InsertionRecording",
    "NormalizationStats",
    "RecordingFormatError",
    "ShortRecordingWarning",
    "WindowSample",
    "build_directional_matrix",
    "build_positional_matrix",
    "clamp_counter",
    "compute_normalization_stats",
    "denormalize",
    "extract_patches",
    "load_recording",
    "loocv_split",
    "make_window_samples",
    "normalize",
    "reassemble_patches",
    "save_recording",
]

SENSOR_COUNT = 6
MARKER_COUNT = 12

DIRECTION_NORM_TOL = 1e-6


class RecordingFormatError(ValueError):
    """Raised when a recording file violates the line format or the frame
    invariants; the message carries the file, line, and field involved."""


class ShortRecordingWarning(UserWarning):
    """Recording shorter than one window; it yields no samples."""


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class ColonoscopeFrame:
    """One time step of scope kinematics: six sensor positions (mm), six
    unit direction vectors, and the inserted length of the scope (mm)."""

    t: int
    positions: np.ndarray
    directions: np.ndarray
    insertion_length: float

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64)
        dirs = np.asarray(self.directions, dtype=np.float64)
        if pos.shape != (SENSOR_COUNT, 3):
            raise ValueError(
                f"frame {self.t}: expected {SENSOR_COUNT} sensor positions of 3 coords, got {pos.shape}"
            )
        if dirs.shape != (SENSOR_COUNT, 3):
            raise ValueError(
                f"frame {self.t}: expected {SENSOR_COUNT} sensor directions of 3 coords, got {dirs.shape}"
            )
        norms = np.linalg.norm(dirs, axis=1)
        bad = np.where(np.abs(norms - 1.0) > DIRECTION_NORM_TOL)[0]
        if bad.size:
            raise ValueError(
                f"frame {self.t}: direction {bad[0] + 1} has norm {norms[bad[0]]:.6g}, expected 1"
            )
        if self.insertion_length < 0:
            raise ValueError(f"frame {self.t}: insertion length {self.insertion_length} < 0")
        object.__setattr__(self, "positions", _readonly(pos))
        object.__setattr__(self, "directions", _readonly(dirs))


@dataclass(frozen=True)
class ColonFrame:
    """One time step of ground truth: twelve marker positions (mm), ordered
    from the cecum end (marker 1) to the anus end (marker 12)."""

    t: int
    markers: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.markers, dtype=np.float64)
        if m.shape != (MARKER_COUNT, 3):
            raise ValueError(
                f"frame {self.t}: expected {MARKER_COUNT} markers of 3 coords, got {m.shape}"
            )
        object.__setattr__(self, "markers", _readonly(m))


@dataclass(frozen=True)
class InsertionRecording:
    """A full insertion: paired scope/colon frames with consecutive time
    indices starting at 1, plus the sampling rate in Hz."""

    id: str
    frames: tuple
    sample_rate: float = 6.0

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError(f"recording '{self.id}': no frames")
        for i, pair in enumerate(frames):
            scope, colon = pair
            expected_t = i + 1
            if scope.t != expected_t:
                raise ValueError(
                    f"recording '{self.id}': scope frame at index {i} has t={scope.t}, expected {expected_t}"
                )
            if colon.t != expected_t:
                raise ValueError(
                    f"recording '{self.id}': colon frame at index {i} has t={colon.t}, expected {expected_t}"
                )
        if self.sample_rate <= 0:
            raise ValueError(f"recording '{self.id}': sample rate must be positive")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def scope_frames(self) -> list[ColonoscopeFrame]:
        return [p[0] for p in self.frames]

    @property
    def colon_frames(self) -> list[ColonFrame]:
        return [p[1] for p in self.frames]


@dataclass(frozen=True)
class NormalizationStats:
    """Feature scaling constants, computed from training folds only.

    Positions use per-axis min-max over every scope sensor and colon marker
    seen in training. Directions are unit vectors, mapped component-wise by
    (d + 1) / 2. Insertion lengths use scalar min-max.
    """

    pos_min: np.ndarray
    pos_max: np.ndarray
    len_min: float
    len_max: float
    dir_offset: float = 1.0
    dir_scale: float = 0.5

    def __post_init__(self):
        lo = np.asarray(self.pos_min, dtype=np.float64)
        hi = np.asarray(self.pos_max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("position stats must hold one min and one max per axis")
        if not np.all(hi > lo):
            ax = "xyz"[int(np.argmin(hi - lo))]
            raise ValueError(f"degenerate position stats: max == min on axis {ax}")
        if not self.len_max > self.len_min:
            raise ValueError("degenerate length stats: max == min")
        object.__setattr__(self, "pos_min", _readonly(lo))
        object.__setattr__(self, "pos_max", _readonly(hi))

    def to_dict(self) -> dict:
        return {
            "pos_min": self.pos_min.tolist(),
            "pos_max": self.pos_max.tolist(),
            "len_min": self.len_min,
            "len_max": self.len_max,
            "dir_offset": self.dir_offset,
            "dir_scale": self.dir_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(
            pos_min=np.array(d["pos_min"]),
            pos_max=np.array(d["pos_max"]),
            len_min=float(d["len_min"]),
            len_max=float(d["len_max"]),
            dir_offset=float(d.get("dir_offset", 1.0)),
            dir_scale=float(d.get("dir_scale", 0.5)),
        )


@dataclass(frozen=True)
class WindowSample:
    """One training/estimation example: the stacked patch matrix built from
    one window of scope frames, the window's insertion lengths (normalized,
    newest first), and the ground-truth colon frame at the window head."""

    xi: np.ndarray
    lengths: np.ndarray
    target: ColonFrame
    target_norm: np.ndarray
    t_c: int
    recording_id: str

    def __post_init__(self):
        object.__setattr__(self, "xi", _readonly(self.xi))
        object.__setattr__(self, "lengths", _readonly(self.lengths))
        object.__setattr__(self, "target_norm", _readonly(self.target_norm))


@dataclass(frozen=True)
class Fold:
    """One cross-validation fold: the held-out recording, the rest as
    training set, and scaling stats computed from the training set only."""

    train: tuple
    test: InsertionRecording
    stats: NormalizationStats


class ClampCounter:
    """Counts feature values clamped into [0, 1] during normalization."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)

    def reset(self) -> None:
        self.count = 0


clamp_counter = ClampCounter()


def _check_window(frames: Sequence[ColonoscopeFrame], window_len: int) -> None:
    if len(frames) != window_len:
        raise ValueError(f"window must hold exactly {window_len} frames, got {len(frames)}")
    for k in range(1, len(frames)):
        if frames[k].t != frames[0].t - k:
            raise ValueError(
                f"window frames must run newest first without gaps; "
                f"position {k} has t={frames[k].t}, expected {frames[0].t - k}"
            )


def build_positional_matrix(frames: Sequence[ColonoscopeFrame], window_len: int) -> np.ndarray:
    """Stack sensor positions over a window into a (3N, window_len) matrix.

    Rows run sensor-major: p1x, p1y, p1z, ..., pNx, pNy, pNz. Column k holds
    the frame k steps before the window head, so column 0 is the newest.
    """
    _check_window(frames, window_len)
    return np.stack([f.positions.reshape(-1) for f in frames], axis=1)


def build_directional_matrix(frames: Sequence[ColonoscopeFrame], window_len: int) -> np.ndarray:
    """Same layout as the positional matrix, using the unit directions."""
    _check_window(frames, window_len)
    return np.stack([f.directions.reshape(-1) for f in frames], axis=1)


def _clamp01(arr: np.ndarray, counter: ClampCounter | None) -> np.ndarray:
    out_of_range = int(np.count_nonzero((arr < 0.0) | (arr > 1.0)))
    if out_of_range:
        (counter or clamp_counter).add(out_of_range)
        arr = np.clip(arr, 0.0, 1.0)
    return arr


def normalize(
    values: np.ndarray,
    stats: NormalizationStats,
    kind: str,
    clamp: bool = True,
    counter: ClampCounter | None = None,
) -> np.ndarray:
    """Map raw features into [0, 1].

    kind "position": per-axis min-max; the leading axis of `values` must
    cycle x, y, z (rows of a positional matrix, or a flat coordinate
    vector). kind "direction": (d + offset) * scale elementwise. kind
    "length": scalar min-max. Out-of-range results (possible on held-out
    data) are clamped and counted unless `clamp` is false.
    """
    values = np.asarray(values, dtype=np.float64)
    if kind == "position":
        if values.shape[0] % 3 != 0:
            raise ValueError(f"position data must have a leading axis divisible by 3, got {values.shape}")
        reps = values.shape[0] // 3
        lo = np.tile(stats.pos_min, reps)
        hi = np.tile(stats.pos_max, reps)
        shape = (-1,) + (1,) * (values.ndim - 1)
        out = (values - lo.reshape(shape)) / (hi - lo).reshape(shape)
    elif kind == "direction":
        out = (values + stats.dir_offset) * stats.dir_scale
    elif kind == "length":
        out = (values - stats.len_min) / (stats.len_max - stats.len_min)
    else:
        raise ValueError(f"unknown normalization kind '{kind}'")
    if clamp:
        out = _clamp01(out, counter)
    return out


def denormalize(values: np.ndarray, stats: NormalizationStats, kind: str) -> np.ndarray:
    """Inverse of normalize for in-range values."""
    values = np.asarray(values, dtype=np.float64)
    if kind == "position":
        if values.shape[0] % 3 != 0:
            raise ValueError(f"position data must have a leading axis divisible by 3, got {values.shape}")
        reps = values.shape[0] // 3
        lo = np.tile(stats.pos_min, reps)
        hi = np.tile(stats.pos_max, reps)
        shape = (-1,) + (1,) * (values.ndim - 1)
        return values * (hi - lo).reshape(shape) + lo.reshape(shape)
    if kind == "direction":
        return values / stats.dir_scale - stats.dir_offset
    if kind == "length":
        return values * (stats.len_max - stats.len_min) + stats.len_min
    raise ValueError(f"unknown normalization kind '{kind}'")


def compute_normalization_stats(recordings: Sequence[InsertionRecording]) -> NormalizationStats:
    """Pool sensor positions and colon markers per axis, and insertion
    lengths overall, across the given (training) recordings."""
    if not recordings:
        raise ValueError("cannot compute stats from zero recordings")
    points = []
    lengths = []
    for rec in recordings:
        for scope, colon in rec.frames:
            points.append(scope.positions)
            points.append(colon.markers)
            lengths.append(scope.insertion_length)
    cloud = np.concatenate(points, axis=0)
    return NormalizationStats(
        pos_min=cloud.min(axis=0),
        pos_max=cloud.max(axis=0),
        len_min=float(min(lengths)),
        len_max=float(max(lengths)),
    )


def extract_patches(matrix: np.ndarray, patch_rows: int, patch_cols: int) -> np.ndarray:
    """Cut a (R, C) matrix into non-overlapping (patch_rows x patch_cols)
    tiles and flatten each row-major.

    Tiles are ordered row-major over the tile grid (top-left tile first).
    Returns (R*C / (patch_rows*patch_cols), patch_rows*patch_cols).
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    rows, cols = matrix.shape
    if rows % patch_rows != 0:
        raise ValueError(f"patch height {patch_rows} does not divide the {rows} matrix rows")
    if cols % patch_cols != 0:
        raise ValueError(f"patch width {patch_cols} does not divide the {cols} matrix columns")
    grid = matrix.reshape(rows // patch_rows, patch_rows, cols // patch_cols, patch_cols)
    return grid.transpose(0, 2, 1, 3).reshape(-1, patch_rows * patch_cols)


def reassemble_patches(patches: np.ndarray, rows: int, cols: int, patch_rows: int, patch_cols: int) -> np.ndarray:
    """Inverse of extract_patches."""
    patches = np.asarray(patches, dtype=np.float64)
    grid = patches.reshape(rows // patch_rows, cols // patch_cols, patch_rows, patch_cols)
    return grid.transpose(0, 2, 1, 3).reshape(rows, cols)


def build_window_features(
    window: Sequence[ColonoscopeFrame],
    stats: NormalizationStats,
    window_len: int,
    patch_rows: int,
    patch_cols: int,
    counter: ClampCounter | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized model inputs for one window of frames (newest first):
    the stacked patch matrix (positional patches then directional patches,
    2S rows) and the normalized insertion-length vector."""
    pos = normalize(build_positional_matrix(window, window_len), stats, "position", counter=counter)
    dirs = normalize(build_directional_matrix(window, window_len), stats, "direction", counter=counter)
    xi = np.concatenate(
        [
            extract_patches(pos, patch_rows, patch_cols),
            extract_patches(dirs, patch_rows, patch_cols),
        ],
        axis=0,
    )
    raw_lengths = np.array([f.insertion_length for f in window])
    lengths = normalize(raw_lengths, stats, "length", counter=counter)
    return xi, lengths


def make_window_samples(
    rec: InsertionRecording,
    stats: NormalizationStats,
    window_len: int,
    patch_rows: int,
    patch_cols: int,
    counter: ClampCounter | None = None,
) -> list[WindowSample]:
    """Slide a window of `window_len` frames over a recording.

    One sample per head index t_c in [window_len, T]; the window spans
    t_c down to t_c - window_len + 1. Recordings shorter than one window
    yield an empty list and a ShortRecordingWarning.
    """
    scope = rec.scope_frames
    colon = rec.colon_frames
    total = len(rec)
    if total < window_len:
        warnings.warn(
            f"recording '{rec.id}' has {total} frames, shorter than one window of {window_len}; no samples",
            ShortRecordingWarning,
            stacklevel=2,
        )
        return []
    samples = []
    for head in range(window_len - 1, total):
        window = scope[head::-1][:window_len]
        xi, lengths = build_window_features(
            window, stats, window_len, patch_rows, patch_cols, counter=counter
        )
        target = colon[head]
        target_norm = normalize(target.markers.reshape(-1), stats, "position", counter=counter)
        samples.append(
            WindowSample(
                xi=xi,
                lengths=lengths,
                target=target,
                target_norm=target_norm,
                t_c=scope[head].t,
                recording_id=rec.id,
            )
        )
    return samples


def loocv_split(recordings: Sequence[InsertionRecording]) -> list[Fold]:
    """Leave-one-recording-out folds. Each fold holds out one recording and
    recomputes normalization stats from the remaining ones."""
    if len(recordings) < 2:
        raise ValueError(f"leave-one-out split needs at least 2 recordings, got {len(recordings)}")
    ids = [r.id for r in recordings]
    if len(set(ids)) != len(ids):
        raise ValueError("recording ids must be unique")
    folds = []
    for i, test in enumerate(recordings):
        train = tuple(r for j, r in enumerate(recordings) if j != i)
        folds.append(Fold(train=train, test=test, stats=compute_normalization_stats(train)))
    return folds


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _vec3_list(name: str, raw, count: int, lineno: int, path: Path) -> np.ndarray:
    arr = np.asarray(raw, dtype=np.float64)
    if arr.shape != (count, 3):
        raise RecordingFormatError(
            f"{path}:{lineno}: field '{name}' must be {count} triples, got shape {arr.shape}"
        )
    return arr


def load_recording(path: str | Path) -> InsertionRecording:
    """Read a recording from a JSON-lines file plus its metadata sidecar.

    Each line holds one frame pair; see save_recording for the layout.
    Violations raise RecordingFormatError naming the line and field.
    """
    path = Path(path)
    meta_path = _sidecar_path(path)
    rec_id = path.stem
    sample_rate = 6.0
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
        rec_id = meta.get("id", rec_id)
        sample_rate = float(meta.get("sample_rate", sample_rate))
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordingFormatError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            try:
                t = obj["t"]
                scope_obj = obj["scope"]
                colon_obj = obj["colon"]
                pos = _vec3_list("scope.pos", scope_obj["pos"], SENSOR_COUNT, lineno, path)
                dirs = _vec3_list("scope.dir", scope_obj["dir"], SENSOR_COUNT, lineno, path)
                length = float(scope_obj["len"])
                markers = _vec3_list("colon.markers", colon_obj["markers"], MARKER_COUNT, lineno, path)
            except KeyError as exc:
                raise RecordingFormatError(f"{path}:{lineno}: missing field {exc}") from exc
            except (TypeError, ValueError) as exc:
                if isinstance(exc, RecordingFormatError):
                    raise
                raise RecordingFormatError(f"{path}:{lineno}: malformed frame: {exc}") from exc
            try:
                scope = ColonoscopeFrame(t=t, positions=pos, directions=dirs, insertion_length=length)
                colon = ColonFrame(t=t, markers=markers)
            except ValueError as exc:
                raise RecordingFormatError(f"{path}:{lineno}: {exc}") from exc
            pairs.append((scope, colon))
    if not pairs:
        raise RecordingFormatError(f"{path}: no frames")
    try:
        return InsertionRecording(id=rec_id, frames=tuple(pairs), sample_rate=sample_rate)
    except ValueError as exc:
        raise RecordingFormatError(f"{path}: {exc}") from exc


def save_recording(rec: InsertionRecording, path: str | Path) -> None:
    """Write a recording as JSON lines, one frame pair per line, with a
    .meta.json sidecar carrying the id and sample rate. Round-trips all
    numeric fields exactly (floats serialized via repr)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for scope, colon in rec.frames:
            obj = {
                "t": scope.t,
                "scope": {
                    "pos": scope.positions.tolist(),
                    "dir": scope.directions.tolist(),
                    "len": scope.insertion_length,
                },
                "colon": {"markers": colon.markers.tolist()},
            }
            fh.write(json.dumps(obj) + "\n")
    _sidecar_path(path).write_text(
        json.dumps({"id": rec.id, "sample_rate": rec.sample_rate}, indent=2) + "\n",
        encoding="utf-8",
    )
