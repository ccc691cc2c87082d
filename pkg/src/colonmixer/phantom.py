"""Synthetic phantom withdrawals: paired scope/colon recordings along a
colon-like centerline.

The scope tip starts at the cecum end and retracts toward the anus at a
fixed speed. Six sensors trail the tip at fixed arc spacing (continuing on
a straight line once they leave through the anus). Colon markers sit at
fixed arc stations and get displaced sideways by a smooth bump that travels
with the scope tip, tapered to zero at both colon ends so the cecum and
anus markers stay anchored. The goal is a learnable scope-to-shape mapping
at desk scale, not anatomical fidelity.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .data import (
    MARKER_COUNT,
    SENSOR_COUNT,
    ColonFrame,
    ColonoscopeFrame,
    InsertionRecording,
)

__all__ = ["MIN_FRAMES", "PhantomSpec", "generate_recording", "generate_suite"]

# One estimation window at the default configuration.
MIN_FRAMES = 18

SAMPLE_RATE_HZ = 6.0

# Clearance required between non-neighboring control points (coarse
# self-intersection guard).
_MIN_CLEARANCE = 25.0

# Colon-like centerline, cecum first, anus last (mm): up the right side,
# across, down the left, through a sigmoid bend to the anus. Roughly 1.5 m
# end to end so a full withdrawal fits ~170 frames at ~7 mm/frame.
_DEFAULT_CONTROL_POINTS = 1.3 * np.array(
    [
        [-180.0, -150.0, 40.0],
        [-195.0, -60.0, 30.0],
        [-175.0, 60.0, 10.0],
        [-80.0, 95.0, 60.0],
        [0.0, 75.0, 85.0],
        [90.0, 105.0, 60.0],
        [165.0, 125.0, 10.0],
        [185.0, 15.0, 20.0],
        [170.0, -85.0, 35.0],
        [95.0, -150.0, 60.0],
        [30.0, -120.0, 35.0],
        [0.0, -185.0, 15.0],
        [-5.0, -240.0, 0.0],
    ]
)


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and motion parameters of one synthetic withdrawal."""

    control_points: np.ndarray
    marker_stations: np.ndarray
    deform_gain: float = 85.0
    deform_width: float = 150.0
    noise_pos: float = 1.0
    noise_dir: float = 0.02
    withdrawal_speed: float = 7.0
    sensor_spacing: float = 90.0
    seed: int = 0

    def __post_init__(self):
        pts = np.asarray(self.control_points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 4:
            raise ValueError(f"centerline needs at least 4 control points of 3 coords, got {pts.shape}")
        diffs = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if np.any(diffs < 1.0):
            raise ValueError("consecutive centerline control points must be at least 1 mm apart")
        for i in range(len(pts)):
            for j in range(i + 2, len(pts)):
                if np.linalg.norm(pts[i] - pts[j]) < _MIN_CLEARANCE:
                    raise ValueError(
                        f"centerline self-intersects at coarse scale: control points {i} and {j} "
                        f"are closer than {_MIN_CLEARANCE} mm"
                    )
        stations = np.asarray(self.marker_stations, dtype=np.float64)
        if stations.shape != (MARKER_COUNT,):
            raise ValueError(f"need {MARKER_COUNT} marker stations, got shape {stations.shape}")
        if np.any(np.diff(stations) <= 0):
            raise ValueError("marker stations must be strictly increasing in arc length")
        if stations[0] < 0:
            raise ValueError("marker stations must be non-negative arc lengths")
        for name, v in (
            ("deform_gain", self.deform_gain),
            ("deform_width", self.deform_width),
            ("noise_pos", self.noise_pos),
            ("noise_dir", self.noise_dir),
        ):
            if v < 0:
                raise ValueError(f"{name} must be non-negative, got {v}")
        if self.withdrawal_speed <= 0:
            raise ValueError("withdrawal speed must be positive")
        if self.sensor_spacing <= 0:
            raise ValueError("sensor spacing must be positive")
        ro_pts = pts.copy()
        ro_pts.flags.writeable = False
        ro_st = stations.copy()
        ro_st.flags.writeable = False
        object.__setattr__(self, "control_points", ro_pts)
        object.__setattr__(self, "marker_stations", ro_st)

    @classmethod
    def default(cls, seed: int = 0) -> "PhantomSpec":
        line = _Centerline(_DEFAULT_CONTROL_POINTS)
        stations = np.linspace(0.02, 0.98, MARKER_COUNT) * line.total_length
        return cls(control_points=_DEFAULT_CONTROL_POINTS, marker_stations=stations, seed=seed)

    @classmethod
    def rigid(cls, seed: int = 0) -> "PhantomSpec":
        """Degenerate mode: no deformation, no noise; the colon never moves."""
        return dataclasses.replace(cls.default(seed), deform_gain=0.0, noise_pos=0.0, noise_dir=0.0)


class _Centerline:
    """Arc-length parameterized cubic spline through the control points."""

    _DENSE = 4096

    def __init__(self, control_points: np.ndarray):
        pts = np.asarray(control_points, dtype=np.float64)
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        self._spline = CubicSpline(chord, pts, axis=0)
        ts = np.linspace(0.0, chord[-1], self._DENSE)
        dense = self._spline(ts)
        seg = np.linalg.norm(np.diff(dense, axis=0), axis=1)
        self._arc = np.concatenate([[0.0], np.cumsum(seg)])
        self._ts = ts
        self.total_length = float(self._arc[-1])

    def _param(self, s):
        return np.interp(s, self._arc, self._ts)

    def point(self, s):
        return self._spline(self._param(s))

    def tangent(self, s):
        d = self._spline(self._param(s), 1)
        d = np.atleast_2d(d)
        out = d / np.linalg.norm(d, axis=1, keepdims=True)
        return out[0] if np.ndim(s) == 0 else out


def _perpendicular(tangent: np.ndarray) -> np.ndarray:
    up = np.array([0.0, 0.0, 1.0])
    v = np.cross(tangent, up)
    n = np.linalg.norm(v)
    if n < 1e-6:
        v = np.cross(tangent, np.array([1.0, 0.0, 0.0]))
        n = np.linalg.norm(v)
    return v / n


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def generate_recording(spec: PhantomSpec, frames: int, rec_id: str = "phantom") -> InsertionRecording:
    """Simulate one withdrawal of `frames` steps.

    The tip's arc position advances by withdrawal_speed per frame from the
    cecum end; insertion length is the remaining arc distance to the anus,
    so it falls by exactly the speed each frame.
    """
    if frames < MIN_FRAMES:
        raise ValueError(f"recording needs at least {MIN_FRAMES} frames, got {frames}")
    line = _Centerline(spec.control_points)
    total = line.total_length
    stations = spec.marker_stations
    if stations[-1] > total:
        raise ValueError(
            f"marker station {stations[-1]:.1f} mm lies beyond the {total:.1f} mm centerline"
        )
    travel = spec.withdrawal_speed * (frames - 1)
    if travel > total:
        raise ValueError(
            f"withdrawal of {travel:.1f} mm over {frames} frames runs past the anus "
            f"({total:.1f} mm centerline); lower the speed or frame count"
        )
    rng = np.random.default_rng(spec.seed)
    rest_markers = line.point(stations)
    tangents = line.tangent(stations)
    bump_dirs = np.stack([_perpendicular(t) for t in tangents])
    # Taper anchors both colon ends: zero displacement at the first and
    # last stations, peak in the middle.
    span = stations[-1] - stations[0]
    u = (stations - stations[0]) / span
    taper = 4.0 * u * (1.0 - u)
    exit_point = line.point(total)
    exit_tangent = line.tangent(total)

    pairs = []
    for t in range(1, frames + 1):
        s_tip = spec.withdrawal_speed * (t - 1)
        positions = np.empty((SENSOR_COUNT, 3))
        directions = np.empty((SENSOR_COUNT, 3))
        for k in range(SENSOR_COUNT):
            s = s_tip + k * spec.sensor_spacing
            if s <= total:
                positions[k] = line.point(s)
                aim = -line.tangent(s)
            else:
                positions[k] = exit_point + (s - total) * exit_tangent
                aim = -exit_tangent
            if spec.noise_dir > 0:
                aim = aim + spec.noise_dir * rng.standard_normal(3)
            directions[k] = _unit(aim)
        if spec.noise_pos > 0:
            positions = positions + spec.noise_pos * rng.standard_normal((SENSOR_COUNT, 3))
        bump = spec.deform_gain * taper * np.exp(
            -((stations - s_tip) ** 2) / (2.0 * spec.deform_width**2)
        )
        markers = rest_markers + bump[:, None] * bump_dirs
        scope = ColonoscopeFrame(
            t=t,
            positions=positions,
            directions=directions,
            insertion_length=total - s_tip,
        )
        pairs.append((scope, ColonFrame(t=t, markers=markers)))
    return InsertionRecording(id=rec_id, frames=tuple(pairs), sample_rate=SAMPLE_RATE_HZ)


def generate_suite(
    base_spec: PhantomSpec | None = None,
    count: int = 8,
    frames: int = 173,
) -> list[InsertionRecording]:
    """Generate `count` recordings with per-recording parameter jitter.

    Each recording jitters withdrawal speed (±15%), deformation gain
    (±10%), noise levels (±20%), and frame count (±5) around the base
    spec, all derived deterministically from the base seed.
    """
    if count < 2:
        raise ValueError(f"suite needs at least 2 recordings, got {count}")
    spec = base_spec if base_spec is not None else PhantomSpec.default()
    children = np.random.SeedSequence(spec.seed).spawn(count)
    recordings = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        jittered = dataclasses.replace(
            spec,
            withdrawal_speed=spec.withdrawal_speed * rng.uniform(0.85, 1.15),
            deform_gain=spec.deform_gain * rng.uniform(0.90, 1.10),
            noise_pos=spec.noise_pos * rng.uniform(0.80, 1.20),
            noise_dir=spec.noise_dir * rng.uniform(0.80, 1.20),
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        n_frames = frames + int(rng.integers(-5, 6))
        recordings.append(generate_recording(jittered, n_frames, rec_id=f"phantom-{i:02d}"))
    return recordings
