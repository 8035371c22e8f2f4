"""Piecewise-linear race tracks: projection, progress and boundary distance."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError

MIN_SEGMENT = 1e-9


class Projection(NamedTuple):
    s: float
    lateral: float
    segment_index: int


@dataclass(frozen=True, eq=False)
class Track:
    """Centerline polyline with constant half width.

    For closed tracks an extra segment joins the last waypoint back to the
    first and arc length wraps modulo the total length.
    """

    waypoints: np.ndarray
    half_width: float
    start_s: float = 0.0
    finish_s: float | None = None
    closed: bool = False
    name: str = ""
    seg_start: np.ndarray = field(init=False, repr=False)
    seg_vec: np.ndarray = field(init=False, repr=False)
    seg_len: np.ndarray = field(init=False, repr=False)
    tangents: np.ndarray = field(init=False, repr=False)
    cumulative_arclength: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        wp = np.array(self.waypoints, dtype=float)
        if wp.ndim != 2 or wp.shape[1] != 2 or wp.shape[0] < 2:
            raise ConfigurationError("a track needs at least two 2D waypoints")
        if not np.all(np.isfinite(wp)):
            raise ConfigurationError("track waypoints must be finite")
        pts = np.vstack([wp, wp[:1]]) if self.closed else wp
        vec = np.diff(pts, axis=0)
        length = np.hypot(vec[:, 0], vec[:, 1])
        if np.any(length <= MIN_SEGMENT):
            k = int(np.argmax(length <= MIN_SEGMENT))
            raise ConfigurationError(f"track segment {k} is degenerate (length {length[k]:.3g})")
        if not self.half_width > 0:
            raise ConfigurationError("half_width must be positive")
        cum = np.concatenate([[0.0], np.cumsum(length)])
        total = cum[-1]
        finish = total if self.finish_s is None else float(self.finish_s)
        if not (0.0 <= self.start_s < finish <= total + 1e-12):
            raise ConfigurationError(
                f"need 0 <= start_s < finish_s <= length ({self.start_s}, {finish}, {total})"
            )
        wp.setflags(write=False)
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "finish_s", finish)
        object.__setattr__(self, "seg_start", pts[:-1])
        object.__setattr__(self, "seg_vec", vec)
        object.__setattr__(self, "seg_len", length)
        object.__setattr__(self, "tangents", vec / length[:, None])
        object.__setattr__(self, "cumulative_arclength", cum)

    @property
    def length(self):
        return float(self.cumulative_arclength[-1])

    @property
    def race_distance(self):
        """Progress needed to finish."""
        return self.finish_s - self.start_s

    # -- queries ---------------------------------------------------------

    def project_many(self, points):
        """Vectorised closest-point projection.

        Returns ``(s, lateral, segment_index, closest)`` with the leading
        shape of ``points``.  Ties go to the lowest segment index.
        """
        p = np.asarray(points, dtype=float)
        lead = p.shape[:-1]
        p = p.reshape(-1, 2)
        rel = p[:, None, :] - self.seg_start[None, :, :]
        t = np.einsum("pkd,kd->pk", rel, self.seg_vec) / self.seg_len**2
        np.clip(t, 0.0, 1.0, out=t)
        diff = rel - t[:, :, None] * self.seg_vec[None]
        d2 = np.einsum("pkd,pkd->pk", diff, diff)
        k = np.argmin(d2, axis=1)
        rows = np.arange(p.shape[0])
        tk = t[rows, k]
        s = self.cumulative_arclength[k] + tk * self.seg_len[k]
        lateral = np.sqrt(d2[rows, k])
        closest = self.seg_start[k] + tk[:, None] * self.seg_vec[k]
        return (
            s.reshape(lead),
            lateral.reshape(lead),
            k.reshape(lead),
            closest.reshape(lead + (2,)),
        )

    def project(self, point) -> Projection:
        s, lat, k, _ = self.project_many(np.asarray(point, dtype=float)[:2])
        return Projection(float(s), float(lat), int(k))

    def point_at(self, s):
        """Centerline point and unit tangent at arc length ``s``."""
        s = np.asarray(s, dtype=float)
        if self.closed:
            s = np.mod(s, self.length)
        k = np.clip(np.searchsorted(self.cumulative_arclength, s, side="right") - 1, 0, len(self.seg_len) - 1)
        frac = (s - self.cumulative_arclength[k]) / self.seg_len[k]
        pts = self.seg_start[k] + frac[..., None] * self.seg_vec[k]
        return pts, self.tangents[k]

    def normal_at(self, s):
        _, tan = self.point_at(s)
        return np.stack([-tan[..., 1], tan[..., 0]], axis=-1)

    def progress_of_s(self, s):
        if self.closed:
            return np.mod(s - self.start_s, self.length)
        return s - self.start_s

    # -- serialization ---------------------------------------------------

    def to_dict(self):
        return {
            "waypoints": self.waypoints.tolist(),
            "half_width": self.half_width,
            "start_s": self.start_s,
            "finish_s": self.finish_s,
            "closed": self.closed,
        }

    @classmethod
    def from_dict(cls, data, name=""):
        missing = {"waypoints", "half_width"} - set(data)
        if missing:
            raise ConfigurationError(f"track document lacks keys {sorted(missing)}")
        return cls(
            waypoints=np.asarray(data["waypoints"], dtype=float),
            half_width=float(data["half_width"]),
            start_s=float(data.get("start_s", 0.0)),
            finish_s=None if data.get("finish_s") is None else float(data["finish_s"]),
            closed=bool(data.get("closed", False)),
            name=name,
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            return cls.from_dict(json.load(fh), name=path.stem)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _xy(state):
    return np.asarray(state, dtype=float)[..., :2]


def project(track: Track, point) -> Projection:
    return track.project(point)


def progress(track: Track, state) -> float:
    """Arc length covered from the start line (the racing reward)."""
    return float(track.progress_of_s(track.project(_xy(state)).s))


def boundary_value(track: Track, state) -> float:
    """``lateral - half_width``; non-positive iff on the track."""
    return track.project(_xy(state)).lateral - track.half_width


def smooth_progress_gradient(track: Track, position):
    """d(progress)/d(position) with the segment assignment frozen at the
    current projection: the unit tangent of the assigned segment."""
    k = track.project(_xy(position)).segment_index
    return track.tangents[k].copy()


# -- shipped courses -----------------------------------------------------


def straight_track(length=30.0, half_width=0.6, runout=3.0):
    return Track(
        np.array([[0.0, 0.0], [length, 0.0]]),
        half_width,
        start_s=0.0,
        finish_s=length - runout,
        name="straight",
    )


def u_course(straight=7.0, total=20.0, half_width=0.6, arc_segments=60, runout=2.0):
    """Out-and-back course: straight along +x, left-hand semicircle, straight back.

    The semicircle radius is chosen so the polyline centerline is ``total`` long.
    """
    radius = (total - 2.0 * straight) / (2.0 * arc_segments * np.sin(np.pi / (2.0 * arc_segments)))
    ang = np.linspace(-np.pi / 2, np.pi / 2, arc_segments + 1)
    arc = np.column_stack([straight + radius * np.cos(ang), radius + radius * np.sin(ang)])
    pts = np.vstack([[[0.0, 0.0]], arc, [[0.0, 2.0 * radius]]])
    return Track(np.round(pts, 12), half_width, start_s=0.0, finish_s=total - runout, name="u_course")


def hairpin_course(straight=20.0, radius=2.5, half_width=0.8, arc_segments=48, runout=3.0):
    """Long out-and-back course with a wide hairpin."""
    ang = np.linspace(-np.pi / 2, np.pi / 2, arc_segments + 1)
    arc = np.column_stack([straight + radius * np.cos(ang), radius + radius * np.sin(ang)])
    pts = np.vstack([[[0.0, 0.0]], arc, [[0.0, 2.0 * radius]]])
    trk = Track(np.round(pts, 12), half_width, name="hairpin")
    return Track(trk.waypoints, half_width, start_s=0.0, finish_s=trk.length - runout, name="hairpin")
