"""Center-line checkpoints on an infinitely repeating track and local arc fits."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DegenerateCircle


@dataclass(frozen=True)
class Arc:
    """Circle through three checkpoints. ``center`` is ``(lat, long)``."""

    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class TrackLayout:
    """One period of center-line checkpoints, repeated along ``long``.

    ``checkpoints`` is an ``(k, 2)`` array of ``(long, lat)`` rows with
    ``long`` strictly increasing inside ``[0, pattern_period)``.
    """

    checkpoints: np.ndarray
    width: float = 4.0
    pattern_period: float = 120.0
    perturbation: float = 1e-3

    def __post_init__(self):
        cp = np.asarray(self.checkpoints, dtype=float)
        if cp.ndim != 2 or cp.shape[1] != 2 or cp.shape[0] < 3:
            raise ValueError("checkpoints must be a (k>=3, 2) array of (long, lat)")
        if np.any(np.diff(cp[:, 0]) <= 0):
            raise ValueError("checkpoint long positions must be strictly increasing")
        if cp[-1, 0] - cp[0, 0] >= self.pattern_period:
            raise ValueError("checkpoints exceed one pattern period")
        object.__setattr__(self, "checkpoints", cp)
        pts = self.points(np.arange(cp.shape[0] + 2))
        for a, b, c in zip(pts, pts[1:], pts[2:]):
            if abs(_cross(a, b, c)) < 1e-12:
                raise DegenerateCircle("three consecutive checkpoints are collinear")

    @property
    def count(self) -> int:
        return self.checkpoints.shape[0]

    def points(self, k) -> np.ndarray:
        """Checkpoints with global (unwrapped) indices ``k`` as ``(lat, long)`` rows."""
        k = np.asarray(k)
        base = self.checkpoints[np.mod(k, self.count)]
        shift = np.floor_divide(k, self.count) * self.pattern_period
        return np.stack([base[..., 1], base[..., 0] + shift], axis=-1)

    def nearest_indices(self, position, count: int = 3) -> np.ndarray:
        lat, long = float(position[0]), float(position[1])
        spacing = self.pattern_period / self.count
        k0 = int(math.floor(long / spacing))
        cand = np.arange(k0 - 4, k0 + 6)
        pts = self.points(cand)
        d = np.hypot(pts[:, 0] - lat, pts[:, 1] - long)
        order = np.lexsort((cand, d))
        return np.sort(cand[order[:count]])

    def center_lat(self, long: float) -> float:
        """Piecewise-linear center-line lateral offset (for sampling only)."""
        k0 = int(math.floor(long / (self.pattern_period / self.count))) - 1
        pts = self.points(np.arange(k0, k0 + 4))
        return float(np.interp(long, pts[:, 1], pts[:, 0]))


def _cross(a, b, c) -> float:
    return float((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def circumcircle(a, b, c) -> Arc:
    """Circle through three points given as ``(lat, long)``."""
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    cx, cy = float(c[0]), float(c[1])
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-14:
        raise DegenerateCircle("points are collinear")
    a2, b2, c2 = ax * ax + ay * ay, bx * bx + by * by, cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / d
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / d
    return Arc((ux, uy), math.hypot(ax - ux, ay - uy))


def fit_arc(track: TrackLayout, position) -> Arc:
    """Circumcircle through the three checkpoints nearest to ``(lat, long)``."""
    pts = track.points(track.nearest_indices(position))
    # subtract a reference point to keep the circumcircle algebra well conditioned
    ref = pts[1]
    arc = circumcircle(*(pts - ref))
    return Arc((float(arc.center[0] + ref[0]), float(arc.center[1] + ref[1])), float(arc.radius))


def on_track(track: TrackLayout, position, arc: Arc | None = None) -> bool:
    arc = arc or fit_arc(track, position)
    d2 = (position[0] - arc.center[0]) ** 2 + (position[1] - arc.center[1]) ** 2
    half = track.width / 2
    return (arc.radius - half) ** 2 <= d2 <= (arc.radius + half) ** 2


def default_track(width: float = 4.0, spacing: float = 2.5, straight: float = 20.0,
                  turn: float = 40.0, amplitude: float = 4.0, jitter: float = 1e-3) -> TrackLayout:
    """Straight, left half-sine bend, straight, mirrored bend; period 120 m by default."""
    period = 2 * (straight + turn)
    s = np.arange(0.0, period - 1e-9, spacing)
    lat = np.zeros_like(s)
    for k, sk in enumerate(s):
        if straight < sk < straight + turn:
            lat[k] = amplitude * math.sin(math.pi * (sk - straight) / turn)
        elif 2 * straight + turn < sk < period:
            lat[k] = -amplitude * math.sin(math.pi * (sk - 2 * straight - turn) / turn)
        else:
            lat[k] = jitter if k % 2 == 0 else -jitter
    return TrackLayout(np.column_stack([s, lat]), width, period, jitter)


def load_track(path, width: float = 4.0, period: float | None = None) -> TrackLayout:
    """Read ``long lat`` pairs, one per line; ``#`` starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"expected 'long lat', got {line!r}", lineno)
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(str(exc), lineno) from None
    cp = np.array(rows)
    if cp.shape[0] < 3:
        raise ConfigError("need at least three checkpoints")
    if period is None:
        period = cp[-1, 0] - cp[0, 0] + (cp[-1, 0] - cp[-2, 0])
    return TrackLayout(cp, width, period)
