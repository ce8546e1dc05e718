"""Shared domain types, planar geometry and covariance helpers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

PSD_FLOOR = 1e-9
KNOWN_CONDITIONS = ("sunny", "night", "snowy")


def wrap_angle(a):
    """Wrap an angle (scalar or array) into (-pi, pi]; in-range values pass through exactly."""
    if np.ndim(a) == 0:
        a = float(a)
        if not math.isfinite(a):
            raise ValueError(f"angle must be finite, got {a!r}")
        r = a - 2.0 * math.pi * math.ceil((a - math.pi) / (2.0 * math.pi))
        if r <= -math.pi:
            r += 2.0 * math.pi
        elif r > math.pi:
            r -= 2.0 * math.pi
        return r
    a = np.asarray(a, dtype=np.float64)
    r = a - 2.0 * np.pi * np.ceil((a - np.pi) / (2.0 * np.pi))
    if not np.isfinite(r).all():
        raise ValueError("angles must be finite")
    # rounding can land exactly on an excluded endpoint
    if ((r <= -np.pi) | (r > np.pi)).any():
        r = np.where(r <= -np.pi, r + 2.0 * np.pi, r)
        r = np.where(r > np.pi, r - 2.0 * np.pi, r)
    return r


def rotation(heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.array([[c, -s], [s, c]])


def rotate_cov(c, heading: float) -> np.ndarray:
    """Rotate a 2x2 covariance from the ego frame into the inertial frame.

    Returns ``Rot(heading) @ c @ Rot(heading).T``, symmetrized.
    """
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (2, 2):
        raise ValueError(f"expected a 2x2 covariance, got shape {c.shape}")
    if not (np.all(np.isfinite(c)) and math.isfinite(heading)):
        raise ValueError("covariance and heading must be finite")
    rot = rotation(heading)
    out = rot @ c @ rot.T
    return 0.5 * (out + out.T)


def psd_repair(m, floor: float = PSD_FLOOR) -> np.ndarray:
    """Symmetrize ``m`` and lift every eigenvalue to at least ``floor``.

    Matrices that are already symmetric PSD with eigenvalues above the floor
    come back as ``(m + m.T) / 2`` untouched.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix must be finite")
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    if w[0] >= floor:
        return sym
    w = np.maximum(w, floor)
    out = (v * w) @ v.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class Pose2:
    """Planar pose in the inertial frame; heading kept in (-pi, pi]."""

    x: float
    y: float
    heading: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def distance(self, other: "Pose2") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


def check_condition(condition: str) -> str:
    if not isinstance(condition, str) or not condition:
        raise ValueError(f"condition must be a non-empty string, got {condition!r}")
    return condition


@dataclass(frozen=True, eq=False)
class Frame:
    """One database or query observation with its ground-truth pose.

    ``corruption`` is the fraction by which keypoint matches involving this
    frame are suppressed (0 for clean frames).
    """

    frame_id: int
    traversal_id: int
    t: float
    pose: Pose2
    condition: str
    descriptor: np.ndarray
    appearance_seed: int = 0
    corruption: float = 0.0

    def __post_init__(self):
        check_condition(self.condition)
        desc = np.array(self.descriptor, dtype=np.float64)
        if desc.ndim != 1:
            raise ValueError("descriptor must be a 1-d vector")
        desc.setflags(write=False)
        object.__setattr__(self, "descriptor", desc)
        if not 0.0 <= self.corruption <= 1.0:
            raise ValueError(f"corruption must lie in [0, 1], got {self.corruption}")

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.traversal_id == other.traversal_id
            and self.t == other.t
            and self.pose == other.pose
            and self.condition == other.condition
            and np.array_equal(self.descriptor, other.descriptor)
            and self.appearance_seed == other.appearance_seed
            and self.corruption == other.corruption
        )

    __hash__ = None


class FrameBatch:
    """Column views over an arbitrary sequence of frames (no ordering required)."""

    def __init__(self, frames: Sequence[Frame]):
        self.frames = tuple(frames)
        if self.frames and len({f.descriptor.shape for f in self.frames}) != 1:
            raise ValueError("descriptor length differs within batch")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([[f.pose.x, f.pose.y] for f in self.frames]).reshape(-1, 2)

    @cached_property
    def headings(self) -> np.ndarray:
        return np.array([f.pose.heading for f in self.frames])

    @cached_property
    def times(self) -> np.ndarray:
        return np.array([f.t for f in self.frames])

    @cached_property
    def frame_ids(self) -> np.ndarray:
        return np.array([f.frame_id for f in self.frames], dtype=np.int64)

    @cached_property
    def descriptors(self) -> np.ndarray:
        if not self.frames:
            return np.empty((0, 0))
        return np.stack([f.descriptor for f in self.frames])

    @cached_property
    def conditions(self) -> np.ndarray:
        return np.array([f.condition for f in self.frames], dtype=object)

    @cached_property
    def corruption(self) -> np.ndarray:
        return np.array([f.corruption for f in self.frames])


def as_batch(frames) -> FrameBatch:
    if isinstance(frames, (FrameBatch, Traversal)):
        return frames
    if isinstance(frames, Frame):
        frames = [frames]
    return FrameBatch(frames)


@dataclass(frozen=True, eq=False)
class Traversal(FrameBatch):
    """An ordered pass along the route.

    Column views (``positions``, ``descriptors`` ...) are cached numpy arrays
    used by the vectorized retrieval and calibration code.
    """

    traversal_id: int
    frames: Sequence[Frame] = field(default_factory=tuple)

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        for f in frames:
            if f.traversal_id != self.traversal_id:
                raise ValueError(
                    f"frame {f.frame_id} belongs to traversal {f.traversal_id}, "
                    f"not {self.traversal_id}"
                )
        ts = [f.t for f in frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timestamps of traversal {self.traversal_id} not strictly increasing")
        if frames and len({f.descriptor.shape for f in frames}) != 1:
            raise ValueError("descriptor length differs within traversal")

    def __eq__(self, other):
        if not isinstance(other, Traversal):
            return NotImplemented
        return self.traversal_id == other.traversal_id and list(self.frames) == list(other.frames)

    __hash__ = None

    @property
    def condition(self) -> str | None:
        conds = {f.condition for f in self.frames}
        return conds.pop() if len(conds) == 1 else None


def check_unique_frame_ids(traversals: Sequence[Traversal]) -> None:
    seen: set[int] = set()
    for trav in traversals:
        for f in trav:
            if f.frame_id in seen:
                raise ValueError(f"duplicate frame_id {f.frame_id}")
            seen.add(f.frame_id)
