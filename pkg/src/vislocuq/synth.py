"""Reproducible synthetic multi-traversal datasets.

Traversals are sampled along a shared route with a per-traversal lateral
offset and per-frame GPS jitter.  Global descriptors encode position,
condition and a per-traversal appearance "tone", plus per-frame noise whose
scale depends on the condition, so descriptor distance correlates with but
does not equal true distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from .core import KNOWN_CONDITIONS, Frame, Pose2, Traversal, check_condition
from .matcher import counter_hash, counter_normal

DESCRIPTOR_DIM = 16
FRAME_ID_STRIDE = 1_000_000

# descriptor layout: [0:2] position, [2:5] condition one-hot, [5:9] traversal tone
_POS = slice(0, 2)
_COND = slice(2, 5)
_TONE = slice(5, 9)

# keypoint suppression per unit severity, and descriptor noise added per unit severity
CORRUPTION_SUPPRESSION = {"blur_like": 0.95, "saltpepper_like": 0.98}


@dataclass(frozen=True)
class RouteSpec:
    waypoints: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != 2 or len(w) < 2:
            raise ValueError("a route needs at least two (x, y) waypoints")
        if np.any(np.linalg.norm(np.diff(w, axis=0), axis=1) == 0):
            raise ValueError("consecutive waypoints must be distinct")
        w.setflags(write=False)
        object.__setattr__(self, "waypoints", w)

    @property
    def cumulative(self) -> np.ndarray:
        seg = np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def at(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Points and tangent headings at arclengths ``s`` (clipped to the route)."""
        s = np.clip(np.asarray(s, dtype=np.float64), 0.0, self.length)
        cum = self.cumulative
        idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(cum) - 2)
        a, b = self.waypoints[idx], self.waypoints[idx + 1]
        frac = ((s - cum[idx]) / (cum[idx + 1] - cum[idx]))[..., None]
        d = b - a
        return a + frac * d, np.arctan2(d[..., 1], d[..., 0])


def default_route(length: float = 2000.0, n_waypoints: int = 600) -> RouteSpec:
    """A winding open loop rescaled to exactly ``length`` meters."""
    t = np.linspace(0.0, 1.8 * np.pi, n_waypoints)
    pts = np.column_stack(
        [np.cos(t) + 0.25 * np.cos(3 * t), 0.8 * np.sin(t) + 0.2 * np.sin(2 * t)]
    )
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    return RouteSpec(pts * (length / seg))


@dataclass(frozen=True)
class DescriptorConfig:
    position_scale: float = 10.0
    condition_weight: float = 1.0
    tone_sigma: float = 8.0
    noise_sigma: Mapping[str, float] = field(
        default_factory=lambda: {"sunny": 0.07, "snowy": 0.07, "night": 0.21}
    )
    default_noise_sigma: float = 0.07
    corruption_noise: float = 10.0
    outlier_rate: float = 0.01
    outlier_noise: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.outlier_rate < 1.0:
            raise ValueError("outlier_rate must lie in [0, 1)")
        if self.corruption_noise < 0 or self.outlier_noise < 0:
            raise ValueError("noise scales must be non-negative")

    def noise_for(self, condition: str) -> float:
        return float(self.noise_sigma.get(condition, self.default_noise_sigma))


@dataclass(frozen=True)
class TraversalSpec:
    condition: str
    traversal_id: int = 0
    sample_spacing: float = 1.0
    gps_jitter_sigma: float = 0.15
    lateral_offset_sigma: float = 0.5
    speed: float | Callable[[np.ndarray], np.ndarray] = 10.0
    rng_seed: int = 0
    start_offset: float = 0.0
    along_track_jitter: float = 0.0
    t0: float = 0.0
    descriptor: DescriptorConfig = field(default_factory=DescriptorConfig)

    def __post_init__(self):
        check_condition(self.condition)
        if not self.sample_spacing > 0:
            raise ValueError("sample_spacing must be positive")
        if self.gps_jitter_sigma < 0 or self.lateral_offset_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        if self.start_offset < 0:
            raise ValueError("start_offset must be non-negative")
        if not 0.0 <= self.along_track_jitter < 0.5:
            raise ValueError("along_track_jitter must lie in [0, 0.5)")


@dataclass(frozen=True)
class CorruptionSpec:
    segment: tuple[float, float] = (0.45, 0.5)
    mode: str = "blur_like"
    severity: float = 1.0

    def __post_init__(self):
        start, end = self.segment
        if not 0.0 <= start < end <= 1.0:
            raise ValueError(f"invalid corruption segment {self.segment}")
        if self.mode not in CORRUPTION_SUPPRESSION:
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        if not 0.0 <= self.severity <= 1.0:
            raise ValueError("severity must lie in [0, 1]")


def _condition_code(condition: str) -> np.ndarray:
    code = np.zeros(3)
    if condition in KNOWN_CONDITIONS:
        code[KNOWN_CONDITIONS.index(condition)] = 1.0
    return code


def _timestamps(s: np.ndarray, speed, t0: float) -> np.ndarray:
    if callable(speed):
        v = np.asarray(speed(s), dtype=np.float64)
        if np.any(v <= 0):
            raise ValueError("speed profile must be positive")
        inv = 1.0 / v
        dt = 0.5 * (inv[1:] + inv[:-1]) * np.diff(s)
        return t0 + np.concatenate([[0.0], np.cumsum(dt)])
    if not speed > 0:
        raise ValueError("speed must be positive")
    return t0 + (s - s[0]) / float(speed)


def generate_traversal(route: RouteSpec, spec: TraversalSpec) -> Traversal:
    """Sample one traversal of ``route``; a pure function of the specs."""
    rng = np.random.default_rng(spec.rng_seed)
    lateral = rng.normal(0.0, spec.lateral_offset_sigma) if spec.lateral_offset_sigma else 0.0
    cfg = spec.descriptor
    tone = rng.normal(0.0, cfg.tone_sigma, size=_TONE.stop - _TONE.start)

    # tolerance keeps the inclusive endpoint despite float accumulation
    n = int(math.floor((route.length - spec.start_offset) / spec.sample_spacing + 1e-9)) + 1
    s = spec.start_offset + spec.sample_spacing * np.arange(n)
    if spec.along_track_jitter:
        u = rng.uniform(-spec.along_track_jitter, spec.along_track_jitter, size=n)
        s = np.clip(s + u * spec.sample_spacing, 0.0, route.length)
    pts, heading = route.at(s)
    normal = np.column_stack([-np.sin(heading), np.cos(heading)])
    jitter = rng.normal(0.0, 1.0, size=(n, 2)) * spec.gps_jitter_sigma
    xy = pts + lateral * normal + jitter
    t = _timestamps(s, spec.speed, spec.t0)
    app_seeds = rng.integers(0, 2**62, size=n)

    desc = np.zeros((n, DESCRIPTOR_DIM))
    desc[:, _POS] = xy / cfg.position_scale
    desc[:, _COND] = cfg.condition_weight * _condition_code(spec.condition)
    desc[:, _TONE] = tone
    scale = np.full(n, cfg.noise_for(spec.condition))
    if cfg.outlier_rate:
        # a few frames whose global descriptor points somewhere unrelated
        u = (counter_hash(0x0DD, app_seeds, 0) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        scale[u < cfg.outlier_rate] = cfg.outlier_noise
    noise = _descriptor_noise(app_seeds)
    # the tone is a per-traversal offset; per-frame noise stays off those dims
    noise[:, _TONE] = 0.0
    desc += scale[:, None] * noise

    frames = [
        Frame(
            frame_id=spec.traversal_id * FRAME_ID_STRIDE + i,
            traversal_id=spec.traversal_id,
            t=float(t[i]),
            pose=Pose2(float(xy[i, 0]), float(xy[i, 1]), float(heading[i])),
            condition=spec.condition,
            descriptor=desc[i],
            appearance_seed=int(app_seeds[i]),
        )
        for i in range(n)
    ]
    return Traversal(spec.traversal_id, frames)


def _descriptor_noise(app_seeds, salt: int = 0) -> np.ndarray:
    dims = np.arange(DESCRIPTOR_DIM)
    return counter_normal(0x5EED + salt, np.asarray(app_seeds)[:, None], dims[None, :])


def _remap_seed(seed: int, mode: str) -> int:
    salt = 1 + list(CORRUPTION_SUPPRESSION).index(mode)
    return int(counter_hash(0xC0FFEE, seed, salt) & np.uint64(2**62 - 1))


def arclength_fraction(trav: Traversal) -> np.ndarray:
    if len(trav) < 2:
        return np.zeros(len(trav))
    seg = np.linalg.norm(np.diff(trav.positions, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    return cum / cum[-1]


def corrupt(q: Traversal, spec: CorruptionSpec, descriptor: DescriptorConfig | None = None) -> Traversal:
    """Mark the frames inside ``spec.segment`` as corrupted.

    Corrupted frames suppress keypoint matches by a mode-dependent factor and
    carry extra descriptor noise (Gaussian for blur, heavy tailed for
    salt-and-pepper) drawn from a remapped appearance seed.
    """
    if spec.severity == 0:
        return q
    cfg = descriptor or DescriptorConfig()
    frac = arclength_fraction(q)
    start, end = spec.segment
    inside = (frac >= start) & (frac < end) if end < 1.0 else (frac >= start)
    suppression = CORRUPTION_SUPPRESSION[spec.mode] * spec.severity
    frames = list(q.frames)
    for i in np.flatnonzero(inside):
        f = frames[i]
        seed = _remap_seed(f.appearance_seed, spec.mode)
        z = _descriptor_noise([seed], salt=1)[0]
        if spec.mode == "saltpepper_like":
            # Student-t with 3 dof from four more counter normals
            chi = (_descriptor_noise([seed], salt=2)[0, :3] ** 2).sum() / 3.0
            z = z / math.sqrt(chi)
        noise = cfg.corruption_noise * spec.severity * z
        keep = (1.0 - f.corruption) * (1.0 - suppression)
        frames[i] = replace(
            f,
            descriptor=f.descriptor + noise,
            appearance_seed=seed,
            corruption=float(1.0 - keep),
        )
    return Traversal(q.traversal_id, frames)


class Scenario(NamedTuple):
    databases: list[Traversal]
    queries: list[Traversal]


DATABASE_CONDITIONS = ("sunny",) * 3 + ("night",) * 3 + ("snowy",) * 3
QUERY_CONDITIONS = ("sunny", "night", "snowy")
QUERY_ID_BASE = 10


def traversal_seeds(seed: int, n: int) -> list[int]:
    """Independent per-traversal seeds spawned from one scenario seed."""
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(n)]


def make_paper_scenario(
    seed: int = 0,
    route_length: float = 2000.0,
    corruption: CorruptionSpec | Sequence[CorruptionSpec] | None = None,
    descriptor: DescriptorConfig | None = None,
    query_conditions: Sequence[str] = QUERY_CONDITIONS,
    along_track_jitter: float = 0.4,
    lateral_offset_sigma: float = 0.1,
    query_gps_jitter: float = 0.0,
) -> Scenario:
    """Nine database traversals (3 sunny, 3 night, 3 snowy) plus one query per condition.

    Database ids are 1..9, query ids start at 10.  Every traversal gets its
    own seed, lateral offset and sampling phase; corruption is applied to
    the queries only.  The lateral offset is kept small by default because
    a large per-traversal offset is a systematic error shared by every frame
    of a query, which a per-database error model cannot see.  Query ground
    truth carries no per-frame jitter by default: it is the path the filter
    tracks, and white noise on it would be motion no filter can follow.
    """
    route = default_route(route_length)
    descriptor = descriptor or DescriptorConfig()
    seeds = traversal_seeds(seed, len(DATABASE_CONDITIONS) + len(query_conditions))

    def spec(tid, cond, s, jitter=TraversalSpec.gps_jitter_sigma):
        phase = np.random.default_rng(s + 1).uniform(0.0, 1.0)
        return TraversalSpec(
            condition=cond, traversal_id=tid, rng_seed=s, start_offset=phase,
            gps_jitter_sigma=jitter,
            along_track_jitter=along_track_jitter,
            lateral_offset_sigma=lateral_offset_sigma, descriptor=descriptor,
        )

    dbs = [
        generate_traversal(route, spec(i + 1, c, seeds[i]))
        for i, c in enumerate(DATABASE_CONDITIONS)
    ]
    queries = [
        generate_traversal(
            route, spec(QUERY_ID_BASE + j, c, seeds[len(dbs) + j], query_gps_jitter)
        )
        for j, c in enumerate(query_conditions)
    ]
    if corruption is not None:
        specs = [corruption] if isinstance(corruption, CorruptionSpec) else list(corruption)
        for cs in specs:
            queries = [corrupt(q, cs, descriptor) for q in queries]
    return Scenario(dbs, queries)
