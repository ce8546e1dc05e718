"""Keypoint/global-descriptor matching behind a two-call interface.

The real pipeline uses learned global descriptors for candidate search and
learned keypoint matching for ranking.  :class:`SyntheticMatcher` is a
deterministic surrogate whose match counts decay with ground-truth distance
and with appearance mismatch between conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol

import numpy as np
from scipy.special import ndtri

from .core import Frame

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

DEFAULT_COMPAT = {
    ("sunny", "snowy"): 0.5,
    ("sunny", "night"): 0.2,
    ("night", "snowy"): 0.2,
}


@dataclass(frozen=True)
class MatchOutcome:
    n_kpm: int
    desc_dist: float

    def __post_init__(self):
        if self.n_kpm < 0 or self.desc_dist < 0:
            raise ValueError("match counts and distances are non-negative")


class Matcher(Protocol):
    def match(self, q: Frame, k: Frame) -> MatchOutcome: ...

    def global_distance(self, q: Frame, k: Frame) -> float: ...


def _mix(z: np.ndarray) -> np.ndarray:
    # uint64 wraparound is the intended arithmetic
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def counter_hash(seed: int, a, b) -> np.ndarray:
    """splitmix64-style 64-bit hash of the key ``(seed, a, b)``."""
    a = np.asarray(a, dtype=np.int64).astype(np.uint64)
    b = np.asarray(b, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        z = _mix(np.asarray(seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64) + _GOLDEN)
        z = _mix(z ^ (a * _GOLDEN + np.uint64(1)))
        return _mix(z ^ (b * _M1 + np.uint64(2)))


def counter_normal(seed: int, a, b) -> np.ndarray:
    """Standard normal draws keyed on ``(seed, a, b)``, order independent."""
    z = counter_hash(seed, a, b)
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def _norm_pair(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class SyntheticMatcherConfig:
    n_max: int = 2000
    length_scale: float = 5.0
    condition_compat: Mapping[tuple[str, str], float] = field(
        default_factory=lambda: dict(DEFAULT_COMPAT)
    )
    noise_sigma: float = 0.4
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_max <= 0:
            raise ValueError("n_max must be positive")
        if not self.length_scale > 0:
            raise ValueError("length_scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        table = {}
        for pair, v in dict(self.condition_compat).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"compat factor for {pair} outside [0, 1]: {v}")
            table[_norm_pair(*pair)] = float(v)
        object.__setattr__(self, "condition_compat", table)

    def compat(self, a: str, b: str) -> float:
        if a == b:
            return self.condition_compat.get((a, b), 1.0)
        try:
            return self.condition_compat[_norm_pair(a, b)]
        except KeyError:
            raise ValueError(f"no compatibility factor for conditions {a!r}, {b!r}") from None


def _check_lengths(dq: int, dk: int):
    if dq != dk:
        raise ValueError(f"descriptor length mismatch: {dq} != {dk}")


class SyntheticMatcher:
    """Deterministic surrogate for global retrieval plus keypoint matching.

    ``n_kpm = clamp(round(n_max * exp(-d / length_scale) * compat * exp(eps)))``
    where ``d`` is the ground-truth planar distance and ``eps`` is a
    counter-based normal draw keyed on the two frame ids.  Frame corruption
    scales the count by ``(1 - corruption)`` of each side.
    """

    def __init__(self, config: SyntheticMatcherConfig | None = None):
        self.config = config or SyntheticMatcherConfig()

    def global_distance(self, q: Frame, k: Frame) -> float:
        _check_lengths(q.descriptor.shape[0], k.descriptor.shape[0])
        return float(np.linalg.norm(q.descriptor - k.descriptor))

    def match(self, q: Frame, k: Frame) -> MatchOutcome:
        dd = self.global_distance(q, k)
        d = q.pose.distance(k.pose)
        compat = self.config.compat(q.condition, k.condition)
        n = self._counts(
            np.array([d]),
            np.array([compat]),
            np.array([q.frame_id]),
            np.array([k.frame_id]),
            np.array([(1.0 - q.corruption) * (1.0 - k.corruption)]),
        )
        return MatchOutcome(int(n[0]), dd)

    def match_counts(self, q_pos, k_pos, compat, q_ids, k_ids, q_corr, k_corr) -> np.ndarray:
        """Vectorized ``n_kpm`` for broadcastable arrays of frame attributes."""
        d = np.linalg.norm(np.asarray(q_pos) - np.asarray(k_pos), axis=-1)
        keep = (1.0 - np.asarray(q_corr)) * (1.0 - np.asarray(k_corr))
        return self._counts(d, compat, q_ids, k_ids, keep)

    def _counts(self, d, compat, q_ids, k_ids, keep) -> np.ndarray:
        cfg = self.config
        base = cfg.n_max * np.exp(-np.asarray(d) / cfg.length_scale) * compat * keep
        if cfg.noise_sigma > 0:
            eps = counter_normal(cfg.rng_seed, q_ids, k_ids)
            base = base * np.exp(cfg.noise_sigma * eps)
        return np.clip(np.rint(base), 0, cfg.n_max).astype(np.int64)

    def pair_compat(self, q_conditions, k_conditions) -> np.ndarray:
        """Compatibility factors for broadcastable arrays of condition tags."""
        qc, kc = np.broadcast_arrays(
            np.asarray(q_conditions, dtype=str), np.asarray(k_conditions, dtype=str)
        )
        uq, qi = np.unique(qc, return_inverse=True)
        uk, ki = np.unique(kc, return_inverse=True)
        table = np.array([[self.config.compat(a, b) for b in uk] for a in uq])
        return table.reshape(len(uq), len(uk))[qi.reshape(qc.shape), ki.reshape(kc.shape)]
