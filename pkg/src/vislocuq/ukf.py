"""Unscented Kalman filter over the planar state ``[x, y, theta, v, theta_dot]``.

Prediction uses constant linear and angular velocity.  Measurements are
positions with a per-measurement covariance that the error model supplies in
the ego frame and the filter rotates into the inertial frame using its own
heading estimate.  Measurements whose squared Mahalanobis innovation exceeds
a chi-square quantile are rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import chi2
from sklearn.base import BaseEstimator

from .core import psd_repair, rotate_cov, wrap_angle

STATE_DIM = 5
THETA = 2
H = np.array([[1.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0]])
DEFAULT_Q_RATE = np.array([1e-4, 1e-4, 1e-4, 0.25, 0.01])


class FilterDivergence(ArithmeticError):
    """Raised when a covariance cannot be factorized even after repair."""


def _frozen(a, shape, name) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class UtParams:
    """Unscented transform scaling parameters.

    ``kappa=None`` means ``3 - n``, so with the defaults ``lambda = -2`` and
    ``n + lambda = 3``.
    """

    alpha_ut: float = 1.0
    beta_ut: float = 2.0
    kappa: float | None = None
    n: int = STATE_DIM

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not self.alpha_ut > 0:
            raise ValueError("alpha_ut must be positive")
        if not self.n + self.lam > 0:
            raise ValueError(f"n + lambda must be positive, got {self.n + self.lam}")

    @property
    def lam(self) -> float:
        kappa = 3.0 - self.n if self.kappa is None else self.kappa
        return self.alpha_ut**2 * (self.n + kappa) - self.n

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        n, lam = self.n, self.lam
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + 1.0 - self.alpha_ut**2 + self.beta_ut
        return wm, wc


@dataclass(frozen=True, eq=False)
class FilterState:
    """Filter mean, covariance and the time they refer to."""

    mean: np.ndarray
    cov: np.ndarray
    t: float

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64)
        if mean.shape != (STATE_DIM,) or not np.all(np.isfinite(mean)):
            raise ValueError(f"mean must be a finite {STATE_DIM}-vector")
        mean[THETA] = wrap_angle(mean[THETA])
        mean.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _frozen(self.cov, (STATE_DIM, STATE_DIM), "cov"))
        if not math.isfinite(self.t):
            raise ValueError("t must be finite")

    @property
    def position(self) -> np.ndarray:
        return self.mean[:2]

    @property
    def position_cov(self) -> np.ndarray:
        return self.cov[:2, :2]

    def __eq__(self, other):
        if not isinstance(other, FilterState):
            return NotImplemented
        return (
            self.t == other.t
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.cov, other.cov)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Measurement:
    """A position fix with its inertial-frame covariance."""

    z: np.ndarray
    R_world: np.ndarray
    t: float = 0.0
    traversal_id: int | None = None
    n_kpm: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(self.z, (2,), "z"))
        r = _frozen(self.R_world, (2, 2), "R_world")
        if not np.allclose(r, r.T, rtol=0.0, atol=1e-12) or np.linalg.eigvalsh(r)[0] < -1e-12:
            raise ValueError("R_world must be symmetric PSD")
        object.__setattr__(self, "R_world", r)


def chi2_threshold(k: int, alpha: float) -> float:
    """Inverse chi-square CDF at ``alpha`` with ``k`` degrees of freedom.

    For ``k = 2`` this is ``-2 ln(1 - alpha)`` in closed form.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if k < 1:
        raise ValueError("k must be positive")
    if k == 2:
        return -2.0 * math.log1p(-alpha)
    return float(chi2.ppf(alpha, k))


@dataclass(frozen=True)
class GateConfig:
    """Chi-square gate; ``level=None`` disables gating."""

    level: float | None = None
    k: int = 2

    def __post_init__(self):
        if self.level is not None and not 0.0 < self.level < 1.0:
            raise ValueError(f"gate level must lie in (0, 1), got {self.level}")

    @classmethod
    def parse(cls, text: str | float | None) -> "GateConfig":
        if text is None or text == "off":
            return cls(None)
        return cls(float(text))

    @property
    def enabled(self) -> bool:
        return self.level is not None

    @property
    def threshold(self) -> float:
        return math.inf if self.level is None else chi2_threshold(self.k, self.level)

    def label(self) -> str:
        return "off" if self.level is None else repr(self.level)


def _sqrt_cov(c: np.ndarray) -> np.ndarray:
    if not np.any(c):
        return np.zeros_like(c)
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(psd_repair(c))
    except np.linalg.LinAlgError as exc:
        raise FilterDivergence("covariance is not factorizable after repair") from exc


def sigma_points(state: FilterState, p: UtParams = UtParams()):
    """The ``2n + 1`` sigma points of ``state`` with mean and covariance weights.

    Returns ``(points, wm, wc)`` with ``points`` of shape ``(2n + 1, n)``.
    """
    n = state.mean.shape[0]
    if p.n != n:
        raise ValueError(f"UtParams.n={p.n} does not match state dimension {n}")
    root = _sqrt_cov((n + p.lam) * state.cov)
    pts = np.empty((2 * n + 1, n))
    pts[0] = state.mean
    pts[1 : n + 1] = state.mean + root.T
    pts[n + 1 :] = state.mean - root.T
    pts[:, THETA] = wrap_angle(pts[:, THETA])
    wm, wc = p.weights()
    return pts, wm, wc


def _recombine(pts: np.ndarray, wm: np.ndarray, wc: np.ndarray):
    # offsets from the central point keep coincident points exact
    mean = pts[0] + wm @ (pts - pts[0])
    mean[THETA] = math.atan2(wm @ np.sin(pts[:, THETA]), wm @ np.cos(pts[:, THETA]))
    dev = pts - mean
    dev[:, THETA] = wrap_angle(dev[:, THETA])
    return mean, (wc[:, None] * dev).T @ dev, dev


def cv_motion(pts: np.ndarray, dt: float) -> np.ndarray:
    """Constant linear and angular velocity motion applied row-wise."""
    out = np.array(pts, dtype=np.float64)
    theta, v, w = out[:, THETA], out[:, 3], out[:, 4]
    out[:, 0] += v * np.cos(theta) * dt
    out[:, 1] += v * np.sin(theta) * dt
    out[:, THETA] = wrap_angle(theta + w * dt)
    return out


def pinned_heading_motion(heading: float = 0.0) -> Callable[[np.ndarray, float], np.ndarray]:
    """Linear motion variant: heading held at ``heading`` and yaw rate at zero.

    With the heading fixed the position update ``x += v cos(heading) dt`` is
    linear in the state, so the unscented transform is exact for it.
    """
    c, s = math.cos(heading), math.sin(heading)
    h = wrap_angle(heading)

    def motion(pts: np.ndarray, dt: float) -> np.ndarray:
        out = np.array(pts, dtype=np.float64)
        out[:, 0] += out[:, 3] * c * dt
        out[:, 1] += out[:, 3] * s * dt
        out[:, THETA] = h
        out[:, 4] = 0.0
        return out

    return motion


def predict(
    state: FilterState, dt: float, Q=None, p: UtParams = UtParams(), motion=cv_motion
) -> FilterState:
    """Propagate ``state`` by ``dt`` seconds.

    ``Q`` is the process noise added for this step; ``None`` means the
    default rate ``diag(1e-4, 1e-4, 1e-4, 0.25, 0.01)`` scaled by ``dt``.
    ``motion`` maps sigma points (rows) and ``dt`` to propagated points.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    Q = np.diag(DEFAULT_Q_RATE * dt) if Q is None else np.asarray(Q, dtype=np.float64)
    pts, wm, wc = sigma_points(state, p)
    mean, cov, _ = _recombine(motion(pts, dt), wm, wc)
    return FilterState(mean, psd_repair(cov + Q), state.t + dt)


def _innovation(state: FilterState, z: Measurement, p: UtParams):
    pts, wm, wc = sigma_points(state, p)
    zp = pts @ H.T
    z_hat = zp[0] + wm @ (zp - zp[0])
    dz = zp - z_hat
    dx = pts - state.mean
    dx[:, THETA] = wrap_angle(dx[:, THETA])
    s = (wc[:, None] * dz).T @ dz + z.R_world
    pxz = (wc[:, None] * dx).T @ dz
    return z.z - H @ state.mean, 0.5 * (s + s.T), pxz


def _solve(s: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(s, b)
    except np.linalg.LinAlgError:
        return np.linalg.solve(psd_repair(s), b)


def mahalanobis_sq(state: FilterState, z: Measurement, p: UtParams = UtParams()) -> float:
    """Squared Mahalanobis distance of ``z`` from the predicted measurement.

    Uses ``H C H^T + R`` as the gate covariance.  The measurement model is
    linear, so this equals the unscented innovation covariance used by the
    update up to rounding.  ``p`` is accepted for signature symmetry.
    """
    r = z.z - H @ state.mean
    s = H @ state.cov @ H.T + z.R_world
    return float(r @ _solve(0.5 * (s + s.T), r))


def update(
    state: FilterState, z: Measurement, gate: GateConfig = GateConfig(), p: UtParams = UtParams()
) -> tuple[FilterState, bool, float]:
    """Unscented measurement update with optional chi-square gating.

    Returns ``(new_state, accepted, d2)``.  A rejected measurement returns
    the input ``state`` object itself.
    """
    r, s, pxz = _innovation(state, z, p)
    d2 = mahalanobis_sq(state, z)
    if gate.enabled and d2 > gate.threshold:
        return state, False, d2
    gain = _solve(s, pxz.T).T
    mean = state.mean + gain @ r
    cov = state.cov - gain @ s @ gain.T
    return FilterState(mean, psd_repair(cov), state.t), True, d2


@dataclass(frozen=True, eq=False)
class Observation:
    """A position fix before its covariance is rotated into the inertial frame.

    ``sigma_init`` is the error bound used for the initial position variance
    when this observation seeds the filter.
    """

    t: float
    z: np.ndarray
    R_ego: np.ndarray
    sigma_init: float
    frame_id: int | None = None
    traversal_id: int | None = None
    n_kpm: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "z", _frozen(self.z, (2,), "z"))
        object.__setattr__(self, "R_ego", _frozen(self.R_ego, (2, 2), "R_ego"))
        if not (math.isfinite(self.t) and math.isfinite(self.sigma_init) and self.sigma_init >= 0):
            raise ValueError("t and sigma_init must be finite, sigma_init non-negative")


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Outcome of processing one observation.

    ``state`` is the filter state after the step; ``d2`` is NaN for the two
    initialization fixes and for out-of-order observations.
    """

    observation: Observation
    state: FilterState
    accepted: bool
    d2: float
    R_world: np.ndarray
    reason: str = "ok"


@dataclass(frozen=True)
class InitConfig:
    heading_var: float = (math.pi / 4) ** 2
    speed_var: float = 25.0
    yaw_rate_var: float = 0.25


class UnscentedLocalizer(BaseEstimator):
    """Sequential filter driver: initialize, predict on every timestamp, gate, update.

    Parameters
    ----------
    process_noise_rate : array-like of 5 or None
        Diagonal of the process noise per second; ``None`` uses
        ``diag(1e-4, 1e-4, 1e-4, 0.25, 0.01)``.
    gate : GateConfig
    ut : UtParams
    init : InitConfig
    gate_burn_in : int
        Number of updates after initialization that bypass the gate while
        speed is still being learned from the zero initial guess.
    """

    def __init__(self, process_noise_rate=None, gate=GateConfig(), ut=UtParams(), init=InitConfig(),
                 gate_burn_in=50):
        self.process_noise_rate = process_noise_rate
        self.gate = gate
        self.ut = ut
        self.init = init
        self.gate_burn_in = gate_burn_in

    def _q_rate(self) -> np.ndarray:
        if self.process_noise_rate is None:
            return DEFAULT_Q_RATE
        q = np.asarray(self.process_noise_rate, dtype=np.float64)
        if q.shape != (STATE_DIM,) or np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ValueError("process_noise_rate must be 5 non-negative finite values")
        return q

    def initial_state(self, first: Observation, second: Observation | None) -> FilterState:
        heading = 0.0
        if second is not None:
            d = second.z - first.z
            heading = math.atan2(d[1], d[0])
        var = first.sigma_init**2
        cov = np.diag([var, var, self.init.heading_var, self.init.speed_var, self.init.yaw_rate_var])
        mean = np.array([first.z[0], first.z[1], heading, 0.0, 0.0])
        return FilterState(mean, psd_repair(cov), first.t)

    def run(self, observations: Iterable[Observation]) -> list[StepRecord]:
        """Filter a time-ordered sequence of observations, one record each."""
        obs = list(observations)
        q_rate = self._q_rate()
        if int(self.gate_burn_in) < 0:
            raise ValueError("gate_burn_in must be non-negative")
        # the second fix only sets the heading, so it is never gated either
        burn_in = max(1, int(self.gate_burn_in))
        records: list[StepRecord] = []
        if not obs:
            return records
        state = self.initial_state(obs[0], obs[1] if len(obs) > 1 else None)
        records.append(
            StepRecord(obs[0], state, True, math.nan, rotate_cov(obs[0].R_ego, state.mean[THETA]))
        )
        for k, o in enumerate(obs[1:], start=1):
            if not o.t > state.t:
                r_world = rotate_cov(o.R_ego, state.mean[THETA])
                records.append(StepRecord(o, state, False, math.nan, r_world, "out_of_order"))
                continue
            dt = o.t - state.t
            state = predict(state, dt, np.diag(q_rate * dt), self.ut)
            r_world = rotate_cov(o.R_ego, state.mean[THETA])
            meas = Measurement(o.z, r_world, o.t, o.traversal_id, o.n_kpm)
            gate = GateConfig() if k <= burn_in else self.gate
            state, accepted, d2 = update(state, meas, gate, self.ut)
            records.append(
                StepRecord(o, state, accepted, math.nan if k == 1 else d2, r_world,
                           "ok" if accepted else "gated")
            )
        return records


def rejection_rate(records: Sequence[StepRecord]) -> float:
    """Percentage of observations not used for an update."""
    if not records:
        return 0.0
    return 100.0 * sum(not r.accepted for r in records) / len(records)
