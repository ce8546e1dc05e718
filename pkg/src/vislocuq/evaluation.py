"""Evaluation: reliability curves, covariance credibility, d_err and n_r.

The end-to-end pipeline per query traversal is retrieval, error-model
lookup and filtering.  Retrieval and lookup do not depend on the filter
configuration, so they are computed once per query and reused across gate
levels and covariance strategies.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Traversal, psd_repair
from .errormodel import ErrorModelSet, snap_confidence
from .retrieval import RetrievalLocalizer
from .ukf import GateConfig, Observation, UnscentedLocalizer

CREDIBILITY_MASSES = (0.68, 0.95, 0.997)
BASELINE_GRID = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0)
INIT_CONFIDENCE = 0.68


@dataclass(frozen=True)
class ReliabilityCurve:
    """Observed coverage ``p_hat`` against expected confidence, over ``n`` samples."""

    levels: tuple[float, ...]
    observed: tuple[float, ...]
    n: int

    def gaps(self) -> np.ndarray:
        return np.asarray(self.observed) - np.asarray(self.levels)

    def max_gap(self) -> float:
        return float(np.max(np.abs(self.gaps())))

    def rows(self) -> list[tuple[float, float, int]]:
        return [(c, p, self.n) for c, p in zip(self.levels, self.observed)]


def reliability(errors, sigma, levels: Sequence[float]) -> ReliabilityCurve:
    """Fraction of samples whose error norm is within the per-sample bound.

    Parameters
    ----------
    errors : (n,) error norms in meters
    sigma : (n, len(levels)) looked-up bounds
    levels : expected confidence per column of ``sigma``
    """
    errors = np.asarray(errors, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if errors.ndim != 1 or len(errors) == 0:
        raise ValueError("reliability needs a non-empty 1-d array of errors")
    if sigma.shape != (len(errors), len(levels)):
        raise ValueError(f"sigma must have shape {(len(errors), len(levels))}, got {sigma.shape}")
    hit = errors[:, None] <= sigma
    return ReliabilityCurve(
        tuple(float(c) for c in levels), tuple(float(p) for p in hit.mean(axis=0)), len(errors)
    )


def mass_threshold(p: float) -> float:
    """Squared Mahalanobis radius enclosing mass ``p`` of a 2-d Gaussian."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"mass must lie in (0, 1), got {p}")
    return -2.0 * math.log1p(-p)


def mahalanobis_sq_batch(errors, covs) -> np.ndarray:
    """``e^T R^-1 e`` per sample; covariances are PSD-repaired first."""
    errors = np.asarray(errors, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    if errors.ndim != 2 or errors.shape[1] != 2 or covs.shape != (len(errors), 2, 2):
        raise ValueError("expected errors (n, 2) and covariances (n, 2, 2)")
    fixed = np.stack([psd_repair(c) for c in covs]) if len(covs) else covs
    sol = np.linalg.solve(fixed, errors[:, :, None])[:, :, 0]
    return np.einsum("ij,ij->i", errors, sol)


def covariance_credibility(errors, covs, masses: Sequence[float] = CREDIBILITY_MASSES) -> tuple:
    """Percent of errors inside the ellipse holding each probability mass."""
    d2 = mahalanobis_sq_batch(errors, covs)
    if len(d2) == 0:
        raise ValueError("covariance credibility needs at least one sample")
    return tuple(float(100.0 * np.mean(d2 <= mass_threshold(p))) for p in masses)


@dataclass
class QueryMeasurements:
    """Retrieval output and error-model lookups for one query traversal."""

    traversal_id: int
    condition: str
    frame_ids: np.ndarray
    t: np.ndarray
    truth: np.ndarray
    z: np.ndarray
    source_traversal_ids: np.ndarray
    n_kpm: np.ndarray
    sigma: np.ndarray  # (n, G)
    R_ego: np.ndarray  # (n, 2, 2)
    grid: tuple

    def __len__(self):
        return len(self.frame_ids)

    @property
    def errors(self) -> np.ndarray:
        return np.hypot(*(self.z - self.truth).T)

    def sigma_at(self, c: float) -> np.ndarray:
        return self.sigma[:, self.grid.index(snap_confidence(c, self.grid))]

    def observations(self, constant_var: float | None = None) -> list[Observation]:
        """Filter inputs; ``constant_var`` swaps in an isotropic covariance."""
        if constant_var is None:
            r_ego = self.R_ego
            s_init = self.sigma_at(INIT_CONFIDENCE)
        else:
            r_ego = np.broadcast_to(constant_var * np.eye(2), (len(self), 2, 2))
            # radius holding the same mass under the isotropic Gaussian
            radius = math.sqrt(constant_var * mass_threshold(snap_confidence(INIT_CONFIDENCE, self.grid)))
            s_init = np.full(len(self), radius)
        return [
            Observation(
                t=float(self.t[i]),
                z=self.z[i],
                R_ego=r_ego[i],
                sigma_init=float(s_init[i]),
                frame_id=int(self.frame_ids[i]),
                traversal_id=int(self.source_traversal_ids[i]),
                n_kpm=int(self.n_kpm[i]),
            )
            for i in range(len(self))
        ]


def measure_query(localizer: RetrievalLocalizer, models: ErrorModelSet, query: Traversal) -> QueryMeasurements:
    res = localizer.retrieve(query)
    sigma, r_ego, grid = models.lookup_arrays(res.source_traversal_ids, res.n_kpm)
    return QueryMeasurements(
        traversal_id=query.traversal_id,
        condition=query.condition or "mixed",
        frame_ids=res.query_frame_ids,
        t=query.times,
        truth=query.positions,
        z=res.locations,
        source_traversal_ids=res.source_traversal_ids,
        n_kpm=res.n_kpm,
        sigma=sigma,
        R_ego=r_ego,
        grid=tuple(grid),
    )


@dataclass
class FilterRun:
    """Per-frame filter outputs aligned with a :class:`QueryMeasurements`."""

    measurements: QueryMeasurements
    estimate: np.ndarray  # (n, 2)
    est_cov: np.ndarray  # (n, 2, 2)
    accepted: np.ndarray
    d2: np.ndarray
    method: str
    gate: str

    @property
    def est_error(self) -> np.ndarray:
        return self.estimate - self.measurements.truth

    @property
    def d_err(self) -> float:
        return float(np.mean(np.hypot(*self.est_error.T)))

    @property
    def n_r(self) -> float:
        return float(100.0 * np.mean(~self.accepted))


def run_filter(
    meas: QueryMeasurements,
    gate: GateConfig = GateConfig(),
    constant_var: float | None = None,
    filter_params: Mapping | None = None,
) -> FilterRun:
    ukf = UnscentedLocalizer(gate=gate, **dict(filter_params or {}))
    records = ukf.run(meas.observations(constant_var))
    return FilterRun(
        measurements=meas,
        estimate=np.array([r.state.position for r in records]).reshape(-1, 2),
        est_cov=np.array([r.state.position_cov for r in records]).reshape(-1, 2, 2),
        accepted=np.array([r.accepted for r in records], dtype=bool),
        d2=np.array([r.d2 for r in records], dtype=np.float64),
        method="adaptive" if constant_var is None else "constant",
        gate=gate.label(),
    )


@dataclass
class ConditionReport:
    d_err: float
    cov_credibility: tuple
    n_r: float
    measurement_error: float
    reliability: ReliabilityCurve
    n_frames: int

    def to_dict(self) -> dict:
        return {
            "d_err": self.d_err,
            "cov_credibility": dict(zip(("68", "95", "99.7"), self.cov_credibility)),
            "n_r": self.n_r,
            "measurement_error": self.measurement_error,
            "n_frames": self.n_frames,
            "reliability": [
                {"c": c, "p_hat": p} for c, p in zip(self.reliability.levels, self.reliability.observed)
            ],
        }


def _summarize(runs: Sequence[FilterRun]) -> ConditionReport:
    err = np.concatenate([r.est_error for r in runs])
    cov = np.concatenate([r.est_cov for r in runs])
    acc = np.concatenate([r.accepted for r in runs])
    meas = [r.measurements for r in runs]
    grid = meas[0].grid
    return ConditionReport(
        d_err=float(np.mean(np.hypot(*err.T))),
        cov_credibility=covariance_credibility(err, cov),
        n_r=float(100.0 * np.mean(~acc)),
        measurement_error=float(np.mean(np.concatenate([m.errors for m in meas]))),
        reliability=reliability(
            np.concatenate([m.errors for m in meas]), np.concatenate([m.sigma for m in meas]), grid
        ),
        n_frames=int(len(err)),
    )


@dataclass
class EvalReport:
    """Overall and per-condition metrics for one (method, gate) setting."""

    method: str
    gate: str
    overall: ConditionReport
    per_condition: dict[str, ConditionReport] = field(default_factory=dict)
    baseline_var: dict[str, float] | None = None

    @property
    def d_err(self) -> float:
        return self.overall.d_err

    @property
    def n_r(self) -> float:
        return self.overall.n_r

    @property
    def cov_credibility(self) -> tuple:
        return self.overall.cov_credibility

    @property
    def reliability(self) -> ReliabilityCurve:
        return self.overall.reliability

    @classmethod
    def from_runs(cls, runs: Sequence[FilterRun], baseline_var=None) -> "EvalReport":
        if not runs:
            raise ValueError("no filter runs to report")
        by_cond: dict[str, list[FilterRun]] = {}
        for r in runs:
            by_cond.setdefault(r.measurements.condition, []).append(r)
        return cls(
            method=runs[0].method,
            gate=runs[0].gate,
            overall=_summarize(runs),
            per_condition={c: _summarize(rs) for c, rs in sorted(by_cond.items())},
            baseline_var=dict(sorted(baseline_var.items())) if baseline_var else None,
        )

    def to_dict(self) -> dict:
        doc = {
            "method": self.method,
            "gate": self.gate,
            "overall": self.overall.to_dict(),
            "per_condition": {c: r.to_dict() for c, r in self.per_condition.items()},
        }
        if self.baseline_var is not None:
            doc["baseline_var"] = self.baseline_var
        return doc

    def table_rows(self) -> list[dict]:
        rows = []
        for cond, r in [("all", self.overall), *self.per_condition.items()]:
            rows.append(
                {
                    "condition": cond,
                    "method": self.method,
                    "gate": self.gate,
                    "d_err_m": repr(r.d_err),
                    "cred_68": repr(r.cov_credibility[0]),
                    "cred_95": repr(r.cov_credibility[1]),
                    "cred_99_7": repr(r.cov_credibility[2]),
                    "n_r_pct": repr(r.n_r),
                    "n_frames": str(r.n_frames),
                }
            )
        return rows

    def table_csv(self) -> str:
        return _csv(self.table_rows())

    def reliability_csv(self) -> str:
        rows = []
        for cond, r in [("all", self.overall), *self.per_condition.items()]:
            for c, p, n in r.reliability.rows():
                rows.append({"condition": cond, "c": repr(c), "p_hat": repr(p), "n": str(n)})
        return _csv(rows)


def _csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def leave_one_out_measurements(
    databases: Sequence[Traversal], models: ErrorModelSet, candidates_per_traversal: int = 3,
    matcher=None, per_condition: int | None = 1,
) -> list[QueryMeasurements]:
    """Validation set: database traversals localized against all the others.

    ``per_condition`` caps how many held-out traversals each condition
    contributes (the first ones in order); ``None`` holds out every database.
    """
    out = []
    taken: dict[str, int] = {}
    for i, db in enumerate(databases):
        cond = db.condition or "mixed"
        if per_condition is not None and taken.get(cond, 0) >= per_condition:
            continue
        taken[cond] = taken.get(cond, 0) + 1
        rest = [d for j, d in enumerate(databases) if j != i]
        loc = RetrievalLocalizer(candidates_per_traversal, matcher=matcher).fit(rest)
        out.append(measure_query(loc, models, db))
    return out


class ConstantCovarianceBaseline(BaseEstimator):
    """Isotropic measurement covariance ``sigma2 * I`` tuned for lowest d_err.

    ``fit`` grid-searches ``sigma2`` on validation measurements, separately
    for each condition when ``per_condition`` is set.

    Parameters
    ----------
    grid : sequence of float
        Candidate variances in m^2.
    per_condition : bool
    gate : GateConfig
        Gate used while tuning.
    filter_params : mapping or None
        Extra :class:`UnscentedLocalizer` parameters.
    """

    def __init__(self, grid=BASELINE_GRID, per_condition=True, gate=GateConfig(), filter_params=None):
        self.grid = grid
        self.per_condition = per_condition
        self.gate = gate
        self.filter_params = filter_params

    def fit(self, validation: Sequence[QueryMeasurements], y=None):
        if not validation:
            raise ValueError("validation set is empty")
        grid = [float(g) for g in self.grid]
        if not grid or min(grid) <= 0:
            raise ValueError("grid variances must be positive")
        groups: dict[str, list[QueryMeasurements]] = {}
        for m in validation:
            key = m.condition if self.per_condition else "all"
            groups.setdefault(key, []).append(m)
        self.scores_ = {}
        self.sigma2_ = {}
        for key, ms in sorted(groups.items()):
            scores = []
            for g in grid:
                runs = [run_filter(m, self.gate, g, self.filter_params) for m in ms]
                err = np.concatenate([np.hypot(*r.est_error.T) for r in runs])
                scores.append(float(np.mean(err)))
            self.scores_[key] = scores
            # first minimum keeps ties on the smaller variance
            self.sigma2_[key] = grid[int(np.argmin(scores))]
        return self

    def variance_for(self, condition: str) -> float:
        check_is_fitted(self, "sigma2_")
        if not self.per_condition:
            return self.sigma2_["all"]
        try:
            return self.sigma2_[condition]
        except KeyError:
            raise KeyError(f"baseline was not tuned for condition {condition!r}") from None

    def predict(self, conditions) -> np.ndarray:
        return np.array([self.variance_for(c) for c in conditions])


def run_experiment(
    queries: Sequence[QueryMeasurements],
    gate: GateConfig = GateConfig(),
    baseline: ConstantCovarianceBaseline | None = None,
    filter_params: Mapping | None = None,
) -> EvalReport:
    """Filter every query and collect the metrics into a report.

    With ``baseline`` set, the constant covariance tuned for each query's
    condition replaces the error-model covariance.
    """
    runs = []
    used = {}
    for m in queries:
        var = None
        if baseline is not None:
            var = baseline.variance_for(m.condition)
            used[m.condition] = var
        runs.append(run_filter(m, gate, var, filter_params))
    return EvalReport.from_runs(runs, used or None)


def cross_condition_errors(samples: Mapping, databases: Sequence[Traversal]) -> dict:
    """Mean calibration error by (query condition, database condition)."""
    cond = {db.traversal_id: db.condition for db in databases}
    acc: dict[tuple[str, str], list[np.ndarray]] = {}
    for tid, s in samples.items():
        qc = np.array([cond[int(q)] for q in s.query_traversal_id], dtype=object)
        for c in sorted(set(qc)):
            acc.setdefault((c, cond[tid]), []).append(s.error_norm[qc == c])
    return {k: float(np.mean(np.concatenate(v))) for k, v in sorted(acc.items())}


__all__ = [
    "BASELINE_GRID",
    "CREDIBILITY_MASSES",
    "ConditionReport",
    "ConstantCovarianceBaseline",
    "EvalReport",
    "FilterRun",
    "QueryMeasurements",
    "ReliabilityCurve",
    "covariance_credibility",
    "cross_condition_errors",
    "leave_one_out_measurements",
    "mass_threshold",
    "measure_query",
    "reliability",
    "run_experiment",
    "run_filter",
]
