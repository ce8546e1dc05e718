"""Per-database sensor error models.

Every database traversal gets its own model, calibrated by localizing the
other traversals against it.  Samples are binned by keypoint-match count;
each bin stores empirical error bounds (one per confidence level) and an
ego-frame 2x2 covariance of the localization residual.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import Traversal, psd_repair
from .retrieval import Prediction, RetrievalLocalizer

CONFIDENCE_GRID = (
    0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5,
    0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 0.99,
)  # fmt: skip


class ModelFileError(ValueError):
    """Malformed or inconsistent error-model file."""


@dataclass(frozen=True)
class CalibrationSample:
    n_kpm: int
    error_norm: float
    error_ego: tuple[float, float]
    query_traversal_id: int
    database_traversal_id: int


@dataclass
class CalibrationSamples:
    """Column-wise calibration samples collected against one database."""

    database_traversal_id: int
    n_kpm: np.ndarray
    error_ego: np.ndarray
    query_traversal_id: np.ndarray

    def __len__(self):
        return len(self.n_kpm)

    def __iter__(self) -> Iterator[CalibrationSample]:
        for n, e, q in zip(self.n_kpm, self.error_ego, self.query_traversal_id):
            yield CalibrationSample(
                int(n), float(math.hypot(e[0], e[1])), (float(e[0]), float(e[1])), int(q),
                self.database_traversal_id,
            )

    @property
    def error_norm(self) -> np.ndarray:
        return np.hypot(self.error_ego[:, 0], self.error_ego[:, 1])

    @classmethod
    def from_samples(cls, samples: Sequence[CalibrationSample]) -> "CalibrationSamples":
        samples = list(samples)
        dbs = {s.database_traversal_id for s in samples}
        if len(dbs) > 1:
            raise ValueError("samples from more than one database")
        return cls(
            dbs.pop() if dbs else -1,
            np.array([s.n_kpm for s in samples], dtype=np.int64),
            np.array([s.error_ego for s in samples], dtype=np.float64).reshape(-1, 2),
            np.array([s.query_traversal_id for s in samples], dtype=np.int64),
        )


def ego_residual(predicted: np.ndarray, truth: np.ndarray, heading: np.ndarray) -> np.ndarray:
    """World residual ``predicted - truth`` expressed in the vehicle frame."""
    d = np.asarray(predicted) - np.asarray(truth)
    c, s = np.cos(heading), np.sin(heading)
    return np.column_stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]])


def cross_validate(
    databases: Sequence[Traversal],
    candidates_per_traversal: int = 3,
    matcher=None,
) -> dict[int, CalibrationSamples]:
    """Localize every traversal against every other one, one database at a time.

    Returns the samples keyed by the database traversal they were localized
    against.
    """
    databases = list(databases)
    if len(databases) < 2:
        raise ValueError("multiple traversals required to build sensor error models")
    out = {}
    for db in databases:
        loc = RetrievalLocalizer(candidates_per_traversal, matcher=matcher).fit([db])
        n, err, qid = [], [], []
        for q in databases:
            if q is db or q.traversal_id == db.traversal_id:
                continue
            res = loc.retrieve(q)
            n.append(res.n_kpm)
            err.append(ego_residual(res.locations, q.positions, q.headings))
            qid.append(np.full(len(q), q.traversal_id, dtype=np.int64))
        out[db.traversal_id] = CalibrationSamples(
            db.traversal_id, np.concatenate(n), np.concatenate(err), np.concatenate(qid)
        )
    return out


def bin_index(n_kpm, bin_width: int):
    """Half-open bin ``[w*i, w*(i+1))`` containing ``n_kpm``."""
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if np.any(np.asarray(n_kpm) < 0):
        raise ValueError("n_kpm must be non-negative")
    return np.asarray(n_kpm) // bin_width if np.ndim(n_kpm) else int(n_kpm) // int(bin_width)


def _coverage_rank(c: float, n: int) -> int:
    """Smallest k with ``k / n >= c``, evaluated in floating point."""
    k = min(max(math.ceil(c * n), 1), n)
    while k > 1 and (k - 1) / n >= c:
        k -= 1
    while k < n and k / n < c:
        k += 1
    return k


def empirical_sigma(errors, c: float) -> float:
    """Smallest sample ``v`` such that at least a fraction ``c`` of errors is <= v."""
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if errors.size == 0:
        raise ValueError("empirical_sigma needs at least one error sample")
    if not 0.0 < c <= 1.0:
        raise ValueError(f"confidence must lie in (0, 1], got {c}")
    return float(np.sort(errors)[_coverage_rank(c, errors.size) - 1])


def snap_confidence(c: float, grid: Sequence[float] = CONFIDENCE_GRID) -> float:
    """Smallest calibrated grid level that is >= ``c``."""
    if not 0.0 < c <= 1.0:
        raise ValueError(f"confidence must lie in (0, 1], got {c}")
    for g in sorted(grid):
        if g >= c - 1e-12:
            return g
    raise ValueError(f"confidence {c} exceeds the largest calibrated level {max(grid)}")


@dataclass(frozen=True)
class Bin:
    lo: int
    hi: int | None
    samples: int
    sigma_curve: Mapping[float, float]
    R_ego: np.ndarray

    def contains(self, n_kpm: int) -> bool:
        return n_kpm >= self.lo and (self.hi is None or n_kpm < self.hi)

    def __eq__(self, other):
        if not isinstance(other, Bin):
            return NotImplemented
        return (
            (self.lo, self.hi, self.samples) == (other.lo, other.hi, other.samples)
            and dict(self.sigma_curve) == dict(other.sigma_curve)
            and np.array_equal(self.R_ego, other.R_ego)
        )

    __hash__ = None


def _group_bins(idx: np.ndarray, min_count: int) -> list[tuple[int, int, np.ndarray]]:
    """Merge sparse bins downward (the lowest bin merges upward)."""
    groups: list[list] = []
    head = None
    for i in range(int(idx.max()) + 1):
        members = np.flatnonzero(idx == i)
        if not groups:
            head = [head[0], i + 1, np.concatenate([head[2], members])] if head else [i, i + 1, members]
            if len(head[2]) >= min_count:
                groups.append(head)
            continue
        if len(members) >= min_count:
            groups.append([i, i + 1, members])
        else:
            g = groups[-1]
            g[1] = i + 1
            g[2] = np.concatenate([g[2], members])
    return [(a, b, m) for a, b, m in groups]


class BinnedErrorModel(BaseEstimator):
    """Keypoint-match-count binned localization error model for one database.

    ``fit(X, y)`` takes match counts ``X`` (n,) or (n, 1) and ego-frame
    residuals ``y`` (n, 2).  Bins are half-open of width ``bin_width``; bins
    with fewer than ``min_bin_count`` samples are merged into the nearest
    lower bin and the last bin is open-ended.
    """

    def __init__(self, bin_width=200, min_bin_count=20, confidence_grid=CONFIDENCE_GRID,
                 traversal_id=None):
        self.bin_width = bin_width
        self.min_bin_count = min_bin_count
        self.confidence_grid = confidence_grid
        self.traversal_id = traversal_id

    def _validate_X(self, X) -> np.ndarray:
        X = np.asarray(X)
        if X.ndim == 2:
            X = check_array(X, dtype=None)
            if X.shape[1] != 1:
                raise ValueError("X must hold a single column of match counts")
            X = X[:, 0]
        X = check_array(X.reshape(-1, 1), dtype=np.float64, ensure_all_finite=True)[:, 0]
        if np.any(X < 0) or np.any(X != np.floor(X)):
            raise ValueError("match counts must be non-negative integers")
        return X.astype(np.int64)

    def fit(self, X, y):
        n = self._validate_X(X)
        y = check_array(y, dtype=np.float64)
        if y.shape != (len(n), 2):
            raise ValueError(f"y must have shape ({len(n)}, 2), got {y.shape}")
        if int(self.bin_width) <= 0:
            raise ValueError("bin_width must be positive")
        if int(self.min_bin_count) < 1:
            raise ValueError("min_bin_count must be >= 1")
        grid = tuple(sorted(float(c) for c in self.confidence_grid))
        if not grid or grid[0] <= 0 or grid[-1] > 1:
            raise ValueError("confidence levels must lie in (0, 1]")
        if len(n) < self.min_bin_count:
            raise ValueError(
                f"insufficient calibration samples: {len(n)} < min_bin_count={self.min_bin_count} "
                f"(short by {self.min_bin_count - len(n)})"
            )
        w = int(self.bin_width)
        norms = np.hypot(y[:, 0], y[:, 1])
        groups = _group_bins(bin_index(n, w), int(self.min_bin_count))
        bins = []
        for k, (a, b, members) in enumerate(groups):
            e = norms[members]
            curve = {c: empirical_sigma(e, c) for c in grid}
            cov = np.cov(y[members].T, ddof=1) if len(members) > 1 else np.zeros((2, 2))
            bins.append(
                Bin(
                    lo=a * w,
                    hi=None if k == len(groups) - 1 else b * w,
                    samples=len(members),
                    sigma_curve=curve,
                    R_ego=psd_repair(cov),
                )
            )
        self.bins_ = bins
        self.grid_ = grid
        self.n_samples_ = len(n)
        return self

    def _bin_lookup(self, n: np.ndarray) -> np.ndarray:
        los = np.array([b.lo for b in self.bins_])
        return np.searchsorted(los, n, side="right") - 1

    def bin_for(self, n_kpm: int) -> Bin:
        check_is_fitted(self, "bins_")
        return self.bins_[int(self._bin_lookup(np.array([n_kpm]))[0])]

    def predict(self, X, confidence: float = 0.95) -> np.ndarray:
        """Error bound at ``confidence`` (snapped up to the grid) for each count."""
        check_is_fitted(self, "bins_")
        c = snap_confidence(confidence, self.grid_)
        table = np.array([b.sigma_curve[c] for b in self.bins_])
        return table[self._bin_lookup(self._validate_X(X))]

    def predict_curve(self, X) -> np.ndarray:
        """Bounds for every grid level, shape (n, len(grid))."""
        check_is_fitted(self, "bins_")
        table = np.array([[b.sigma_curve[c] for c in self.grid_] for b in self.bins_])
        return table[self._bin_lookup(self._validate_X(X))]

    def predict_cov(self, X) -> np.ndarray:
        """Ego-frame covariance for each count, shape (n, 2, 2)."""
        check_is_fitted(self, "bins_")
        table = np.stack([b.R_ego for b in self.bins_])
        return table[self._bin_lookup(self._validate_X(X))]

    @classmethod
    def from_bins(cls, bins: Sequence[Bin], bin_width: int, traversal_id=None, min_bin_count=20):
        bins = list(bins)
        _check_bins(bins, "bins")
        grid = tuple(sorted(bins[0].sigma_curve))
        model = cls(bin_width=bin_width, min_bin_count=min_bin_count, confidence_grid=grid,
                    traversal_id=traversal_id)
        model.bins_ = bins
        model.grid_ = grid
        model.n_samples_ = sum(b.samples for b in bins)
        return model

    def __eq__(self, other):
        if not isinstance(other, BinnedErrorModel):
            return NotImplemented
        return (
            self.traversal_id == other.traversal_id
            and self.bin_width == other.bin_width
            and getattr(self, "bins_", None) == getattr(other, "bins_", None)
        )

    __hash__ = None


def fit_model(samples, bin_width: int = 200, min_bin_count: int = 20,
              confidence_grid=CONFIDENCE_GRID) -> BinnedErrorModel:
    """Fit a :class:`BinnedErrorModel` from calibration samples of one database."""
    if not isinstance(samples, CalibrationSamples):
        samples = CalibrationSamples.from_samples(samples)
    model = BinnedErrorModel(bin_width, min_bin_count, confidence_grid,
                             traversal_id=samples.database_traversal_id)
    if len(samples) < min_bin_count:
        raise ValueError(
            f"insufficient calibration samples for database {samples.database_traversal_id}: "
            f"{len(samples)} < {min_bin_count} (short by {min_bin_count - len(samples)})"
        )
    return model.fit(samples.n_kpm, samples.error_ego)


class ErrorModelSet(dict):
    """Error models keyed by database traversal id, sharing one bin width."""

    def __init__(self, models=(), bin_width: int = 200):
        super().__init__()
        self.bin_width = int(bin_width)
        items = models.values() if isinstance(models, Mapping) else models
        for m in items:
            self.add(m)

    def add(self, model: BinnedErrorModel):
        if int(model.bin_width) != self.bin_width:
            raise ValueError("all models in a set must share the bin width")
        self[int(model.traversal_id)] = model

    @classmethod
    def calibrate(cls, databases, candidates_per_traversal=3, matcher=None, bin_width=200,
                  min_bin_count=20, confidence_grid=CONFIDENCE_GRID) -> "ErrorModelSet":
        samples = cross_validate(databases, candidates_per_traversal, matcher)
        return cls.from_samples(samples, bin_width, min_bin_count, confidence_grid)

    @classmethod
    def from_samples(cls, samples: Mapping, bin_width=200, min_bin_count=20,
                     confidence_grid=CONFIDENCE_GRID) -> "ErrorModelSet":
        """One model per database from :func:`cross_validate` output."""
        return cls(
            [fit_model(s, bin_width, min_bin_count, confidence_grid) for s in samples.values()],
            bin_width,
        )

    def model_for(self, traversal_id: int) -> BinnedErrorModel:
        try:
            return self[int(traversal_id)]
        except KeyError:
            raise KeyError(f"no sensor error model for traversal {traversal_id}") from None

    def lookup(self, prediction: Prediction, c: float) -> tuple[float, np.ndarray]:
        """``(sigma_c, R_ego)`` for the database and bin a prediction came from."""
        b = self.model_for(prediction.source_traversal_id).bin_for(prediction.n_kpm)
        return b.sigma_curve[snap_confidence(c, tuple(b.sigma_curve))], b.R_ego

    def lookup_arrays(self, traversal_ids, n_kpm) -> tuple[np.ndarray, np.ndarray, tuple]:
        """Vectorized lookup: (sigma grid (n, G), R_ego (n, 2, 2), grid)."""
        traversal_ids = np.asarray(traversal_ids)
        n_kpm = np.asarray(n_kpm)
        grids = {m.grid_ for m in self.values()}
        if len(grids) != 1:
            raise ValueError("models disagree on the confidence grid")
        grid = grids.pop()
        sig = np.empty((len(n_kpm), len(grid)))
        cov = np.empty((len(n_kpm), 2, 2))
        for tid in np.unique(traversal_ids):
            m = traversal_ids == tid
            model = self.model_for(tid)
            sig[m] = model.predict_curve(n_kpm[m])
            cov[m] = model.predict_cov(n_kpm[m])
        return sig, cov, grid

    def __eq__(self, other):
        if not isinstance(other, ErrorModelSet):
            return NotImplemented
        return self.bin_width == other.bin_width and dict.__eq__(self, other)

    __hash__ = None

    # -- file format ------------------------------------------------------

    def to_dict(self) -> dict:
        models = []
        for tid in sorted(self):
            m = self[tid]
            bins = [
                {
                    "lo": int(b.lo),
                    "hi": None if b.hi is None else int(b.hi),
                    "count": int(b.samples),
                    "sigma": {repr(float(c)): float(v) for c, v in sorted(b.sigma_curve.items())},
                    "R": [[float(x) for x in row] for row in b.R_ego],
                }
                for b in m.bins_
            ]
            models.append({"traversal_id": int(tid), "bins": bins})
        return {"bin_width": self.bin_width, "models": models}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, doc) -> "ErrorModelSet":
        if not isinstance(doc, dict):
            raise ModelFileError("$: expected an object")
        bw = doc.get("bin_width")
        if not isinstance(bw, int) or isinstance(bw, bool) or bw <= 0:
            raise ModelFileError("$.bin_width: expected a positive integer")
        models = doc.get("models")
        if not isinstance(models, list):
            raise ModelFileError("$.models: expected an array")
        out = cls(bin_width=bw)
        for i, m in enumerate(models):
            where = f"$.models[{i}]"
            if not isinstance(m, dict) or not _is_int(m.get("traversal_id")):
                raise ModelFileError(f"{where}.traversal_id: expected an integer")
            if m["traversal_id"] in out:
                raise ModelFileError(f"{where}.traversal_id: duplicate model {m['traversal_id']}")
            raw = m.get("bins")
            if not isinstance(raw, list) or not raw:
                raise ModelFileError(f"{where}.bins: expected a non-empty array")
            bins = [_parse_bin(b, f"{where}.bins[{j}]") for j, b in enumerate(raw)]
            _check_bins(bins, f"{where}.bins")
            out.add(BinnedErrorModel.from_bins(bins, bw, traversal_id=m["traversal_id"]))
        return out

    @classmethod
    def loads(cls, text: str) -> "ErrorModelSet":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFileError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(doc)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "ErrorModelSet":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _parse_bin(b, where: str) -> Bin:
    if not isinstance(b, dict):
        raise ModelFileError(f"{where}: expected an object")
    if not _is_int(b.get("lo")) or b["lo"] < 0:
        raise ModelFileError(f"{where}.lo: expected a non-negative integer")
    if b.get("hi") is not None and not _is_int(b["hi"]):
        raise ModelFileError(f"{where}.hi: expected an integer or null")
    if not _is_int(b.get("count")) or b["count"] < 0:
        raise ModelFileError(f"{where}.count: expected a non-negative integer")
    sigma = b.get("sigma")
    if not isinstance(sigma, dict) or not sigma:
        raise ModelFileError(f"{where}.sigma: expected a non-empty object")
    curve = {}
    for k, v in sigma.items():
        try:
            c = float(k)
        except ValueError:
            raise ModelFileError(f"{where}.sigma[{k!r}]: key is not a confidence level") from None
        if not 0 < c <= 1 or not _is_num(v) or v < 0:
            raise ModelFileError(f"{where}.sigma[{k!r}]: invalid entry")
        curve[c] = float(v)
    levels = sorted(curve)
    if any(curve[a] > curve[b] for a, b in zip(levels, levels[1:])):
        raise ModelFileError(f"{where}.sigma: bounds must be non-decreasing in confidence")
    R = b.get("R")
    if (
        not isinstance(R, list) or len(R) != 2
        or any(not isinstance(r, list) or len(r) != 2 or not all(map(_is_num, r)) for r in R)
    ):
        raise ModelFileError(f"{where}.R: expected a 2x2 numeric array")
    R = np.array(R, dtype=np.float64)
    if R[0, 1] != R[1, 0]:
        raise ModelFileError(f"{where}.R: covariance must be symmetric")
    if np.linalg.eigvalsh(R)[0] < 0:
        raise ModelFileError(f"{where}.R: covariance must be positive semi-definite")
    return Bin(b["lo"], b["hi"], b["count"], curve, R)


def _check_bins(bins: Sequence[Bin], where: str) -> None:
    if not bins:
        raise ModelFileError(f"{where}: at least one bin required")
    if bins[0].lo != 0:
        raise ModelFileError(f"{where}[0].lo: first bin must start at 0")
    grid = set(bins[0].sigma_curve)
    for j, b in enumerate(bins):
        last = j == len(bins) - 1
        if last and b.hi is not None:
            raise ModelFileError(f"{where}[{j}].hi: last bin must be open-ended (null)")
        if not last:
            if b.hi is None:
                raise ModelFileError(f"{where}[{j}].hi: only the last bin may be open-ended")
            if b.hi <= b.lo:
                raise ModelFileError(f"{where}[{j}]: empty or inverted interval")
            nxt = bins[j + 1].lo
            if nxt < b.hi:
                raise ModelFileError(f"{where}[{j + 1}]: overlaps the previous bin")
            if nxt > b.hi:
                raise ModelFileError(f"{where}[{j + 1}]: gap after the previous bin")
        if set(b.sigma_curve) != grid:
            raise ModelFileError(f"{where}[{j}].sigma: confidence levels differ between bins")
