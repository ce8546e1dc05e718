"""Location prediction by image retrieval over several traversal databases.

Candidates are gathered per traversal by global-descriptor distance, then
ranked by keypoint-match count.  The winner's ground-truth location becomes
the predicted location.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .core import Frame, FrameBatch, Traversal, as_batch, check_unique_frame_ids
from .matcher import MatchOutcome, SyntheticMatcher


@dataclass(frozen=True)
class RetrievalConfig:
    databases: Sequence[Traversal]
    candidates_per_traversal: int = 3
    pooled: bool = False

    def __post_init__(self):
        if self.candidates_per_traversal < 1:
            raise ValueError("candidates_per_traversal must be >= 1")
        if not self.databases:
            raise ValueError("at least one database traversal is required")


@dataclass(frozen=True)
class Prediction:
    query_frame_id: int
    predicted_location: tuple[float, float]
    source_traversal_id: int
    source_frame_id: int
    n_kpm: int
    desc_dist: float
    all_candidates: list[tuple[Frame, MatchOutcome]] = field(default_factory=list, repr=False)


def _top_p(dist: np.ndarray, ids: np.ndarray, p: int) -> np.ndarray:
    """Column indices of the ``p`` smallest entries per row, ascending, ties by id."""
    nq, nk = dist.shape
    p = min(p, nk)
    if p < nk:
        part = np.argpartition(dist, p - 1, axis=1)[:, :p]
    else:
        part = np.broadcast_to(np.arange(nk), (nq, nk)).copy()
    sel = np.take_along_axis(dist, part, axis=1)
    order = np.lexsort((ids[part], sel), axis=1)
    out = np.take_along_axis(part, order, axis=1)
    if p < nk:
        # argpartition is arbitrary among equal distances; redo rows tied at the cutoff
        thr = sel.max(axis=1)
        tied = np.flatnonzero((dist <= thr[:, None]).sum(axis=1) > p)
        for r in tied:
            out[r] = np.lexsort((ids, dist[r]))[:p]
    return out


def retrieve_candidates(q: Frame, db: Traversal, p: int) -> list[Frame]:
    """The ``min(p, len(db))`` frames of ``db`` closest to ``q`` in descriptor space."""
    if len(db) == 0:
        raise ValueError(f"database traversal {db.traversal_id} is empty")
    if p < 1:
        raise ValueError("p must be >= 1")
    if db.descriptors.shape[1] != q.descriptor.shape[0]:
        raise ValueError("descriptor length mismatch between query and database")
    dist = cdist(q.descriptor[None, :], db.descriptors)
    idx = _top_p(dist, db.frame_ids, p)[0]
    return [db.frames[i] for i in idx]


@dataclass
class RetrievalResult:
    """Column-wise retrieval output for a batch of query frames."""

    query_frame_ids: np.ndarray
    locations: np.ndarray
    source_traversal_ids: np.ndarray
    source_frame_ids: np.ndarray
    n_kpm: np.ndarray
    desc_dist: np.ndarray
    # (n_query, n_candidates) candidate bookkeeping
    cand_db: np.ndarray
    cand_idx: np.ndarray
    cand_n_kpm: np.ndarray
    cand_desc_dist: np.ndarray

    def __len__(self):
        return len(self.query_frame_ids)


class RetrievalLocalizer(BaseEstimator):
    """Nearest-image localizer over one or more traversal databases.

    Parameters
    ----------
    candidates_per_traversal : int
        Number of global-descriptor candidates taken from each database
        traversal (``p``).  In pooled mode ``p * n_databases`` candidates are
        taken from the union of all databases instead.
    pooled : bool
        Treat all databases as one combined database (ablation baseline).
    matcher : SyntheticMatcher or None
        Anything exposing ``match`` and ``global_distance``.  The synthetic
        matcher additionally takes a vectorized fast path.
    """

    def __init__(self, candidates_per_traversal=3, pooled=False, matcher=None):
        self.candidates_per_traversal = candidates_per_traversal
        self.pooled = pooled
        self.matcher = matcher

    def fit(self, databases: Sequence[Traversal], y=None):
        if isinstance(databases, Traversal):
            databases = [databases]
        databases = list(databases)
        if not databases:
            raise ValueError("at least one database traversal is required")
        if int(self.candidates_per_traversal) < 1:
            raise ValueError("candidates_per_traversal must be >= 1")
        if all(len(db) == 0 for db in databases):
            raise ValueError("all database traversals are empty")
        dims = {db.descriptors.shape[1] for db in databases if len(db)}
        if len(dims) != 1:
            raise ValueError("descriptor length differs across databases")
        check_unique_frame_ids(databases)
        self.databases_ = [db for db in databases if len(db)]
        self.matcher_ = self.matcher if self.matcher is not None else SyntheticMatcher()
        self.n_features_in_ = dims.pop()
        return self

    def _groups(self):
        if not self.pooled:
            return [[i] for i in range(len(self.databases_))]
        return [list(range(len(self.databases_)))]

    def retrieve(self, queries) -> RetrievalResult:
        """Run retrieval for a traversal (or sequence of frames) of queries."""
        check_is_fitted(self, "databases_")
        q = as_batch(queries)
        if len(q) == 0:
            raise ValueError("no query frames")
        if q.descriptors.shape[1] != self.n_features_in_:
            raise ValueError("descriptor length mismatch between queries and databases")
        p = int(self.candidates_per_traversal)
        fast = isinstance(self.matcher_, SyntheticMatcher)
        cand_db, cand_idx = [], []
        for group in self._groups():
            dbs = [self.databases_[g] for g in group]
            desc = np.concatenate([db.descriptors for db in dbs])
            ids = np.concatenate([db.frame_ids for db in dbs])
            owner = np.concatenate([np.full(len(db), g) for g, db in zip(group, dbs)])
            local = np.concatenate([np.arange(len(db)) for db in dbs])
            if fast:
                dist = cdist(q.descriptors, desc)
            else:
                frames = [f for db in dbs for f in db]
                dist = np.array(
                    [[self.matcher_.global_distance(qf, k) for k in frames] for qf in q]
                )
            top = _top_p(dist, ids, p * len(group))
            cand_db.append(owner[top])
            cand_idx.append(local[top])
        cand_db = np.concatenate(cand_db, axis=1)
        cand_idx = np.concatenate(cand_idx, axis=1)
        n, dd = self._match(q, cand_db, cand_idx, fast)

        fids = np.empty_like(cand_idx)
        for g, db in enumerate(self.databases_):
            m = cand_db == g
            fids[m] = db.frame_ids[cand_idx[m]]
        order = np.lexsort((fids, dd, -n), axis=1)
        win = order[:, 0]
        rows = np.arange(len(q))
        wdb, widx = cand_db[rows, win], cand_idx[rows, win]
        locs = np.empty((len(q), 2))
        tids = np.empty(len(q), dtype=np.int64)
        for g, db in enumerate(self.databases_):
            m = wdb == g
            locs[m] = db.positions[widx[m]]
            tids[m] = db.traversal_id
        return RetrievalResult(
            query_frame_ids=q.frame_ids.copy(),
            locations=locs,
            source_traversal_ids=tids,
            source_frame_ids=fids[rows, win],
            n_kpm=n[rows, win],
            desc_dist=dd[rows, win],
            cand_db=cand_db,
            cand_idx=cand_idx,
            cand_n_kpm=n,
            cand_desc_dist=dd,
        )

    def _match(self, q: FrameBatch, cand_db, cand_idx, fast):
        shape = cand_db.shape
        if not fast:
            n = np.empty(shape, dtype=np.int64)
            dd = np.empty(shape)
            for r, qf in enumerate(q):
                for c in range(shape[1]):
                    out = self.matcher_.match(qf, self.databases_[cand_db[r, c]][cand_idx[r, c]])
                    n[r, c], dd[r, c] = out.n_kpm, out.desc_dist
            return n, dd
        k_pos = np.empty(shape + (2,))
        k_desc = np.empty(shape + (q.descriptors.shape[1],))
        k_ids = np.empty(shape, dtype=np.int64)
        k_corr = np.empty(shape)
        k_cond = np.empty(shape, dtype=object)
        for g, db in enumerate(self.databases_):
            m = cand_db == g
            sel = cand_idx[m]
            k_pos[m] = db.positions[sel]
            k_desc[m] = db.descriptors[sel]
            k_ids[m] = db.frame_ids[sel]
            k_corr[m] = db.corruption[sel]
            k_cond[m] = db.conditions[sel]
        compat = self.matcher_.pair_compat(q.conditions[:, None], k_cond)
        n = self.matcher_.match_counts(
            q.positions[:, None, :],
            k_pos,
            compat,
            q.frame_ids[:, None],
            k_ids,
            q.corruption[:, None],
            k_corr,
        )
        dd = np.linalg.norm(q.descriptors[:, None, :] - k_desc, axis=-1)
        return n, dd

    def predict(self, queries, keep_candidates: bool = True) -> list[Prediction]:
        """Predictions for each query frame, in query order."""
        q = as_batch(queries)
        res = self.retrieve(q)
        out = []
        for r in range(len(res)):
            cands = []
            if keep_candidates:
                for c in range(res.cand_db.shape[1]):
                    frame = self.databases_[res.cand_db[r, c]][res.cand_idx[r, c]]
                    cands.append(
                        (frame, MatchOutcome(int(res.cand_n_kpm[r, c]), float(res.cand_desc_dist[r, c])))
                    )
            out.append(
                Prediction(
                    query_frame_id=int(res.query_frame_ids[r]),
                    predicted_location=(float(res.locations[r, 0]), float(res.locations[r, 1])),
                    source_traversal_id=int(res.source_traversal_ids[r]),
                    source_frame_id=int(res.source_frame_ids[r]),
                    n_kpm=int(res.n_kpm[r]),
                    desc_dist=float(res.desc_dist[r]),
                    all_candidates=cands,
                )
            )
        return out


def predict_location(q: Frame, cfg: RetrievalConfig, matcher=None) -> Prediction:
    """Localize a single query frame against ``cfg.databases``."""
    loc = RetrievalLocalizer(cfg.candidates_per_traversal, cfg.pooled, matcher).fit(cfg.databases)
    return loc.predict([q])[0]
