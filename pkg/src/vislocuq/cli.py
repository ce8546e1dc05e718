"""Command-line pipeline: simulate -> calibrate -> localize -> evaluate.

Every command reads one :class:`RunConfig`.  The config file is a single
JSON document and every leaf field has a ``--section.field`` flag override
(values are parsed as JSON, falling back to a plain string); flags win.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .core import Frame, Pose2, Traversal, check_unique_frame_ids
from .errormodel import CONFIDENCE_GRID, ErrorModelSet, ModelFileError, cross_validate
from .evaluation import (
    BASELINE_GRID,
    ConstantCovarianceBaseline,
    EvalReport,
    FilterRun,
    QueryMeasurements,
    leave_one_out_measurements,
    measure_query,
)
from .matcher import DEFAULT_COMPAT, SyntheticMatcher, SyntheticMatcherConfig
from .retrieval import RetrievalLocalizer
from .synth import (
    CORRUPTION_SUPPRESSION,
    DATABASE_CONDITIONS,
    QUERY_CONDITIONS,
    CorruptionSpec,
    make_paper_scenario,
    traversal_seeds,
)
from .ukf import DEFAULT_Q_RATE, FilterDivergence, GateConfig, InitConfig, UnscentedLocalizer, UtParams

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

GATE_CHOICES = ("off", "0.99", "0.975", "0.95")
MANIFEST = "manifest.json"
FRAME_KEYS = (
    "frame_id", "traversal_id", "t", "x", "y", "heading", "condition",
    "descriptor", "appearance_seed", "corruption",
)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class DataError(ValueError):
    """Missing, malformed or mutually inconsistent input files."""


def _compat_key(a: str, b: str) -> str:
    return f"{a},{b}"


DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "paths": {
        "dataset_dir": "data",
        "model_file": "models.json",
        "trajectory_dir": "trajectories",
        "report_dir": "report",
    },
    "scenario": {
        "route_length": 2000.0,
        "along_track_jitter": 0.4,
        "lateral_offset_sigma": 0.1,
        "query_gps_jitter": 0.0,
        "corruption": None,
    },
    "retrieval": {"p": 3, "pooled": False},
    "error_model": {
        "bin_width": 200,
        "min_bin_count": 20,
        "confidence_grid": list(CONFIDENCE_GRID),
    },
    "matcher": {
        "n_max": 2000,
        "length_scale": 5.0,
        "noise_sigma": 0.4,
        "rng_seed": 0,
        "condition_compat": {_compat_key(*k): v for k, v in DEFAULT_COMPAT.items()},
    },
    "filter": {
        "process_noise_rate": [float(q) for q in DEFAULT_Q_RATE],
        "ut": {"alpha": 1.0, "beta": 2.0, "kappa": None},
        "init": {
            "heading_var": InitConfig.heading_var,
            "speed_var": InitConfig.speed_var,
            "yaw_rate_var": InitConfig.yaw_rate_var,
        },
        "gate_burn_in": 50,
    },
    "gate": "off",
    "baseline": {
        "method": "adaptive",
        "grid": list(BASELINE_GRID),
        "validation_per_condition": 1,
    },
}


# -- config ---------------------------------------------------------------


def _leaves(d: dict, prefix: str = ""):
    for k, v in d.items():
        path = f"{prefix}{k}"
        if isinstance(v, dict) and k != "condition_compat":
            yield from _leaves(v, path + ".")
        else:
            yield path, v


def _merge(base: dict, over: dict, where: str = "$") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"{where}.{k}: unknown config field")
        if isinstance(base[k], dict) and k != "condition_compat":
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k}: expected an object")
            out[k] = _merge(base[k], v, f"{where}.{k}")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _set_path(doc: dict, path: str, value) -> None:
    *head, last = path.split(".")
    node = doc
    for k in head:
        node = node[k]
    node[last] = value


def _num(v, name: str, lo=None, hi=None, integer=False, lo_open=False) -> float:
    ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    if integer:
        ok = ok and float(v) == int(v)
    if not ok or not math.isfinite(v):
        raise ConfigError(f"{name}: expected a finite {'integer' if integer else 'number'}, got {v!r}")
    if lo is not None and (v <= lo if lo_open else v < lo):
        raise ConfigError(f"{name}: must be {'>' if lo_open else '>='} {lo}, got {v!r}")
    if hi is not None and v > hi:
        raise ConfigError(f"{name}: must be <= {hi}, got {v!r}")
    return int(v) if integer else float(v)


@dataclass(frozen=True)
class RunConfig:
    """Validated pipeline configuration; see ``DEFAULT_CONFIG`` for the layout."""

    doc: dict

    @classmethod
    def from_dict(cls, over: dict | None = None) -> "RunConfig":
        doc = _merge(DEFAULT_CONFIG, over or {})
        g = doc["gate"]
        if isinstance(g, (int, float)) and not isinstance(g, bool):
            doc["gate"] = repr(float(g))
        cls._validate(doc)
        return cls(doc)

    @staticmethod
    def _validate(d: dict) -> None:
        _num(d["seed"], "seed", lo=0, integer=True)
        for k, v in d["paths"].items():
            if not isinstance(v, str) or not v:
                raise ConfigError(f"paths.{k}: expected a non-empty string")
        sc = d["scenario"]
        _num(sc["route_length"], "scenario.route_length", lo=10.0)
        _num(sc["along_track_jitter"], "scenario.along_track_jitter", lo=0.0, hi=0.5)
        _num(sc["lateral_offset_sigma"], "scenario.lateral_offset_sigma", lo=0.0)
        _num(sc["query_gps_jitter"], "scenario.query_gps_jitter", lo=0.0)
        if sc["corruption"] is not None:
            _corruption_spec(sc["corruption"])
        r = d["retrieval"]
        _num(r["p"], "retrieval.p", lo=1, integer=True)
        if not isinstance(r["pooled"], bool):
            raise ConfigError("retrieval.pooled: expected a boolean")
        em = d["error_model"]
        _num(em["bin_width"], "error_model.bin_width", lo=1, integer=True)
        _num(em["min_bin_count"], "error_model.min_bin_count", lo=1, integer=True)
        grid = em["confidence_grid"]
        if not isinstance(grid, list) or not grid:
            raise ConfigError("error_model.confidence_grid: expected a non-empty array")
        for c in grid:
            _num(c, "error_model.confidence_grid[]", lo=0.0, hi=1.0, lo_open=True)
        if len(set(grid)) != len(grid):
            raise ConfigError("error_model.confidence_grid: duplicate levels")
        _matcher_config(d["matcher"])
        f = d["filter"]
        q = f["process_noise_rate"]
        if not isinstance(q, list) or len(q) != 5:
            raise ConfigError("filter.process_noise_rate: expected 5 numbers")
        for v in q:
            _num(v, "filter.process_noise_rate[]", lo=0.0)
        _ut_params(f["ut"])
        for k, v in f["init"].items():
            _num(v, f"filter.init.{k}", lo=0.0, lo_open=True)
        _num(f["gate_burn_in"], "filter.gate_burn_in", lo=0, integer=True)
        if d["gate"] not in GATE_CHOICES:
            raise ConfigError(f"gate: expected one of {', '.join(GATE_CHOICES)}, got {d['gate']!r}")
        b = d["baseline"]
        if b["method"] not in ("adaptive", "constant"):
            raise ConfigError("baseline.method: expected 'adaptive' or 'constant'")
        if not isinstance(b["grid"], list) or not b["grid"]:
            raise ConfigError("baseline.grid: expected a non-empty array")
        for v in b["grid"]:
            _num(v, "baseline.grid[]", lo=0.0, lo_open=True)
        if b["validation_per_condition"] is not None:
            _num(b["validation_per_condition"], "baseline.validation_per_condition", lo=1, integer=True)

    def __getitem__(self, key):
        return self.doc[key]

    def path(self, key: str) -> Path:
        return Path(self.doc["paths"][key])

    @property
    def matcher(self) -> SyntheticMatcher:
        return SyntheticMatcher(_matcher_config(self.doc["matcher"]))

    @property
    def gate(self) -> GateConfig:
        return GateConfig.parse(self.doc["gate"])

    def filter_params(self) -> dict:
        f = self.doc["filter"]
        return {
            "process_noise_rate": np.array(f["process_noise_rate"], dtype=np.float64),
            "ut": _ut_params(f["ut"]),
            "init": InitConfig(**{k: float(v) for k, v in f["init"].items()}),
            "gate_burn_in": int(f["gate_burn_in"]),
        }


def _corruption_spec(c) -> CorruptionSpec:
    if not isinstance(c, dict) or set(c) - {"segment", "mode", "severity"}:
        raise ConfigError("scenario.corruption: expected {segment, mode, severity} or null")
    if c.get("mode", "blur_like") not in CORRUPTION_SUPPRESSION:
        raise ConfigError(f"scenario.corruption.mode: expected one of {sorted(CORRUPTION_SUPPRESSION)}")
    try:
        seg = tuple(float(x) for x in c.get("segment", CorruptionSpec.segment))
        if len(seg) != 2:
            raise ValueError("segment needs two fractions")
        return CorruptionSpec(seg, c.get("mode", "blur_like"), float(c.get("severity", 1.0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scenario.corruption: {exc}") from None


def _matcher_config(m: dict) -> SyntheticMatcherConfig:
    _num(m["n_max"], "matcher.n_max", lo=1, integer=True)
    _num(m["length_scale"], "matcher.length_scale", lo=0.0, lo_open=True)
    _num(m["noise_sigma"], "matcher.noise_sigma", lo=0.0)
    _num(m["rng_seed"], "matcher.rng_seed", lo=0, integer=True)
    compat = {}
    if not isinstance(m["condition_compat"], dict):
        raise ConfigError("matcher.condition_compat: expected an object")
    for key, v in m["condition_compat"].items():
        parts = key.split(",")
        if len(parts) != 2 or not all(parts):
            raise ConfigError(f"matcher.condition_compat: key {key!r} must read 'a,b'")
        compat[tuple(parts)] = _num(v, f"matcher.condition_compat.{key}", lo=0.0, hi=1.0)
    return SyntheticMatcherConfig(
        n_max=int(m["n_max"]),
        length_scale=float(m["length_scale"]),
        condition_compat=compat,
        noise_sigma=float(m["noise_sigma"]),
        rng_seed=int(m["rng_seed"]),
    )


def _ut_params(u: dict) -> UtParams:
    _num(u["alpha"], "filter.ut.alpha", lo=0.0, lo_open=True)
    _num(u["beta"], "filter.ut.beta")
    if u["kappa"] is not None:
        _num(u["kappa"], "filter.ut.kappa")
    try:
        return UtParams(float(u["alpha"]), float(u["beta"]), None if u["kappa"] is None else float(u["kappa"]))
    except ValueError as exc:
        raise ConfigError(f"filter.ut: {exc}") from None


# top-level fields with dedicated flags
_NAMED_FLAGS = ("seed", "gate")


def _parse_flag_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args: argparse.Namespace) -> RunConfig:
    doc: dict = {}
    if args.config is not None:
        try:
            with open(args.config, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: expected a JSON object")
    doc = _merge(DEFAULT_CONFIG, doc)
    for path, _ in _leaves(DEFAULT_CONFIG):
        if path in _NAMED_FLAGS:
            continue
        v = getattr(args, "set_" + path.replace(".", "__"), None)
        if v is not None:
            _set_path(doc, path, _parse_flag_value(v))
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.gate is not None:
        doc["gate"] = args.gate
    if args.baseline is not None:
        doc["baseline"]["method"] = args.baseline
    if args.pooled_retrieval:
        doc["retrieval"]["pooled"] = True
    if args.corruption is not None:
        doc["scenario"]["corruption"] = None if args.corruption == "none" else {"mode": args.corruption}
    return RunConfig.from_dict(doc)


# -- file formats ---------------------------------------------------------


def _dumps(obj) -> str:
    # float repr is round-trip exact; NaN is written as null
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def _float_or_none(v: float):
    return None if not math.isfinite(v) else float(v)


def frame_record(f: Frame) -> dict:
    return {
        "frame_id": int(f.frame_id),
        "traversal_id": int(f.traversal_id),
        "t": float(f.t),
        "x": float(f.pose.x),
        "y": float(f.pose.y),
        "heading": float(f.pose.heading),
        "condition": f.condition,
        "descriptor": [float(v) for v in f.descriptor],
        "appearance_seed": int(f.appearance_seed),
        "corruption": float(f.corruption),
    }


def parse_frame(rec, where: str) -> Frame:
    if not isinstance(rec, dict) or set(rec) != set(FRAME_KEYS):
        raise DataError(f"{where}: expected keys {', '.join(FRAME_KEYS)}")
    try:
        return Frame(
            frame_id=_as_int(rec["frame_id"]),
            traversal_id=_as_int(rec["traversal_id"]),
            t=float(rec["t"]),
            pose=Pose2(float(rec["x"]), float(rec["y"]), float(rec["heading"])),
            condition=rec["condition"],
            descriptor=np.array(rec["descriptor"], dtype=np.float64),
            appearance_seed=_as_int(rec["appearance_seed"]),
            corruption=float(rec["corruption"]),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"{where}: {exc}") from None


def _as_int(v) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise TypeError(f"expected an integer, got {v!r}")
    return v


def write_traversal(path: Path, trav: Traversal) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in trav:
            fh.write(_dumps(frame_record(f)) + "\n")


def _read_jsonl(path: Path) -> list:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    out = []
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{i}: {exc.msg}") from None
    return out


def read_traversal(path: Path, traversal_id: int) -> Traversal:
    frames = [parse_frame(rec, f"{path}:{i}") for i, rec in enumerate(_read_jsonl(path), 1)]
    try:
        return Traversal(traversal_id, frames)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def _read_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def load_dataset(root: Path) -> tuple[list[Traversal], list[Traversal], dict]:
    """``(databases, queries, manifest)`` from a dataset directory."""
    manifest = _read_json(root / MANIFEST)
    entries = manifest.get("traversals") if isinstance(manifest, dict) else None
    if not isinstance(entries, list):
        raise DataError(f"{root / MANIFEST}: missing traversal list")
    dbs, queries = [], []
    for e in entries:
        try:
            trav = read_traversal(root / e["file"], int(e["traversal_id"]))
            role = e["role"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{root / MANIFEST}: malformed traversal entry {e!r}") from exc
        if len(trav) != e.get("n_frames"):
            raise DataError(f"{e['file']}: {len(trav)} frames, manifest says {e.get('n_frames')}")
        if role not in ("database", "query"):
            raise DataError(f"{root / MANIFEST}: unknown role {role!r} for traversal {trav.traversal_id}")
        (dbs if role == "database" else queries).append(trav)
    try:
        check_unique_frame_ids(dbs + queries)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return dbs, queries, manifest


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def report_schema() -> dict:
    """JSON schema of the evaluation report shipped with the package."""
    text = resources.files("vislocuq").joinpath("schemas/report.schema.json").read_text("utf-8")
    return json.loads(text)


# -- commands ---------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out=sys.stdout) -> None:
    root = _writable_dir(cfg.path("dataset_dir"))
    sc = cfg["scenario"]
    corruption = None if sc["corruption"] is None else _corruption_spec(sc["corruption"])
    dbs, queries = make_paper_scenario(
        seed=cfg["seed"],
        route_length=float(sc["route_length"]),
        corruption=corruption,
        along_track_jitter=float(sc["along_track_jitter"]),
        lateral_offset_sigma=float(sc["lateral_offset_sigma"]),
        query_gps_jitter=float(sc["query_gps_jitter"]),
    )
    seeds = traversal_seeds(cfg["seed"], len(DATABASE_CONDITIONS) + len(QUERY_CONDITIONS))
    entries = []
    for role, travs in (("database", dbs), ("query", queries)):
        for trav in travs:
            name = f"traversal_{trav.traversal_id:03d}.jsonl"
            write_traversal(root / name, trav)
            entry = {
                "traversal_id": trav.traversal_id,
                "role": role,
                "condition": trav.condition,
                "n_frames": len(trav),
                "n_corrupted": int(np.count_nonzero(trav.corruption)),
                "seed": seeds[len(entries)],
                "file": name,
            }
            if role == "query" and corruption is not None:
                entry["corrupted_segment"] = {
                    "segment": list(corruption.segment),
                    "mode": corruption.mode,
                    "severity": corruption.severity,
                }
            entries.append(entry)
    manifest = {"seed": cfg["seed"], "scenario": sc, "traversals": entries}
    _write_text(root / MANIFEST, json.dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(entries)} traversals to {root}", file=out)


def cmd_calibrate(cfg: RunConfig, out=sys.stdout) -> ErrorModelSet:
    dbs, _, _ = load_dataset(cfg.path("dataset_dir"))
    if len(dbs) < 2:
        raise DataError(
            "sensor error models need at least two database traversals: each one is "
            "calibrated by localizing the others against it"
        )
    model_file = cfg.path("model_file")
    _writable_dir(model_file.parent if str(model_file.parent) else Path("."))
    em = cfg["error_model"]
    samples = cross_validate(dbs, cfg["retrieval"]["p"], cfg.matcher)
    models = ErrorModelSet.from_samples(
        samples, em["bin_width"], em["min_bin_count"], tuple(float(c) for c in em["confidence_grid"])
    )
    models.save(model_file)
    print(f"{'db':>4} {'bin':>12} {'count':>6} {'sigma50':>9} {'sigma95':>9}", file=out)
    for tid in sorted(models):
        for b in models[tid].bins_:
            hi = "inf" if b.hi is None else str(b.hi)
            s50 = b.sigma_curve.get(0.5, float("nan"))
            s95 = b.sigma_curve.get(0.95, float("nan"))
            print(f"{tid:>4} {f'[{b.lo},{hi})':>12} {b.samples:>6} {s50:>9.3f} {s95:>9.3f}", file=out)
    return models


def _trajectory_record(meas: QueryMeasurements, i: int, rec) -> dict:
    st = rec.state
    return {
        "frame_id": int(meas.frame_ids[i]),
        "t": float(meas.t[i]),
        "z": [float(v) for v in meas.z[i]],
        "source_traversal_id": int(meas.source_traversal_ids[i]),
        "n_kpm": int(meas.n_kpm[i]),
        "sigma": [float(v) for v in meas.sigma[i]],
        "R_ego": [[float(v) for v in row] for row in meas.R_ego[i]],
        "R_world": [[float(v) for v in row] for row in rec.R_world],
        "mean": [float(v) for v in st.mean],
        "cov": [[float(v) for v in row] for row in st.cov],
        "accepted": bool(rec.accepted),
        "d2": _float_or_none(rec.d2),
        "reason": rec.reason,
    }


def cmd_localize(cfg: RunConfig, out=sys.stdout) -> None:
    root = cfg.path("dataset_dir")
    dbs, queries, _ = load_dataset(root)
    if not dbs or not queries:
        raise DataError(f"{root}: need database and query traversals")
    try:
        models = ErrorModelSet.load(cfg.path("model_file"))
    except OSError as exc:
        raise DataError(f"cannot read model file {cfg.path('model_file')}: {exc.strerror}") from None
    missing = sorted({db.traversal_id for db in dbs} - set(models))
    if missing:
        raise DataError(f"model file has no sensor error model for database traversals {missing}")
    traj_dir = _writable_dir(cfg.path("trajectory_dir"))
    p, matcher = cfg["retrieval"]["p"], cfg.matcher
    loc = RetrievalLocalizer(p, pooled=cfg["retrieval"]["pooled"], matcher=matcher).fit(dbs)
    gate, fparams = cfg.gate, cfg.filter_params()
    baseline_var = None
    if cfg["baseline"]["method"] == "constant":
        b = cfg["baseline"]
        val = leave_one_out_measurements(dbs, models, p, matcher, b["validation_per_condition"])
        bl = ConstantCovarianceBaseline(tuple(b["grid"]), True, gate, fparams).fit(val)
        baseline_var = dict(bl.sigma2_)
    entries = []
    for q in queries:
        meas = measure_query(loc, models, q)
        var = None if baseline_var is None else _baseline_for(baseline_var, meas.condition)
        records = UnscentedLocalizer(gate=gate, **fparams).run(meas.observations(var))
        name = f"trajectory_{q.traversal_id:03d}.jsonl"
        with open(traj_dir / name, "w", encoding="utf-8", newline="\n") as fh:
            for i, rec in enumerate(records):
                fh.write(_dumps(_trajectory_record(meas, i, rec)) + "\n")
        entries.append(
            {"traversal_id": q.traversal_id, "condition": meas.condition, "n_records": len(records),
             "constant_var": var, "file": name}
        )
    manifest = {
        "method": cfg["baseline"]["method"],
        "gate": gate.label(),
        "pooled_retrieval": cfg["retrieval"]["pooled"],
        "confidence_grid": [float(c) for c in meas.grid],
        "baseline_var": baseline_var,
        "queries": entries,
    }
    _write_text(traj_dir / MANIFEST, json.dumps(manifest, indent=1) + "\n")
    print(f"localized {len(entries)} query traversals into {traj_dir}", file=out)


def _baseline_for(table: dict, condition: str) -> float:
    try:
        return table[condition]
    except KeyError:
        raise DataError(f"constant baseline was not tuned for condition {condition!r}") from None


def _load_run(path: Path, query: Traversal, entry: dict, grid: tuple, method: str, gate: str) -> FilterRun:
    recs = _read_jsonl(path)
    ids = [r.get("frame_id") if isinstance(r, dict) else None for r in recs]
    if ids != [int(v) for v in query.frame_ids]:
        raise DataError(f"{path}: frame ids do not match query traversal {query.traversal_id}")
    try:
        arr = lambda key, dt=np.float64: np.array([r[key] for r in recs], dtype=dt)  # noqa: E731
        meas = QueryMeasurements(
            traversal_id=query.traversal_id,
            condition=entry["condition"],
            frame_ids=query.frame_ids,
            t=query.times,
            truth=query.positions,
            z=arr("z").reshape(-1, 2),
            source_traversal_ids=arr("source_traversal_id", np.int64),
            n_kpm=arr("n_kpm", np.int64),
            sigma=arr("sigma").reshape(len(recs), len(grid)),
            R_ego=arr("R_ego").reshape(-1, 2, 2),
            grid=grid,
        )
        mean = arr("mean").reshape(-1, 5)
        cov = arr("cov").reshape(-1, 5, 5)
        d2 = np.array([math.nan if r["d2"] is None else r["d2"] for r in recs], dtype=np.float64)
        accepted = np.array([r["accepted"] for r in recs], dtype=bool)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}: malformed trajectory record ({exc})") from None
    return FilterRun(meas, mean[:, :2], cov[:, :2, :2], accepted, d2, method, gate)


def cmd_evaluate(cfg: RunConfig, out=sys.stdout) -> EvalReport:
    _, queries, _ = load_dataset(cfg.path("dataset_dir"))
    traj_dir = cfg.path("trajectory_dir")
    manifest = _read_json(traj_dir / MANIFEST)
    report_dir = _writable_dir(cfg.path("report_dir"))
    by_id = {q.traversal_id: q for q in queries}
    try:
        grid = tuple(float(c) for c in manifest["confidence_grid"])
        entries = manifest["queries"]
        method, gate = manifest["method"], manifest["gate"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"{traj_dir / MANIFEST}: malformed manifest") from exc
    runs = []
    for e in entries:
        q = by_id.get(e.get("traversal_id"))
        if q is None:
            raise DataError(f"trajectory for unknown query traversal {e.get('traversal_id')}")
        runs.append(_load_run(traj_dir / e["file"], q, e, grid, method, gate))
    report = EvalReport.from_runs(runs, manifest.get("baseline_var"))
    doc = report.to_dict()
    doc["pooled_retrieval"] = bool(manifest.get("pooled_retrieval", False))
    _write_text(report_dir / "report.json", json.dumps(doc, indent=1, allow_nan=False) + "\n")
    _write_text(report_dir / "table.csv", report.table_csv())
    _write_text(report_dir / "reliability.csv", report.reliability_csv())
    cred = "/".join(f"{v:.1f}" for v in report.cov_credibility)
    print(
        f"{method} gate={gate}: d_err={report.d_err:.3f} m  cred={cred} %  n_r={report.n_r:.2f} %",
        file=out,
    )
    return report


COMMANDS = {
    "simulate": cmd_simulate,
    "calibrate": cmd_calibrate,
    "localize": cmd_localize,
    "evaluate": cmd_evaluate,
}


_HELP = {
    "simulate": "write the synthetic dataset (frames JSONL per traversal plus manifest)",
    "calibrate": "cross-validate the databases and write the sensor error model file",
    "localize": "retrieve, look up uncertainty and filter every query; write trajectories",
    "evaluate": "score trajectories against ground truth; write report JSON and CSV tables",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="scenario seed")
    common.add_argument("--gate", choices=GATE_CHOICES, help="chi-square gate level or off")
    common.add_argument("--baseline", choices=("constant", "adaptive"), help="measurement covariance")
    common.add_argument("--pooled-retrieval", action="store_true", help="pool all databases (ablation)")
    common.add_argument("--corruption", choices=("none", *sorted(CORRUPTION_SUPPRESSION)),
                        help="corrupt a default segment of each query")
    fields = common.add_argument_group("config fields (JSON values)")
    for path, default in _leaves(DEFAULT_CONFIG):
        if path in _NAMED_FLAGS:
            continue
        fields.add_argument(f"--{path}", dest="set_" + path.replace(".", "__"), metavar="V",
                            help=f"default {json.dumps(default)}")
    parser = argparse.ArgumentParser(prog="vislocuq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=_HELP[name])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors, which is our config error code
        return int(exc.code or 0)
    try:
        cfg = load_config(args)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FilterDivergence, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ModelFileError, KeyError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
