"""File formats: point-data and result CSVs, run configuration, checkpoints.

Floats are written with 17 significant digits so every CSV round-trips
through the readers without loss.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from raisor.approx import MixtureProposal
from raisor.errors import ConfigError, InvalidArgument
from raisor.sampling import WeightedSample

CONFIG_FORMAT = "raisor.config"
CONFIG_VERSION = 1
CHECKPOINT_FORMAT = "raisor.checkpoint"
CHECKPOINT_VERSION = 1

COORD_PAIRS = (("lon", "lat"), ("x", "y"))
TRACE_COLUMNS = ("n", "ress", "event", "seconds", "n_evals")


def fmt(value) -> str:
    """Lossless text form of a number."""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value)) if math.isfinite(value) else str(float(value))
    return str(value)


def write_rows(path, header, rows):
    """Write a header and rows; numbers go through :func:`fmt`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def read_rows(path):
    """Header and raw string rows of a CSV file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration as exc:
            raise InvalidArgument(f"{path}: empty file, a header is required") from exc
        rows = [row for row in reader if row]
    for i, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise InvalidArgument(f"{path}:{i}: expected {len(header)} fields, got {len(row)}")
    return header, rows


def _float_table(path, header, rows, columns):
    idx = [header.index(c) for c in columns]
    try:
        out = np.array([[float(row[i]) for i in idx] for row in rows], dtype=float)
    except ValueError as exc:
        raise InvalidArgument(f"{path}: non-numeric value ({exc})") from exc
    return out.reshape(len(rows), len(columns))


# point data ------------------------------------------------------------------------


@dataclass
class PointData:
    """Observations at spatial locations with optional extra covariates."""

    coords: np.ndarray
    values: np.ndarray
    covariates: np.ndarray | None = None
    coord_names: tuple = ("x", "y")
    covariate_names: tuple = ()

    @property
    def n(self) -> int:
        return self.values.size

    def design(self) -> np.ndarray:
        """``[1, coords, covariates]``."""
        cols = [np.ones(self.n), self.coords]
        if self.covariates is not None and self.covariates.size:
            cols.append(self.covariates)
        return np.column_stack(cols)


def read_points_csv(path) -> PointData:
    """Read ``lon,lat`` (or ``x,y``), ``value`` and optional covariate columns.

    Raises:
        InvalidArgument: on a missing header, missing columns or NaN values.
    """
    header, rows = read_rows(path)
    names = next((pair for pair in COORD_PAIRS if set(pair) <= set(header)), None)
    if names is None or "value" not in header:
        raise InvalidArgument(f"{path}: need columns lon,lat (or x,y) and value; got {header}")
    if not rows:
        raise InvalidArgument(f"{path}: no data rows")
    extra = tuple(h for h in header if h not in names and h != "value")
    table = _float_table(path, header, rows, list(names) + ["value"] + list(extra))
    if np.isnan(table).any() or not np.isfinite(table).all():
        raise InvalidArgument(f"{path}: NaN or infinite values are not accepted")
    cov = table[:, 3:] if extra else None
    return PointData(table[:, :2], table[:, 2], cov, names, extra)


def write_points_csv(path, data: PointData):
    header = list(data.coord_names) + ["value"] + list(data.covariate_names)
    cols = [data.coords, data.values[:, None]]
    if data.covariate_names:
        cols.append(data.covariates)
    return write_rows(path, header, np.column_stack(cols).tolist())


def read_grid_csv(path):
    """Prediction locations: ``lon,lat`` or ``x,y`` plus optional covariates."""
    header, rows = read_rows(path)
    names = next((pair for pair in COORD_PAIRS if set(pair) <= set(header)), None)
    if names is None:
        raise InvalidArgument(f"{path}: need columns lon,lat or x,y")
    extra = [h for h in header if h not in names]
    table = _float_table(path, header, rows, list(names) + extra)
    if not np.isfinite(table).all():
        raise InvalidArgument(f"{path}: NaN or infinite values are not accepted")
    return table[:, :2], (table[:, 2:] if extra else None), names


def write_prediction_csv(path, grid, mean, sd, coord_names=("lon", "lat")):
    rows = np.column_stack([grid, mean, sd]).tolist()
    return write_rows(path, list(coord_names) + ["mean", "sd"], rows)


# results ---------------------------------------------------------------------------


def write_trace_csv(path, trace, include_seconds=True):
    header = list(TRACE_COLUMNS) if include_seconds else [c for c in TRACE_COLUMNS if c != "seconds"]
    rows = []
    for e in trace:
        row = [e.n, e.ress, e.kind, e.seconds, e.n_evals]
        if not include_seconds:
            del row[3]
        rows.append(row)
    return write_rows(path, header, rows)


def read_trace_csv(path):
    """Trace rows as a list of dicts with typed values."""
    header, rows = read_rows(path)
    out = []
    for row in rows:
        rec = dict(zip(header, row))
        typed = {"n": int(rec["n"]), "ress": float(rec["ress"]), "event": rec["event"],
                 "n_evals": int(rec["n_evals"])}
        if "seconds" in rec:
            typed["seconds"] = float(rec["seconds"])
        out.append(typed)
    return out


def write_posterior_csv(path, sample: WeightedSample, model):
    """Model-space particles with normalized weights."""
    theta = model.transform.to_model(sample.particles)
    rows = np.column_stack([theta, sample.weights()]).tolist()
    return write_rows(path, list(model.param_names) + ["weight"], rows)


def read_posterior_csv(path):
    """``(names, theta, weights)`` from a posterior CSV."""
    header, rows = read_rows(path)
    if not header or header[-1] != "weight":
        raise InvalidArgument(f"{path}: last column must be 'weight'")
    table = _float_table(path, header, rows, header)
    return tuple(header[:-1]), table[:, :-1], table[:, -1]


def write_chain_csv(path, result):
    rows = [[i] + list(r) for i, r in enumerate(result.samples)]
    return write_rows(path, ["iteration"] + list(result.param_names), rows)


def read_table_csv(path):
    """Generic CSV as a list of dicts; numeric-looking fields become floats."""
    header, rows = read_rows(path)

    def conv(v):
        try:
            return float(v)
        except ValueError:
            return v

    return [{h: conv(v) for h, v in zip(header, row)} for row in rows]


def write_table_csv(path, records, columns=None):
    if not records:
        raise InvalidArgument("no records to write")
    columns = list(columns or records[0].keys())
    return write_rows(path, columns, [[rec[c] for c in columns] for rec in records])


# configuration ------------------------------------------------------------------------

MODEL_TYPES = ("gp", "conjugate")


@dataclass
class RunConfig:
    """Validated contents of a run configuration document."""

    model: dict = field(default_factory=lambda: {"type": "gp"})
    engine: dict = field(default_factory=dict)
    mcmc: dict = field(default_factory=lambda: {"iterations": 20000, "burn_in": 5000})
    data: str | None = None
    grid: str | None = None
    output: dict = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"format": CONFIG_FORMAT, "version": CONFIG_VERSION, "model": self.model,
                "engine": self.engine, "mcmc": self.mcmc, "data": self.data, "grid": self.grid,
                "output": self.output, "seed": self.seed}


def parse_config(doc: dict) -> RunConfig:
    """Check a configuration document and return its contents.

    Raises:
        ConfigError: on a wrong format tag, unsupported version or bad field.
    """
    from raisor.engine import EngineConfig

    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    if doc.get("format") != CONFIG_FORMAT:
        raise ConfigError(f"format must be {CONFIG_FORMAT!r}; got {doc.get('format')!r}")
    if doc.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported configuration version {doc.get('version')!r}")
    known = {"format", "version", "model", "engine", "mcmc", "data", "grid", "output", "seed"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown configuration keys {sorted(unknown)}")
    cfg = RunConfig()
    if "model" in doc:
        cfg.model = dict(doc["model"])
    if cfg.model.get("type", "gp") not in MODEL_TYPES:
        raise ConfigError(f"model.type must be one of {MODEL_TYPES}")
    cfg.model.setdefault("type", "gp")
    cfg.engine = dict(doc.get("engine") or {})
    try:
        EngineConfig.from_dict(cfg.engine)
    except (InvalidArgument, TypeError) as exc:
        raise ConfigError(f"engine: {exc}") from exc
    mcmc = dict(doc.get("mcmc") or {})
    cfg.mcmc.update(mcmc)
    if set(cfg.mcmc) - {"iterations", "burn_in", "thin"}:
        raise ConfigError(f"unknown mcmc keys {sorted(set(cfg.mcmc) - {'iterations', 'burn_in', 'thin'})}")
    if not cfg.mcmc["iterations"] > cfg.mcmc["burn_in"] >= 0:
        raise ConfigError("mcmc needs iterations > burn_in >= 0")
    cfg.data = doc.get("data")
    cfg.grid = doc.get("grid")
    cfg.output = dict(doc.get("output") or {})
    cfg.seed = doc.get("seed")
    if cfg.seed is not None and (not isinstance(cfg.seed, int) or cfg.seed < 0):
        raise ConfigError("seed must be a non-negative integer")
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc)


# checkpoints ---------------------------------------------------------------------------


def save_checkpoint(path, engine, sample: WeightedSample):
    """Store the sample, proposal, trace, counters and RNG state in one ``.npz``."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": engine.config.to_dict(),
        "prefix_len": sample.prefix_len,
        "origin_prefix": sample.origin_prefix,
        "n_evals": engine.n_evals,
        "replenish_count": engine.replenish_count,
        "trace": [[e.n, e.ress, e.kind, e.seconds, e.n_evals] for e in engine.trace],
        "proposal": engine.proposal.to_dict() if engine.proposal is not None else None,
        "rng": engine.rng.bit_generator.state,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, particles=sample.particles, log_weights=sample.log_weights,
                 cum_loglik=sample.cum_loglik, meta=np.array(json.dumps(meta)))
    tmp.replace(path)
    return path


def load_checkpoint(path, model, exact_proposal=None):
    """Rebuild ``(engine, sample)`` from :func:`save_checkpoint` output."""
    from raisor.engine import Engine, EngineConfig, RessEvent

    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: not a supported checkpoint")
        sample = WeightedSample(data["particles"], data["log_weights"], data["cum_loglik"],
                                meta["prefix_len"], meta["origin_prefix"])
    if sample.dim != model.dim:
        raise ConfigError(f"{path}: checkpoint dimension {sample.dim} does not match the model")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    engine = Engine(model, EngineConfig.from_dict(meta["config"]), rng, exact_proposal)
    engine.n_evals = meta["n_evals"]
    engine.replenish_count = meta["replenish_count"]
    for n, ress, kind, seconds, n_evals in meta["trace"]:
        engine.trace.append(RessEvent(n, ress, kind, seconds, n_evals))
    if engine.trace.events:
        # continue the wall clock where the saved trace stopped
        import time

        engine._clock = time.perf_counter() - engine.trace.events[-1].seconds
    if meta["proposal"] is not None:
        engine.proposal = MixtureProposal.from_dict(meta["proposal"])
    return engine, sample
