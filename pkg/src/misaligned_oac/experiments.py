"""Config-driven sweeps producing CSV result rows.

Config grammar (INI style, ``#`` or ``;`` comments, one ``key = value`` per
line). Every key is optional; the defaults are listed below.

.. code-block:: ini

    [run]
    mode = slot            # slot | feel
    seed = 0               # master seed; row seeds are seed, seed+1, ...
    run_id = run
    workers = 1            # >1 runs sweep points in a process pool

    [channel]
    esn0_db = 10           # "inf" selects the noiseless path
    tau_max = 0.5
    phi_max = 0
    amp_model = unit       # unit | rayleigh(SIGMA)
    cfo_max = 0
    packet_length = 64
    redraw = slot          # slot | run

    [estimators]
    ids = sp_ml, aligned

    [sweep]
    axis = esn0_db         # esn0_db | tau_max | phi_max | amp_sigma | k_active
    values = 10
    seeds_per_point = 1

    [task]
    features = 10          # or d = classes * (features + 1)
    classes = 10
    separation = 3
    train_size = 4000
    test_size = 2000
    rounds = 100
    epochs = 1
    lr = 0.1
    batch_size = 20
    devices = 40
    active = 4
    random_fraction = 0.8
    slots = 20             # packets per point in slot mode

    [output]
    directory = results
    formats = csv          # csv | csv+svg
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .channel import SymbolBlock, observe_slot
from .errors import ConfigParse, OACError
from .estimators import ESTIMATOR_IDS, estimate
from .feel import BlobTask, ChannelConfig, FeelSetup, run_feel
from .model import calibrate_n0, validate_geometry

SWEEP_AXES = ("esn0_db", "tau_max", "phi_max", "amp_sigma", "k_active")
RESULT_FIELDS = (
    "run_id", "seed", "estimator", "esn0_db", "tau_max", "phi_max", "amp_sigma",
    "k_active", "round", "symbol_mse", "test_accuracy", "diagnostics_flags",
)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "slot"
    seed: int = 0
    run_id: str = "run"
    workers: int = 1
    esn0_db: float = 10.0
    tau_max: float = 0.5
    phi_max: float = 0.0
    amp_sigma: Optional[float] = None
    cfo_max: float = 0.0
    packet_length: int = 64
    redraw: str = "slot"
    estimators: tuple = ("sp_ml", "aligned")
    axis: str = "esn0_db"
    values: tuple = (10.0,)
    seeds_per_point: int = 1
    features: int = 10
    classes: int = 10
    separation: float = 3.0
    train_size: int = 4000
    test_size: int = 2000
    rounds: int = 100
    epochs: int = 1
    lr: float = 0.1
    batch_size: int = 20
    devices: int = 40
    active: int = 4
    random_fraction: float = 0.8
    slots: int = 20
    directory: str = "results"
    formats: str = "csv"

    def points(self) -> list:
        """One parameter dict per sweep value, in file order."""
        return [{self.axis: v} for v in self.values]

    def task(self) -> BlobTask:
        return BlobTask(self.features, self.classes, self.separation, self.train_size, self.test_size, seed=self.seed)


# (section, key) -> (field name, parser)
def _float(text):
    return float(text)


def _esn0(text):
    if text.strip().lower() in ("inf", "+inf", "infinity"):
        return math.inf
    return float(text)


def _amp(text):
    t = text.strip().lower()
    if t == "unit":
        return None
    m = re.fullmatch(r"rayleigh\(\s*([^)]+?)\s*\)", t)
    if not m:
        raise ValueError("expected 'unit' or 'rayleigh(SIGMA)'")
    sigma = float(m.group(1))
    if sigma <= 0:
        raise ValueError("Rayleigh sigma must be positive")
    return sigma


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {options}")
        return t
    return parse


def _estimators(text):
    ids = tuple(t.strip() for t in text.split(",") if t.strip())
    bad = [i for i in ids if i not in ESTIMATOR_IDS]
    if bad or not ids:
        raise ValueError(f"unknown estimators {bad}; choose from {ESTIMATOR_IDS}")
    return ids


def _values(text):
    out = []
    for t in text.split(","):
        t = t.strip()
        if t:
            out.append(_esn0(t))
    if not out:
        raise ValueError("at least one value is required")
    return tuple(out)


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


SCHEMA = {
    "run": {
        "mode": ("mode", _choice("slot", "feel")),
        "seed": ("seed", int),
        "run_id": ("run_id", str.strip),
        "workers": ("workers", _pos_int),
    },
    "channel": {
        "esn0_db": ("esn0_db", _esn0),
        "tau_max": ("tau_max", _float),
        "phi_max": ("phi_max", _float),
        "amp_model": ("amp_sigma", _amp),
        "cfo_max": ("cfo_max", _float),
        "packet_length": ("packet_length", _pos_int),
        "redraw": ("redraw", _choice("slot", "run")),
    },
    "estimators": {"ids": ("estimators", _estimators)},
    "sweep": {
        "axis": ("axis", _choice(*SWEEP_AXES)),
        "values": ("values", _values),
        "seeds_per_point": ("seeds_per_point", _pos_int),
    },
    "task": {
        "features": ("features", _pos_int),
        "d": ("n_params", _pos_int),
        "classes": ("classes", _pos_int),
        "separation": ("separation", _float),
        "train_size": ("train_size", _pos_int),
        "test_size": ("test_size", _pos_int),
        "rounds": ("rounds", _pos_int),
        "epochs": ("epochs", int),
        "lr": ("lr", _float),
        "batch_size": ("batch_size", _pos_int),
        "devices": ("devices", _pos_int),
        "active": ("active", _pos_int),
        "random_fraction": ("random_fraction", _float),
        "slots": ("slots", _pos_int),
    },
    "output": {
        "directory": ("directory", str.strip),
        "formats": ("formats", _choice("csv", "csv+svg")),
    },
}


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    index, section = {}, None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), n)
            continue
        key = re.split(r"[=:]", line, maxsplit=1)[0].strip().lower()
        index.setdefault((section, key), n)
    return index


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; unknown sections/keys and bad values raise :class:`ConfigParse`."""
    lines = _line_index(text)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigParse(str(exc).splitlines()[0], line=getattr(exc, "lineno", None)) from None
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigParse(f"unknown section [{section}]", line=lines.get((section, None)), key=section)
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigParse(f"unknown key {key!r} in [{section}]", line=lines.get((section, key)), key=key)
            name, conv = SCHEMA[section][key]
            try:
                values[name] = conv(raw)
            except ValueError as exc:
                raise ConfigParse(f"bad value {raw!r} for {key}: {exc}", line=lines.get((section, key)), key=key) from None
    n_params = values.pop("n_params", None)
    if n_params is not None:
        # d fixes the model size C * (features + 1)
        classes = values.get("classes", ExperimentConfig.classes)
        if n_params % classes or n_params // classes < 2:
            raise ConfigParse(f"d={n_params} is not classes * (features + 1) for classes={classes}",
                              line=lines.get(("task", "d")), key="d")
        values["features"] = n_params // classes - 1
    cfg = ExperimentConfig(**values)
    _validate(cfg, lines)
    return cfg


def _validate(cfg: ExperimentConfig, lines: dict):
    def fail(msg, section, key):
        raise ConfigParse(msg, line=lines.get((section, key)), key=key)

    if not 0.0 <= cfg.tau_max < 1.0:
        fail("tau_max must be in [0, 1)", "channel", "tau_max")
    if cfg.active > cfg.devices:
        fail("active must not exceed devices", "task", "active")
    if cfg.axis == "tau_max" and any(not 0.0 <= v < 1.0 for v in cfg.values):
        fail("tau_max values must be in [0, 1)", "sweep", "values")
    if cfg.axis == "k_active" and any(v != int(v) or v < 1 for v in cfg.values):
        fail("k_active values must be positive integers", "sweep", "values")
    if cfg.axis == "amp_sigma" and any(not v > 0 for v in cfg.values):
        fail("amp_sigma values must be positive", "sweep", "values")
    if not 0.0 <= cfg.random_fraction <= 1.0:
        fail("random_fraction must be in [0, 1]", "task", "random_fraction")


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------- rows


@dataclass
class ResultRow:
    run_id: str
    seed: int
    estimator: str
    esn0_db: float
    tau_max: float
    phi_max: float
    amp_sigma: Optional[float]
    k_active: int
    round: int
    symbol_mse: float
    test_accuracy: Optional[float]
    diagnostics_flags: str = ""

    def cells(self) -> list:
        out = []
        for f in RESULT_FIELDS:
            v = getattr(self, f)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


@dataclass
class PointResult:
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)


def point_params(cfg: ExperimentConfig, point: dict) -> dict:
    p = {"esn0_db": cfg.esn0_db, "tau_max": cfg.tau_max, "phi_max": cfg.phi_max,
         "amp_sigma": cfg.amp_sigma, "k_active": cfg.active}
    p.update(point)
    p["k_active"] = int(p["k_active"])
    return p


def channel_config(cfg, p) -> ChannelConfig:
    return ChannelConfig(p["tau_max"], p["phi_max"], p["amp_sigma"], cfg.cfo_max, cfg.packet_length, cfg.redraw)


def _slot_point(cfg, p, run_id, seed, point_index) -> PointResult:
    """Symbol MSE of each estimator over ``cfg.slots`` packets with shared noise."""
    res = PointResult()
    chan = channel_config(cfg, p)
    rng = np.random.default_rng([seed, point_index])
    K, L = p["k_active"], cfg.packet_length
    sq = {e: [] for e in cfg.estimators}
    flags = {e: set() for e in cfg.estimators}
    for _ in range(cfg.slots):
        geom = validate_geometry(chan.sample(rng, [1] * K))
        sym = (rng.standard_normal((K, L)) + 1j * rng.standard_normal((K, L))) / np.sqrt(2)
        block = SymbolBlock(sym)
        n0 = calibrate_n0(geom, block, p["esn0_db"])
        obs = observe_slot(geom, block, n0=n0, seed=int(rng.integers(2**63 - 1)),
                           standard="direct_ml" in cfg.estimators)
        for e in cfg.estimators:
            try:
                rep = estimate(e, obs)
            except OACError as exc:
                flags[e].add(f"failed:{type(exc).__name__}")
                continue
            flags[e].update(rep.flags)
            sq[e].append(np.abs(rep.estimate - block.target_sum) ** 2)
    for e in cfg.estimators:
        if not sq[e]:
            res.failures.append({"run_id": run_id, "seed": seed, "estimator": e,
                                 "error": ";".join(sorted(flags[e]))})
            continue
        mse = float(np.mean(np.concatenate(sq[e])))
        res.rows.append(ResultRow(run_id, seed, e, p["esn0_db"], p["tau_max"], p["phi_max"],
                                  p["amp_sigma"], K, 0, mse, None, ";".join(sorted(flags[e]))))
    return res


def _feel_point(cfg, p, run_id, seed, point_index) -> PointResult:
    res = PointResult()
    task = replace(cfg.task(), seed=seed)
    train, test = task.datasets()
    setup = FeelSetup(task, train, test, channel_config(cfg, p), cfg.epochs, cfg.lr, cfg.batch_size)
    for e in cfg.estimators:
        try:
            state = run_feel(setup, n_devices=cfg.devices, k_active=p["k_active"], rounds=cfg.rounds,
                             estimator_id=e, esn0_db=p["esn0_db"], seed=seed,
                             random_fraction=cfg.random_fraction)
        except OACError as exc:
            res.failures.append({"run_id": run_id, "seed": seed, "estimator": e,
                                 "error": f"{type(exc).__name__}: {exc}"})
            continue
        for h in state.history:
            res.rows.append(ResultRow(run_id, seed, e, p["esn0_db"], p["tau_max"], p["phi_max"],
                                      p["amp_sigma"], p["k_active"], h.round + 1, h.symbol_mse,
                                      h.test_accuracy, ";".join(h.flags)))
    return res


def run_point(cfg: ExperimentConfig, point_index: int, seed_index: int) -> PointResult:
    """Rows for one (point, seed); independent of every other point."""
    p = point_params(cfg, cfg.points()[point_index])
    seed = cfg.seed + seed_index
    run_id = f"{cfg.run_id}-p{point_index}"
    runner = _slot_point if cfg.mode == "slot" else _feel_point
    try:
        return runner(cfg, p, run_id, seed, point_index)
    except (OACError, ValueError) as exc:
        return PointResult([], [{"run_id": run_id, "seed": seed, "estimator": "*",
                                 "error": f"{type(exc).__name__}: {exc}"}])


def _run_job(args):
    return run_point(*args)


@dataclass
class SweepOutcome:
    csv_path: str
    rows: list
    failures: list
    failure_path: Optional[str] = None

    @property
    def ok(self) -> bool:
        return not self.failures


def rows_to_csv(rows) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def run_sweep(cfg: ExperimentConfig, out_dir=None, *, filename="results.csv") -> SweepOutcome:
    """Run every (point, seed) and write the CSV (and a failure summary if needed)."""
    out_dir = out_dir or cfg.directory
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(cfg, pi, si) for pi in range(len(cfg.values)) for si in range(cfg.seeds_per_point)]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    rows = [r for res in results for r in res.rows]
    failures = [f for res in results for f in res.failures]
    path = os.path.join(out_dir, filename)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(rows_to_csv(rows))
    fpath = os.path.join(out_dir, "failures.json")
    if failures:
        with open(fpath, "w", encoding="utf-8") as fh:
            json.dump({"failed": len(failures), "total_jobs": len(jobs), "failures": failures}, fh, indent=2)
    elif os.path.exists(fpath):
        os.remove(fpath)
    return SweepOutcome(path, rows, failures, fpath if failures else None)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Render a config back to the INI grammar (round-trips through :func:`parse_config`)."""
    rev = {}
    for section, keys in SCHEMA.items():
        for key, (name, _) in keys.items():
            rev.setdefault(name, (section, key))
    d = asdict(cfg)
    by_section = {}
    for name, value in d.items():
        section, key = rev[name]
        if name == "amp_sigma":
            text = "unit" if value is None else f"rayleigh({value!r})"
        elif isinstance(value, tuple):
            text = ", ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        by_section.setdefault(section, []).append(f"{key} = {text}")
    return "\n".join(f"[{s}]\n" + "\n".join(v) + "\n" for s, v in by_section.items())
