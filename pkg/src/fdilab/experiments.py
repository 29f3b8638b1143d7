"""Sweeps over attack and model settings, and their reports."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .attack import AttackConfig, perturb, random_plan, select_critical_meters
from .basis import DENSE, SPARSE, build_basis_spec
from .detectors import (LearnedDetector, empirical_threshold, evaluate_bypass,
                        train_learned_detector)
from .estimation import BddConfig, Estimator, UnobservableError
from .models import MaskConfig, reconstruction_error, train_masked_pgae, train_pgae
from .nn import TrainConfig
from .powerflow import solve_powerflow
from .scenario import Dataset, ScenarioConfig, generate_timeseries

log = logging.getLogger(__name__)

KINDS = ("alpha", "gamma", "latent_dim", "data_volume", "meter_budget", "connectivity")
COLUMNS = ("kind", "value", "seed", "n_train", "recon_error", "residual_median",
           "residual_mean", "succ_bdd", "succ_learn", "succ_bdd_random", "critical_set",
           "error")
DEFAULT_GRIDS = {
    "alpha": (0.001, 0.01, 0.05, 0.1),
    "gamma": (0.1, 0.5, 1.0, 2.0, 3.0),
    "latent_dim": (1, 4, 13, 26, 40),
    "data_volume": (1440, 720, 288, 144),
    "meter_budget": (2, 6, 10, 14),
    "connectivity": (DENSE, SPARSE),
}
DEFENDER_SEED_OFFSET = 1000


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    grid: tuple = ()
    seeds: tuple[int, ...] = (0,)
    alpha: float = 0.05
    gamma: float = 1.0
    c_value: float = 0.1
    random_draws: int = 20

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sweep kind {self.kind!r}; choose from {KINDS}")
        if not self.grid:
            object.__setattr__(self, "grid", DEFAULT_GRIDS[self.kind])
        if not self.seeds:
            raise ValueError("need at least one seed")

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "SweepSpec":
        obj = dict(obj)
        obj["grid"] = tuple(obj.get("grid", ()))
        obj["seeds"] = tuple(obj.get("seeds", (0,)))
        return cls(**obj)


def make_estimator(ds: Dataset) -> Estimator:
    """Full-state WLS, or angle-only WLS at base-case magnitudes when that is unobservable."""
    try:
        return Estimator(ds.case, ds.schema, ds.noise)
    except UnobservableError:
        vm0 = solve_powerflow(ds.case).vm
        log.info("schema cannot observe magnitudes; estimating angles at base-case magnitudes")
        return Estimator(ds.case, ds.schema, ds.noise, fixed_vm=vm0)


class Workbench:
    """Datasets, estimators and trained models for one scenario, built on demand."""

    def __init__(self, scenario: ScenarioConfig, train: TrainConfig | None = None,
                 detector_train: TrainConfig | None = None):
        self.scenario = scenario
        self.train = train or TrainConfig()
        self.detector_train = detector_train or self.train
        self._cache: dict = {}

    def _memo(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    def dataset(self, schema: str | None = None, defender: bool = False) -> Dataset:
        sc = self.scenario
        if schema is not None:
            sc = replace(sc, schema=schema)
        if defender:
            sc = replace(sc, seed=sc.seed + DEFENDER_SEED_OFFSET)
        return self._memo(("data", sc), lambda: generate_timeseries(sc))

    def estimator(self, ds: Dataset) -> Estimator:
        return self._memo(("est", id(ds)), lambda: make_estimator(ds))

    def bdd(self, ds: Dataset, alpha: float) -> BddConfig:
        return BddConfig.for_estimator(self.estimator(ds), alpha)

    def residuals(self, ds: Dataset, Z: np.ndarray):
        return self.estimator(ds).residuals(Z)

    def train_config(self, seed: int) -> TrainConfig:
        return replace(self.train, seed=seed)

    def pgae(self, seed: int = 0, d: int | None = None, mode: str = DENSE,
             n_train: int | None = None, schema: str | None = None):
        ds = self.dataset(schema)

        def build():
            data = ds.Z
            if n_train is not None and n_train < len(ds):
                rows = np.sort(np.random.default_rng([seed, n_train]).choice(
                    len(ds), n_train, replace=False))
                data = ds.Z[rows]
            spec = build_basis_spec(ds.case, mode)
            model = train_pgae(data, ds.case, spec, d, self.train_config(seed))
            model.meta.update(case=ds.case.name, schema_hash=ds.schema.digest())
            return model
        return self._memo(("pgae", seed, d, mode, n_train, schema), build)

    def masked(self, keep: int, seed: int = 0, schema: str | None = "p_inj"):
        ds = self.dataset(schema)
        return self._memo(("masked", keep, seed, schema), lambda: train_masked_pgae(
            ds.Z, ds.case, None, None, MaskConfig(keep, seed), self.train_config(seed)))

    def detector(self, seed: int = 0, schema: str | None = None) -> LearnedDetector:
        ds = self.dataset(schema, defender=True)
        cfg = replace(self.detector_train, seed=seed)
        return self._memo(("det", seed, schema),
                          lambda: train_learned_detector(ds.Z, 0.05, cfg))


def detector_at(detector: LearnedDetector, alpha: float, calibration: np.ndarray) -> LearnedDetector:
    """Same autoencoder, threshold recalibrated for ``alpha``."""
    return replace(detector, tau=empirical_threshold(detector.scores(calibration), alpha),
                   alpha=alpha)


# ---------------------------------------------------------------------------
# sweeps

@dataclass
class ResultTable:
    rows: list[dict]
    meta: dict = field(default_factory=dict)
    timings: list[dict] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.rows]

    def to_json(self) -> dict:
        return {"rows": self.rows, "meta": self.meta, "timings": self.timings}

    @classmethod
    def from_json(cls, obj) -> "ResultTable":
        return cls(obj["rows"], obj.get("meta", {}), obj.get("timings", []))


def _row(kind, value, seed, **vals) -> dict:
    row = {c: None for c in COLUMNS}
    row.update(kind=kind, value=value, seed=seed, **vals)
    return row


def _attack_stats(bench: Workbench, ds: Dataset, Za: np.ndarray, alpha: float,
                  detector: LearnedDetector | None) -> dict:
    rep = evaluate_bypass(Za, bench.estimator(ds), bench.bdd(ds, alpha), detector, detail=True)
    return {"residual_median": float(np.median(rep.residuals)),
            "residual_mean": float(np.mean(rep.residuals)),
            "succ_bdd": rep.report.succ_bdd, "succ_learn": rep.report.succ_learn}


def _sweep_point(spec: SweepSpec, bench: Workbench, value, seed: int) -> list[dict]:
    kind = spec.kind
    if kind in ("alpha", "gamma"):
        ds = bench.dataset()
        model = bench.pgae(seed)
        det = bench.detector(seed)
        gamma = value if kind == "gamma" else spec.gamma
        alpha = value if kind == "alpha" else spec.alpha
        if alpha != det.alpha:
            calib = bench.dataset(defender=True).Z[len(bench.dataset(defender=True)) // 2:]
            det = detector_at(det, alpha, calib)
        Za = perturb(model, ds.Z, AttackConfig.uniform(model.d, spec.c_value, gamma))
        return [_row(kind, value, seed, n_train=len(ds),
                     recon_error=float(np.mean(reconstruction_error(model, ds.Z))),
                     **_attack_stats(bench, ds, Za, alpha, det))]
    if kind in ("latent_dim", "data_volume", "connectivity"):
        ds = bench.dataset()
        if kind == "latent_dim":
            model = bench.pgae(seed, d=int(value))
        elif kind == "data_volume":
            model = bench.pgae(seed, n_train=int(value))
        else:
            model = bench.pgae(seed, mode=str(value))
        Za = perturb(model, ds.Z, AttackConfig.uniform(model.d, spec.c_value, spec.gamma))
        return [_row(kind, value, seed, n_train=model.meta.get("n_train"),
                     recon_error=float(np.mean(reconstruction_error(model, ds.Z))),
                     **_attack_stats(bench, ds, Za, spec.alpha, None))]
    # meter_budget on the active-injection schema
    ds = bench.dataset("p_inj")
    keep = int(value)
    model, profile = bench.masked(keep, seed)
    full = perturb(model, ds.Z, AttackConfig.uniform(model.d, spec.c_value, spec.gamma))
    plan = select_critical_meters(profile, keep)

    def limited(p):
        Za = ds.Z.copy()
        Za[:, list(p.channels)] = full[:, list(p.channels)]
        return Za
    stats = _attack_stats(bench, ds, limited(plan), spec.alpha, None)
    rng = np.random.default_rng([seed, keep])
    est, bdd = bench.estimator(ds), bench.bdd(ds, spec.alpha)
    rand = []
    for _ in range(spec.random_draws):
        r = evaluate_bypass(limited(random_plan(ds.schema.m, keep, rng)), est, bdd)
        rand.append(r.succ_bdd)
    return [_row(kind, value, seed, n_train=len(ds),
                 recon_error=float(np.mean(reconstruction_error(model, ds.Z))),
                 succ_bdd_random=float(np.mean(rand)),
                 critical_set=" ".join(str(i) for i in plan.channels), **stats)]


def run_sweep(spec: SweepSpec, scenario: ScenarioConfig, train: TrainConfig | None = None,
              bench: Workbench | None = None) -> ResultTable:
    """Evaluate every ``(value, seed)`` grid point; failures become rows with ``error`` set."""
    bench = bench or Workbench(scenario, train)
    rows, timings = [], []
    for value in spec.grid:
        for seed in spec.seeds:
            t0 = time.perf_counter()
            try:
                rows += _sweep_point(spec, bench, value, seed)
            except Exception as exc:  # recorded, sweep continues
                log.exception("grid point %s=%s seed %s failed", spec.kind, value, seed)
                rows.append(_row(spec.kind, value, seed, error=f"{type(exc).__name__}: {exc}"))
            timings.append({"value": value, "seed": seed,
                            "seconds": round(time.perf_counter() - t0, 3)})
    ds = bench.dataset("p_inj" if spec.kind == "meter_budget" else None)
    meta = {"sweep": spec.to_json(), "scenario": scenario.to_json(),
            "train": bench.train.to_json(), "detector_train": bench.detector_train.to_json(),
            "schema_hash": ds.schema.digest(), "code_version": __version__,
            "defender_seed_offset": DEFENDER_SEED_OFFSET,
            "detector_split": "chronological 50/50",
            "noise_sigma_rule": "percent * max(mean |h_i|, floor)"}
    return ResultTable(rows, meta, timings)


# ---------------------------------------------------------------------------
# reports

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(table: ResultTable, out_dir: str, formats=("csv", "json", "dat")) -> list[str]:
    """Write ``results.csv``, ``metadata.json`` and gnuplot ``.dat`` series.

    Wall-clock timings go to ``timings.json`` so the other files are
    byte-identical across repeated runs. A gamma sweep also yields
    ``table_gamma.csv`` with detectors as rows and gamma values as columns.
    """
    if not table.rows:
        raise ValueError("result table is empty")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "csv" in formats:
        path = os.path.join(out_dir, "results.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in table.rows:
                w.writerow([_fmt(r.get(c)) for c in COLUMNS])
        written.append(path)
    if "json" in formats:
        path = os.path.join(out_dir, "metadata.json")
        with open(path, "w") as fh:
            json.dump({"meta": table.meta, "rows": table.rows}, fh, indent=2, sort_keys=True)
        written.append(path)
        path = os.path.join(out_dir, "timings.json")
        with open(path, "w") as fh:
            json.dump(table.timings, fh, indent=2)
        written.append(path)
    kinds = sorted({r["kind"] for r in table.rows})
    if "dat" in formats:
        for kind in kinds:
            path = os.path.join(out_dir, f"{kind}.dat")
            written.append(path)
            with open(path, "w") as fh:
                fh.write("# value seed recon_error residual_median succ_bdd succ_learn\n")
                for r in table.rows:
                    if r["kind"] != kind or r.get("error"):
                        continue
                    vals = [r["value"], r["seed"], r["recon_error"], r["residual_median"],
                            r["succ_bdd"], r["succ_learn"]]
                    fh.write(" ".join("nan" if v is None else str(v) for v in vals) + "\n")
    if "gamma" in kinds and "csv" in formats:
        written.append(write_gamma_table(table, os.path.join(out_dir, "table_gamma.csv")))
    return written


def write_gamma_table(table: ResultTable, path: str) -> str:
    """Bypass rates in percent, averaged over seeds: one row per detector."""
    rows = [r for r in table.rows if r["kind"] == "gamma" and not r.get("error")]
    gammas = sorted({r["value"] for r in rows})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector"] + [_fmt(float(g)) for g in gammas])
        for label, key in (("BDD", "succ_bdd"), ("learned", "succ_learn")):
            vals = []
            for g in gammas:
                xs = [r[key] for r in rows if r["value"] == g and r[key] is not None]
                vals.append(f"{100.0 * np.mean(xs):.1f}" if xs else "")
            w.writerow([label] + vals)
    return path
