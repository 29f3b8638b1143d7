"""Synthetic measurement time series from repeated AC power flow solves."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import NetworkCase, load_case
from .powerflow import (Dispatch, MeasurementModel, MeasurementSchema, NoiseModel,
                        PowerFlowError, StateVector, default_schema, make_schema,
                        solve_powerflow)

log = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
SCHEMAS = {"full": None, "p_inj": ("P_inj",)}


@dataclass(frozen=True)
class ScenarioConfig:
    """Inputs of the synthetic data generator.

    Loads at time ``t`` (minutes) are scaled per bus by
    ``(1 - amplitude * cos(2 pi t / 1440)) * u`` with ``u`` uniform on
    ``scale_range``. Generator active power follows the total load ratio and
    the slack bus absorbs the remainder. Noise on channel ``i`` has standard
    deviation ``noise_percent/100 * max(mean |h_i|, sigma_floor)``.
    """

    case: str = "case14"
    n_samples: int = 1440
    noise_percent: float = 2.0
    amplitude: float = 0.2
    scale_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0
    schema: str = "full"
    sigma_floor: float = 0.1
    independent_q: bool = False

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be at least 1")
        if not self.noise_percent > 0:
            raise ValueError("noise_percent must be positive (use 1e-9 for noise-free studies)")
        if self.schema not in SCHEMAS:
            raise ValueError(f"unknown schema {self.schema!r}; choose from {sorted(SCHEMAS)}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < low <= high")

    def to_json(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        obj = dict(obj)
        if "scale_range" in obj:
            obj["scale_range"] = tuple(obj["scale_range"])
        return cls(**obj)


def schema_for(case: NetworkCase, name: str) -> MeasurementSchema:
    kinds = SCHEMAS[name]
    return default_schema(case) if kinds is None else make_schema(case, kinds)


@dataclass
class Dataset:
    """Noisy measurements ``Z`` with the states and noise model that produced them."""

    case: NetworkCase
    schema: MeasurementSchema
    Z: np.ndarray          # (N, m)
    truth: np.ndarray      # (N, m) noise-free
    vm: np.ndarray         # (N, n)
    va: np.ndarray
    noise: NoiseModel
    t: np.ndarray          # minute index of each row
    config: ScenarioConfig | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.Z)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.case, self.schema, self.Z[rows], self.truth[rows], self.vm[rows],
                       self.va[rows], self.noise, self.t[rows], self.config, dict(self.meta))

    def with_measurements(self, Z: np.ndarray) -> "Dataset":
        out = self.subset(np.arange(len(self)))
        out.Z = np.asarray(Z, dtype=float)
        return out

    def states(self) -> StateVector:
        return StateVector(self.vm, self.va)


def load_profile(t: np.ndarray, amplitude: float = 0.2) -> np.ndarray:
    """Daily sinusoid in ``[1 - amplitude, 1 + amplitude]`` peaking at midday."""
    return 1.0 - amplitude * np.cos(2.0 * math.pi * np.asarray(t) / MINUTES_PER_DAY)


def generate_timeseries(config: ScenarioConfig, case: NetworkCase | None = None) -> Dataset:
    """Solve power flow at each minute, measure, and add Gaussian noise."""
    case = case or load_case(config.case)
    schema = schema_for(case, config.schema)
    model = MeasurementModel(case, schema)
    rng = np.random.default_rng(config.seed)
    N, n = config.n_samples, case.n_bus
    u = rng.uniform(*config.scale_range, size=(N, n))
    uq = rng.uniform(*config.scale_range, size=(N, n)) if config.independent_q else u
    eps = rng.standard_normal((N, schema.m))

    p_load = case.bus_array("p_load")
    base_total = p_load.sum()
    prev = None
    kept, vms, vas = [], [], []
    for t in range(N):
        prof = load_profile(t, config.amplitude)
        state = None
        for damp in (1.0, 0.5, 0.0):
            s = 1.0 + damp * (prof * u[t] - 1.0)
            sq = 1.0 + damp * (prof * uq[t] - 1.0)
            gen = (s * p_load).sum() / base_total if base_total else 1.0
            try:
                state = solve_powerflow(case, Dispatch.from_case(case, s, gen, sq), init=prev)
                break
            except PowerFlowError as exc:
                log.info("t=%d: power flow failed at damping %.1f (%s)", t, damp, exc)
        if state is None:
            log.warning("t=%d: skipped after power flow failures", t)
            continue
        prev = state
        kept.append(t)
        vms.append(state.vm)
        vas.append(state.va)
    if not kept:
        raise PowerFlowError("no time step produced a power flow solution")
    vm, va = np.array(vms), np.array(vas)
    truth = model.h(vm, va)
    sigma = config.noise_percent / 100.0 * np.maximum(np.abs(truth).mean(axis=0),
                                                      config.sigma_floor)
    kept = np.array(kept)
    Z = truth + sigma * eps[kept]
    meta = {"skipped": int(N - len(kept)), "schema_hash": schema.digest()}
    return Dataset(case, schema, Z, truth, vm, va, NoiseModel(sigma), kept, config, meta)


# ---------------------------------------------------------------------------
# CSV

def write_series_csv(path_or_buf, labels: list[str], t: np.ndarray, Z: np.ndarray,
                     provenance: list[str] | None = None) -> None:
    """Header ``t,<labels>`` (plus ``provenance`` when given), one row per sample."""
    own = isinstance(path_or_buf, str)
    fh = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(labels) + (["provenance"] if provenance is not None else []))
        for j, (ti, row) in enumerate(zip(t, Z)):
            rec = [str(int(ti))] + [repr(float(v)) for v in row]
            if provenance is not None:
                rec.append(provenance[j])
            w.writerow(rec)
    finally:
        if own:
            fh.close()


def read_series_csv(path_or_text: str):
    """Returns ``(labels, t, Z, provenance or None)``."""
    if "\n" in path_or_text:
        fh = io.StringIO(path_or_text)
    else:
        fh = open(path_or_text, newline="")
    with fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "t":
        raise ValueError("series CSV must start with a 't' header column")
    header = rows[0]
    has_prov = header[-1] == "provenance"
    labels = header[1:-1] if has_prov else header[1:]
    body = rows[1:]
    t = np.array([int(r[0]) for r in body], dtype=int)
    Z = np.array([[float(v) for v in r[1:1 + len(labels)]] for r in body], dtype=float)
    prov = [r[-1] for r in body] if has_prov else None
    return labels, t, Z.reshape(len(body), len(labels)), prov
