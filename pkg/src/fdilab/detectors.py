"""Reconstruction-error detector and bypass-rate evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .estimation import BddConfig, Estimator, bdd_flags
from .models import StandardAeModel, reconstruction_error, train_standard_ae
from .nn import TrainConfig

log = logging.getLogger(__name__)


@dataclass
class LearnedDetector:
    """Flags ``z`` when ``||z - recon(z)||^2 >= tau``."""

    model: StandardAeModel
    tau: float
    alpha: float
    meta: dict = field(default_factory=dict)

    def scores(self, Z: np.ndarray) -> np.ndarray:
        return reconstruction_error(self.model, Z)

    def flags(self, Z: np.ndarray) -> np.ndarray:
        return self.scores(Z) >= self.tau

    def to_json(self) -> dict:
        return {"kind": "detector", "model": self.model.to_json(), "tau": self.tau,
                "alpha": self.alpha, "meta": self.meta}

    @classmethod
    def from_json(cls, obj) -> "LearnedDetector":
        return cls(StandardAeModel.from_json(obj["model"]), obj["tau"], obj["alpha"],
                   obj.get("meta", {}))


def empirical_threshold(scores: np.ndarray, alpha: float) -> float:
    """The ``1 - alpha`` quantile as an order statistic of ``scores``."""
    return float(np.quantile(scores, 1.0 - alpha, method="inverted_cdf"))


def train_learned_detector(data, alpha: float = 0.05, config: TrainConfig | None = None,
                           d: int | None = None) -> LearnedDetector:
    """Train on the first half of the series and calibrate on the second.

    ``d`` defaults to a third of the channel count.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    Z = np.atleast_2d(np.asarray(getattr(data, "Z", data), dtype=float))
    if len(Z) < 2:
        raise ValueError("need at least two samples to split train and calibration")
    half = len(Z) // 2
    train, calib = Z[:half], Z[half:]
    if np.allclose(Z, Z[0]):
        log.warning("detector training data is constant; threshold is degenerate")
    d = d or max(1, Z.shape[1] // 3)
    model = train_standard_ae(train, d, config)
    scores = reconstruction_error(model, calib)
    tau = empirical_threshold(scores, alpha)
    meta = {"split": "chronological 50/50", "n_train": half, "n_calibration": len(calib),
            "latent_dim": d}
    return LearnedDetector(model, tau, alpha, meta)


@dataclass
class BypassReport:
    succ_bdd: float
    succ_learn: float | None
    n_samples: int
    alpha: float
    tau_bdd: float
    tau_learn: float | None
    estimation_failures: int
    median_residual: float
    config: dict = field(default_factory=dict)

    FIELDS = ("succ_bdd", "succ_learn", "n_samples", "alpha", "tau_bdd", "tau_learn",
              "estimation_failures", "median_residual")

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.FIELDS)
        w.writerow(["" if getattr(self, f) is None else getattr(self, f) for f in self.FIELDS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


@dataclass
class BypassDetail:
    report: BypassReport
    residuals: np.ndarray
    converged: np.ndarray
    scores: np.ndarray | None


def evaluate_bypass(Z: np.ndarray, estimator: Estimator, bdd: BddConfig,
                    detector: LearnedDetector | None = None,
                    config: dict | None = None, detail: bool = False):
    """Fraction of samples each detector lets through.

    A sample passes BDD when its WLS residual is below the chi-squared
    threshold; estimation failures count as detections and are reported.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if len(Z) == 0:
        raise ValueError("no samples to evaluate")
    est = estimator.residuals(Z)
    flags = bdd_flags(est.residual, bdd, est.converged)
    scores = None
    succ_learn = None
    if detector is not None:
        scores = detector.scores(Z)
        succ_learn = float(np.mean(scores < detector.tau))
    report = BypassReport(
        succ_bdd=float(1.0 - flags.mean()), succ_learn=succ_learn, n_samples=len(Z),
        alpha=bdd.alpha, tau_bdd=bdd.tau,
        tau_learn=None if detector is None else detector.tau,
        estimation_failures=int((~est.converged).sum()),
        median_residual=float(np.median(est.residual)), config=dict(config or {}))
    if detail:
        return BypassDetail(report, est.residual, est.converged, scores)
    return report
