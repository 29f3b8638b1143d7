"""Weighted least-squares state estimation and chi-squared bad data detection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .grid import NetworkCase
from .powerflow import MeasurementModel, MeasurementSchema, NoiseModel, StateVector

log = logging.getLogger(__name__)


class UnobservableError(np.linalg.LinAlgError):
    """The measurement schema cannot determine all free states."""


# ---------------------------------------------------------------------------
# chi-squared distribution

def _gamma_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_contfrac(a: float, x: float) -> float:
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammainc_regularized(a: float, x: float) -> tuple[float, float]:
    """Regularized incomplete gamma ``(P(a, x), Q(a, x))``."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x <= 0:
        return 0.0, 1.0
    if x < a + 1.0:
        p = _gamma_series(a, x)
        return p, 1.0 - p
    q = _gamma_contfrac(a, x)
    return 1.0 - q, q


def chi2_cdf(x: float, dof: float) -> float:
    return gammainc_regularized(dof / 2.0, x / 2.0)[0]


def chi2_quantile(dof: float, p: float) -> float:
    """Inverse CDF of the chi-squared distribution.

    Newton iterations on the regularized incomplete gamma function, started
    from the Wilson-Hilferty approximation and safeguarded by bisection.
    The upper tail is inverted through ``Q`` to keep precision near 1.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"probability must lie in (0, 1), got {p}")
    if dof <= 0:
        raise ValueError("degrees of freedom must be positive")
    a = dof / 2.0
    upper = p > 0.5
    target = 1.0 - p if upper else p
    z = NormalDist().inv_cdf(p)
    w = 2.0 / (9.0 * dof)
    x = dof * max(1.0 - w + z * math.sqrt(w), 0.05) ** 3
    lo, hi = 0.0, math.inf
    log_norm = a * math.log(2.0) + math.lgamma(a)
    for _ in range(200):
        P, Q = gammainc_regularized(a, x / 2.0)
        f = (Q - target) if upper else (P - target)
        # cdf increasing: P - target > 0 means x too large; Q - target > 0 means x too small
        too_large = f < 0 if upper else f > 0
        if too_large:
            hi = x
        else:
            lo = x
        pdf = math.exp((a - 1.0) * math.log(x) - x / 2.0 - log_norm)
        step = (-f if upper else f) / pdf if pdf > 0 else math.inf
        x_new = x - step
        if not (lo < x_new < hi) or not math.isfinite(x_new):
            x_new = 0.5 * (lo + hi) if math.isfinite(hi) else 2.0 * x
        if abs(x_new - x) <= 1e-15 * x:
            x = x_new
            break
        x = x_new
    return x


# ---------------------------------------------------------------------------
# WLS

@dataclass
class EstimationResult:
    state_hat: StateVector
    residual: float
    iterations: int
    converged: bool


@dataclass
class BatchEstimate:
    """Vectorized WLS output over ``N`` measurement vectors."""

    x: np.ndarray          # (N, s) free states
    residual: np.ndarray   # (N,)
    iterations: np.ndarray
    converged: np.ndarray

    def states(self, case: NetworkCase, slack_vm: float | None = None) -> StateVector:
        return StateVector.from_free(self.x, case, slack_vm)


def _chunk(model: MeasurementModel) -> int:
    n = model.case.n_bus
    per = (3 * n + 2 * model.case.n_branch) * 2 * n + 6 * n * n
    return max(1, int(3e7 // per))


class Estimator:
    """Gauss-Newton WLS with Levenberg damping when a step increases the objective.

    Free states are the angles and magnitudes of the non-slack buses; the
    slack angle is 0 and its magnitude is held at ``slack_vm`` (the case
    setpoint unless given).

    With ``fixed_vm`` every magnitude is held at the given profile and only
    the non-slack angles are estimated. This is the usual model for schemas
    of active power channels alone, which cannot observe magnitudes.
    """

    def __init__(self, case: NetworkCase, schema: MeasurementSchema, noise: NoiseModel,
                 tol: float = 1e-8, max_iter: int = 50, slack_vm: float | None = None,
                 fixed_vm: np.ndarray | None = None):
        if noise.sigma.shape != (schema.m,):
            raise ValueError("noise model length does not match schema")
        self.case = case
        self.model = MeasurementModel(case, schema)
        self.w = noise.weights
        self.tol = tol
        self.max_iter = max_iter
        self.slack_vm = case.buses[case.slack].v_setpoint if slack_vm is None else slack_vm
        self.nf = len(self.model.free)
        self.fixed_vm = None
        if fixed_vm is not None:
            self.fixed_vm = np.asarray(fixed_vm, dtype=float)
            if self.fixed_vm.shape != (case.n_bus,):
                raise ValueError("fixed_vm needs one magnitude per bus")
        self._check_observable()

    @property
    def s(self) -> int:
        return self.nf if self.fixed_vm is not None else 2 * self.nf

    @property
    def dof(self) -> int:
        return self.model.m - self.s

    def states(self, x: np.ndarray) -> StateVector:
        vm, va = self._split(np.asarray(x, dtype=float))
        return StateVector(vm, va)

    def _jacobian(self, vm, va):
        H = self.model.jacobian(vm, va)
        return H[..., :self.nf] if self.fixed_vm is not None else H

    def _split(self, x):
        n = self.case.n_bus
        va = np.zeros(x.shape[:-1] + (n,))
        va[..., self.model.free] = x[..., :self.nf]
        if self.fixed_vm is not None:
            return np.broadcast_to(self.fixed_vm, va.shape).copy(), va
        vm = np.full(x.shape[:-1] + (n,), self.slack_vm)
        vm[..., self.model.free] = x[..., self.nf:]
        return vm, va

    def flat_start(self, N: int) -> np.ndarray:
        if self.fixed_vm is not None:
            return np.zeros((N, self.nf))
        return np.concatenate([np.zeros((N, self.nf)), np.ones((N, self.nf))], axis=1)

    def _check_observable(self):
        m, s = self.model.m, self.s
        if m < s:
            raise UnobservableError(f"schema has {m} channels for {s} free states")
        vm, va = self._split(self.flat_start(1)[0])
        rng = np.random.default_rng(0)
        va = va + rng.uniform(-0.05, 0.05, va.shape) * (np.arange(len(va)) != self.case.slack)
        H = self._jacobian(vm, va) * np.sqrt(self.w)[:, None]
        rank = np.linalg.matrix_rank(H)
        if rank < s:
            raise UnobservableError(f"measurement Jacobian rank {rank} < {s} free states")

    def objective(self, Z: np.ndarray, x: np.ndarray) -> np.ndarray:
        vm, va = self._split(x)
        r = Z - self.model.h(vm, va)
        return np.einsum("...j,j,...j->...", r, self.w, r)

    def estimate(self, Z: np.ndarray, init: np.ndarray | None = None) -> BatchEstimate:
        """Estimate free states for each row of ``Z`` (shape ``(N, m)``)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        N = Z.shape[0]
        x = self.flat_start(N) if init is None else np.array(np.broadcast_to(init, (N, self.s)))
        J = self.objective(Z, x)
        lam = np.zeros(N)
        iters = np.zeros(N, dtype=int)
        conv = np.zeros(N, dtype=bool)
        active = np.ones(N, dtype=bool)
        step = _chunk(self.model)
        for _ in range(self.max_iter):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            for lo in range(0, idx.size, step):
                sel = idx[lo:lo + step]
                self._iterate(Z[sel], x, J, lam, iters, conv, active, sel)
        return BatchEstimate(x, J, iters, conv)

    def _iterate(self, Zs, x, J, lam, iters, conv, active, sel):
        vm, va = self._split(x[sel])
        H = self._jacobian(vm, va)
        r = Zs - self.model.h(vm, va)
        HW = H * self.w[None, :, None]
        HWt = HW.transpose(0, 2, 1)
        G = HWt @ H
        g = (HWt @ r[..., None])[..., 0]
        diag = np.diagonal(G, axis1=1, axis2=2)
        A = G + lam[sel, None, None] * (diag[:, :, None] * np.eye(G.shape[-1]))
        try:
            dx = np.linalg.solve(A, g[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise UnobservableError("singular gain matrix") from exc
        x_new = x[sel] + dx
        J_new = self.objective(Zs, x_new)
        iters[sel] += 1
        small = np.max(np.abs(dx), axis=1) <= self.tol
        ok = (J_new <= J[sel] * (1 + 1e-12) + 1e-14) & np.isfinite(J_new)
        acc = sel[ok]
        x[acc] = x_new[ok]
        J[acc] = J_new[ok]
        lam[acc] = np.where(lam[acc] > 1e-6, lam[acc] / 10.0, 0.0)
        rej = sel[~ok]
        lam[rej] = np.maximum(lam[rej] * 10.0, 1e-4)
        done = sel[small]
        conv[done] = True
        active[done] = False
        stuck = sel[lam[sel] > 1e8]
        active[stuck] = False

    def residuals(self, Z: np.ndarray, warm: bool = True) -> BatchEstimate:
        """Minimum WLS objective over a flat start and a warm start.

        The warm start for row ``t`` is the flat-start estimate of row
        ``t - 1``, so consecutive time steps seed each other.
        """
        est = self.estimate(Z)
        if not warm or len(est.x) < 2:
            return est
        init = np.vstack([est.x[:1], est.x[:-1]])
        alt = self.estimate(Z, init=init)
        better = (alt.residual < est.residual) & np.isfinite(alt.residual)
        better |= ~est.converged & alt.converged
        for name in ("x", "residual", "iterations", "converged"):
            getattr(est, name)[better] = getattr(alt, name)[better]
        return est


def wls_estimate(z: np.ndarray, noise: NoiseModel, case: NetworkCase,
                 schema: MeasurementSchema, init: StateVector | None = None) -> EstimationResult:
    est = Estimator(case, schema, noise)
    x0 = None if init is None else init.free(case)
    out = est.estimate(np.asarray(z, dtype=float)[None, :], x0)
    return EstimationResult(
        state_hat=StateVector.from_free(out.x[0], case, est.slack_vm),
        residual=float(out.residual[0]), iterations=int(out.iterations[0]),
        converged=bool(out.converged[0]))


def residual_error(z: np.ndarray, noise: NoiseModel, case: NetworkCase,
                   schema: MeasurementSchema, previous: StateVector | None = None) -> float:
    """Approximate ``min_x (z - h(x))' R^-1 (z - h(x))`` by multi-start WLS."""
    est = Estimator(case, schema, noise)
    z = np.asarray(z, dtype=float)[None, :]
    best = est.estimate(z).residual[0]
    if previous is not None:
        best = min(best, est.estimate(z, previous.free(case)).residual[0])
    return float(best)


# ---------------------------------------------------------------------------
# bad data detection

@dataclass(frozen=True)
class BddConfig:
    alpha: float
    dof: int

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.dof < 1:
            raise ValueError("degrees of freedom must be at least 1")

    @property
    def tau(self) -> float:
        return chi2_quantile(self.dof, 1.0 - self.alpha)

    @classmethod
    def for_schema(cls, case: NetworkCase, schema: MeasurementSchema,
                   alpha: float = 0.05) -> "BddConfig":
        return cls(alpha, schema.m - 2 * (case.n_bus - 1))

    @classmethod
    def for_estimator(cls, estimator: Estimator, alpha: float = 0.05) -> "BddConfig":
        return cls(alpha, estimator.dof)


def bdd_detect(z: np.ndarray, config: BddConfig, noise: NoiseModel, case: NetworkCase,
               schema: MeasurementSchema) -> tuple[bool, float]:
    """Flag ``z`` as anomalous when its residual reaches the chi-squared threshold."""
    r = residual_error(z, noise, case, schema)
    return r >= config.tau, r


def bdd_flags(residuals: np.ndarray, config: BddConfig,
              converged: np.ndarray | None = None) -> np.ndarray:
    """Vectorized detection; estimation failures count as detections."""
    flags = np.asarray(residuals) >= config.tau
    if converged is not None:
        flags |= ~np.asarray(converged, dtype=bool)
    return flags
