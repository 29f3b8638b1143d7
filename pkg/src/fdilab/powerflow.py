"""AC measurement function, its Jacobian, and Newton-Raphson power flow.

All measurement routines accept batched states: ``vm`` and ``va`` may have
shape ``(n,)`` or ``(N, n)`` and the outputs carry the same leading axis.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import AdmittanceMatrix, BusKind, NetworkCase, build_ybus, incidence

log = logging.getLogger(__name__)

KINDS = ("P_inj", "Q_inj", "P_flow", "Q_flow", "V_mag")
BUS_KINDS = ("P_inj", "Q_inj", "V_mag")


class PowerFlowError(RuntimeError):
    """Newton-Raphson failed; ``mismatch`` holds the final infinity-norm."""

    def __init__(self, msg: str, mismatch: float = float("nan"), iterations: int = 0):
        super().__init__(msg)
        self.mismatch = mismatch
        self.iterations = iterations


@dataclass(frozen=True)
class StateVector:
    vm: np.ndarray
    va: np.ndarray

    def __post_init__(self):
        vm = np.asarray(self.vm, dtype=float)
        va = np.asarray(self.va, dtype=float)
        if vm.shape != va.shape:
            raise ValueError(f"vm shape {vm.shape} != va shape {va.shape}")
        object.__setattr__(self, "vm", vm)
        object.__setattr__(self, "va", va)

    @classmethod
    def flat(cls, case: NetworkCase) -> "StateVector":
        vm = np.ones(case.n_bus)
        vm[case.slack] = case.buses[case.slack].v_setpoint
        return cls(vm, np.zeros(case.n_bus))

    @property
    def phasor(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def free(self, case: NetworkCase) -> np.ndarray:
        """Free coordinates: non-slack angles then non-slack magnitudes."""
        keep = free_buses(case)
        return np.concatenate([self.va[..., keep], self.vm[..., keep]], axis=-1)

    @classmethod
    def from_free(cls, x: np.ndarray, case: NetworkCase,
                  slack_vm: float | None = None) -> "StateVector":
        x = np.asarray(x, dtype=float)
        keep = free_buses(case)
        nf = len(keep)
        if x.shape[-1] != 2 * nf:
            raise ValueError(f"expected {2 * nf} free coordinates, got {x.shape[-1]}")
        shape = x.shape[:-1] + (case.n_bus,)
        va = np.zeros(shape)
        vm = np.full(shape, case.buses[case.slack].v_setpoint if slack_vm is None else slack_vm)
        va[..., keep] = x[..., :nf]
        vm[..., keep] = x[..., nf:]
        return cls(vm, va)


def free_buses(case: NetworkCase) -> np.ndarray:
    return np.array([i for i in range(case.n_bus) if i != case.slack], dtype=int)


@dataclass(frozen=True)
class Channel:
    kind: str
    loc: int  # internal bus index, or position among in-service branches

    def label(self, case: NetworkCase) -> str:
        if self.kind in BUS_KINDS:
            return f"{self.kind}@{case.buses[self.loc].id}"
        br = case.active_branches[self.loc]
        return f"{self.kind}@{br.from_bus}-{br.to_bus}#{self.loc}"


@dataclass(frozen=True)
class MeasurementSchema:
    """Ordered measurement channels for a particular network size."""

    channels: tuple[Channel, ...]
    n_bus: int
    n_branch: int

    def __post_init__(self):
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("duplicate channels in schema")
        for ch in self.channels:
            if ch.kind not in KINDS:
                raise ValueError(f"unknown channel kind {ch.kind!r}")
            limit = self.n_bus if ch.kind in BUS_KINDS else self.n_branch
            if not 0 <= ch.loc < limit:
                raise ValueError(f"channel {ch} references a missing element")

    @property
    def m(self) -> int:
        return len(self.channels)

    @cached_property
    def full_index(self) -> np.ndarray:
        """Positions of the channels in the stacked vector [P, Q, Pf, Qf, V]."""
        n, L = self.n_bus, self.n_branch
        offset = {"P_inj": 0, "Q_inj": n, "P_flow": 2 * n, "Q_flow": 2 * n + L,
                  "V_mag": 2 * n + 2 * L}
        return np.array([offset[c.kind] + c.loc for c in self.channels], dtype=int)

    def labels(self, case: NetworkCase) -> list[str]:
        return [c.label(case) for c in self.channels]

    def indices_of(self, kind: str) -> np.ndarray:
        return np.array([j for j, c in enumerate(self.channels) if c.kind == kind], dtype=int)

    def digest(self) -> str:
        text = ";".join(f"{c.kind}:{c.loc}" for c in self.channels)
        return hashlib.sha256(f"{self.n_bus}/{self.n_branch}/{text}".encode()).hexdigest()[:16]

    def permuted(self, order) -> "MeasurementSchema":
        return MeasurementSchema(tuple(self.channels[j] for j in order), self.n_bus, self.n_branch)


def make_schema(case: NetworkCase, kinds=KINDS) -> MeasurementSchema:
    """Schema with every channel of the given kinds, grouped by kind in ``kinds`` order."""
    chans = []
    for kind in kinds:
        count = case.n_bus if kind in BUS_KINDS else case.n_branch
        chans.extend(Channel(kind, j) for j in range(count))
    return MeasurementSchema(tuple(chans), case.n_bus, case.n_branch)


def default_schema(case: NetworkCase) -> MeasurementSchema:
    """All injections, from-end flows and voltage magnitudes: ``m = 3n + 2L``."""
    return make_schema(case, KINDS)


@dataclass(frozen=True)
class NoiseModel:
    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.ndim != 1 or not np.all(sigma > 0):
            raise ValueError("sigma must be a positive vector")
        object.__setattr__(self, "sigma", sigma)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.sigma ** 2)

    @property
    def weights(self) -> np.ndarray:
        return self.sigma ** -2.0


class MeasurementModel:
    """Cached network matrices for repeated evaluation of ``h`` and its Jacobian."""

    def __init__(self, case: NetworkCase, schema: MeasurementSchema | None = None):
        self.case = case
        self.schema = schema or default_schema(case)
        if (self.schema.n_bus, self.schema.n_branch) != (case.n_bus, case.n_branch):
            raise ValueError("schema does not match case dimensions")
        self.ybus: AdmittanceMatrix = build_ybus(case)
        self.Y = self.ybus.Y
        self.cf, _ = incidence(case)
        self.free = free_buses(case)
        self.idx = self.schema.full_index

    @property
    def m(self) -> int:
        return self.schema.m

    @property
    def s(self) -> int:
        return 2 * len(self.free)

    def full(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        V = np.asarray(vm) * np.exp(1j * np.asarray(va))
        S = V * np.conj(V @ self.Y.T)
        f = np.asarray(self.case.branch_ends()[0])
        Sf = V[..., f] * np.conj(V @ self.ybus.yf.T)
        return np.concatenate([S.real, S.imag, Sf.real, Sf.imag, np.abs(V)], axis=-1)

    def h(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        return self.full(vm, va)[..., self.idx]

    def full_jacobian(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        """Derivatives of the stacked vector w.r.t. all angles then all magnitudes.

        Shape ``(..., 3n + 2L, 2n)``.
        """
        vm = np.asarray(vm, dtype=float)
        va = np.asarray(va, dtype=float)
        V = vm * np.exp(1j * va)
        Vn = np.exp(1j * va)
        Y, yf, cf = self.Y, self.ybus.yf, self.cf
        I = V @ Y.T
        n = self.case.n_bus
        eye = np.eye(n)
        # dS/dVa = j diag(V) conj(diag(I) - Y diag(V))
        dS_dva = 1j * V[..., :, None] * np.conj(I[..., :, None] * eye - Y * V[..., None, :])
        # dS/dVm = diag(V) conj(Y diag(Vn)) + conj(diag(I)) diag(Vn)
        dS_dvm = V[..., :, None] * np.conj(Y * Vn[..., None, :]) + np.conj(I)[..., :, None] * (eye * Vn[..., None, :])
        If = V @ yf.T
        Vf = V @ cf.T
        dSf_dva = 1j * (np.conj(If)[..., :, None] * cf * V[..., None, :]
                        - Vf[..., :, None] * np.conj(yf * V[..., None, :]))
        dSf_dvm = Vf[..., :, None] * np.conj(yf * Vn[..., None, :]) + np.conj(If)[..., :, None] * cf * Vn[..., None, :]
        shape = vm.shape[:-1]
        dV = np.concatenate([np.zeros(shape + (n, n)), np.broadcast_to(eye, shape + (n, n))], axis=-1)
        top = np.concatenate([dS_dva, dS_dvm], axis=-1)
        flow = np.concatenate([dSf_dva, dSf_dvm], axis=-1)
        return np.concatenate([top.real, top.imag, flow.real, flow.imag, dV], axis=-2)

    def jacobian(self, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
        """``dh/dx`` over the free states (non-slack angles, then non-slack magnitudes)."""
        J = self.full_jacobian(vm, va)
        n = self.case.n_bus
        cols = np.concatenate([self.free, n + self.free])
        return np.ascontiguousarray(J[..., self.idx, :][..., cols])


def measure(state: StateVector, case: NetworkCase, schema: MeasurementSchema) -> np.ndarray:
    return MeasurementModel(case, schema).h(state.vm, state.va)


def measurement_jacobian(state: StateVector, case: NetworkCase,
                         schema: MeasurementSchema) -> np.ndarray:
    return MeasurementModel(case, schema).jacobian(state.vm, state.va)


def branch_losses(state: StateVector, case: NetworkCase) -> np.ndarray:
    """Active power dissipated in each branch plus bus shunt conductances (total)."""
    yb = build_ybus(case)
    V = state.phasor
    f, t = case.branch_ends()
    Sf = V[..., f] * np.conj(V @ yb.yf.T)
    St = V[..., t] * np.conj(V @ yb.yt.T)
    shunt = case.bus_array("g_shunt") * np.abs(V) ** 2
    return (Sf + St).real.sum(axis=-1) + shunt.sum(axis=-1)


# ---------------------------------------------------------------------------
# power flow

@dataclass(frozen=True)
class Dispatch:
    """Per-bus targets: net injections ``p``, ``q`` and voltage setpoints ``vm``."""

    p: np.ndarray
    q: np.ndarray
    vm: np.ndarray

    @classmethod
    def from_case(cls, case: NetworkCase, load_scale=1.0, gen_scale=1.0,
                  q_scale=None) -> "Dispatch":
        """Dispatch from the case file; loads and generation optionally scaled.

        ``load_scale`` may be a scalar or a per-bus vector. Reactive loads
        follow ``q_scale`` when given, otherwise ``load_scale``.
        """
        pg, qg = case.gen_injection()
        ls = np.broadcast_to(np.asarray(load_scale, dtype=float), (case.n_bus,))
        qs = ls if q_scale is None else np.broadcast_to(np.asarray(q_scale, float), (case.n_bus,))
        p = gen_scale * pg - ls * case.bus_array("p_load")
        q = qg - qs * case.bus_array("q_load")
        vm = case.bus_array("v_setpoint")
        return cls(p, q, vm)


def solve_powerflow(case: NetworkCase, dispatch: Dispatch | None = None, *,
                    tol: float = 1e-8, max_iter: int = 20,
                    init: StateVector | None = None) -> StateVector:
    """Newton-Raphson in polar coordinates from flat start.

    Unknowns are angles at PV/PQ buses and magnitudes at PQ buses. Generator
    reactive limits are not enforced.
    """
    dispatch = dispatch or Dispatch.from_case(case)
    model = MeasurementModel(case)
    Y = model.Y
    n = case.n_bus
    kinds = [b.kind for b in case.buses]
    pvpq = np.array([i for i in range(n) if kinds[i] is not BusKind.SLACK], dtype=int)
    pq = np.array([i for i in range(n) if kinds[i] is BusKind.PQ], dtype=int)
    pv_or_slack = np.array([i for i in range(n) if kinds[i] is not BusKind.PQ], dtype=int)

    if init is None:
        vm = np.ones(n)
        va = np.zeros(n)
    else:
        vm, va = init.vm.astype(float).copy(), init.va.astype(float).copy()
    vm[pv_or_slack] = dispatch.vm[pv_or_slack]
    sbus = dispatch.p + 1j * dispatch.q

    def mismatch(vm, va):
        V = vm * np.exp(1j * va)
        mis = V * np.conj(Y @ V) - sbus
        return np.concatenate([mis.real[pvpq], mis.imag[pq]])

    F = mismatch(vm, va)
    norm = np.max(np.abs(F)) if F.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise PowerFlowError(
                f"power flow did not converge in {max_iter} iterations "
                f"(mismatch {norm:.3e})", norm, it)
        J = model.full_jacobian(vm, va)
        # rows: P (0..n), Q (n..2n); cols: va (0..n), vm (n..2n)
        rows = np.concatenate([pvpq, n + pq])
        cols = np.concatenate([pvpq, n + pq])
        dx = np.linalg.solve(J[np.ix_(rows, cols)], -F)
        va[pvpq] += dx[:len(pvpq)]
        vm[pq] += dx[len(pvpq):]
        it += 1
        F = mismatch(vm, va)
        norm = np.max(np.abs(F))
        if not np.isfinite(norm):
            raise PowerFlowError("power flow diverged (non-finite mismatch)", norm, it)
    log.debug("power flow converged in %d iterations (mismatch %.2e)", it, norm)
    return StateVector(vm, va)
