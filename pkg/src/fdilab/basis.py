"""Symbolic basis lift ``f(x)`` and the lifted map ``A`` with ``h(x) = A f(x)``.

The basis has three term families over bus indices::

    V(i)   = vm_i
    C(i,k) = vm_i vm_k cos(va_i - va_k)
    S(i,k) = vm_i vm_k sin(va_i - va_k)

Terms are ordered V, then C, then S, each family in row-major ``(i, k)``
order. The ordering is part of the checkpoint format.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import NetworkCase, branch_params, build_ybus
from .powerflow import MeasurementSchema

DENSE = "dense"
SPARSE = "sparse"


class MissingTermError(KeyError):
    pass


@dataclass(frozen=True)
class LiftedBasisSpec:
    n: int
    c_pairs: tuple[tuple[int, int], ...]
    s_pairs: tuple[tuple[int, int], ...]
    mode: str = DENSE

    def __post_init__(self):
        if len(set(self.c_pairs)) != len(self.c_pairs) or len(set(self.s_pairs)) != len(self.s_pairs):
            raise ValueError("duplicate basis terms")

    @property
    def p(self) -> int:
        return self.n + len(self.c_pairs) + len(self.s_pairs)

    @cached_property
    def _arrays(self):
        c = np.array(self.c_pairs, dtype=int).reshape(-1, 2)
        s = np.array(self.s_pairs, dtype=int).reshape(-1, 2)
        return c[:, 0], c[:, 1], s[:, 0], s[:, 1]

    @cached_property
    def column(self) -> dict[tuple[str, int, int], int]:
        col = {("V", i, i): i for i in range(self.n)}
        off = self.n
        for j, (i, k) in enumerate(self.c_pairs):
            col[("C", i, k)] = off + j
        off += len(self.c_pairs)
        for j, (i, k) in enumerate(self.s_pairs):
            col[("S", i, k)] = off + j
        return col

    def terms(self) -> list[tuple[str, int, int]]:
        return ([("V", i, i) for i in range(self.n)] + [("C", i, k) for i, k in self.c_pairs]
                + [("S", i, k) for i, k in self.s_pairs])

    def to_json(self) -> dict:
        return {"mode": self.mode, "n": self.n,
                "terms": [[t, i, k] for t, i, k in self.terms()]}

    @classmethod
    def from_json(cls, obj: dict) -> "LiftedBasisSpec":
        terms = obj["terms"]
        c = tuple((int(i), int(k)) for t, i, k in terms if t == "C")
        s = tuple((int(i), int(k)) for t, i, k in terms if t == "S")
        spec = cls(int(obj["n"]), c, s, obj["mode"])
        if len(terms) != spec.p:
            raise ValueError("basis term list is inconsistent")
        return spec


def dense_spec(n: int) -> LiftedBasisSpec:
    """All ordered pairs including ``i == k``: ``p = n + 2 n^2``."""
    pairs = tuple((i, k) for i in range(n) for k in range(n))
    return LiftedBasisSpec(n, pairs, pairs, DENSE)


def build_basis_spec(case: NetworkCase, mode: str = DENSE) -> LiftedBasisSpec:
    """Dense basis over all pairs, or the connectivity-restricted sparse basis.

    The sparse basis keeps ``V(i)``, ``C(i,i)`` and ``C(i,k)``, ``S(i,k)``
    for neighbours ``k``; the identically zero ``S(i,i)`` is left out.
    """
    if mode == DENSE:
        return dense_spec(case.n_bus)
    if mode != SPARSE:
        raise ValueError(f"unknown basis mode {mode!r}")
    nbrs = case.neighbors()
    c_pairs, s_pairs = [], []
    for i in range(case.n_bus):
        for k in sorted(nbrs[i] | {i}):
            c_pairs.append((i, k))
        for k in sorted(nbrs[i]):
            s_pairs.append((i, k))
    return LiftedBasisSpec(case.n_bus, tuple(c_pairs), tuple(s_pairs), SPARSE)


def eval_basis(spec: LiftedBasisSpec, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    """Evaluate ``f`` for states of shape ``(n,)`` or ``(N, n)``."""
    ci, ck, si, sk = spec._arrays
    C = vm[..., ci] * vm[..., ck] * np.cos(va[..., ci] - va[..., ck])
    S = vm[..., si] * vm[..., sk] * np.sin(va[..., si] - va[..., sk])
    return np.concatenate([vm, C, S], axis=-1)


def basis_jacobian(spec: LiftedBasisSpec, vm: np.ndarray, va: np.ndarray) -> np.ndarray:
    """``df/d(va, vm)``: shape ``(..., p, 2n)``, angle columns first."""
    n = spec.n
    ci, ck, si, sk = spec._arrays
    nc = len(ci)
    shape = vm.shape[:-1]
    J = np.zeros(shape + (spec.p, 2 * n))
    rows = np.arange(n)
    J[..., rows, n + rows] = 1.0

    def fill(row_off, i, k, cos_like, d_va_i):
        r = row_off + np.arange(len(i))
        prod = vm[..., i] * vm[..., k]
        # accumulate so that i == k rows get both contributions
        np.add.at(J, (..., r, n + i), vm[..., k] * cos_like)
        np.add.at(J, (..., r, n + k), vm[..., i] * cos_like)
        np.add.at(J, (..., r, i), prod * d_va_i)
        np.add.at(J, (..., r, k), -prod * d_va_i)

    tc = va[..., ci] - va[..., ck]
    fill(n, ci, ck, np.cos(tc), -np.sin(tc))
    ts = va[..., si] - va[..., sk]
    fill(n + nc, si, sk, np.sin(ts), np.cos(ts))
    return J


class BasisLift:
    """Batched evaluation of ``f`` and its vector-Jacobian product.

    Used inside training loops; ``vjp`` maps ``dL/df`` of shape ``(N, p)``
    to ``(dL/dva, dL/dvm)`` without forming the full Jacobian.
    """

    def __init__(self, spec: LiftedBasisSpec):
        self.spec = spec
        n = spec.n
        ci, ck, si, sk = spec._arrays
        self.idx = (ci, ck, si, sk)
        eye = np.eye(n)
        self.Eci, self.Eck = eye[ci], eye[ck]
        self.Esi, self.Esk = eye[si], eye[sk]
        self.nc = len(ci)

    def forward(self, vm, va):
        ci, ck, si, sk = self.idx
        tc = va[:, ci] - va[:, ck]
        ts = va[:, si] - va[:, sk]
        cache = (vm, va, np.cos(tc), np.sin(tc), np.cos(ts), np.sin(ts))
        pc = vm[:, ci] * vm[:, ck]
        ps = vm[:, si] * vm[:, sk]
        f = np.concatenate([vm, pc * cache[2], ps * cache[5]], axis=1)
        return f, cache

    def vjp(self, grad_f, cache):
        vm, va, cc, sc, cs, ss = cache
        ci, ck, si, sk = self.idx
        n, nc = self.spec.n, self.nc
        gV = grad_f[:, :n]
        gC = grad_f[:, n:n + nc]
        gS = grad_f[:, n + nc:]
        g_vm = gV.copy()
        g_vm += (gC * vm[:, ck] * cc) @ self.Eci + (gC * vm[:, ci] * cc) @ self.Eck
        g_vm += (gS * vm[:, sk] * ss) @ self.Esi + (gS * vm[:, si] * ss) @ self.Esk
        tc = gC * vm[:, ci] * vm[:, ck] * -sc
        ts = gS * vm[:, si] * vm[:, sk] * cs
        g_va = tc @ self.Eci - tc @ self.Eck + ts @ self.Esi - ts @ self.Esk
        return g_va, g_vm


# ---------------------------------------------------------------------------
# lifted map

@dataclass(frozen=True)
class LiftedMap:
    A: np.ndarray
    spec: LiftedBasisSpec
    schema: MeasurementSchema

    def apply(self, f: np.ndarray) -> np.ndarray:
        return f @ self.A.T

    def h(self, vm, va) -> np.ndarray:
        return self.apply(eval_basis(self.spec, np.asarray(vm, float), np.asarray(va, float)))


def assemble_lifted_map(case: NetworkCase, schema: MeasurementSchema,
                        spec: LiftedBasisSpec) -> LiftedMap:
    """Coefficient matrix ``A`` such that ``h(x) = A f(x)`` exactly.

    Injection rows use the Y-bus entries. Flow rows use the branch two-port
    entries ``yff``, ``yft``, which fold line charging and off-nominal taps
    (including phase shift) into the ``C(i,i)``, ``C(i,k)``, ``S(i,k)``
    coefficients. ``S(i,i)`` is identically zero and only receives a
    coefficient when the basis includes that term.
    """
    if spec.n != case.n_bus:
        raise ValueError(f"basis spec has {spec.n} buses, case has {case.n_bus}")
    ybus = build_ybus(case)
    G, B = ybus.G, ybus.B
    params = branch_params(case)
    col = spec.column
    A = np.zeros((schema.m, spec.p))

    def put(row, term, val):
        if val == 0.0:
            return
        j = col.get(term)
        if j is None:
            if term[0] == "S" and term[1] == term[2]:
                return
            kind, i, k = term
            raise MissingTermError(f"basis spec lacks required term {kind}({i},{k})")
        A[row, j] += val

    for row, ch in enumerate(schema.channels):
        if ch.kind == "V_mag":
            put(row, ("V", ch.loc, ch.loc), 1.0)
        elif ch.kind in ("P_inj", "Q_inj"):
            i = ch.loc
            for k in np.flatnonzero((G[i] != 0) | (B[i] != 0)):
                g, b = G[i, k], B[i, k]
                if ch.kind == "P_inj":
                    put(row, ("C", i, k), g)
                    put(row, ("S", i, k), b)
                else:
                    put(row, ("C", i, k), -b)
                    put(row, ("S", i, k), g)
        else:
            bp = params[ch.loc]
            yff, yft, _, _ = bp.two_port()
            i, k = bp.from_idx, bp.to_idx
            if ch.kind == "P_flow":
                put(row, ("C", i, i), yff.real)
                put(row, ("C", i, k), yft.real)
                put(row, ("S", i, k), yft.imag)
            else:
                put(row, ("C", i, i), -yff.imag)
                put(row, ("C", i, k), -yft.imag)
                put(row, ("S", i, k), yft.real)
    return LiftedMap(A, spec, schema)


def sparse_dimension(case: NetworkCase) -> int:
    """``3n + 2 sum_i |N_i|`` less the ``n`` excluded ``S(i,i)`` terms."""
    n = case.n_bus
    return 3 * n + 2 * sum(len(s) for s in case.neighbors()) - n
