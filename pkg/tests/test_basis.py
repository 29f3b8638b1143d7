import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_states
from fdilab.basis import (DENSE, SPARSE, BasisLift, LiftedBasisSpec, MissingTermError,
                          assemble_lifted_map, basis_jacobian, build_basis_spec, dense_spec,
                          eval_basis,
                          sparse_dimension)
from fdilab.grid import build_ybus
from fdilab.powerflow import MeasurementModel, default_schema, make_schema


def test_dense_and_sparse_counts(case14):
    assert build_basis_spec(case14, DENSE).p == 406
    assert build_basis_spec(case14, SPARSE).p == 122 - 14


def test_two_bus_sparse_terms(two_bus):
    spec = build_basis_spec(two_bus, SPARSE)
    assert spec.p == 8
    assert set(spec.terms()) == {("V", 0, 0), ("V", 1, 1), ("C", 0, 0), ("C", 1, 1),
                                 ("C", 0, 1), ("C", 1, 0), ("S", 0, 1), ("S", 1, 0)}


def test_sparse_dimension_formula(bundled):
    n = bundled.n_bus
    degree = sum(len(s) for s in bundled.neighbors())
    assert build_basis_spec(bundled, SPARSE).p == 3 * n + 2 * degree - n == sparse_dimension(bundled)


def test_unknown_mode(case14):
    with pytest.raises(ValueError):
        build_basis_spec(case14, "banded")


def test_duplicate_terms_rejected():
    with pytest.raises(ValueError):
        LiftedBasisSpec(2, ((0, 1), (0, 1)), ())


def test_spec_json_round_trip(case14):
    spec = build_basis_spec(case14, SPARSE)
    assert LiftedBasisSpec.from_json(spec.to_json()) == spec


def test_flat_state_values(case14):
    spec = build_basis_spec(case14, DENSE)
    f = eval_basis(spec, np.ones(14), np.zeros(14))
    np.testing.assert_array_equal(f[:14 + 196], 1.0)
    np.testing.assert_array_equal(f[14 + 196:], 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20))
def test_trig_symmetries(seed):
    rng = np.random.default_rng(seed)
    n = 5
    spec = dense_spec(n)
    vm = rng.uniform(0.8, 1.2, n)
    va = rng.uniform(-1, 1, n)
    f = eval_basis(spec, vm, va)
    C = f[n:n + n * n].reshape(n, n)
    S = f[n + n * n:].reshape(n, n)
    np.testing.assert_allclose(C, C.T, atol=1e-15)
    np.testing.assert_allclose(S, -S.T, atol=1e-15)
    np.testing.assert_array_equal(np.diag(S), 0.0)


def test_basis_jacobian_finite_difference(case14, rng):
    spec = build_basis_spec(case14, SPARSE)
    vm, va = random_states(case14, 3, rng)
    h = 1e-6
    for k in range(3):
        J = basis_jacobian(spec, vm[k], va[k])
        x = np.concatenate([va[k], vm[k]])
        F = np.empty_like(J)
        for j in range(28):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            F[:, j] = (eval_basis(spec, xp[14:], xp[:14]) - eval_basis(spec, xm[14:], xm[:14])) / (2 * h)
        assert np.max(np.abs(J - F)) / np.max(np.abs(F)) <= 1e-6


def test_basis_jacobian_flat(two_bus):
    spec = build_basis_spec(two_bus, SPARSE)
    J = basis_jacobian(spec, np.ones(2), np.zeros(2))
    np.testing.assert_array_equal(J[:2], np.hstack([np.zeros((2, 2)), np.eye(2)]))
    col = spec.column
    for (kind, i, k), r in col.items():
        if kind == "C":
            np.testing.assert_array_equal(J[r, :2], 0.0)
        if kind == "S":
            assert J[r, i] == 1.0 and J[r, k] == -1.0


def test_lift_vjp_matches_jacobian(case14, rng):
    spec = build_basis_spec(case14, SPARSE)
    lift = BasisLift(spec)
    vm, va = random_states(case14, 4, rng)
    f, cache = lift.forward(vm, va)
    np.testing.assert_allclose(f, eval_basis(spec, vm, va))
    g = rng.standard_normal(f.shape)
    g_va, g_vm = lift.vjp(g, cache)
    J = basis_jacobian(spec, vm, va)
    ref = np.einsum("np,npk->nk", g, J)
    np.testing.assert_allclose(np.hstack([g_va, g_vm]), ref, atol=1e-12)


def test_lifted_map_exact(bundled, rng):
    schema = default_schema(bundled)
    model = MeasurementModel(bundled, schema)
    vm, va = random_states(bundled, 100, rng)
    for mode in (DENSE, SPARSE):
        if mode == DENSE and bundled.n_bus > 60:
            continue
        lm = assemble_lifted_map(bundled, schema, build_basis_spec(bundled, mode))
        assert np.max(np.abs(model.h(vm, va) - lm.h(vm, va))) <= 1e-9


def test_dense_and_sparse_agree(case14, rng):
    schema = default_schema(case14)
    vm, va = random_states(case14, 10, rng)
    a = assemble_lifted_map(case14, schema, build_basis_spec(case14, DENSE)).h(vm, va)
    b = assemble_lifted_map(case14, schema, build_basis_spec(case14, SPARSE)).h(vm, va)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_two_bus_pinj_row(two_bus):
    spec = build_basis_spec(two_bus, SPARSE)
    A = assemble_lifted_map(two_bus, default_schema(two_bus), spec).A
    B = build_ybus(two_bus).B
    row = A[0]
    assert row[spec.column[("S", 0, 1)]] == B[0, 1]
    assert np.count_nonzero(row) == 1


def test_vmag_identity_block(case14):
    spec = build_basis_spec(case14, SPARSE)
    schema = default_schema(case14)
    A = assemble_lifted_map(case14, schema, spec).A
    np.testing.assert_array_equal(A[schema.indices_of("V_mag")][:, :14], np.eye(14))


def test_missing_term_named(case14):
    spec = LiftedBasisSpec(14, ((0, 0),), (), SPARSE)
    with pytest.raises(MissingTermError, match=r"C\("):
        assemble_lifted_map(case14, make_schema(case14, ("P_inj",)), spec)


def test_lifted_jacobian_matches_measurement_jacobian(case14, rng):
    """d/dt A f(x + t delta) at 0 equals H delta on the free coordinates."""
    schema = default_schema(case14)
    spec = build_basis_spec(case14, SPARSE)
    A = assemble_lifted_map(case14, schema, spec).A
    model = MeasurementModel(case14, schema)
    vm, va = random_states(case14, 1, rng)
    vm, va = vm[0], va[0]
    H = model.jacobian(vm, va)
    Jf = basis_jacobian(spec, vm, va)
    free = model.free
    Jx = (A @ Jf)[:, np.concatenate([free, 14 + free])]
    delta = rng.standard_normal(26)
    lhs, rhs = Jx @ delta, H @ delta
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * max(np.max(np.abs(rhs)), 1.0)
