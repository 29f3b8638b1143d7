import numpy as np
import pytest

from shared import bench
from fdilab.basis import SPARSE, BasisLift, build_basis_spec
from fdilab.estimation import BddConfig, bdd_flags
from fdilab.models import (LatentLayout, MaskConfig, PgAeModel, StandardAeModel, TrainingError,
                           load_model, pgae_loss_grad, reconstruction_error,
                           resolve_layout, save_model, train_masked_pgae, train_pgae,
                           train_standard_ae)
from fdilab.nn import Mlp, TrainConfig
from fdilab.scenario import ScenarioConfig, generate_timeseries

SHORT = TrainConfig(max_iterations=4, warmup=2)


@pytest.fixture(scope="module")
def small14():
    return generate_timeseries(ScenarioConfig(n_samples=120, seed=5))


def test_constant_dataset_fits_exactly(small14):
    Z = np.repeat(small14.truth[:1], 60, axis=0)
    model = train_pgae(Z, small14.case, config=SHORT)
    # the least-squares decoder is exact; the few Adam steps after it stay tiny
    assert np.max(reconstruction_error(model, Z)) < 1e-6 * np.sum(Z[0] ** 2)
    exact = train_pgae(Z, small14.case, config=TrainConfig(max_iterations=0))
    assert np.max(reconstruction_error(exact, Z)) < 1e-20


def test_standard_ae_linear_subspace():
    rng = np.random.default_rng(0)
    Z = rng.standard_normal((300, 2)) @ rng.standard_normal((2, 6))
    cfg = TrainConfig(learning_rate=3e-3, max_iterations=1000)
    model = train_standard_ae(Z, 2, cfg)
    assert np.mean(reconstruction_error(model, Z)) < 1e-3 * np.sum(Z.var(axis=0))


def test_decoder_is_linear_in_basis(small14, rng):
    model = train_pgae(small14, small14.case, config=SHORT)
    w1, w2 = rng.standard_normal((2, model.spec.p))
    a, b = 0.7, -1.9
    np.testing.assert_allclose(model.D @ (a * w1 + b * w2), a * model.D @ w1 + b * model.D @ w2,
                               rtol=1e-12, atol=1e-12)
    # and reconstruction goes through the lift with no bias
    U = model.encode(small14.Z[:3])
    np.testing.assert_allclose(model.decode(U), model.lift(U) @ model.D.T)


def test_default_latent_is_state_dimension(small14):
    model = train_pgae(small14, small14.case, config=SHORT)
    assert model.d == 26 and model.m == 82
    assert model.meta["schema_hash"] == small14.schema.digest()
    assert model.meta["config"]["max_iterations"] == 4


def test_latent_layout_virtual():
    lay = LatentLayout.virtual(5)
    assert lay.dim == 5 and lay.n_bus == 4
    vm, va = lay.to_state(np.arange(5.0)[None])
    assert va[0, 0] == 0 and vm[0, 0] == 1.0


def test_sparse_requires_state_dimension(case14):
    with pytest.raises(ValueError, match="dense"):
        resolve_layout(case14, build_basis_spec(case14, SPARSE), 4)
    with pytest.raises(ValueError):
        resolve_layout(case14, None, 0)


def test_nan_loss_aborts(small14):
    Z = small14.Z.copy()
    Z[3, 2] = np.nan
    with pytest.raises(TrainingError, match="non-finite"):
        train_pgae(Z, small14.case, config=SHORT)


def test_empty_dataset_rejected(case14):
    with pytest.raises(ValueError):
        train_pgae(np.empty((0, 82)), case14, config=SHORT)


@pytest.mark.parametrize("trainer", ["pgae", "ae", "masked"])
def test_trainers_reproducible(small14, trainer):
    def run():
        if trainer == "pgae":
            return train_pgae(small14, small14.case, config=SHORT)
        if trainer == "ae":
            return train_standard_ae(small14, 8, SHORT)
        return train_masked_pgae(small14, small14.case, mask=MaskConfig(40, 1), config=SHORT)[0]
    a, b = run(), run()
    Z = small14.Z[:5]
    assert np.array_equal(a.reconstruct(Z), b.reconstruct(Z))


def test_checkpoint_round_trip(small14, tmp_path):
    for model in (train_pgae(small14, small14.case, config=SHORT),
                  train_standard_ae(small14, 5, SHORT)):
        path = str(tmp_path / "model.json")
        save_model(model, path)
        again = load_model(path)
        assert type(again) is type(model)
        assert np.array_equal(again.reconstruct(small14.Z), model.reconstruct(small14.Z))


def test_load_rejects_unknown_kind(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"kind": "gan"}')
    with pytest.raises(ValueError):
        load_model(str(path))


def test_masked_profile_shape(small14):
    model, profile = train_masked_pgae(small14, small14.case, mask=MaskConfig(30), config=SHORT)
    assert profile.shape == (82,) and np.all(profile >= 0)
    assert model.meta["keep_count"] == 30


def test_masked_full_keep_matches_plain(small14):
    """With m0 = m no channel is ever dropped, so training is the plain objective."""
    m = small14.schema.m
    cut = int(round(0.8 * len(small14)))
    masked, _ = train_masked_pgae(small14, small14.case, mask=MaskConfig(m), config=SHORT)
    plain = train_pgae(small14.Z[:cut], small14.case, config=SHORT)
    assert np.array_equal(masked.D, plain.D)


@pytest.mark.parametrize("keep", [0, 83])
def test_mask_bounds(keep):
    with pytest.raises(ValueError):
        MaskConfig(keep).validate(82)


def test_loss_gradient_through_lift(case14, rng):
    """Backprop through encoder, latent layout and basis lift vs central differences."""
    for spec, d in ((build_basis_spec(case14, SPARSE), None), (None, 5)):
        layout, spec = resolve_layout(case14, spec, d)
        enc = Mlp.init([6, 7, layout.dim], rng)
        for b in enc.biases:
            b += rng.normal(0, 0.2, b.shape)
        lift = BasisLift(spec)
        D = rng.normal(0, 0.1, (4, spec.p))
        X = rng.standard_normal((5, 6))
        Z = rng.standard_normal((5, 4))
        w = rng.random((5, 4)) < 0.5
        _, grads = pgae_loss_grad(enc, layout, lift, D, X, Z, w)
        params = enc.params + [D]
        h = 1e-5
        for p, g in zip(params, grads):
            num = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + h
                a, _ = pgae_loss_grad(enc, layout, lift, D, X, Z, w)
                p[i] = old - h
                b, _ = pgae_loss_grad(enc, layout, lift, D, X, Z, w)
                p[i] = old
                num[i] = (a - b) / (2 * h)
            err = np.max(np.abs(num - g)) / max(np.max(np.abs(num)), 1e-8)
            assert err <= 1e-4


# ---------------------------------------------------------------------------
# full-size runs with the default optimizer settings

@pytest.mark.slow
def test_state_dimension_reaches_noise_floor():
    """RMSE relative to each channel's magnitude scale is at most the 2% noise level."""
    b = bench()
    ds = b.dataset()
    scale = ds.noise.sigma / (ds.config.noise_percent / 100.0)
    R = (ds.Z - b.pgae(0).reconstruct(ds.Z)) / scale
    assert float(np.sqrt(np.mean(R * R))) <= 0.02


@pytest.mark.slow
def test_tiny_latent_much_worse():
    b = bench()
    ds = b.dataset()
    e1 = np.mean(reconstruction_error(b.pgae(0, d=1), ds.Z))
    e26 = np.mean(reconstruction_error(b.pgae(0), ds.Z))
    assert e1 > 5 * e26


@pytest.mark.slow
def test_reconstructions_stay_near_manifold():
    b = bench()
    ds = b.dataset()
    rec = b.pgae(0).reconstruct(ds.Z)
    est = b.estimator(ds)
    out = est.residuals(rec)
    rate = bdd_flags(out.residual, BddConfig.for_estimator(est, 0.05), out.converged).mean()
    assert 0.0 <= rate <= 0.10


def test_model_types_exported():
    assert PgAeModel.__name__ == "PgAeModel" and StandardAeModel.__name__ == "StandardAeModel"
