import io

import numpy as np
import pytest

from fdilab.grid import BusKind
from fdilab.powerflow import MeasurementModel
from fdilab.scenario import (ScenarioConfig, generate_timeseries, load_profile,
                             read_series_csv, write_series_csv)


@pytest.fixture(scope="module")
def ds():
    return generate_timeseries(ScenarioConfig(n_samples=200, seed=4))


@pytest.mark.parametrize("kwargs", [{"noise_percent": 0}, {"n_samples": 0},
                                    {"schema": "pmu"}, {"scale_range": (1.1, 0.9)}])
def test_config_rejects(kwargs):
    with pytest.raises(ValueError):
        ScenarioConfig(**kwargs)


def test_tiny_noise_allowed():
    ds = generate_timeseries(ScenarioConfig(n_samples=3, noise_percent=1e-9))
    np.testing.assert_allclose(ds.Z, ds.truth, atol=1e-9)


def test_bit_identical(ds):
    again = generate_timeseries(ScenarioConfig(n_samples=200, seed=4))
    assert np.array_equal(ds.Z, again.Z)
    other = generate_timeseries(ScenarioConfig(n_samples=200, seed=5))
    assert not np.array_equal(ds.Z, other.Z)


def test_profile_range():
    t = np.arange(1440)
    p = load_profile(t)
    assert p.min() == pytest.approx(0.8) and p.max() == pytest.approx(1.2)
    assert np.argmax(p) == 720


def test_truth_is_measurement_of_states(ds):
    model = MeasurementModel(ds.case, ds.schema)
    np.testing.assert_allclose(ds.truth, model.h(ds.vm, ds.va), atol=1e-12)


def test_sigma_rule(ds):
    expect = 0.02 * np.maximum(np.abs(ds.truth).mean(axis=0), 0.1)
    np.testing.assert_allclose(ds.noise.sigma, expect)


def test_load_scaling_bounds(ds):
    pq = [i for i, b in enumerate(ds.case.buses) if b.kind is BusKind.PQ and b.p_load > 0]
    factor = -ds.truth[:, pq] / ds.case.bus_array("p_load")[pq]
    assert factor.min() >= 0.8 * 0.9 - 1e-9 and factor.max() <= 1.2 * 1.1 + 1e-9


def test_active_injection_schema():
    ds = generate_timeseries(ScenarioConfig(n_samples=5, schema="p_inj"))
    assert ds.Z.shape == (5, 14)


def test_config_json_round_trip():
    cfg = ScenarioConfig(case="case30", n_samples=10, scale_range=(0.95, 1.05))
    assert ScenarioConfig.from_json(cfg.to_json()) == cfg


def test_csv_round_trip(ds, tmp_path):
    labels = ds.schema.labels(ds.case)
    path = str(tmp_path / "z.csv")
    write_series_csv(path, labels, ds.t, ds.Z)
    got_labels, t, Z, prov = read_series_csv(path)
    assert got_labels == labels and prov is None
    assert np.array_equal(t, ds.t) and np.array_equal(Z, ds.Z)
    with open(path) as fh:
        assert fh.readline().startswith("t,P_inj")


def test_csv_provenance():
    buf = io.StringIO()
    write_series_csv(buf, ["a", "b"], [0, 1], np.array([[1.0, 2.0], [3.0, 4.0]]),
                     ["nominal", "attacked"])
    labels, _, Z, prov = read_series_csv(buf.getvalue())
    assert labels == ["a", "b"] and prov == ["nominal", "attacked"]
    assert Z[1, 1] == 4.0


def test_csv_bad_header():
    with pytest.raises(ValueError):
        read_series_csv("x,a\n0,1\n")


def test_subset_and_states(ds):
    sub = ds.subset(np.arange(10))
    assert len(sub) == 10 and sub.states().vm.shape == (10, 14)
    assert len(ds.with_measurements(ds.truth)) == len(ds)
