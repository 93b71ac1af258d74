import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialflow.domain import ModelSpec, validate_system
from spatialflow.models import intervening_population, radiation_flows
from spatialflow.synth import (SynthConfig, brute_force_radiation, generate_flows,
                               generate_system, grid_search)

from conftest import line_system


def test_same_seed_same_system():
    a = generate_system(SynthConfig(territory_count=15, seed=99))
    b = generate_system(SynthConfig(territory_count=15, seed=99))
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != generate_system(SynthConfig(territory_count=15, seed=100)).to_dict()


def test_stream_is_pinned():
    # PCG64 output is platform independent; these values must never drift
    s = generate_system(SynthConfig(territory_count=4, seed=0))
    assert s.populations.tolist() == [0.37144101160935583, 1.574026803354816,
                                      1.0139495391823654, 0.050507659721904345]
    assert s.costs.distance[0, 1] == 291.40481370389165
    obs = generate_flows("Gravity", {"b": 0.7, "c": 0.4}, s, 50.0, noise="poisson", seed=3)
    assert obs.counts.tolist() == [20.0, 17.0, 4.0]


def test_two_territories():
    s = generate_system(SynthConfig(territory_count=2, seed=1))
    assert intervening_population(0, 1, s) == 0
    with pytest.raises(ValueError):
        generate_system(SynthConfig(territory_count=1))


@given(n=st.integers(3, 25), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_generated_systems_are_valid_and_metric(n, seed):
    s = generate_system(SynthConfig(territory_count=n, seed=seed))
    validate_system(s)
    d = s.costs.distance
    assert np.allclose(d, d.T)
    for i, j, k in itertools.permutations(range(min(n, 8)), 3):
        assert d[i, k] <= d[i, j] + d[j, k] + 1e-9
    np.testing.assert_allclose(s.costs.travel_time, 1.2 * d)


def test_noiseless_flows_are_rounded_expectations():
    s = generate_system(SynthConfig(territory_count=8, seed=2))
    obs = generate_flows("Radiation", {"rho": 1.0, "r": 1.0}, s, 100.0)
    np.testing.assert_array_equal(obs.counts, np.round(obs.counts, 6))
    np.testing.assert_allclose(obs.counts, radiation_flows({"rho": 1.0, "r": 1.0}, s, 100.0).values,
                               atol=5e-7)


def test_poisson_draws_are_reproducible_and_concentrated():
    s = generate_system(SynthConfig(territory_count=30, seed=2))
    a = generate_flows("Gravity", {"b": 0.7, "c": 0.4}, s, 4000.0, noise="poisson", seed=5)
    b = generate_flows("Gravity", {"b": 0.7, "c": 0.4}, s, 4000.0, noise="poisson", seed=5)
    assert a.counts.tolist() == b.counts.tolist()
    assert np.all(a.counts == np.floor(a.counts))
    assert abs(a.total_outflow - 4000) < 4 * math.sqrt(4000)
    with pytest.raises(ValueError):
        generate_flows("Gravity", {"b": 0.7, "c": 0.4}, s, 10.0, noise="gaussian")


def test_retail_family_by_name_uses_given_alphas():
    s = generate_system(SynthConfig(territory_count=6, seed=2))
    obs = generate_flows("Retail", {"beta": 0.01, "alpha_gdhi": 0.5}, s, 10.0)
    assert obs.total_outflow == pytest.approx(10.0, abs=1e-5)


# -- radiation oracle --------------------------------------------------------------------


def test_brute_force_two_territories():
    s = line_system([0, 5], [3.0, 4.0])
    assert brute_force_radiation(s, 1.0, 1.0, 17.0).values.tolist() == [17.0]
    assert radiation_flows({"rho": 1.0, "r": 1.0}, s, 17.0).values.tolist() == [17.0]


def test_brute_force_symmetry():
    s = line_system([0, 5, -5, 9], [3.0, 4.0, 4.0, 1.0])
    v = brute_force_radiation(s, 2.0, 0.7, 30.0).values
    assert v[0] == pytest.approx(v[1], rel=1e-15)


@given(seed=st.integers(0, 2**32 - 1), rho=st.floats(0.05, 5), r=st.floats(0.1, 2.5))
@settings(max_examples=50, deadline=None)
def test_brute_force_agrees_with_vectorised(seed, rho, r):
    s = generate_system(SynthConfig(territory_count=6, seed=seed))
    a = brute_force_radiation(s, rho, r, 100.0).values
    b = radiation_flows({"rho": rho, "r": r}, s, 100.0).values
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


# -- grid oracle ---------------------------------------------------------------------------


def test_grid_finds_truth_of_noiseless_data():
    s = generate_system(SynthConfig(territory_count=10, seed=8))
    spec = ModelSpec("Gravity", "Poisson")
    obs = generate_flows(spec, {"b": 0.75, "c": 0.5}, s, 500.0)
    res = grid_search(spec, s, obs, {"b": np.linspace(0, 1.5, 7), "c": np.linspace(0, 1, 5)},
                      lam=0.0)
    assert dict(res.params) == {"b": 0.75, "c": 0.5}
    assert res.evaluated == 35


def test_singleton_grid():
    s = generate_system(SynthConfig(territory_count=5, seed=8))
    spec = ModelSpec("Radiation", "Gaussian")
    obs = generate_flows(spec, {"rho": 1.0, "r": 1.0}, s, 50.0)
    res = grid_search(spec, s, obs, [[3.0], [0.4]])
    assert dict(res.params) == {"rho": 3.0, "r": 0.4}


def test_grid_ties_go_to_the_first_point():
    s = line_system([0, 10, -10], [5.0, 2.0, 2.0])
    spec = ModelSpec("Gravity", "Poisson")
    obs = generate_flows(spec, {"b": 1.0, "c": 1.0}, s, 10.0)
    res = grid_search(spec, s, obs, [[1.0, -1.0], [0.5, -0.5]], lam=0.0)
    assert dict(res.params) == {"b": 1.0, "c": 0.5}
