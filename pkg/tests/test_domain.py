import json

import numpy as np
import pytest

from spatialflow.domain import (COVARIATES, CostMatrices, CovariateSet, Dataset, DimensionMismatch,
                                FlowObservation, ModelSpec, NegativeCount, NonPositiveCovariate,
                                ParameterVector, TerritorySystem, UnknownYear, ValidationError,
                                find_violations, validate_system)
from spatialflow.synth import SynthConfig, generate_flows, generate_system

from conftest import line_system, observation


def three():
    return line_system([0, 10, 20], [5.0, 2.0, 3.0])


def test_well_formed_system_is_accepted():
    system = three()
    ds = validate_system(system, [observation(system, [1, 2])])
    assert ds.years == (2019,)
    assert ds.system is system


def test_zero_covariate_is_reported_with_location():
    cov = np.ones((3, 5))
    cov[1, COVARIATES.index("knife_crime")] = 0.0
    system = line_system([0, 10, 20], [5.0, 2.0, 3.0], covariates=cov)
    with pytest.raises(ValidationError) as err:
        validate_system(system)
    (v,) = err.value.violations
    assert isinstance(v, NonPositiveCovariate)
    assert (v.territory, v.covariate) == ("T1", "knife_crime")


def test_travel_matrix_of_wrong_size():
    good = line_system([0, 10, 20, 30], [1.0, 1.0, 1.0, 1.0])
    bad = TerritorySystem(good.territories, good.covariates,
                          CostMatrices(np.ones((3, 3)) - np.eye(3), good.costs.distance), 0)
    kinds = [v.kind for v in find_violations(bad)]
    assert kinds == ["DimensionMismatch"]


def test_every_violation_is_collected():
    cov = np.ones((3, 5))
    cov[0, 0] = -1.0
    cov[2, 4] = 0.0
    system = line_system([0, 10, 20], [5.0, 2.0, 3.0], covariates=cov)
    flows = [FlowObservation(2019, system.destination_codes, [1.0, -2.0]),
             FlowObservation(2031, system.destination_codes, [1.0, 1.0])]
    with pytest.raises(ValidationError) as err:
        validate_system(system, flows)
    found = err.value.violations
    assert sum(isinstance(v, NonPositiveCovariate) for v in found) == 2
    assert any(isinstance(v, NegativeCount) and v.territory == "T2" for v in found)
    assert any(isinstance(v, UnknownYear) and v.year == 2031 for v in found)


def test_flows_over_wrong_destinations():
    system = three()
    flows = [FlowObservation(2019, ("T1",), [1.0])]
    assert isinstance(find_violations(system, flows)[0], DimensionMismatch)


def test_violation_dicts_are_json_ready():
    cov = np.ones((3, 5))
    cov[1, 1] = 0.0
    system = line_system([0, 10, 20], [5.0, 2.0, 3.0], covariates=cov)
    (v,) = find_violations(system)
    payload = json.loads(json.dumps(v.to_dict()))
    assert payload["kind"] == "NonPositiveCovariate"
    assert payload["covariate"] == "poisoning_admissions"


def test_validation_is_idempotent_and_leaves_input_alone():
    system = generate_system(SynthConfig(territory_count=6, seed=3))
    obs = generate_flows("Gravity", {"b": 0.7, "c": 0.4}, system, 100.0, noise="poisson", seed=1)
    before = system.to_dict()
    first = validate_system(system, [obs])
    second = validate_system(first.system, list(first.flows.values()))
    assert first.to_json() == second.to_json()
    assert system.to_dict() == before


def test_round_trip_is_field_for_field():
    system = generate_system(SynthConfig(territory_count=7, seed=11))
    obs = generate_flows("Radiation", {"rho": 1.0, "r": 1.0}, system, 50.0)
    ds = Dataset(system, {obs.year: obs})
    back = Dataset.from_json(ds.to_json())
    assert back.system.to_dict() == system.to_dict()
    for t_a, t_b in zip(back.system.territories, system.territories):
        assert t_a == t_b
    np.testing.assert_array_equal(back.system.costs.travel_time, system.costs.travel_time)
    np.testing.assert_array_equal(back.flows[obs.year].counts, obs.counts)
    assert back.to_json() == ds.to_json()


def test_arrays_are_read_only():
    system = three()
    with pytest.raises(ValueError):
        system.costs.distance[0, 1] = 3.0
    with pytest.raises(ValueError):
        system.covariates[2019].values[0, 0] = 3.0


def test_model_spec_rules():
    with pytest.raises(ValueError):
        ModelSpec("Gravity", "Poisson", (True, False, False, False, False))
    with pytest.raises(ValueError):
        ModelSpec("Retail", "Huber")
    spec = ModelSpec.retail("Gaussian", ["gdhi", "misuse_admissions"])
    assert spec.param_names == ("beta", "alpha_misuse_admissions", "alpha_gdhi")
    assert spec.mask_label == "misuse_admissions+gdhi"
    assert ModelSpec("Radiation", "Poisson").param_names == ("rho", "r")


def test_parameter_vector_mapping():
    spec = ModelSpec("Gravity", "Poisson")
    p = ParameterVector.for_spec(spec, {"c": 2.0, "b": 1.0})
    assert list(p) == ["b", "c"]
    assert dict(p) == {"b": 1.0, "c": 2.0}
    with pytest.raises(KeyError):
        p["rho"]


def test_covariate_set_column_lookup():
    cs = CovariateSet(2020, np.arange(1, 11, dtype=float).reshape(2, 5))
    np.testing.assert_array_equal(cs.column("gdhi"), [5.0, 10.0])
