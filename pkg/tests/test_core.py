import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcql.core import (
    FEATURE_INDEX,
    FEATURE_NAMES,
    N_FEATURES,
    Action,
    ClinicalInfo,
    DatasetMeta,
    Episode,
    ObservationState,
    OfflineDataset,
    SchemaError,
    VitalsFrame,
    flatten_observation,
    standardize,
    unflatten_observation,
    unstandardize,
)


def make_obs(map_now=100.0, map_prev=100.0, target=100.0):
    clin = ClinicalInfo.from_body(50, 1, 170, 70, 2)
    f = lambda m, t: VitalsFrame(m + 30, m - 15, m, t)
    return ObservationState(clin, f(map_now, 2), f(map_prev, 1), f(map_prev, 0), 0.1, target)


def test_feature_layout():
    assert N_FEATURES == 19
    assert FEATURE_NAMES[6:9] == ("map", "ap_sys", "ap_dia")
    assert FEATURE_NAMES[-3:] == ("map_target", "map_target_error", "map_change")


def test_flatten_zero_error_slot():
    v = flatten_observation(make_obs(100, 100, 100))
    assert v.shape == (19,)
    assert v[FEATURE_INDEX["map_target_error"]] == 0.0


def test_flatten_map_change():
    v = flatten_observation(make_obs(map_now=90, map_prev=100))
    assert v[FEATURE_INDEX["map_change"]] == -10.0


def test_roundtrip_object():
    obs = make_obs(92, 97, 95)
    back = unflatten_observation(flatten_observation(obs), timestamp_index=2)
    assert back == obs


def test_unflatten_rejects_inconsistent_derived_slots():
    v = flatten_observation(make_obs())
    v[FEATURE_INDEX["map_change"]] += 1.0
    with pytest.raises(SchemaError):
        unflatten_observation(v)
    with pytest.raises(SchemaError):
        unflatten_observation(np.zeros(18))


@given(
    st.floats(60, 140),
    st.floats(60, 140),
    st.floats(60, 140),
    st.floats(0, 1),
)
def test_roundtrip_vector(m0, m1, target, remi):
    obs = make_obs(m0, m1, target)
    obs = ObservationState(obs.clinical, obs.vitals_now, obs.vitals_prev1, obs.vitals_prev2, remi, target)
    v = flatten_observation(obs)
    np.testing.assert_array_equal(flatten_observation(unflatten_observation(v, 2)), v)


def meta_with(means, stds):
    return DatasetMeta(10.0, np.asarray(means, float), np.asarray(stds, float))


def test_standardize_examples():
    means = np.arange(19.0)
    stds = np.full(19, 2.0)
    m = meta_with(means, stds)
    np.testing.assert_array_equal(standardize(means, m), np.zeros(19))
    np.testing.assert_array_equal(standardize(means + stds, m), np.ones(19))
    m0 = meta_with(np.zeros(19), np.full(19, 2.0))
    np.testing.assert_array_equal(standardize(np.full(19, 4.0), m0), np.full(19, 2.0))
    with pytest.raises(SchemaError):
        standardize(np.zeros(5), m0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=19, max_size=19), st.lists(st.floats(0.1, 10), min_size=19, max_size=19))
def test_standardize_inverts(vec, stds):
    m = meta_with(np.linspace(-5, 5, 19), stds)
    np.testing.assert_allclose(unstandardize(standardize(np.array(vec), m), m), vec, atol=1e-9)


def test_invariant_violations():
    with pytest.raises(SchemaError):
        ClinicalInfo(50, 1, 170, 70, 30.0, 2)  # bmi off by > 0.5
    with pytest.raises(SchemaError):
        ClinicalInfo(50, 2, 170, 70, 24.2, 2)
    with pytest.raises(SchemaError):
        VitalsFrame(100, 120, 110)
    with pytest.raises(SchemaError):
        Action(1.01)
    with pytest.raises(SchemaError):
        Action(-0.1)
    assert Action(0.5).physical(10.0) == 5.0
    with pytest.raises(SchemaError):
        DatasetMeta(10.0, np.zeros(19), np.zeros(19))
    with pytest.raises(SchemaError):
        DatasetMeta(0.0, np.zeros(19), np.ones(19))


def make_episode(eid="e", T=4, target=100.0):
    maps = np.full(T + 1, target)
    obs = np.tile(flatten_observation(make_obs(target, target, target)), (T + 1, 1))
    obs[:, FEATURE_INDEX["map"]] = maps
    return Episode(eid, obs, np.full(T, 0.25), np.ones(T))


def test_episode_contracts():
    ep = make_episode(T=4)
    assert len(ep) == 4 and ep.terminals.tolist() == [False, False, False, True]
    assert ep.discounted_return(0.5) == pytest.approx(1 + 0.5 + 0.25 + 0.125)
    tr = ep.transitions
    assert len(tr) == 4 and tr[-1].terminal and not tr[0].terminal
    bad = ep.observations.copy()
    bad[2, FEATURE_INDEX["map_target"]] = 90.0
    with pytest.raises(SchemaError):
        Episode("x", bad, ep.actions, ep.rewards)
    with pytest.raises(SchemaError):
        Episode("x", ep.observations, np.full(4, 1.5), ep.rewards)
    with pytest.raises(SchemaError):
        Episode("x", ep.observations[:-1], ep.actions, ep.rewards)


def test_dataset_arrays_and_uniqueness():
    m = meta_with(np.zeros(19), np.ones(19))
    ds = OfflineDataset([make_episode("a", 3), make_episode("b", 2)], m)
    arr = ds.arrays()
    assert len(arr) == 5
    assert arr.terminals.tolist() == [False, False, True, False, True]
    assert np.isnan(arr.next_actions[2]) and arr.next_actions[0] == 0.25
    assert ds.initial_states().shape == (2, 19)
    np.testing.assert_allclose(ds.physical_doses(), 2.5)
    with pytest.raises(SchemaError):
        OfflineDataset([make_episode("a"), make_episode("a")], m)


def test_meta_json_roundtrip():
    m = meta_with(np.arange(19.0), np.ones(19))
    back = DatasetMeta.from_json(json.loads(json.dumps(m.to_json())))
    np.testing.assert_array_equal(back.feature_means, m.feature_means)
    assert back.p_max == m.p_max
