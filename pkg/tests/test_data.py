import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import surgery

from pcql.core import FEATURE_INDEX, SchemaError
from pcql.data import (
    ConfigError,
    DoseRangeError,
    ImputationError,
    build_transition_dataset,
    compute_map_target,
    compute_reward,
    filter_surgeries,
    impute_knn,
    knn_fill,
    load_dataset,
    read_raw_directory,
    save_dataset,
    split_dataset,
    split_indices,
    split_sizes,
    write_raw_directory,
)

# -- filtering ---------------------------------------------------------------


def test_filter_rules_each_reject_a_planted_case():
    ok = surgery(61, "ok")
    inhaled = surgery(61, "inh", anesthetic_type="inhaled")
    short = surgery(30, "short")  # t spans 0..29: 29 steps
    no_dose = surgery(61, "nodose", doses=np.full(61, np.nan))
    gappy = surgery(61, "gappy")
    gappy.map[:30] = np.nan
    gappy.ap_sys[:30] = np.nan
    kept, rep = filter_surgeries([ok, inhaled, short, no_dose, gappy], 30, 0.3)
    assert [s.surgery_id for s in kept] == ["ok"]
    assert rep.rejected == {"inhaled": 1, "too_short": 1, "missing_dosing": 1, "severe_missing_vitals": 1}
    assert rep.retained + rep.rejected_total == rep.input_count == 5


def test_filter_empty_and_bad_config():
    kept, rep = filter_surgeries([], 30, 0.3)
    assert kept == [] and rep.retained == 0 and rep.rejected_total == 0
    with pytest.raises(ConfigError):
        filter_surgeries([], 0, 0.3)
    with pytest.raises(ConfigError):
        filter_surgeries([], 30, 1.0)


# -- k-NN --------------------------------------------------------------------


def test_knn_duplicate_row_k1():
    X = np.array([[1.0, 2.0, np.nan], [1.0, 2.0, 80.0], [5.0, -3.0, 60.0]])
    assert knn_fill(X, 1)[0, 2] == 80.0


def test_knn_two_equidistant_neighbors_k2():
    X = np.array([[0.0, np.nan], [-1.0, 70.0], [1.0, 90.0], [10.0, 10.0]])
    assert knn_fill(X, 2)[0, 1] == 80.0


def test_impute_knn_time_symmetric_case():
    s = surgery(3, maps=[70.0, 80.0, 90.0])
    s.map[1] = np.nan
    s.ap_sys[:] = 120.0
    s.ap_dia[:] = 75.0
    filled = impute_knn(s, k=2)
    assert filled.map[1] == 80.0
    assert np.isnan(filled.propofol[-1])


def test_impute_noop_and_idempotent(rng):
    s = surgery(30, maps=90 + rng.normal(size=30))
    assert impute_knn(s) is s
    holes = s.with_columns(map=np.where(rng.random(30) < 0.2, np.nan, s.map))
    once = impute_knn(holes)
    twice = impute_knn(once)
    assert not np.isnan(once.map).any()
    np.testing.assert_array_equal(once.map, twice.map)


def test_knn_unimputable_column_named():
    s = surgery(10)
    s = s.with_columns(remifentanil=np.full(10, np.nan))
    with pytest.raises(ImputationError, match="remifentanil"):
        impute_knn(s)


# -- MAP target and reward ---------------------------------------------------


def test_map_target_examples():
    assert compute_map_target([100, 100, 100]) == 100.0
    assert compute_map_target([90, 110]) == 100.0
    assert compute_map_target([80]) == 80.0
    with pytest.raises(ValueError):
        compute_map_target([])


def test_reward_examples():
    assert compute_reward(100, 100, 0.5) == (1.0, 0.0, 1.0)
    r = compute_reward(120, 100, 0.5)
    assert r[0] == 0.5 and r[1] == pytest.approx(-0.1, abs=1e-12) and r[2] == pytest.approx(0.4, abs=1e-12)
    r = compute_reward(140, 100, 1.0)
    assert r[0] == -1.0 and r[2] == pytest.approx(-1.4, abs=1e-12)
    with pytest.raises(ValueError):
        compute_reward(100, 0, 0.5)


@given(st.floats(20, 250), st.floats(40, 150), st.floats(0, 1))
def test_reward_structure(m, target, a):
    e, d, total = compute_reward(m, target, a)
    assert e in (1.0, 0.5, -1.0)
    assert total == e + d
    assert d <= 0
    if abs(m - target) <= target:
        assert -2.0 <= total <= 1.0


# -- episodes and datasets ---------------------------------------------------


def test_episode_construction():
    s = surgery(11, maps=np.full(11, 90.0), doses=np.zeros(11))
    ds = build_transition_dataset([s], p_max=8.0)
    ep = ds.episodes[0]
    assert len(ep) == 10
    np.testing.assert_array_equal(ep.rewards, np.ones(10))
    assert ep.terminals[-1] and not ep.terminals[:-1].any()
    full = surgery(11, doses=np.full(11, 8.0))
    np.testing.assert_array_equal(build_transition_dataset([full]).episodes[0].actions, np.ones(10))


def test_observation_layout_and_target(rng):
    maps = 90 + 5 * rng.normal(size=20)
    s = surgery(20, maps=maps)
    ep = build_transition_dataset([s], p_max=8.0).episodes[0]
    obs = ep.observations
    assert np.all(obs[:, FEATURE_INDEX["map_target"]] == compute_map_target(s.map))
    np.testing.assert_array_equal(obs[:, FEATURE_INDEX["map_target_error"]], s.map - compute_map_target(s.map))
    assert obs[0, FEATURE_INDEX["map_change"]] == 0.0
    assert obs[0, FEATURE_INDEX["map_prev2"]] == s.map[0]
    assert obs[5, FEATURE_INDEX["map_prev2"]] == s.map[3]
    # rewards use the MAP after each dose
    target = compute_map_target(s.map)
    expected = [compute_reward(s.map[t + 1], target, ep.actions[t])[2] for t in range(len(ep))]
    np.testing.assert_array_equal(ep.rewards, expected)


def test_dose_above_reference_scale_is_named():
    train = build_transition_dataset([surgery(10, doses=np.full(10, 4.0))])
    hot = surgery(10, "HOT", doses=np.full(10, 6.0))
    with pytest.raises(DoseRangeError, match="HOT"):
        build_transition_dataset([hot], meta_from=train.meta)


def test_missing_values_must_be_imputed_first():
    s = surgery(10)
    s.map[3] = np.nan
    with pytest.raises(SchemaError):
        build_transition_dataset([s])


# -- splitting ---------------------------------------------------------------


def test_split_sizes_examples():
    assert split_sizes(10) == (7, 1, 2)
    assert split_sizes(1293) == (905, 129, 259)
    with pytest.raises(ConfigError):
        split_sizes(10, (0.7, 0.2, 0.2))


@given(st.integers(10, 3000), st.integers(0, 2**31))
def test_split_partition(n, seed):
    parts = split_indices(n, seed=seed)
    allidx = np.concatenate(parts)
    assert sorted(allidx.tolist()) == list(range(n))
    assert tuple(len(p) for p in parts) == split_sizes(n)
    for a, b in zip(parts, split_indices(n, seed=seed)):
        np.testing.assert_array_equal(a, b)


def test_split_dataset_whole_episodes():
    ds = build_transition_dataset([surgery(8, f"S{i}") for i in range(12)], p_max=8.0)
    tr, va, te = split_dataset(ds, seed=4)
    ids = [ep.episode_id for part in (tr, va, te) for ep in part]
    assert sorted(ids) == sorted(ep.episode_id for ep in ds)
    assert (len(tr), len(va), len(te)) == (8, 1, 3)
    assert tr.meta.split_tag == "train" and te.meta.split_tag == "test"
    with pytest.raises(ConfigError):
        split_dataset(ds.subset(range(5)))


# -- files -------------------------------------------------------------------


def test_raw_and_processed_roundtrip(tmp_path, rng):
    ss = [surgery(12, f"S{i}", maps=90 + rng.normal(size=12)) for i in range(3)]
    ss[1].map[4] = np.nan
    write_raw_directory(tmp_path / "raw", ss)
    back = read_raw_directory(tmp_path / "raw")
    assert [s.surgery_id for s in back] == ["S0", "S1", "S2"]
    np.testing.assert_array_equal(back[0].map, ss[0].map)
    assert np.isnan(back[1].map[4]) and np.isnan(back[2].propofol[-1])
    assert back[0].clinical["asa"] == 2
    ds = build_transition_dataset([ss[0], ss[2]], p_max=8.0, split_tag="train")
    save_dataset(ds, tmp_path / "proc")
    again = load_dataset(tmp_path / "proc")
    for a, b in zip(ds, again):
        np.testing.assert_array_equal(a.observations, b.observations)
        np.testing.assert_array_equal(a.rewards, b.rewards)
    np.testing.assert_array_equal(again.meta.feature_stds, ds.meta.feature_stds)
