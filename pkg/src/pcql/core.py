"""Domain types shared across the pipeline.

Observations are kept in a fixed 19-slot layout (``FEATURE_NAMES``). Episodes
store their data as dense arrays; ``Transition`` / ``ObservationState`` objects
are materialized on demand.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

SCHEMA_VERSION = 1

FEATURE_NAMES: tuple[str, ...] = (
    "age",
    "sex",
    "height",
    "weight",
    "bmi",
    "asa",
    "map",
    "ap_sys",
    "ap_dia",
    "map_prev1",
    "ap_sys_prev1",
    "ap_dia_prev1",
    "map_prev2",
    "ap_sys_prev2",
    "ap_dia_prev2",
    "remifentanil",
    "map_target",
    "map_target_error",
    "map_change",
)
N_FEATURES = len(FEATURE_NAMES)
FEATURE_INDEX = {name: i for i, name in enumerate(FEATURE_NAMES)}

SPLIT_TAGS = ("train", "valid", "test", "all")


class SchemaError(ValueError):
    """Input does not match the expected layout or invariants."""


@dataclass(frozen=True)
class ClinicalInfo:
    age: float
    sex: int
    height: float
    weight: float
    bmi: float
    asa: int

    def __post_init__(self):
        if not self.age > 0:
            raise SchemaError(f"age must be positive, got {self.age}")
        if self.sex not in (0, 1):
            raise SchemaError(f"sex must be 0 or 1, got {self.sex}")
        if not (self.height > 0 and self.weight > 0):
            raise SchemaError("height and weight must be positive")
        bmi = self.weight / (self.height / 100.0) ** 2
        if abs(bmi - self.bmi) > 0.5:
            raise SchemaError(f"bmi {self.bmi} inconsistent with height/weight ({bmi:.2f})")
        if self.asa not in range(1, 7):
            raise SchemaError(f"asa grade must be in 1..6, got {self.asa}")

    @classmethod
    def from_body(cls, age: float, sex: int, height: float, weight: float, asa: int) -> "ClinicalInfo":
        return cls(age, sex, height, weight, weight / (height / 100.0) ** 2, asa)

    def as_tuple(self) -> tuple[float, ...]:
        return (self.age, float(self.sex), self.height, self.weight, self.bmi, float(self.asa))


@dataclass(frozen=True)
class VitalsFrame:
    ap_sys: float
    ap_dia: float
    map: float
    timestamp_index: int = 0

    def __post_init__(self):
        for v in (self.ap_sys, self.ap_dia, self.map):
            if not 0 < v < 300:
                raise SchemaError(f"pressure {v} outside (0, 300) mmHg")
        if not self.ap_dia <= self.map <= self.ap_sys:
            raise SchemaError(
                f"expected ap_dia <= map <= ap_sys, got {self.ap_dia}, {self.map}, {self.ap_sys}"
            )
        if self.timestamp_index < 0:
            raise SchemaError("timestamp_index must be nonnegative")


@dataclass(frozen=True)
class ObservationState:
    clinical: ClinicalInfo
    vitals_now: VitalsFrame
    vitals_prev1: VitalsFrame
    vitals_prev2: VitalsFrame
    remifentanil: float
    map_target: float

    def __post_init__(self):
        if self.remifentanil < 0:
            raise SchemaError("remifentanil rate must be nonnegative")

    @property
    def map_target_error(self) -> float:
        return self.vitals_now.map - self.map_target

    @property
    def map_change(self) -> float:
        return self.vitals_now.map - self.vitals_prev1.map


def flatten_observation(obs: ObservationState) -> np.ndarray:
    """Return the canonical 19-vector for ``obs`` (order: ``FEATURE_NAMES``)."""
    v = []
    v.extend(obs.clinical.as_tuple())
    for frame in (obs.vitals_now, obs.vitals_prev1, obs.vitals_prev2):
        v.extend((frame.map, frame.ap_sys, frame.ap_dia))
    v.append(obs.remifentanil)
    v.append(obs.map_target)
    v.append(obs.map_target_error)
    v.append(obs.map_change)
    return np.asarray(v, dtype=np.float64)


def unflatten_observation(vec: Sequence[float], timestamp_index: int = 0) -> ObservationState:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (N_FEATURES,):
        raise SchemaError(f"expected a {N_FEATURES}-vector, got shape {vec.shape}")
    age, sex, height, weight, bmi, asa = vec[:6]
    clinical = ClinicalInfo(float(age), int(round(sex)), float(height), float(weight), float(bmi), int(round(asa)))
    frames = []
    for k, base in enumerate((6, 9, 12)):
        m, s, d = vec[base : base + 3]
        frames.append(VitalsFrame(float(s), float(d), float(m), max(timestamp_index - k, 0)))
    obs = ObservationState(clinical, frames[0], frames[1], frames[2], float(vec[15]), float(vec[16]))
    # derived slots must agree with the primary ones
    if vec[17] != obs.map_target_error or vec[18] != obs.map_change:
        raise SchemaError("map_target_error / map_change slots inconsistent with map values")
    return obs


def standardize(vec: np.ndarray, meta: "DatasetMeta") -> np.ndarray:
    """Center and scale features; works on a single vector or a (n, 19) batch."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != N_FEATURES:
        raise SchemaError(f"expected trailing dimension {N_FEATURES}, got {vec.shape}")
    return (vec - meta.feature_means) / meta.feature_stds


def unstandardize(vec: np.ndarray, meta: "DatasetMeta") -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != N_FEATURES:
        raise SchemaError(f"expected trailing dimension {N_FEATURES}, got {vec.shape}")
    return vec * meta.feature_stds + meta.feature_means


@dataclass(frozen=True)
class Action:
    normalized_dose: float

    def __post_init__(self):
        if not 0.0 <= self.normalized_dose <= 1.0:
            raise SchemaError(f"normalized dose {self.normalized_dose} outside [0, 1]")

    def physical(self, p_max: float) -> float:
        return self.normalized_dose * p_max


@dataclass(frozen=True)
class Transition:
    state: ObservationState
    action: Action
    reward: float
    next_state: ObservationState
    terminal: bool


@dataclass
class DatasetMeta:
    p_max: float
    feature_means: np.ndarray
    feature_stds: np.ndarray
    split_tag: str = "all"
    schema_version: int = SCHEMA_VERSION
    split_seed: int | None = None

    def __post_init__(self):
        self.feature_means = np.asarray(self.feature_means, dtype=np.float64)
        self.feature_stds = np.asarray(self.feature_stds, dtype=np.float64)
        if self.feature_means.shape != (N_FEATURES,) or self.feature_stds.shape != (N_FEATURES,):
            raise SchemaError("feature statistics must be 19-vectors")
        if not np.all(self.feature_stds > 0):
            raise SchemaError("feature_stds must be strictly positive")
        if not self.p_max > 0:
            raise SchemaError("p_max must be positive")
        if self.split_tag not in SPLIT_TAGS:
            raise SchemaError(f"unknown split tag {self.split_tag!r}")

    def with_tag(self, tag: str) -> "DatasetMeta":
        return replace(self, split_tag=tag)

    def to_json(self) -> dict:
        return {
            "p_max": self.p_max,
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "split_tag": self.split_tag,
            "schema_version": self.schema_version,
            "split_seed": self.split_seed,
            "feature_names": list(FEATURE_NAMES),
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetMeta":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"unsupported schema_version {d.get('schema_version')}")
        if "feature_names" in d and tuple(d["feature_names"]) != FEATURE_NAMES:
            raise SchemaError("feature ordering in metadata differs from this build")
        return cls(
            p_max=float(d["p_max"]),
            feature_means=np.asarray(d["feature_means"], dtype=np.float64),
            feature_stds=np.asarray(d["feature_stds"], dtype=np.float64),
            split_tag=d.get("split_tag", "all"),
            schema_version=d["schema_version"],
            split_seed=d.get("split_seed"),
        )


@dataclass
class Episode:
    """One surgery as an MDP trajectory.

    ``observations`` has T+1 rows (the last row is the final next-state);
    ``actions``, ``rewards`` and ``terminals`` have T entries.
    """

    episode_id: str
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminals: np.ndarray = field(default=None)

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        T = len(self.actions)
        if T < 1:
            raise SchemaError(f"episode {self.episode_id} has no transitions")
        if self.terminals is None:
            self.terminals = np.zeros(T, dtype=bool)
            self.terminals[-1] = True
        self.terminals = np.asarray(self.terminals, dtype=bool)
        if self.observations.shape != (T + 1, N_FEATURES):
            raise SchemaError(
                f"episode {self.episode_id}: expected observations of shape {(T + 1, N_FEATURES)}, "
                f"got {self.observations.shape}"
            )
        if self.rewards.shape != (T,) or self.terminals.shape != (T,):
            raise SchemaError(f"episode {self.episode_id}: action/reward/terminal lengths differ")
        if np.any((self.actions < 0) | (self.actions > 1)):
            raise SchemaError(f"episode {self.episode_id}: actions outside [0, 1]")
        if self.terminals[:-1].any():
            raise SchemaError(f"episode {self.episode_id}: terminal flag before the last step")
        targets = self.observations[:, FEATURE_INDEX["map_target"]]
        if np.any(targets != targets[0]):
            raise SchemaError(f"episode {self.episode_id}: map_target varies within the episode")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def map_target(self) -> float:
        return float(self.observations[0, FEATURE_INDEX["map_target"]])

    @property
    def states(self) -> np.ndarray:
        return self.observations[:-1]

    @property
    def next_states(self) -> np.ndarray:
        return self.observations[1:]

    def transition(self, t: int) -> Transition:
        return Transition(
            unflatten_observation(self.observations[t], t),
            Action(float(self.actions[t])),
            float(self.rewards[t]),
            unflatten_observation(self.observations[t + 1], t + 1),
            bool(self.terminals[t]),
        )

    @property
    def transitions(self) -> list[Transition]:
        return [self.transition(t) for t in range(len(self))]

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(len(self))))


@dataclass
class TransitionArrays:
    """Stacked transitions of a dataset (raw, unstandardized observations)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    next_actions: np.ndarray  # logged action at t+1 (NaN after a terminal step)
    episode_index: np.ndarray
    step_index: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class OfflineDataset:
    episodes: list[Episode]
    meta: DatasetMeta

    def __post_init__(self):
        ids = [ep.episode_id for ep in self.episodes]
        if len(set(ids)) != len(ids):
            raise SchemaError("episode ids must be unique")
        if self.episodes:
            top = max(float(ep.actions.max()) for ep in self.episodes)
            if top > 1.0 + 1e-12:
                raise SchemaError("a normalized action exceeds 1 (dose above p_max)")
        self._arrays: TransitionArrays | None = None

    def __len__(self) -> int:
        return len(self.episodes)

    def __iter__(self) -> Iterator[Episode]:
        return iter(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(len(ep) for ep in self.episodes)

    def arrays(self) -> TransitionArrays:
        if self._arrays is None:
            eps = self.episodes
            next_actions = []
            for ep in eps:
                na = np.empty(len(ep))
                na[:-1] = ep.actions[1:]
                na[-1] = np.nan
                next_actions.append(na)
            self._arrays = TransitionArrays(
                states=np.concatenate([ep.states for ep in eps]),
                actions=np.concatenate([ep.actions for ep in eps]),
                rewards=np.concatenate([ep.rewards for ep in eps]),
                next_states=np.concatenate([ep.next_states for ep in eps]),
                terminals=np.concatenate([ep.terminals for ep in eps]),
                next_actions=np.concatenate(next_actions),
                episode_index=np.concatenate([np.full(len(ep), i) for i, ep in enumerate(eps)]),
                step_index=np.concatenate([np.arange(len(ep)) for ep in eps]),
            )
        return self._arrays

    def initial_states(self) -> np.ndarray:
        return np.stack([ep.observations[0] for ep in self.episodes])

    def physical_doses(self) -> np.ndarray:
        return self.arrays().actions * self.meta.p_max

    def subset(self, indices: Sequence[int], tag: str | None = None) -> "OfflineDataset":
        meta = self.meta if tag is None else self.meta.with_tag(tag)
        return OfflineDataset([self.episodes[i] for i in indices], meta)
