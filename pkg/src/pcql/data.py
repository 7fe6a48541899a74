"""Raw surgery ingestion: filtering, k-NN imputation, reward labelling, splitting.

Raw format (one directory): ``clinical.csv`` plus one ``<surgery_id>.csv`` per
surgery with columns ``t, ap_sys, ap_dia, map, propofol, remifentanil``. An
empty cell is a missing value. The last row of a surgery carries the final
vitals only; its propofol cell is structurally empty (no dose follows it).
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    FEATURE_NAMES,
    N_FEATURES,
    SCHEMA_VERSION,
    ClinicalInfo,
    DatasetMeta,
    Episode,
    OfflineDataset,
    SchemaError,
    VitalsFrame,
)

log = logging.getLogger(__name__)

SERIES_COLUMNS = ("t", "ap_sys", "ap_dia", "map", "propofol", "remifentanil")
VITAL_COLUMNS = ("ap_sys", "ap_dia", "map")
IMPUTED_COLUMNS = ("ap_sys", "ap_dia", "map", "propofol", "remifentanil")
CLINICAL_COLUMNS = ("surgery_id", "age", "sex", "height", "weight", "bmi", "asa", "anesthetic_type")
CLINICAL_FIELDS = ("age", "sex", "height", "weight", "bmi", "asa")
ANESTHETIC_TYPES = ("propofol", "inhaled")
FILTER_RULES = ("missing_dosing", "too_short", "severe_missing_vitals", "inhaled")

DEFAULT_K = 5
DEFAULT_MAX_MISSING_FRACTION = 0.3
DEFAULT_MIN_DURATION_STEPS = 30  # half an hour at one-minute sampling
SPLIT_RATIOS = (0.7, 0.1, 0.2)


class ImputationError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DoseRangeError(ValueError):
    pass


@dataclass
class RawSurgery:
    """Time-ordered records of one surgery. Missing values are NaN."""

    surgery_id: str
    t: np.ndarray
    ap_sys: np.ndarray
    ap_dia: np.ndarray
    map: np.ndarray
    propofol: np.ndarray
    remifentanil: np.ndarray
    clinical: dict = field(default_factory=dict)
    anesthetic_type: str = "propofol"

    def __post_init__(self):
        for name in SERIES_COLUMNS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.t)
        if any(len(getattr(self, c)) != n for c in SERIES_COLUMNS):
            raise SchemaError(f"surgery {self.surgery_id}: columns have different lengths")
        if n and np.any(np.isnan(self.t)):
            raise SchemaError(f"surgery {self.surgery_id}: missing timestamp")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise SchemaError(f"surgery {self.surgery_id}: timestamps must be strictly increasing")
        if self.anesthetic_type not in ANESTHETIC_TYPES:
            raise SchemaError(f"unknown anesthetic type {self.anesthetic_type!r}")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def duration_steps(self) -> int:
        return int(self.t[-1] - self.t[0]) if len(self.t) else 0

    def column(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def matrix(self) -> np.ndarray:
        """Rows x (t, ap_sys, ap_dia, map, propofol, remifentanil)."""
        return np.column_stack([self.column(c) for c in SERIES_COLUMNS])

    def with_columns(self, **cols) -> "RawSurgery":
        return replace(self, **{k: np.asarray(v, dtype=np.float64) for k, v in cols.items()})

    def dose_rows(self) -> np.ndarray:
        """Propofol entries that correspond to an administered step (all rows but the last)."""
        return self.propofol[:-1]

    def vitals_missing_fraction(self) -> float:
        block = np.column_stack([self.column(c) for c in VITAL_COLUMNS])
        return float(np.isnan(block).mean()) if block.size else 1.0

    def n_missing(self) -> int:
        cells = [self.ap_sys, self.ap_dia, self.map, self.dose_rows(), self.remifentanil]
        return int(sum(np.isnan(c).sum() for c in cells))


@dataclass
class FilterReport:
    input_count: int = 0
    retained: int = 0
    rejected: dict = field(default_factory=lambda: {r: 0 for r in FILTER_RULES})
    rejected_ids: dict = field(default_factory=lambda: {r: [] for r in FILTER_RULES})

    @property
    def rejected_total(self) -> int:
        return sum(self.rejected.values())

    def to_json(self) -> dict:
        return {
            "input_count": self.input_count,
            "retained": self.retained,
            "rejected": dict(self.rejected),
            "rejected_ids": {k: list(v) for k, v in self.rejected_ids.items()},
        }


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def rejection_rule(s: RawSurgery, min_duration_steps: int, max_missing_fraction: float) -> str | None:
    """First violated rule for ``s`` or None.

    The anesthetic type is checked first so an inhaled-anesthesia case (which
    has no propofol record at all) is attributed to its own rule.
    """
    if s.anesthetic_type != "propofol":
        return "inhaled"
    if len(s) < 2 or np.all(np.isnan(s.dose_rows())):
        return "missing_dosing"
    if s.duration_steps < min_duration_steps:
        return "too_short"
    if s.vitals_missing_fraction() > max_missing_fraction:
        return "severe_missing_vitals"
    return None


def filter_surgeries(
    raw: Sequence[RawSurgery],
    min_duration_steps: int = DEFAULT_MIN_DURATION_STEPS,
    max_missing_fraction: float = DEFAULT_MAX_MISSING_FRACTION,
) -> tuple[list[RawSurgery], FilterReport]:
    if min_duration_steps < 1:
        raise ConfigError("min_duration_steps must be >= 1")
    if not 0 < max_missing_fraction < 1:
        raise ConfigError("max_missing_fraction must lie in (0, 1)")
    report = FilterReport(input_count=len(raw))
    kept = []
    for s in raw:
        rule = rejection_rule(s, min_duration_steps, max_missing_fraction)
        if rule is None:
            kept.append(s)
        else:
            report.rejected[rule] += 1
            report.rejected_ids[rule].append(s.surgery_id)
    report.retained = len(kept)
    return kept, report


# ---------------------------------------------------------------------------
# k-NN imputation
# ---------------------------------------------------------------------------


def knn_fill(
    X: np.ndarray,
    k: int,
    columns: Iterable[int] | None = None,
    names: Sequence[str] | None = None,
    keep: np.ndarray | None = None,
) -> np.ndarray:
    """Fill NaNs in ``columns`` of ``X`` with the mean of the k nearest donor rows.

    Distances are Euclidean over standardized columns observed in both rows,
    rescaled by (total columns / shared columns) as in the usual nan-Euclidean
    metric. Donors are rows with the target column observed; distance ties are
    broken by row order. Only originally observed values act as donors, so a
    second pass is a no-op. Cells flagged in ``keep`` are left untouched.
    """
    X = np.array(X, dtype=np.float64)
    n, d = X.shape
    cols = range(d) if columns is None else list(columns)
    observed = ~np.isnan(X)
    keep = np.zeros_like(observed) if keep is None else np.asarray(keep, dtype=bool)
    out = X.copy()
    if n == 0 or observed.all():
        return out
    counts = observed.sum(axis=0)
    safe = np.where(observed, X, 0.0)
    mu = safe.sum(axis=0) / np.maximum(counts, 1)
    sd = np.sqrt((np.where(observed, X - mu, 0.0) ** 2).sum(axis=0) / np.maximum(counts, 1))
    mu = np.where(np.isnan(mu), 0.0, mu)
    sd = np.where(np.isnan(sd) | (sd == 0), 1.0, sd)
    Z = np.where(observed, (X - mu) / sd, 0.0)
    for j in cols:
        missing = np.flatnonzero(~observed[:, j] & ~keep[:, j])
        if missing.size == 0:
            continue
        donors = np.flatnonzero(observed[:, j])
        label = names[j] if names is not None else str(j)
        if donors.size == 0:
            raise ImputationError(f"column {label!r} is missing in every row; cannot impute")
        kk = min(k, donors.size)
        for r in missing:
            shared = observed[r] & observed[donors]
            shared[:, j] = False
            diff = np.where(shared, Z[donors] - Z[r], 0.0)
            n_shared = shared.sum(axis=1)
            dist2 = (diff**2).sum(axis=1) * d / np.maximum(n_shared, 1)
            dist2 = np.where(n_shared > 0, dist2, np.inf)
            order = np.argsort(dist2, kind="stable")[:kk]
            out[r, j] = X[donors[order], j].mean()
    return out


def impute_knn(surgery: RawSurgery, k: int = DEFAULT_K) -> RawSurgery:
    """Fill missing vitals / dose cells from the k nearest rows of the same surgery.

    Feature space: the six series columns (timestamp included), standardized
    per surgery. The final row's structurally empty propofol cell is left alone.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    X = surgery.matrix()
    keep = np.zeros(X.shape, dtype=bool)
    if len(X):
        keep[-1, 4] = True
    if len(X) == 0 or not (np.isnan(X) & ~keep).any():
        return surgery
    filled = knn_fill(X, k, columns=range(1, X.shape[1]), names=SERIES_COLUMNS, keep=keep)
    return surgery.with_columns(**{c: filled[:, i] for i, c in enumerate(SERIES_COLUMNS) if c != "t"})


def impute_clinical(records: Sequence[dict], k: int = DEFAULT_K) -> list[dict]:
    """k-NN fill of missing clinical fields across surgeries (BMI recomputed when possible)."""
    X = np.array([[_num(r.get(f)) for f in CLINICAL_FIELDS] for r in records], dtype=np.float64)
    if X.size == 0 or not np.isnan(X).any():
        return [dict(r) for r in records]
    filled = knn_fill(X, k, names=CLINICAL_FIELDS)
    out = []
    for r, row, orig in zip(records, filled, X):
        r = dict(r)
        for f, v, o in zip(CLINICAL_FIELDS, row, orig):
            r[f] = v
        if np.isnan(orig[4]):
            r["bmi"] = row[3] / (row[2] / 100.0) ** 2
        r["sex"] = int(round(r["sex"]))
        r["asa"] = int(min(max(round(r["asa"]), 1), 6))
        out.append(r)
    return out


def _num(v) -> float:
    if v is None or v == "":
        return np.nan
    return float(v)


# ---------------------------------------------------------------------------
# Rewards and episodes
# ---------------------------------------------------------------------------


def compute_map_target(maps: Sequence[float] | Sequence[VitalsFrame]) -> float:
    """Mean MAP over the whole operation."""
    vals = [m.map if isinstance(m, VitalsFrame) else float(m) for m in maps]
    if not vals:
        raise ValueError("cannot compute a MAP target from an empty record")
    return float(np.mean(vals))


def compute_reward(map_t: float, map_star: float, action) -> tuple[float, float, float]:
    """(r_error, r_dosage, r_total) for one step.

    r_error: +1 within 15% of the target, +0.5 within 30%, -1 beyond. A
    deviation of exactly 15% or 30% takes the better band.
    r_dosage: -(|MAP - target| / target) * normalized dose.
    """
    if not map_star > 0:
        raise ValueError(f"MAP target must be positive, got {map_star}")
    a = getattr(action, "normalized_dose", action)
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"normalized dose {a} outside [0, 1]")
    r_error, r_dosage = _reward_parts(np.asarray(map_t, dtype=np.float64), map_star, np.asarray(a, dtype=np.float64))
    r_error, r_dosage = float(r_error), float(r_dosage)
    return r_error, r_dosage, r_error + r_dosage


def _reward_parts(map_t: np.ndarray, map_star, a: np.ndarray):
    dev = np.abs(map_t - map_star)
    r_error = np.where(dev <= 0.15 * map_star, 1.0, np.where(dev <= 0.30 * map_star, 0.5, -1.0))
    r_dosage = -(dev / map_star) * a
    return r_error, r_dosage


def reward_vector(next_maps: np.ndarray, map_star, actions: np.ndarray) -> np.ndarray:
    r_error, r_dosage = _reward_parts(np.asarray(next_maps, dtype=np.float64), map_star, np.asarray(actions))
    return r_error + r_dosage


def observation_matrix(
    clinical: ClinicalInfo | Sequence[float],
    ap_sys: np.ndarray,
    ap_dia: np.ndarray,
    maps: np.ndarray,
    remifentanil: np.ndarray,
    map_target: float | np.ndarray,
) -> np.ndarray:
    """Stack the 19-feature observation for every row.

    The two previous frames are back-filled with the earliest available frame
    at the start of the record. ``map_target`` may be a per-row array (used by
    online rollouts with a running target).
    """
    n = len(maps)
    clin = clinical.as_tuple() if isinstance(clinical, ClinicalInfo) else tuple(clinical)
    idx = np.arange(n)
    p1 = np.maximum(idx - 1, 0)
    p2 = np.maximum(idx - 2, 0)
    obs = np.empty((n, N_FEATURES))
    obs[:, 0:6] = clin
    for base, src in ((6, idx), (9, p1), (12, p2)):
        obs[:, base] = maps[src]
        obs[:, base + 1] = ap_sys[src]
        obs[:, base + 2] = ap_dia[src]
    obs[:, 15] = remifentanil
    obs[:, 16] = map_target
    obs[:, 17] = maps - obs[:, 16]
    obs[:, 18] = maps - maps[p1]
    return obs


def clinical_from_record(rec: dict) -> ClinicalInfo:
    return ClinicalInfo(
        float(rec["age"]), int(rec["sex"]), float(rec["height"]), float(rec["weight"]), float(rec["bmi"]), int(rec["asa"])
    )


def episode_from_surgery(s: RawSurgery, p_max: float) -> Episode:
    X = s.matrix()
    if np.isnan(X[:, 1:4]).any() or np.isnan(X[:, 5]).any() or np.isnan(s.dose_rows()).any():
        raise SchemaError(f"surgery {s.surgery_id} still has missing values; impute first")
    if len(s) < 2:
        raise SchemaError(f"surgery {s.surgery_id} needs at least two records")
    clinical = clinical_from_record(s.clinical)
    target = compute_map_target(s.map)
    obs = observation_matrix(clinical, s.ap_sys, s.ap_dia, s.map, s.remifentanil, target)
    doses = s.dose_rows()
    if np.any(doses < 0):
        raise DoseRangeError(f"surgery {s.surgery_id} has a negative propofol rate")
    if doses.max() > p_max:
        raise DoseRangeError(
            f"episode {s.surgery_id}: dose {doses.max():.4f} exceeds p_max {p_max:.4f} from the reference metadata"
        )
    actions = doses / p_max
    rewards = reward_vector(s.map[1:], target, actions)
    return Episode(s.surgery_id, obs, actions, rewards)


def compute_meta(episodes: Sequence[Episode], p_max: float, split_tag: str = "all", split_seed=None) -> DatasetMeta:
    states = np.concatenate([ep.states for ep in episodes])
    means = states.mean(axis=0)
    stds = states.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    return DatasetMeta(p_max, means, stds, split_tag, SCHEMA_VERSION, split_seed)


def build_transition_dataset(
    surgeries: Sequence[RawSurgery],
    meta_from: DatasetMeta | None = None,
    split_tag: str | None = None,
    p_max: float | None = None,
) -> OfflineDataset:
    """One episode per surgery; rewards use the MAP that follows each dose.

    Without ``meta_from`` the dose scale and feature statistics come from these
    surgeries (``p_max`` may pin the dose scale explicitly); with it they are
    reused unchanged.
    """
    if not surgeries:
        raise ValueError("no surgeries to build a dataset from")
    if meta_from is not None:
        episodes = [episode_from_surgery(s, meta_from.p_max) for s in surgeries]
        meta = meta_from if split_tag is None else meta_from.with_tag(split_tag)
        return OfflineDataset(episodes, meta)
    if p_max is None:
        p_max = max(float(np.nanmax(s.dose_rows())) for s in surgeries)
    if not p_max > 0:
        raise DoseRangeError("maximum propofol dose is zero; cannot normalize actions")
    episodes = [episode_from_surgery(s, p_max) for s in surgeries]
    return OfflineDataset(episodes, compute_meta(episodes, p_max, split_tag or "all"))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def split_sizes(n: int, ratios: Sequence[float] = SPLIT_RATIOS) -> tuple[int, ...]:
    """Largest-remainder rounding of ``n * ratios``; the parts always sum to ``n``."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    if any(r < 0 for r in ratios):
        raise ConfigError("split ratios must be nonnegative")
    exact = [n * r for r in ratios]
    sizes = [math.floor(x) for x in exact]
    rest = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in order[:rest]:
        sizes[i] += 1
    return tuple(sizes)


def split_indices(n: int, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0) -> tuple[np.ndarray, ...]:
    sizes = split_sizes(n, ratios)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum((0,) + sizes)
    return tuple(np.sort(perm[lo:hi]) for lo, hi in zip(bounds[:-1], bounds[1:]))


def split_dataset(ds: OfflineDataset, ratios: Sequence[float] = SPLIT_RATIOS, seed: int = 0):
    """Partition whole episodes into (train, valid, test)."""
    if len(ds) < 10:
        raise ConfigError(f"need at least 10 episodes to split, got {len(ds)}")
    parts = split_indices(len(ds), ratios, seed)
    return tuple(ds.subset(idx, tag) for idx, tag in zip(parts, ("train", "valid", "test")))


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def write_surgery_csv(path: Path, s: RawSurgery, decimals: dict | None = None):
    decimals = decimals or {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for row in s.matrix():
            cells = []
            for name, v in zip(SERIES_COLUMNS, row):
                if math.isnan(v):
                    cells.append("")
                elif name == "t":
                    cells.append(str(int(v)))
                elif name in decimals:
                    cells.append(f"{v:.{decimals[name]}f}")
                else:
                    cells.append(repr(float(v)))
            w.writerow(cells)


def write_clinical_csv(path: Path, surgeries: Sequence[RawSurgery]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLINICAL_COLUMNS)
        for s in surgeries:
            c = s.clinical
            w.writerow(
                [s.surgery_id]
                + [
                    "" if c.get(f) is None or (isinstance(c.get(f), float) and math.isnan(c[f])) else _clin_fmt(f, c[f])
                    for f in CLINICAL_FIELDS
                ]
                + [s.anesthetic_type]
            )


def _clin_fmt(name: str, v) -> str:
    if name in ("sex", "asa"):
        return str(int(v))
    return f"{float(v):.2f}" if name != "bmi" else f"{float(v):.4f}"


def read_surgery_csv(path: Path, surgery_id: str | None = None) -> RawSurgery:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SERIES_COLUMNS:
        raise SchemaError(f"{path}: expected header {','.join(SERIES_COLUMNS)}")
    body = [[_num(c) for c in r] for r in rows[1:] if r]
    arr = np.array(body, dtype=np.float64).reshape(-1, len(SERIES_COLUMNS))
    sid = surgery_id or Path(path).stem
    return RawSurgery(sid, *(arr[:, i] for i in range(len(SERIES_COLUMNS))))


def read_raw_directory(directory: str | Path) -> list[RawSurgery]:
    directory = Path(directory)
    clinical_path = directory / "clinical.csv"
    if not clinical_path.exists():
        raise FileNotFoundError(f"{clinical_path} not found")
    with open(clinical_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CLINICAL_COLUMNS:
            raise SchemaError(f"{clinical_path}: expected columns {','.join(CLINICAL_COLUMNS)}")
        records = list(reader)
    out = []
    for rec in records:
        sid = rec["surgery_id"]
        s = read_surgery_csv(directory / f"{sid}.csv", sid)
        clinical = {f: _num(rec[f]) for f in CLINICAL_FIELDS}
        out.append(replace(s, clinical=clinical, anesthetic_type=rec["anesthetic_type"] or "propofol"))
    return out


def write_raw_directory(directory: str | Path, surgeries: Sequence[RawSurgery], decimals: dict | None = None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in surgeries:
        write_surgery_csv(directory / f"{s.surgery_id}.csv", s, decimals)
    write_clinical_csv(directory / "clinical.csv", surgeries)


EPISODE_COLUMNS = FEATURE_NAMES + ("action", "reward", "terminal")


def save_dataset(ds: OfflineDataset, directory: str | Path):
    """``meta.json`` + ``episodes/<id>.csv``; the last CSV row holds the final next-state only."""
    directory = Path(directory)
    (directory / "episodes").mkdir(parents=True, exist_ok=True)
    meta = ds.meta.to_json()
    meta["episode_ids"] = [ep.episode_id for ep in ds.episodes]
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for ep in ds.episodes:
        with open(directory / "episodes" / f"{ep.episode_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EPISODE_COLUMNS)
            for t in range(len(ep) + 1):
                row = [repr(float(v)) for v in ep.observations[t]]
                if t < len(ep):
                    row += [repr(float(ep.actions[t])), repr(float(ep.rewards[t])), str(int(ep.terminals[t]))]
                else:
                    row += ["", "", ""]
                w.writerow(row)


def load_dataset(directory: str | Path) -> OfflineDataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found")
    raw_meta = json.loads(meta_path.read_text())
    meta = DatasetMeta.from_json(raw_meta)
    episodes = []
    for eid in raw_meta["episode_ids"]:
        with open(directory / "episodes" / f"{eid}.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        if tuple(rows[0]) != EPISODE_COLUMNS:
            raise SchemaError(f"episode file for {eid} has an unexpected header")
        body = rows[1:]
        obs = np.array([[float(c) for c in r[:N_FEATURES]] for r in body])
        act = np.array([float(r[N_FEATURES]) for r in body[:-1]])
        rew = np.array([float(r[N_FEATURES + 1]) for r in body[:-1]])
        term = np.array([r[N_FEATURES + 2] == "1" for r in body[:-1]])
        episodes.append(Episode(eid, obs, act, rew, term))
    return OfflineDataset(episodes, meta)


# ---------------------------------------------------------------------------
# Whole ingestion pipeline
# ---------------------------------------------------------------------------


@dataclass
class IngestResult:
    train: OfflineDataset
    valid: OfflineDataset
    test: OfflineDataset
    report: FilterReport
    n_imputed: int


def ingest(
    raw: Sequence[RawSurgery],
    *,
    k: int = DEFAULT_K,
    min_duration_steps: int = DEFAULT_MIN_DURATION_STEPS,
    max_missing_fraction: float = DEFAULT_MAX_MISSING_FRACTION,
    ratios: Sequence[float] = SPLIT_RATIOS,
    seed: int = 0,
    p_max: float | None = None,
) -> IngestResult:
    """filter -> impute -> split by surgery -> label transitions.

    The dose scale and feature statistics come from the training part and are
    reused for validation and test.
    """
    kept, report = filter_surgeries(raw, min_duration_steps, max_missing_fraction)
    if not kept:
        raise ValueError("no surgeries left after filtering")
    clin = impute_clinical([s.clinical for s in kept], k)
    n_imputed = 0
    surgeries = []
    for s, c in zip(kept, clin):
        n_imputed += s.n_missing() + sum(1 for f in CLINICAL_FIELDS if np.isnan(_num(s.clinical.get(f))))
        surgeries.append(replace(impute_knn(s, k), clinical=c))
    if len(surgeries) < 10:
        raise ConfigError(f"need at least 10 surgeries to split, got {len(surgeries)}")
    tr, va, te = split_indices(len(surgeries), ratios, seed)
    train = build_transition_dataset([surgeries[i] for i in tr], split_tag="train", p_max=p_max)
    train.meta.split_seed = seed
    valid = build_transition_dataset([surgeries[i] for i in va], meta_from=train.meta, split_tag="valid")
    test = build_transition_dataset([surgeries[i] for i in te], meta_from=train.meta, split_tag="test")
    return IngestResult(train, valid, test, report, n_imputed)
