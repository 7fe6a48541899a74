"""Permutation-sampling Shapley attributions over the observation features."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import FEATURE_NAMES

Model = Callable[[np.ndarray], np.ndarray]


@dataclass
class ShapleyEstimate:
    values: np.ndarray  # (d,)
    std_errors: np.ndarray  # (d,) Monte-Carlo standard error per feature
    f_x: float
    base_value: float  # mean model output over the background points drawn
    total_std_error: float  # standard error of sum(values) as an estimate of f(x) - E_bg[f]


def shapley_attribution(
    model: Model,
    sample: np.ndarray,
    background: np.ndarray,
    n_permutations: int = 200,
    seed: int = 0,
) -> ShapleyEstimate:
    """Average marginal contributions along random feature orderings.

    Each ordering starts from a background point drawn uniformly and swaps
    in the sample's features one at a time, so every ordering contributes
    exactly f(x) - f(b) in total.
    """
    x = np.asarray(sample, dtype=np.float64).reshape(-1)
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if len(bg) == 0:
        raise ValueError("background set is empty")
    if bg.shape[1] != len(x):
        raise ValueError(f"background has {bg.shape[1]} features, sample has {len(x)}")
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    d = len(x)
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((n_permutations, d)), axis=1)
    picks = rng.integers(0, len(bg), n_permutations)

    # rows k*(d+1) + j hold the point after the first j features of ordering k were switched to x
    z = np.repeat(bg[picks], d + 1, axis=0).reshape(n_permutations, d + 1, d)
    rank = np.empty_like(perms)
    np.put_along_axis(rank, perms, np.arange(d)[None, :].repeat(n_permutations, 0), axis=1)
    steps = np.arange(d + 1)[None, :, None]
    switched = rank[:, None, :] < steps
    z = np.where(switched, x[None, None, :], z)
    out = np.asarray(model(z.reshape(-1, d)), dtype=np.float64).reshape(n_permutations, d + 1)
    deltas = np.diff(out, axis=1)  # (P, d), contribution of feature perms[k, j]
    contrib = np.empty_like(deltas)
    np.put_along_axis(contrib, perms, deltas, axis=1)
    values = contrib.mean(axis=0)
    if n_permutations > 1:
        se = contrib.std(axis=0, ddof=1) / np.sqrt(n_permutations)
        total_se = float(contrib.sum(axis=1).std(ddof=1) / np.sqrt(n_permutations))
    else:
        se = np.zeros(d)
        total_se = 0.0
    return ShapleyEstimate(values, se, float(out[0, -1]), float(out[:, 0].mean()), total_se)


def absolute_mean_scores(attributions: np.ndarray) -> np.ndarray:
    a = np.atleast_2d(np.asarray(attributions, dtype=np.float64))
    if a.size == 0:
        raise ValueError("no attributions")
    return np.abs(a).mean(axis=0)


def ranking(scores: np.ndarray, names: Sequence[str] = FEATURE_NAMES) -> list[tuple[str, float]]:
    """Descending by score; equal scores keep canonical feature order."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(names[i], float(scores[i])) for i in order]


@dataclass
class AttributionReport:
    feature_names: tuple
    shap_values: np.ndarray  # (n_samples, d)
    f_x: np.ndarray
    base_values: np.ndarray
    total_std_errors: np.ndarray

    @property
    def absolute_mean_scores(self) -> np.ndarray:
        return absolute_mean_scores(self.shap_values)

    def ranked(self) -> list[tuple[str, float]]:
        return ranking(self.absolute_mean_scores, self.feature_names)

    def local_accuracy_z(self) -> np.ndarray:
        """|sum(shap) - (f(x) - base)| in units of the Monte-Carlo standard error."""
        gap = np.abs(self.shap_values.sum(axis=1) - (self.f_x - self.base_values))
        return gap / np.maximum(self.total_std_errors, 1e-300)

    def to_json(self, path: str | Path):
        payload = {
            "feature_names": list(self.feature_names),
            "shap_values": self.shap_values.tolist(),
            "f_x": self.f_x.tolist(),
            "base_values": self.base_values.tolist(),
            "absolute_mean_scores": self.absolute_mean_scores.tolist(),
        }
        Path(path).write_text(json.dumps(payload, indent=2) + "\n")

    def scores_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "score"])
            for name, s in self.ranked():
                w.writerow([name, repr(s)])


def explain_samples(
    model: Model,
    samples: np.ndarray,
    background: np.ndarray,
    n_permutations: int = 200,
    seed: int = 0,
    feature_names: Sequence[str] = FEATURE_NAMES,
) -> AttributionReport:
    ests = [
        shapley_attribution(model, s, background, n_permutations, seed=int(seed) + 7919 * i)
        for i, s in enumerate(np.atleast_2d(samples))
    ]
    return AttributionReport(
        tuple(feature_names),
        np.array([e.values for e in ests]),
        np.array([e.f_x for e in ests]),
        np.array([e.base_value for e in ests]),
        np.array([e.total_std_error for e in ests]),
    )


def sample_background(states: np.ndarray, n: int = 100, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(states), size=min(n, len(states)), replace=False)
    return states[np.sort(idx)]
