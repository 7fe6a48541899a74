"""Off-policy evaluation and retrospective comparison metrics.

Policies are callables from a (n, 19) array of raw observations to (n,)
normalized doses in [0, 1]. ``None`` stands for the logged behavior policy.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .core import FEATURE_INDEX, Episode, OfflineDataset, standardize
from .nn import Adam, Mlp

log = logging.getLogger(__name__)

Policy = Callable[[np.ndarray], np.ndarray]
MAPE_EPSILON = 1e-8


class FqeDivergenceWarning(RuntimeWarning):
    pass


class UndefinedCorrelationError(ValueError):
    pass


@dataclass
class FqeConfig:
    gamma: float = 0.99
    epochs: int = 800
    batch_size: int = 512
    learning_rate: float = 1e-3
    hidden: tuple = (64, 64)
    target_update_interval: int = 10  # gradient steps between hard target copies
    r_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.target_update_interval < 1:
            raise ValueError("epochs, batch_size and target_update_interval must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")


@dataclass
class FqeResult:
    estimate: float
    max_abs_q: float
    diverged: bool
    final_loss: float


def fitted_q_evaluation(
    states: np.ndarray,
    actions: np.ndarray,
    rewards: np.ndarray,
    next_states: np.ndarray,
    terminals: np.ndarray,
    next_actions: np.ndarray,
    initial_states: np.ndarray,
    initial_actions: np.ndarray,
    config: FqeConfig,
) -> FqeResult:
    """TD regression of a fresh Q network toward r + gamma (1 - d) Q_target(s', a').

    Inputs are already in network units. ``next_actions`` after a terminal
    step are ignored (they may be NaN).
    """
    n = len(rewards)
    if n == 0:
        raise ValueError("no transitions to evaluate on")
    rng = np.random.default_rng(config.seed)
    d = states.shape[1]
    q = Mlp([d + 1, *config.hidden, 1], rng=rng)
    target = q.copy()
    opt = Adam(q.params, lr=config.learning_rate)
    cont = config.gamma * (1.0 - terminals.astype(np.float64))
    next_a = np.where(terminals, 0.0, np.nan_to_num(next_actions))
    next_x = np.concatenate([next_states, next_a.reshape(-1, 1)], axis=1)
    x = np.concatenate([states, actions.reshape(-1, 1)], axis=1)
    bs = min(config.batch_size, n)
    step = 0
    y = rewards + cont * target.predict(next_x)[:, 0]
    loss_val = float("nan")
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, bs):
            idx = order[lo : lo + bs]
            opt.zero_grad()
            loss = (q(x[idx]) - y[idx].reshape(-1, 1)).square().mean()
            loss.backward()
            opt.step()
            loss_val = loss.item()
            step += 1
            if step % config.target_update_interval == 0:
                target.load_values([p.data for p in q.params])
                y = rewards + cont * target.predict(next_x)[:, 0]
    init_x = np.concatenate([initial_states, np.asarray(initial_actions, dtype=np.float64).reshape(-1, 1)], axis=1)
    q_init = q.predict(init_x)[:, 0]
    max_abs = float(max(np.abs(q.predict(x)).max(), np.abs(q_init).max()))
    bound = 10.0 * config.r_max / (1.0 - config.gamma)
    diverged = not math.isfinite(max_abs) or max_abs > bound
    estimate = float(np.mean(q_init))
    if diverged:
        warnings.warn(f"FQE diverged: max |Q| = {max_abs:.3g} exceeds {bound:.3g}", FqeDivergenceWarning, stacklevel=2)
    return FqeResult(estimate, max_abs, diverged, loss_val)


def fqe_evaluate(policy: Optional[Policy], test: OfflineDataset, config: FqeConfig | None = None) -> FqeResult:
    """Initial-state value of ``policy`` estimated on the test split.

    With ``policy=None`` the logged behavior is evaluated, using the recorded
    next action as the bootstrap action.
    """
    config = config or FqeConfig()
    if len(test) == 0:
        raise ValueError("test split is empty")
    arr = test.arrays()
    meta = test.meta
    init = test.initial_states()
    if policy is None:
        next_actions = arr.next_actions
        init_actions = np.array([ep.actions[0] for ep in test])
    else:
        next_actions = _checked(policy, arr.next_states)
        init_actions = _checked(policy, init)
    return fitted_q_evaluation(
        standardize(arr.states, meta),
        arr.actions,
        arr.rewards,
        standardize(arr.next_states, meta),
        arr.terminals,
        next_actions,
        standardize(init, meta),
        init_actions,
        config,
    )


def _checked(policy: Policy, obs: np.ndarray) -> np.ndarray:
    a = np.asarray(policy(obs), dtype=np.float64).reshape(-1)
    if a.shape != (len(obs),):
        raise ValueError(f"policy returned {a.shape} actions for {len(obs)} observations")
    if not np.all((a >= 0) & (a <= 1)):
        raise ValueError("policy actions must lie in [0, 1]")
    return a


# ---------------------------------------------------------------------------
# Consultation-mode metrics
# ---------------------------------------------------------------------------


def _aligned(y, y_star) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    if y.shape != y_star.shape:
        raise ValueError(f"length mismatch: {len(y)} vs {len(y_star)}")
    if len(y) == 0:
        raise ValueError("empty series")
    return y, y_star


def mape(recommended, actual, epsilon: float = MAPE_EPSILON) -> float:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    y, y_star = _aligned(recommended, actual)
    return float(np.mean(np.abs(y - y_star) / np.maximum(epsilon, y_star)) * 100.0)


def rmse_per_term(recommended, actual) -> float:
    """Per-term root of the squared error, averaged; numerically the mean absolute error."""
    y, y_star = _aligned(recommended, actual)
    return float(np.mean(np.sqrt((y - y_star) ** 2)))


def rmse_conventional(recommended, actual) -> float:
    y, y_star = _aligned(recommended, actual)
    return float(np.sqrt(np.mean((y - y_star) ** 2)))


def recommended_doses(policy: Optional[Policy], test: OfflineDataset) -> np.ndarray:
    """Physical per-step doses over all test steps, in dataset order."""
    arr = test.arrays()
    a = arr.actions if policy is None else _checked(policy, arr.states)
    return a * test.meta.p_max


def mean_dose(policy: Optional[Policy], test: OfflineDataset) -> float:
    if len(test) == 0:
        raise ValueError("test split is empty")
    return float(np.mean(recommended_doses(policy, test)))


def pearson(x, y) -> float:
    x, y = _aligned(x, y)
    if len(x) < 2:
        raise ValueError("need at least two points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(np.mean(dx * dx))), math.sqrt(float(np.mean(dy * dy)))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant series")
    return float(np.clip(np.mean(dx * dy) / (sx * sy), -1.0, 1.0))


def correlation_comparison(policy: Policy, test: OfflineDataset) -> tuple[float, float]:
    """Pooled dose-MAP correlation for the policy and for the recorded doses."""
    maps = test.arrays().states[:, FEATURE_INDEX["map"]]
    return pearson(recommended_doses(policy, test), maps), pearson(recommended_doses(None, test), maps)


# ---------------------------------------------------------------------------
# Gaussian-policy confidence bands
# ---------------------------------------------------------------------------

DEFAULT_QUANTILES = (0.05, 0.5, 0.95)


def confidence_band(
    policy: Policy,
    episode: Episode,
    p_max: float,
    sigma: float = 0.05,
    n_samples: int = 100,
    seed: int = 0,
    quantiles: tuple = DEFAULT_QUANTILES,
) -> np.ndarray:
    """(T, 3) physical-dose quantiles of clip(Normal(f(s), sigma^2), 0, 1) per step."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    return _band(_checked(policy, episode.states), p_max, sigma, n_samples, seed, quantiles)


def _band(mean: np.ndarray, p_max: float, sigma: float, n_samples: int, seed: int, quantiles: tuple = DEFAULT_QUANTILES):
    rng = np.random.default_rng(seed)
    draws = np.clip(mean[:, None] + sigma * rng.standard_normal((len(mean), n_samples)), 0.0, 1.0)
    band = np.quantile(draws, quantiles, axis=1).T * p_max
    return np.maximum.accumulate(band, axis=1)  # guard monotonicity against rounding


def band_coverage(mean: float, sigma: float, n_samples: int, n_fresh: int, seed: int, level: float = 0.9) -> float:
    """Fraction of fresh Normal draws inside the empirical central ``level`` band of ``n_samples`` draws (no clipping)."""
    rng = np.random.default_rng(seed)
    lo, hi = np.quantile(mean + sigma * rng.standard_normal(n_samples), [(1 - level) / 2, (1 + level) / 2])
    fresh = mean + sigma * rng.standard_normal(n_fresh)
    return float(np.mean((fresh >= lo) & (fresh <= hi)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    name: str
    initial_state_return: float
    behavior_initial_state_return: float
    fqe_diverged: bool
    mape_pct: float
    rmse: float
    rmse_conventional: float
    mean_dose_physical: float
    behavior_mean_dose_physical: float
    pearson_dose_map: float
    behavior_pearson_dose_map: float
    band_coverage_of_behavior: float
    n_test_episodes: int
    n_test_steps: int
    ci_bands: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mape_pct < 0 or abs(self.pearson_dose_map) > 1:
            raise ValueError("invalid metric values")

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("ci_bands")
        return d

    def to_json(self, path: str | Path):
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


@dataclass
class EvalConfig:
    sigma: float = 0.05
    n_samples: int = 100
    band_episodes: int = 5  # how many test episodes get exported curves
    seed: int = 0
    fqe: FqeConfig = field(default_factory=FqeConfig)


def evaluate_policy(
    name: str,
    policy: Optional[Policy],
    test: OfflineDataset,
    config: EvalConfig | None = None,
    behavior_fqe: FqeResult | None = None,
) -> EvalReport:
    """Full metric set for ``policy``; ``policy=None`` reports the logged behavior against itself."""
    config = config or EvalConfig()
    if behavior_fqe is None:
        behavior_fqe = fqe_evaluate(None, test, config.fqe)
    fqe = behavior_fqe if policy is None else fqe_evaluate(policy, test, config.fqe)
    rec = recommended_doses(policy, test)
    act = recommended_doses(None, test)
    maps = test.arrays().states[:, FEATURE_INDEX["map"]]
    rho_p, rho_b = pearson(rec, maps), pearson(act, maps)
    bands, inside, total = {}, 0, 0
    for i, ep in enumerate(test):
        mean = ep.actions if policy is None else _checked(policy, ep.states)
        band = _band(mean, test.meta.p_max, config.sigma, config.n_samples, seed=config.seed + i)
        doses = ep.actions * test.meta.p_max
        inside += int(np.sum((doses >= band[:, 0]) & (doses <= band[:, 2])))
        total += len(doses)
        if i < config.band_episodes:
            bands[ep.episode_id] = band
    return EvalReport(
        name=name,
        initial_state_return=fqe.estimate,
        behavior_initial_state_return=behavior_fqe.estimate,
        fqe_diverged=fqe.diverged or behavior_fqe.diverged,
        mape_pct=mape(rec, act),
        rmse=rmse_per_term(rec, act),
        rmse_conventional=rmse_conventional(rec, act),
        mean_dose_physical=float(rec.mean()),
        behavior_mean_dose_physical=float(act.mean()),
        pearson_dose_map=rho_p,
        behavior_pearson_dose_map=rho_b,
        band_coverage_of_behavior=inside / total,
        n_test_episodes=len(test),
        n_test_steps=len(rec),
        ci_bands=bands,
    )


def write_curves(report: EvalReport, policy: Optional[Policy], test: OfflineDataset, out_dir: str | Path):
    """One CSV per exported episode: step, MAP, behavior dose, recommendation and band."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_id = {ep.episode_id: ep for ep in test}
    for eid, band in report.ci_bands.items():
        ep = by_id[eid]
        rec = (ep.actions if policy is None else _checked(policy, ep.states)) * test.meta.p_max
        with open(out / f"{eid}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "map", "behavior_dose", "recommended_dose", "lower", "median", "upper"])
            for t in range(len(rec)):
                w.writerow(
                    [t, repr(float(ep.states[t, FEATURE_INDEX["map"]])), repr(float(ep.actions[t] * test.meta.p_max))]
                    + [repr(float(v)) for v in (rec[t], *band[t])]
                )


def comparison_table(reports: list[EvalReport]) -> str:
    cols = ("name", "initial_state_return", "mape_pct", "rmse", "rmse_conventional", "mean_dose_physical", "pearson_dose_map")
    lines = [",".join(cols)]
    for r in reports:
        s = r.summary()
        lines.append(",".join(s["name"] if c == "name" else f"{s[c]:.6f}" for c in cols))
    return "\n".join(lines) + "\n"
