"""Synthetic patients for generating offline propofol datasets.

Three-compartment mammillary pharmacokinetics (explicit Euler, one-minute
steps) feed an effect-site concentration; a Hill curve converts it into a MAP
depression. Surgical stimulation is an AR(1) disturbance and remifentanil a
piecewise-constant co-infusion. A PI controller with a slow adjustment cadence
plays the anesthesiologist.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import ClinicalInfo, Episode
from .data import RawSurgery, observation_matrix, reward_vector, write_raw_directory

log = logging.getLogger(__name__)

MAP_FLOOR = 20.0
CSV_DECIMALS = {"ap_sys": 3, "ap_dia": 3, "map": 3, "propofol": 4, "remifentanil": 4}

# clamp events from pk_step's stiffness guard
CLAMP_EVENTS = {"count": 0}


class PolicyContractError(ValueError):
    """A policy returned an action outside [0, 1]."""


@dataclass
class PkState:
    c1: float = 0.0  # central compartment amount, mg
    c2: float = 0.0  # fast peripheral, mg
    c3: float = 0.0  # slow peripheral, mg
    ce: float = 0.0  # effect-site concentration, ug/mL

    def __post_init__(self):
        if min(self.c1, self.c2, self.c3, self.ce) < 0:
            raise ValueError("compartment contents must be nonnegative")


@dataclass
class PatientParams:
    clinical: ClinicalInfo
    baseline_map: float = 95.0
    v1: float = 16.0  # central volume, L
    k10: float = 0.119
    k12: float = 0.112
    k21: float = 0.055
    k13: float = 0.0419
    k31: float = 0.0033
    ke0: float = 0.26
    emax: float = 35.0
    ec50: float = 3.0
    hill: float = 2.0
    noise_std: float = 2.0
    remi_sensitivity: float = 30.0
    pulse_pressure: float = 45.0
    stim_std: float = 1.5
    stim_persistence: float = 0.95
    remi_mean: float = 0.15
    remi_change_prob: float = 0.02

    def __post_init__(self):
        for name in ("v1", "k10", "k12", "k21", "k13", "k31", "ke0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.emax < self.baseline_map:
            raise ValueError("emax must lie in (0, baseline_map)")
        if self.ec50 <= 0 or self.hill < 1:
            raise ValueError("ec50 must be positive and hill >= 1")


@dataclass
class BehaviorPolicyParams:
    kp: float = 0.08  # mg/kg/h per mmHg
    ki: float = 0.002  # mg/kg/h per mmHg*min
    dose_noise_std: float = 0.1  # multiplicative
    adjustment_period: int = 5
    target_map: float = 80.0
    base_dose: float = 4.0  # mg/kg/h
    dose_cap: float = 12.0
    integral_limit: float = 1500.0

    def __post_init__(self):
        if self.kp < 0 or self.ki < 0:
            raise ValueError("controller gains must be nonnegative")
        if self.adjustment_period < 1:
            raise ValueError("adjustment_period must be >= 1")


def pk_step(state: PkState, infusion: float, params: PatientParams, dt: float = 1.0) -> PkState:
    """One explicit Euler step; ``infusion`` in mg/min."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    vals = (state.c1, state.c2, state.c3, state.ce, infusion)
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError("non-finite PK input")
    if infusion < 0:
        raise ValueError("infusion must be nonnegative")
    p = params
    c1, c2, c3, ce = state.c1, state.c2, state.c3, state.ce
    d1 = infusion - (p.k10 + p.k12 + p.k13) * c1 + p.k21 * c2 + p.k31 * c3
    d2 = p.k12 * c1 - p.k21 * c2
    d3 = p.k13 * c1 - p.k31 * c3
    de = p.ke0 * (c1 / p.v1 - ce)
    new = [c1 + dt * d1, c2 + dt * d2, c3 + dt * d3, ce + dt * de]
    if min(new) < 0:
        CLAMP_EVENTS["count"] += 1
        log.debug("pk_step clamped a negative compartment (dt=%s)", dt)
        new = [max(v, 0.0) for v in new]
    return PkState(*new)


def hill(ce: float, ec50: float, gamma: float) -> float:
    if ce <= 0:
        return 0.0
    if math.isinf(ce):
        return 1.0
    r = (ce / ec50) ** gamma
    return r / (1.0 + r)


def pd_map(ce: float, remi: float, params: PatientParams, rng: np.random.Generator | None = None, stim: float = 0.0) -> float:
    """MAP after propofol (Hill), remifentanil (linear) and stimulation effects, floored at 20 mmHg."""
    if ce < 0:
        raise ValueError("effect-site concentration must be nonnegative")
    m = params.baseline_map - params.emax * hill(ce, params.ec50, params.hill) - params.remi_sensitivity * remi + stim
    if params.noise_std > 0 and rng is not None:
        m += rng.normal(0.0, params.noise_std)
    return max(m, MAP_FLOOR)


def arterial_pressures(map_value: float, pulse_pressure: float) -> tuple[float, float]:
    """(systolic, diastolic) consistent with MAP = dia + pp/3."""
    pp = max(pulse_pressure, 5.0)
    dia = max(map_value - pp / 3.0, 5.0)
    sys_ = map_value + 2.0 * pp / 3.0
    return sys_, dia


def behavior_policy_step(
    map_now: float, integral_err: float, params: BehaviorPolicyParams, rng: np.random.Generator | None = None, dt: float = 1.0
) -> tuple[float, float]:
    """PI dose update toward ``target_map``; returns (dose mg/kg/h, new integral).

    Propofol lowers MAP, so a MAP above target raises the dose.
    """
    if not math.isfinite(map_now):
        raise FloatingPointError("non-finite MAP passed to the behavior policy")
    err = map_now - params.target_map
    integral = float(np.clip(integral_err + err * dt, -params.integral_limit, params.integral_limit))
    dose = params.base_dose + params.kp * err + params.ki * integral
    if params.dose_noise_std > 0 and rng is not None:
        dose *= 1.0 + rng.normal(0.0, params.dose_noise_std)
    return float(np.clip(dose, 0.0, params.dose_cap)), integral


# ---------------------------------------------------------------------------
# Population
# ---------------------------------------------------------------------------


@dataclass
class PopulationConfig:
    """(mean, spread) per sampled quantity; values are Normal(mean, spread) clipped to sane bounds."""

    age: tuple = (52.0, 14.0)
    height_male: tuple = (172.0, 7.0)
    height_female: tuple = (161.0, 6.0)
    weight_male: tuple = (72.0, 11.0)
    weight_female: tuple = (60.0, 9.0)
    baseline_map: tuple = (95.0, 9.0)
    v1_per_kg: tuple = (0.228, 0.025)
    k10: tuple = (0.119, 0.015)
    k12: tuple = (0.112, 0.015)
    k21: tuple = (0.055, 0.007)
    k13: tuple = (0.0419, 0.006)
    k31: tuple = (0.0033, 0.0005)
    ke0: tuple = (0.26, 0.04)
    emax: tuple = (38.0, 6.0)
    ec50: tuple = (3.0, 0.5)
    hill: tuple = (2.0, 0.3)
    noise_std: tuple = (2.0, 0.4)
    remi_sensitivity: tuple = (30.0, 6.0)
    pulse_pressure: tuple = (45.0, 7.0)
    stim_std: tuple = (2.5, 0.5)
    remi_mean: tuple = (0.15, 0.04)
    target_fraction: tuple = (0.85, 0.03)
    base_dose: tuple = (4.0, 0.6)
    kp: tuple = (0.05, 0.01)
    ki: tuple = (0.002, 0.0005)
    dose_noise_std: float = 0.15
    adjustment_period: int = 10
    dose_cap: float = 12.0


def _draw(rng: np.random.Generator, spec: tuple, lo: float, hi: float = math.inf) -> float:
    mean, spread = spec
    return float(np.clip(rng.normal(mean, spread) if spread > 0 else mean, lo, hi))


def sample_patient(rng: np.random.Generator, pop: PopulationConfig) -> tuple[PatientParams, BehaviorPolicyParams]:
    sex = int(rng.random() < 0.5)
    age = _draw(rng, pop.age, 18.0, 90.0)
    height = _draw(rng, pop.height_male if sex else pop.height_female, 140.0, 200.0)
    weight = _draw(rng, pop.weight_male if sex else pop.weight_female, 40.0, 140.0)
    asa = int(rng.choice([1, 2, 3], p=[0.35, 0.5, 0.15]))
    # round the way the raw CSV stores them so simulated and ingested values agree
    height, weight = round(height, 2), round(weight, 2)
    clinical = ClinicalInfo.from_body(round(age, 2), sex, height, weight, asa)
    clinical = ClinicalInfo(clinical.age, sex, height, weight, round(clinical.bmi, 4), asa)
    age_shift = (age - 52.0) / 14.0
    baseline = _draw(rng, pop.baseline_map, 65.0, 130.0) + 3.0 * age_shift
    emax = _draw(rng, pop.emax, 10.0, 0.6 * baseline)
    patient = PatientParams(
        clinical=clinical,
        baseline_map=baseline,
        v1=_draw(rng, pop.v1_per_kg, 0.1, 0.5) * weight,
        k10=_draw(rng, pop.k10, 0.02),
        k12=_draw(rng, pop.k12, 0.02),
        k21=_draw(rng, pop.k21, 0.01),
        k13=_draw(rng, pop.k13, 0.005),
        k31=_draw(rng, pop.k31, 0.0005),
        ke0=_draw(rng, pop.ke0, 0.05),
        emax=emax,
        # older patients are more sensitive
        ec50=_draw(rng, pop.ec50, 0.8) * (1.0 - 0.08 * age_shift),
        hill=_draw(rng, pop.hill, 1.0, 4.0),
        noise_std=_draw(rng, pop.noise_std, 0.0),
        remi_sensitivity=_draw(rng, pop.remi_sensitivity, 0.0),
        pulse_pressure=_draw(rng, pop.pulse_pressure, 20.0, 80.0),
        stim_std=_draw(rng, pop.stim_std, 0.0),
        remi_mean=_draw(rng, pop.remi_mean, 0.02, 0.5),
    )
    behavior = BehaviorPolicyParams(
        kp=_draw(rng, pop.kp, 0.0),
        ki=_draw(rng, pop.ki, 0.0),
        dose_noise_std=pop.dose_noise_std,
        adjustment_period=pop.adjustment_period,
        target_map=baseline * _draw(rng, pop.target_fraction, 0.6, 1.0),
        base_dose=_draw(rng, pop.base_dose, 0.5, pop.dose_cap),
        dose_cap=pop.dose_cap,
    )
    return patient, behavior


# ---------------------------------------------------------------------------
# Closed-loop simulation
# ---------------------------------------------------------------------------


class _Surgery:
    """Mutable simulation state for one patient."""

    def __init__(self, params: PatientParams, rng: np.random.Generator):
        self.p = params
        self.rng = rng
        self.pk = PkState()
        self.stim = 0.0
        self.remi = params.remi_mean

    def observe(self) -> tuple[float, float, float]:
        m = pd_map(self.pk.ce, self.remi, self.p, self.rng, self.stim)
        sys_, dia = arterial_pressures(m, self.p.pulse_pressure)
        return sys_, dia, m

    def advance(self, dose: float, dt: float = 1.0):
        infusion = dose * self.p.clinical.weight / 60.0  # mg/kg/h -> mg/min
        self.pk = pk_step(self.pk, infusion, self.p, dt)
        if self.p.stim_std > 0:
            self.stim = self.p.stim_persistence * self.stim + self.rng.normal(0.0, self.p.stim_std)
        if self.p.remi_change_prob > 0 and self.rng.random() < self.p.remi_change_prob:
            self.remi = float(max(self.rng.normal(self.p.remi_mean, 0.4 * self.p.remi_mean), 0.0))


def simulate_behavior_surgery(
    surgery_id: str,
    patient: PatientParams,
    behavior: BehaviorPolicyParams,
    duration: int,
    rng: np.random.Generator,
    burn_in: int = 30,
) -> RawSurgery:
    """Record ``duration`` dose steps (``duration + 1`` vitals rows) after an unrecorded burn-in."""
    sim = _Surgery(patient, rng)
    integral = 0.0
    dose = behavior.base_dose
    rows = []
    for step in range(burn_in + duration + 1):
        sys_, dia, m = sim.observe()
        if step % behavior.adjustment_period == 0:
            dose, integral = behavior_policy_step(m, integral, behavior, rng)
        else:
            integral = float(np.clip(integral + (m - behavior.target_map), -behavior.integral_limit, behavior.integral_limit))
        t = step - burn_in
        if t >= 0:
            rows.append((t, sys_, dia, m, dose if t < duration else np.nan, sim.remi))
        sim.advance(dose)
    arr = np.array(rows, dtype=np.float64)
    for j, name in enumerate(("ap_sys", "ap_dia", "map", "propofol", "remifentanil"), start=1):
        arr[:, j] = np.round(arr[:, j], CSV_DECIMALS[name])
    return RawSurgery(surgery_id, *(arr[:, i] for i in range(6)), clinical=asdict(patient.clinical), anesthetic_type="propofol")


def inject_missingness(s: RawSurgery, rate: float, rng: np.random.Generator) -> RawSurgery:
    """Blank cells of the vitals / dose / remifentanil columns uniformly at random."""
    if rate <= 0:
        return s
    cols = {}
    for name in ("ap_sys", "ap_dia", "map", "propofol", "remifentanil"):
        v = s.column(name).copy()
        mask = rng.random(len(v)) < rate
        if name == "propofol":
            mask[-1] = False
        v[mask] = np.nan
        cols[name] = v
    return s.with_columns(**cols)


@dataclass
class GenerateConfig:
    n_surgeries: int = 200
    duration_min: int = 60
    duration_max: int = 180
    burn_in: int = 30
    seed: int = 0
    missing_rate: float = 0.0
    inhaled_fraction: float = 0.0
    population: PopulationConfig = field(default_factory=PopulationConfig)


def surgery_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_surgeries(cfg: GenerateConfig) -> list[RawSurgery]:
    if cfg.n_surgeries < 1:
        raise ValueError("n_surgeries must be >= 1")
    if not 1 <= cfg.duration_min <= cfg.duration_max:
        raise ValueError("duration range must satisfy 1 <= min <= max")
    width = len(str(cfg.n_surgeries - 1))
    out = []
    for i in range(cfg.n_surgeries):
        rng = surgery_rng(cfg.seed, i)
        patient, behavior = sample_patient(rng, cfg.population)
        duration = int(rng.integers(cfg.duration_min, cfg.duration_max + 1))
        s = simulate_behavior_surgery(f"S{i:0{width}d}", patient, behavior, duration, rng, cfg.burn_in)
        s = inject_missingness(s, cfg.missing_rate, rng)
        if cfg.inhaled_fraction > 0 and rng.random() < cfg.inhaled_fraction:
            s = s.with_columns(propofol=np.full(len(s), np.nan))
            s.anesthetic_type = "inhaled"
        out.append(s)
    return out


def generate_dataset(cfg: GenerateConfig, out_dir: str | Path) -> list[RawSurgery]:
    """Simulate ``cfg.n_surgeries`` surgeries and write them in the raw CSV layout."""
    surgeries = generate_surgeries(cfg)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    write_raw_directory(out_dir, surgeries, CSV_DECIMALS)
    return surgeries


def rollout_policy(
    policy: Callable[[np.ndarray], np.ndarray],
    params: PatientParams,
    duration: int,
    seed: int = 0,
    *,
    p_max: float = 12.0,
    gamma: float = 0.99,
    map_target: float | None = None,
    remi_schedule: Sequence[float] | None = None,
    episode_id: str = "rollout",
) -> tuple[Episode, float]:
    """Run ``policy`` in closed loop on a fresh (drug-free) patient.

    ``policy`` maps a batch of raw 19-feature observations to normalized doses.
    While running, the observation's MAP target is the running mean of the MAP
    seen so far; the returned episode is relabelled with the realized
    whole-surgery mean (or ``map_target`` when given) and its rewards and
    discounted return are computed against that target.
    """
    rng = surgery_rng(seed, 0)
    sim = _Surgery(params, rng)
    c = params.clinical
    sys_l, dia_l, map_l, remi_l, actions = [], [], [], [], []
    for t in range(duration + 1):
        if remi_schedule is not None:
            sim.remi = float(remi_schedule[min(t, len(remi_schedule) - 1)])
        sys_, dia, m = sim.observe()
        sys_l.append(sys_)
        dia_l.append(dia)
        map_l.append(m)
        remi_l.append(sim.remi)
        if t == duration:
            break
        maps = np.array(map_l)
        running = np.cumsum(maps) / np.arange(1, len(maps) + 1)
        obs = observation_matrix(c, np.array(sys_l), np.array(dia_l), maps, np.array(remi_l), running)[-1:]
        a = float(np.asarray(policy(obs)).reshape(-1)[0])
        if not (0.0 <= a <= 1.0) or not math.isfinite(a):
            raise PolicyContractError(f"policy returned {a} at step {t}; actions must lie in [0, 1]")
        actions.append(a)
        sim.advance(a * p_max)
    maps = np.array(map_l)
    target = float(maps.mean()) if map_target is None else float(map_target)
    obs = observation_matrix(c, np.array(sys_l), np.array(dia_l), maps, np.array(remi_l), target)
    acts = np.array(actions)
    rewards = reward_vector(maps[1:], target, acts)
    ep = Episode(episode_id, obs, acts, rewards)
    return ep, ep.discounted_return(gamma)
