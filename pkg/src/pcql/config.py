"""Run configuration: a sectioned plain-text key = value file mapped onto dataclasses."""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .algorithms import TrainConfig
from .evaluation import FqeConfig
from .simenv import PopulationConfig

OUTPUT_ROOT_ENV = "PCQL_OUTPUT_ROOT"
STAGES = ("generate", "ingest", "train", "fqe", "eval", "explain")


class ConfigError(ValueError):
    """Bad configuration; the CLI maps it to exit code 2."""


def derive_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunSection:
    seed: int = 0
    output_root: str = ""  # empty: $PCQL_OUTPUT_ROOT, else ./runs


@dataclass
class GenerateSection:
    n_surgeries: int = 200
    duration_min: int = 60
    duration_max: int = 180
    burn_in: int = 30
    missing_rate: float = 0.0
    inhaled_fraction: float = 0.0


@dataclass
class DataSection:
    k: int = 5
    min_duration_steps: int = 30
    max_missing_fraction: float = 0.3
    ratios: tuple = (0.7, 0.1, 0.2)
    p_max: float = 12.0  # mg/kg/h; 0 takes the largest training dose


@dataclass
class TrainSection:
    variant: str = "pcql"
    epochs: int = 200
    batch_size: int = 256
    gamma: float = 0.99
    alpha_cql: float = 5.0
    tau_temp: float = 0.5
    phi_weight: float = 1.0
    phi_mode: str = "latent"
    phi_joint_update: bool = False
    n_action_samples: int = 10
    cql_policy_noise: float = 0.1
    target_update_rate: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 3e-4
    lr_h: float = 1e-4
    lr_g: float = 3e-4
    hidden: tuple = (256, 256)
    constraint_hidden: tuple = (128, 128)
    d_proj: int = 32


@dataclass
class FqeSection:
    gamma: float = 0.99
    epochs: int = 800
    batch_size: int = 512
    learning_rate: float = 1e-3
    hidden: tuple = (64, 64)
    target_update_interval: int = 10


@dataclass
class EvalSection:
    sigma: float = 0.05
    n_samples: int = 100
    band_episodes: int = 5


@dataclass
class ExplainSection:
    n_samples: int = 50
    n_background: int = 100
    n_permutations: int = 200


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    population: PopulationConfig = field(default_factory=PopulationConfig)
    generate: GenerateSection = field(default_factory=GenerateSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    fqe: FqeSection = field(default_factory=FqeSection)
    eval: EvalSection = field(default_factory=EvalSection)
    explain: ExplainSection = field(default_factory=ExplainSection)

    # -- derived ---------------------------------------------------------------
    def seed_for(self, stage: str) -> int:
        if stage not in STAGES:
            raise KeyError(stage)
        return derive_seed(self.run.seed, stage)

    def output_root(self) -> Path:
        return Path(self.run.output_root or os.environ.get(OUTPUT_ROOT_ENV) or "runs")

    def train_config(self) -> TrainConfig:
        t = self.train
        if t.variant not in ("pcql", "cql"):
            raise ConfigError(f"train.variant must be pcql or cql, got {t.variant!r}")
        kw = {f.name: getattr(t, f.name) for f in fields(t) if f.name != "variant"}
        if t.variant == "cql":
            kw.update(phi_weight=0.0, update_constraint_nets=False)
        try:
            return TrainConfig(seed=self.seed_for("train"), **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def fqe_config(self) -> FqeConfig:
        kw = {f.name: getattr(self.fqe, f.name) for f in fields(self.fqe)}
        try:
            return FqeConfig(seed=self.seed_for("fqe"), **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- text form -------------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            lines.append(f"[{sec.name}]")
            obj = getattr(self, sec.name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, items: dict[str, str]) -> "RunConfig":
        """Apply {"section.key": text} overrides."""
        cfg = self
        for dotted, text in items.items():
            if "." not in dotted:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            section, key = dotted.split(".", 1)
            cfg = cfg._set(section, key, text)
        return cfg

    def _set(self, section: str, key: str, text: str) -> "RunConfig":
        sections = {f.name for f in fields(self)}
        if section not in sections:
            raise ConfigError(f"unknown config section [{section}]")
        obj = getattr(self, section)
        types = {f.name: f for f in fields(obj)}
        if key not in types:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        value = _parse(text, getattr(obj, key), f"{section}.{key}")
        return replace(self, **{section: replace(obj, **{key: value})})


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
            kinds = {type(x) for x in default}
            cast = int if kinds == {int} else float
            return tuple(cast(p.strip()) for p in parts)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {where} = {text!r} as {type(default).__name__}") from None


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(p.read_text())
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {p}: {exc}") from exc
        if parser.defaults():
            raise ConfigError("keys outside a [section] are not allowed")
        for section in parser.sections():
            for key, text in parser.items(section):
                cfg = cfg._set(section, key, text)
    return cfg.with_overrides(overrides or {})

