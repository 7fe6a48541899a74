"""Command-line pipeline: generate | ingest | train | evaluate | explain.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .algorithms import TrainingAborted, load_agent, save_agent, train_pcql
from .config import ConfigError, RunConfig, load_config
from .evaluation import EvalConfig, comparison_table, evaluate_policy, fqe_evaluate, write_curves
from .explain import explain_samples, sample_background, shapley_attribution
from .simenv import GenerateConfig, generate_dataset

log = logging.getLogger("pcql")


class UsageError(Exception):
    pass


def _paths(cfg: RunConfig) -> dict[str, Path]:
    root = cfg.output_root()
    return {
        "raw": root / "raw",
        "dataset": root / "dataset",
        "train": root / f"train_{cfg.train.variant}",
        "eval": root / "eval",
        "explain": root / "explain",
    }


def _fresh_dir(path: Path, overwrite: bool):
    if path.exists() and any(path.iterdir()) and not overwrite:
        raise UsageError(f"{path} already exists and is not empty (use --overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _existing(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig, args) -> int:
    out = Path(args.out) if args.out else _paths(cfg)["raw"]
    g = cfg.generate
    if g.n_surgeries < 1:
        raise UsageError("--n must be >= 1")
    _fresh_dir(out, args.overwrite)
    gen = GenerateConfig(
        n_surgeries=g.n_surgeries,
        duration_min=g.duration_min,
        duration_max=g.duration_max,
        burn_in=g.burn_in,
        seed=cfg.seed_for("generate"),
        missing_rate=g.missing_rate,
        inhaled_fraction=g.inhaled_fraction,
        population=cfg.population,
    )
    try:
        surgeries = generate_dataset(gen, out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    steps = sum(s.duration_steps for s in surgeries)
    print(f"generated {len(surgeries)} surgeries, {steps} steps, seed {cfg.run.seed} -> {out}")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    paths = _paths(cfg)
    raw_dir = _existing(Path(args.raw) if args.raw else paths["raw"], "raw surgery directory")
    out = Path(args.out) if args.out else paths["dataset"]
    _fresh_dir(out, args.overwrite)
    d = cfg.data
    try:
        res = data_mod.ingest(
            data_mod.read_raw_directory(raw_dir),
            k=d.k,
            min_duration_steps=d.min_duration_steps,
            max_missing_fraction=d.max_missing_fraction,
            ratios=d.ratios,
            seed=cfg.seed_for("ingest"),
            p_max=d.p_max if d.p_max > 0 else None,
        )
    except data_mod.ConfigError as exc:
        raise UsageError(str(exc)) from exc
    for name in ("train", "valid", "test"):
        data_mod.save_dataset(getattr(res, name), out / name)
    (out / "filter_report.json").write_text(json.dumps(res.report.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "meta.json").write_text(json.dumps(res.train.meta.to_json(), indent=2, sort_keys=True) + "\n")
    r = res.report
    print(f"kept {r.retained}/{r.input_count} surgeries; rejected {json.dumps(r.rejected, sort_keys=True)}")
    print(f"imputed {res.n_imputed} cells; split train/valid/test = {len(res.train)}/{len(res.valid)}/{len(res.test)}")
    return 0


def _load_split(cfg: RunConfig, args, name: str):
    root = _existing(Path(args.data) if getattr(args, "data", None) else _paths(cfg)["dataset"], "dataset directory")
    return data_mod.load_dataset(_existing(root / name, f"{name} split"))


def cmd_train(cfg: RunConfig, args) -> int:
    train, valid = _load_split(cfg, args, "train"), _load_split(cfg, args, "valid")
    out = Path(args.out) if args.out else _paths(cfg)["train"]
    _fresh_dir(out, args.overwrite)
    tc = cfg.train_config()
    agent, tlog = train_pcql(train, valid, tc, progress=lambda e, m: log.info("epoch %d %s", e, m))
    save_agent(out / "agent.ckpt", agent)
    tlog.write_csv(out / "train_log.csv")
    tlog.write_validation_csv(out / "validation.csv")
    print(f"trained {cfg.train.variant} for {tc.epochs} epochs ({agent.steps} steps) -> {out / 'agent.ckpt'}")
    return 0


def _load_checkpoints(specs: list[str]) -> list[tuple[str, object]]:
    agents = []
    for spec in specs:
        name, _, path = spec.rpartition("=")
        p = Path(path)
        if p.is_dir():
            p = p / "agent.ckpt"
        # default name: the run directory holding the checkpoint, e.g. train_pcql -> pcql
        name = name or p.parent.name.removeprefix("train_")
        agents.append((name, load_agent(_existing(p, "checkpoint"))))
    return agents


def cmd_evaluate(cfg: RunConfig, args) -> int:
    test = _load_split(cfg, args, "test")
    specs = args.checkpoint or [str(_paths(cfg)["train"])]
    agents = _load_checkpoints(specs)
    out = Path(args.out) if args.out else _paths(cfg)["eval"]
    _fresh_dir(out, args.overwrite)
    ecfg = EvalConfig(cfg.eval.sigma, cfg.eval.n_samples, cfg.eval.band_episodes, cfg.seed_for("eval"), cfg.fqe_config())
    behavior = fqe_evaluate(None, test, ecfg.fqe)
    reports = [evaluate_policy("behavior", None, test, ecfg, behavior_fqe=behavior)]
    reports[0].to_json(out / "behavior_report.json")
    write_curves(reports[0], None, test, out / "behavior_curves")
    for name, agent in agents:
        if name == "behavior":
            raise UsageError("checkpoint name 'behavior' is reserved for the logged policy")
        if agent.meta.p_max != test.meta.p_max or list(agent.meta.feature_means) != list(test.meta.feature_means):
            raise UsageError(f"checkpoint {name} was trained on a different dataset normalization")
        rep = evaluate_policy(name, agent.policy, test, ecfg, behavior_fqe=behavior)
        rep.to_json(out / f"{name}_report.json")
        write_curves(rep, agent.policy, test, out / f"{name}_curves")
        reports.append(rep)
    table = comparison_table(reports)
    (out / "comparison.csv").write_text(table)
    print(f"behavior: initial-state return {behavior.estimate:.4f}")
    print(table, end="")
    return 0


def linear_probe_self_test(seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    w = rng.normal(size=19)
    w[3] = 0.0
    x, b = rng.normal(size=19), rng.normal(size=19)
    est = shapley_attribution(lambda z: z @ w, x, b[None, :], n_permutations=20, seed=seed)
    return bool(np.max(np.abs(est.values - w * (x - b))) < 1e-10 and abs(est.values[3]) < 1e-10)


def cmd_explain(cfg: RunConfig, args) -> int:
    if args.self_test:
        ok = linear_probe_self_test(cfg.seed_for("explain"))
        print(f"linear probe self-test: {'PASS' if ok else 'FAIL'}")
        return 0 if ok else 1
    paths = _paths(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else paths["train"] / "agent.ckpt"
    if ckpt.is_dir():
        ckpt = ckpt / "agent.ckpt"
    agent = load_agent(_existing(ckpt, "checkpoint"))
    train, test = _load_split(cfg, args, "train"), _load_split(cfg, args, "test")
    out = Path(args.out) if args.out else paths["explain"]
    _fresh_dir(out, args.overwrite)
    seed = cfg.seed_for("explain")
    e = cfg.explain
    background = sample_background(train.arrays().states, e.n_background, seed)
    rng = np.random.default_rng(seed + 1)
    states = test.arrays().states
    samples = states[np.sort(rng.choice(len(states), size=min(e.n_samples, len(states)), replace=False))]
    report = explain_samples(agent.policy, samples, background, e.n_permutations, seed)
    report.to_json(out / "attributions.json")
    report.scores_csv(out / "scores.csv")
    for name, score in report.ranked()[:5]:
        print(f"{name:>18s} {score:.6f}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
}


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="plain-text config file with [section] key = value entries")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config entry")
    common.add_argument("--seed", type=int, help="global seed (overrides run.seed)")
    common.add_argument("--output-root", help="overrides run.output_root")
    common.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    common.add_argument("--overwrite", action="store_true", help="allow writing into a non-empty output directory")
    common.add_argument("--out", help="output directory for this stage")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="pcql", description="Offline RL anesthesia dosing pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[common], help="simulate raw surgeries")
    g.add_argument("--n", type=int, help="number of surgeries")

    i = sub.add_parser("ingest", parents=[common], help="filter, impute, split and label")
    i.add_argument("--raw", help="raw surgery directory")

    t = sub.add_parser("train", parents=[common], help="train PCQL or CQL")
    t.add_argument("--data", help="processed dataset directory")
    t.add_argument("--variant", choices=("pcql", "cql"))
    t.add_argument("--epochs", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="FQE, MAPE/RMSE, dose, correlation and bands")
    e.add_argument("--data", help="processed dataset directory")
    e.add_argument("--checkpoint", action="append", help="[name=]path to agent.ckpt or its directory; repeatable")

    x = sub.add_parser("explain", parents=[common], help="Shapley feature attributions")
    x.add_argument("--data", help="processed dataset directory")
    x.add_argument("--checkpoint", help="path to agent.ckpt or its directory")
    x.add_argument("--self-test", action="store_true", help="run the linear-probe Shapley check and exit")
    return p


def resolve_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if args.seed is not None:
        overrides["run.seed"] = str(args.seed)
    if args.output_root is not None:
        overrides["run.output_root"] = args.output_root
    if getattr(args, "n", None) is not None:
        overrides["generate.n_surgeries"] = str(args.n)
    if getattr(args, "variant", None) is not None:
        overrides["train.variant"] = args.variant
    if getattr(args, "epochs", None) is not None:
        overrides["train.epochs"] = str(args.epochs)
    return load_config(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.print_config:
            print(cfg.to_text(), end="")
            return 0
        return COMMANDS[args.command](cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
