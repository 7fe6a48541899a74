"""Policy Constraint Q-Learning: conservative twin critics, a deterministic
bounded actor, and the learned transition (h) / behavior (g) models whose
latent agreement constrains the actor.

Observations entering any network are standardized with the dataset
metadata; actions are normalized doses in [0, 1].
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import N_FEATURES, Action, DatasetMeta, ObservationState, OfflineDataset, flatten_observation, standardize
from .nn import (
    Adam,
    Mlp,
    NonFiniteError,
    Tensor,
    concat,
    grad_norm,
    load_arrays,
    logsumexp,
    minimum,
    mlp_arrays,
    mlp_from_arrays,
    save_arrays,
    soft_update,
    softmax_xent,
)

log = logging.getLogger(__name__)

AGENT_SCHEMA_VERSION = 1
LOG_COLUMNS = ("epoch", "step", "l_td", "l_cql", "l_actor", "phi", "l_cycle", "l_entropy", "grad_norms")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.99
    alpha_cql: float = 5.0
    tau_temp: float = 0.5
    phi_weight: float = 1.0
    phi_mode: str = "latent"  # "latent" (cross-entropy in projector space) or "euclidean"
    phi_joint_update: bool = False  # also step h and g on the actor objective
    update_constraint_nets: bool = True
    n_action_samples: int = 10
    cql_policy_noise: float = 0.1
    target_update_rate: float = 0.005
    epochs: int = 200
    batch_size: int = 256
    lr_actor: float = 1e-4
    lr_critic: float = 3e-4
    lr_h: float = 1e-4
    lr_g: float = 3e-4
    hidden: tuple = (256, 256)
    constraint_hidden: tuple = (128, 128)
    d_proj: int = 32
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(w) for w in self.hidden)
        self.constraint_hidden = tuple(int(w) for w in self.constraint_hidden)
        self.validate()

    def validate(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha_cql < 0 or self.phi_weight < 0:
            raise ValueError("alpha_cql and phi_weight must be nonnegative")
        if not self.tau_temp > 0:
            raise ValueError("tau_temp must be positive")
        if self.n_action_samples < 1:
            raise ValueError("n_action_samples must be >= 1")
        if not 0 < self.target_update_rate <= 1:
            raise ValueError("target_update_rate must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.phi_mode not in ("latent", "euclidean"):
            raise ValueError(f"unknown phi_mode {self.phi_mode!r}")
        if min(self.lr_actor, self.lr_critic, self.lr_h, self.lr_g) <= 0:
            raise ValueError("learning rates must be positive")
        if not self.hidden or not self.constraint_hidden or self.d_proj < 1:
            raise ValueError("network widths must be nonempty")


class ConstraintNet:
    """Shared encoder feeding a predictor head and a projector head."""

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int], d_proj: int, output: str, rng):
        self.in_dim, self.out_dim, self.hidden, self.d_proj, self.output = in_dim, out_dim, tuple(hidden), d_proj, output
        self.encoder = Mlp([in_dim, *hidden], output="relu", rng=rng)
        self.predictor = Mlp([hidden[-1], out_dim], output=output, rng=rng)
        self.projector = Mlp([hidden[-1], d_proj], rng=rng)

    @property
    def nets(self) -> dict[str, Mlp]:
        return {"encoder": self.encoder, "predictor": self.predictor, "projector": self.projector}

    @property
    def params(self) -> list[Tensor]:
        return self.encoder.params + self.predictor.params + self.projector.params

    def __call__(self, x, y) -> tuple[Tensor, Tensor]:
        z = self.encoder(concat([x, y], axis=1))
        return self.predictor(z), self.projector(z)

    def predict(self, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = self.encoder.predict(np.concatenate([x, y], axis=1))
        return self.predictor.predict(z), self.projector.predict(z)


@contextlib.contextmanager
def frozen(params: Sequence[Tensor]):
    """Temporarily stop recording gradients for ``params``."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


class PcqlAgent:
    """Actor, twin critics with delayed targets, and the constraint networks h and g.

    h maps (state, action) to a next-state prediction; g maps
    (state, next state) to an action prediction.
    """

    def __init__(self, meta: DatasetMeta, config: TrainConfig | None = None):
        self.meta = meta
        self.config = config or TrainConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        self.actor = Mlp([N_FEATURES, *c.hidden, 1], output="sigmoid", rng=rng)
        self.critics = [Mlp([N_FEATURES + 1, *c.hidden, 1], rng=rng) for _ in range(2)]
        self.target_critics = [q.copy() for q in self.critics]
        self.h = ConstraintNet(N_FEATURES + 1, N_FEATURES, c.constraint_hidden, c.d_proj, "identity", rng)
        self.g = ConstraintNet(2 * N_FEATURES, 1, c.constraint_hidden, c.d_proj, "sigmoid", rng)
        self.opt_actor = Adam(self.actor.params, lr=c.lr_actor)
        self.opt_critic = Adam(self.critics[0].params + self.critics[1].params, lr=c.lr_critic)
        self.opt_h = Adam(self.h.params, lr=c.lr_h)
        self.opt_g = Adam(self.g.params, lr=c.lr_g)
        self.steps = 0

    @property
    def critic_params(self) -> list[Tensor]:
        return self.critics[0].params + self.critics[1].params

    @property
    def constraint_params(self) -> list[Tensor]:
        return self.h.params + self.g.params

    def optimizers(self) -> dict[str, Adam]:
        return {"actor": self.opt_actor, "critic": self.opt_critic, "h": self.opt_h, "g": self.opt_g}

    # -- inference -------------------------------------------------------------
    def policy(self, observations: np.ndarray) -> np.ndarray:
        """Normalized doses for a batch of raw (unstandardized) 19-feature observations."""
        obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        return self.actor.predict(standardize(obs, self.meta))[:, 0]

    def act(self, obs: ObservationState | np.ndarray) -> tuple[Action, float]:
        """Deterministic recommendation and its physical dose (mg/kg/h)."""
        vec = flatten_observation(obs) if isinstance(obs, ObservationState) else np.asarray(obs, dtype=np.float64)
        if vec.shape != (N_FEATURES,):
            raise ValueError(f"expected a {N_FEATURES}-feature observation, got shape {vec.shape}")
        a = float(self.policy(vec[None, :])[0])
        return Action(a), a * self.meta.p_max

    def q_value(self, critic: Mlp, states, actions) -> Tensor:
        return critic(concat([states, actions], axis=1))

    def q_predict(self, critic: Mlp, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return critic.predict(np.concatenate([states, actions.reshape(-1, 1)], axis=1))[:, 0]

    def soft_update_targets(self, rate: float | None = None):
        rate = self.config.target_update_rate if rate is None else rate
        for t, q in zip(self.target_critics, self.critics):
            soft_update(t, q, rate)


@dataclass
class Batch:
    """Standardized states, actions of shape (B, 1), rewards and terminals of shape (B,)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


def make_batch(ds: OfflineDataset, idx: np.ndarray | None = None, meta: DatasetMeta | None = None) -> Batch:
    arr = ds.arrays()
    meta = meta or ds.meta
    idx = np.arange(len(arr)) if idx is None else idx
    return Batch(
        standardize(arr.states[idx], meta),
        arr.actions[idx].reshape(-1, 1),
        arr.rewards[idx],
        standardize(arr.next_states[idx], meta),
        arr.terminals[idx].astype(np.float64),
    )


# ---------------------------------------------------------------------------
# Critic losses
# ---------------------------------------------------------------------------


def td_targets(agent: PcqlAgent, batch: Batch, gamma: float) -> np.ndarray:
    """r + gamma * (1 - done) * min_i Q_target_i(s', actor(s'))."""
    next_a = agent.actor.predict(batch.next_states)[:, 0]
    q_next = np.minimum(
        agent.q_predict(agent.target_critics[0], batch.next_states, next_a),
        agent.q_predict(agent.target_critics[1], batch.next_states, next_a),
    )
    return batch.rewards + gamma * (1.0 - batch.terminals) * q_next


def critic_td_loss(agent: PcqlAgent, batch: Batch, config: TrainConfig | None = None) -> Tensor:
    """Mean squared Bellman residual, averaged over the two critics."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    config = config or agent.config
    y = td_targets(agent, batch, config.gamma).reshape(-1, 1)
    losses = [((agent.q_value(q, batch.states, batch.actions) - y).square()).mean() for q in agent.critics]
    return (losses[0] + losses[1]) * 0.5


def sample_cql_actions(agent: PcqlAgent, states: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """(B, 2n) proposal actions: n uniform on [0, 1] and n noisy actor actions clipped to [0, 1]."""
    n = config.n_action_samples
    B = len(states)
    uniform = rng.random((B, n))
    mean = agent.actor.predict(states)
    noisy = np.clip(mean + config.cql_policy_noise * rng.standard_normal((B, n)), 0.0, 1.0)
    return np.concatenate([uniform, noisy], axis=1)


def cql_conservative_term(
    agent: PcqlAgent,
    batch: Batch,
    config: TrainConfig | None = None,
    sampled_actions: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """alpha * mean_s[ logsumexp_a Q(s, a) - log(#samples) - Q(s, a_data) ], averaged over critics.

    The log-sum-exp over the continuous action set is estimated from the
    proposal actions; subtracting log(#samples) makes a constant Q give zero.
    """
    config = config or agent.config
    if sampled_actions is None:
        sampled_actions = sample_cql_actions(agent, batch.states, config, rng or np.random.default_rng())
    B, m = sampled_actions.shape
    s_rep = np.repeat(batch.states, m, axis=0)
    a_rep = sampled_actions.reshape(-1, 1)
    terms = []
    for q in agent.critics:
        q_samp = agent.q_value(q, s_rep, a_rep).reshape(B, m)
        q_data = agent.q_value(q, batch.states, batch.actions).reshape(B)
        gap = logsumexp(q_samp, axis=1) - math.log(m) - q_data
        terms.append(gap.mean())
    return (terms[0] + terms[1]) * (0.5 * config.alpha_cql)


# ---------------------------------------------------------------------------
# Policy constraint
# ---------------------------------------------------------------------------


def imagined_action(agent: PcqlAgent, states, actions) -> Tensor:
    """g(s, h(s, a)): the action the behavior model reads off the imagined next state."""
    next_pred, _ = agent.h(states, actions)
    a_dot, _ = agent.g(states, next_pred)
    return a_dot


def phi_penalty(agent: PcqlAgent, states, actions_hat, config: TrainConfig | None = None) -> Tensor:
    """Latent alignment constraint: H(Prj(h(s, a_hat)), Prj(h(s, a_dot))) with a_dot = g(s, h(s, a_hat)).

    The first projection is a fixed target; gradients reach ``actions_hat``
    through the reconstruction branch.
    """
    config = config or agent.config
    a_hat = actions_hat if isinstance(actions_hat, Tensor) else Tensor(actions_hat)
    s = np.asarray(states)
    _, target = agent.h.predict(s, a_hat.data)
    a_dot = imagined_action(agent, s, a_hat)
    _, proj_rec = agent.h(s, a_dot)
    return softmax_xent(Tensor(target), proj_rec, config.tau_temp)


def phi_euclidean(agent: PcqlAgent, states, actions_hat) -> Tensor:
    """Batch mean of ||g(s, h(s, a_hat)) - a_hat||_2."""
    a_hat = actions_hat if isinstance(actions_hat, Tensor) else Tensor(actions_hat)
    a_dot = imagined_action(agent, np.asarray(states), a_hat)
    return (a_dot - a_hat).norm(axis=1).mean()


def constraint_cycle_loss(agent: PcqlAgent, batch: Batch) -> Tensor:
    """mean ||g(s, h(s, a)) - a||^2 + ||h(s, g(s, s')) - s'||^2."""
    s, a, s2 = batch.states, batch.actions, batch.next_states
    a_rec = imagined_action(agent, s, a)
    a_pred, _ = agent.g(s, s2)
    s2_rec, _ = agent.h(s, a_pred)
    per = (a_rec - a).square().sum(axis=1) + (s2_rec - s2).square().sum(axis=1)
    return per.mean()


def constraint_entropy_loss(agent: PcqlAgent, batch: Batch, config: TrainConfig | None = None) -> Tensor:
    """H(Prj h(s, a_dot), Prj h(s, a)) + H(Prj g(s, s2_dot), Prj g(s, s')) with detached first arguments.

    a_dot = g(s, h(s, a)) and s2_dot = h(s, g(s, s')) are the cycle reconstructions.
    """
    config = config or agent.config
    s, a, s2 = batch.states, batch.actions, batch.next_states
    h_next, _ = agent.h.predict(s, a)
    a_dot, _ = agent.g.predict(s, h_next)
    g_act, _ = agent.g.predict(s, s2)
    s2_dot, _ = agent.h.predict(s, g_act)
    _, target_h = agent.h.predict(s, a_dot)
    _, target_g = agent.g.predict(s, s2_dot)
    _, proj_h = agent.h(s, a)
    _, proj_g = agent.g(s, s2)
    return softmax_xent(Tensor(target_h), proj_h, config.tau_temp) + softmax_xent(Tensor(target_g), proj_g, config.tau_temp)


def _constraint_losses(agent: PcqlAgent, batch: Batch, config: TrainConfig) -> tuple[Tensor, Tensor]:
    """Cycle and entropy losses sharing forward passes (same values as the two public functions)."""
    s, a, s2 = batch.states, batch.actions, batch.next_states
    h_next, proj_h = agent.h(s, a)
    a_rec, _ = agent.g(s, h_next)
    a_pred, proj_g = agent.g(s, s2)
    s2_rec, _ = agent.h(s, a_pred)
    cycle = ((a_rec - a).square().sum(axis=1) + (s2_rec - s2).square().sum(axis=1)).mean()
    _, target_h = agent.h.predict(s, a_rec.data)
    _, target_g = agent.g.predict(s, s2_rec.data)
    entropy = softmax_xent(Tensor(target_h), proj_h, config.tau_temp) + softmax_xent(Tensor(target_g), proj_g, config.tau_temp)
    return cycle, entropy


# ---------------------------------------------------------------------------
# Actor
# ---------------------------------------------------------------------------


@dataclass
class ActorTerms:
    total: Tensor
    q_term: Tensor
    phi: Tensor | None


def actor_loss(agent: PcqlAgent, batch: Batch, config: TrainConfig | None = None) -> ActorTerms:
    """-mean min(Q1, Q2)(s, actor(s)) + phi_weight * Phi(s, actor(s))."""
    config = config or agent.config
    if len(batch) == 0:
        raise ValueError("empty batch")
    s = batch.states
    a_hat = agent.actor(s)
    with frozen(agent.critic_params):
        q = minimum(agent.q_value(agent.critics[0], s, a_hat), agent.q_value(agent.critics[1], s, a_hat))
    q_term = -q.mean()
    if config.phi_weight == 0:
        return ActorTerms(q_term, q_term, None)
    ctx = contextlib.nullcontext() if config.phi_joint_update else frozen(agent.constraint_params)
    with ctx:
        phi = phi_penalty(agent, s, a_hat, config) if config.phi_mode == "latent" else phi_euclidean(agent, s, a_hat)
    return ActorTerms(q_term + phi * config.phi_weight, q_term, phi)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    validation: list = field(default_factory=list)

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([_cell(r.get(c)) for c in LOG_COLUMNS])

    def write_validation_csv(self, path: str | Path):
        if not self.validation:
            cols = ["epoch"]
        else:
            cols = list(self.validation[0].keys())
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.validation:
                w.writerow([_cell(r[c]) for c in cols])


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train_step(agent: PcqlAgent, batch: Batch, rng: np.random.Generator) -> dict:
    """One mini-batch: constraint nets, then critics, then actor, then targets."""
    c = agent.config
    row: dict = {}
    norms = {}
    if c.update_constraint_nets:
        agent.opt_h.zero_grad()
        agent.opt_g.zero_grad()
        l_cycle, l_entropy = _constraint_losses(agent, batch, c)
        (l_cycle + l_entropy).backward()
        norms["h"] = grad_norm(agent.h.params)
        norms["g"] = grad_norm(agent.g.params)
        agent.opt_h.step()
        agent.opt_g.step()
        row["l_cycle"], row["l_entropy"] = l_cycle.item(), l_entropy.item()

    agent.opt_critic.zero_grad()
    l_td = critic_td_loss(agent, batch, c)
    if c.alpha_cql > 0:
        l_cql = cql_conservative_term(agent, batch, c, rng=rng)
        (l_td + l_cql).backward()
        row["l_cql"] = l_cql.item()
    else:
        l_td.backward()
        row["l_cql"] = 0.0
    norms["critic"] = grad_norm(agent.critic_params)
    agent.opt_critic.step()
    row["l_td"] = l_td.item()

    agent.opt_actor.zero_grad()
    if c.phi_joint_update:
        agent.opt_h.zero_grad()
        agent.opt_g.zero_grad()
    terms = actor_loss(agent, batch, c)
    terms.total.backward()
    norms["actor"] = grad_norm(agent.actor.params)
    agent.opt_actor.step()
    if c.phi_joint_update and terms.phi is not None:
        agent.opt_h.step()
        agent.opt_g.step()
    row["l_actor"] = terms.total.item()
    row["q_term"] = terms.q_term.item()
    row["phi"] = terms.phi.item() if terms.phi is not None else 0.0

    agent.soft_update_targets()
    agent.steps += 1
    row["grad_norms"] = ";".join(f"{k}={norms[k]!r}" for k in ("critic", "actor", "h", "g") if k in norms)
    return row


def validation_metrics(agent: PcqlAgent, valid: OfflineDataset) -> dict:
    batch = make_batch(valid, meta=agent.meta)
    y = td_targets(agent, batch, agent.config.gamma)
    td = 0.5 * sum(float(np.mean((agent.q_predict(q, batch.states, batch.actions[:, 0]) - y) ** 2)) for q in agent.critics)
    a_hat = agent.actor.predict(batch.states)
    _, target = agent.h.predict(batch.states, a_hat)
    h_next, _ = agent.h.predict(batch.states, a_hat)
    a_dot, _ = agent.g.predict(batch.states, h_next)
    _, rec = agent.h.predict(batch.states, a_dot)
    phi = softmax_xent(Tensor(target), Tensor(rec), agent.config.tau_temp).item()
    rec_doses = a_hat[:, 0] * agent.meta.p_max
    true_doses = batch.actions[:, 0] * agent.meta.p_max
    mape = float(np.mean(np.abs(rec_doses - true_doses) / np.maximum(1e-8, true_doses)) * 100.0)
    return {"valid_td": td, "valid_phi": phi, "valid_mape": mape}


def train_pcql(
    train: OfflineDataset,
    valid: OfflineDataset | None,
    config: TrainConfig,
    agent: PcqlAgent | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> tuple[PcqlAgent, TrainingLog]:
    """Joint training loop; deterministic given ``config.seed``.

    Every epoch visits each training transition once in a seeded random
    order. Any non-finite loss aborts with the epoch and step named.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if agent is None:
        agent = PcqlAgent(train.meta, config)
    else:
        agent.config = config
    if valid is not None and valid.meta.p_max != agent.meta.p_max:
        raise ValueError("validation metadata does not match the training metadata")
    rng = np.random.default_rng([config.seed, 1])
    full = make_batch(train, meta=agent.meta)
    n = len(full)
    tlog = TrainingLog()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for k, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            batch = Batch(full.states[idx], full.actions[idx], full.rewards[idx], full.next_states[idx], full.terminals[idx])
            try:
                row = train_step(agent, batch, rng)
            except NonFiniteError as exc:
                raise TrainingAborted(f"non-finite value at epoch {epoch}, step {k}: {exc}") from exc
            losses = [row.get(c) for c in ("l_td", "l_cql", "l_actor", "phi", "l_cycle", "l_entropy")]
            if any(v is not None and not math.isfinite(v) for v in losses):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, step {k}")
            row["epoch"], row["step"] = epoch, k
            tlog.rows.append(row)
        if valid is not None and len(valid):
            vm = {"epoch": epoch, **validation_metrics(agent, valid)}
            tlog.validation.append(vm)
            log.info("epoch %d: %s", epoch, vm)
            if progress is not None:
                progress(epoch, vm)
    return agent, tlog


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _agent_nets(agent: PcqlAgent) -> dict[str, Mlp]:
    nets = {"actor": agent.actor, "critic0": agent.critics[0], "critic1": agent.critics[1]}
    nets["target0"], nets["target1"] = agent.target_critics
    for name, cn in (("h", agent.h), ("g", agent.g)):
        for part, net in cn.nets.items():
            nets[f"{name}.{part}"] = net
    return nets


def save_agent(path: str | Path, agent: PcqlAgent):
    """Bundle every network, optimizer state, the config and the dataset metadata in one file."""
    arrays: dict[str, np.ndarray] = {}
    for name, net in _agent_nets(agent).items():
        arrays.update(mlp_arrays(net, name))
    opt_header = {}
    for name, opt in agent.optimizers().items():
        opt_header[name] = []
        for gi, st in enumerate(opt.states):
            opt_header[name].append(
                {"step": st.step, "lr": st.learning_rate, "beta1": st.beta1, "beta2": st.beta2, "eps": st.epsilon}
            )
            for i, (m, v) in enumerate(zip(st.m, st.v)):
                arrays[f"opt.{name}.{gi}.m.{i}"] = m
                arrays[f"opt.{name}.{gi}.v.{i}"] = v
    cfg = asdict(agent.config)
    cfg["hidden"] = list(cfg["hidden"])
    cfg["constraint_hidden"] = list(cfg["constraint_hidden"])
    header = {
        "kind": "pcql_agent",
        "schema_version": AGENT_SCHEMA_VERSION,
        "config": cfg,
        "meta": agent.meta.to_json(),
        "optimizers": opt_header,
        "steps": agent.steps,
    }
    save_arrays(path, header, arrays)


def load_agent(path: str | Path) -> PcqlAgent:
    header, arrays = load_arrays(path)
    if header.get("kind") != "pcql_agent" or header.get("schema_version") != AGENT_SCHEMA_VERSION:
        raise ValueError(f"{path} is not a compatible agent checkpoint")
    cfg = header["config"]
    known = {f.name for f in fields(TrainConfig)}
    config = TrainConfig(**{k: v for k, v in cfg.items() if k in known})
    agent = PcqlAgent(DatasetMeta.from_json(header["meta"]), config)
    for name, net in _agent_nets(agent).items():
        loaded = mlp_from_arrays(net.widths, net.output, arrays, name)
        net.load_values([p.data for p in loaded.params])
    for name, opt in agent.optimizers().items():
        for gi, (st, saved) in enumerate(zip(opt.states, header["optimizers"][name])):
            st.step, st.learning_rate = saved["step"], saved["lr"]
            st.beta1, st.beta2, st.epsilon = saved["beta1"], saved["beta2"], saved["eps"]
            st.m = [arrays[f"opt.{name}.{gi}.m.{i}"] for i in range(len(st.m))]
            st.v = [arrays[f"opt.{name}.{gi}.v.{i}"] for i in range(len(st.v))]
    agent.steps = header["steps"]
    return agent
