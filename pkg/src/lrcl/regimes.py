"""The chain-MDP experiment: static regression vs. bootstrapped off-policy TD.

Every (config, seed) run is a pure function of its inputs. All randomness
comes from the seed's named streams (feature map, buffer, weights,
adapters, mask, minibatch noise).

Each step draws a minibatch of ``batch`` indices, but the forward pass is
run once over the 30-row feature table and per-sample residuals are summed
into the rows they index. Because the critic's output for a pair depends
only on that pair's features, this yields exactly the minibatch gradient
at a fraction of the cost.
"""

from __future__ import annotations

import copy
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .categorical import ValueSupport, c51_project, cross_entropy_loss, expectation, logits_to_probs
from .critics import ParamRegistry, build_toy_critic, lora_wrap, prune_wrap
from .hypersphere import ProjectionConfig, project_lora
from .linear import LoRAInit
from .optim import make_optimizer, polyak_update, post_update_hook
from .rng import stream
from .world import (
    ChainMDP,
    Policy,
    ReplayBuffer,
    build_feature_map,
    collect_buffer,
    exact_bellman_operator,
    pair_index,
    policy_values,
    solve_true_q,
    stationary_distribution,
)

REGIMES = ("static", "td")
CRITIC_KINDS = ("dense", "lora", "pruned", "nobase")
VARIANTS = ("nobase", "lora-nown", "pruned", "hypersphere-td")
TABLE8_RANKS = (1, 2, 4, 8, 16, 32, 64, 128, 256)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    regime: str = "td"
    critic_kind: str = "lora"
    rank: int = 1
    sparsity: float = 0.85
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    steps: int = 12000
    batch: int = 64
    lr: float = 1e-3
    tau: float = 0.02
    eval_every: int = 300
    buffer_size: int = 500
    hidden: int = 256
    feature_dim: int = 64
    num_states: int = 15
    gamma: float = 0.97
    p: float = 0.9
    boundary: str = "reflect"
    # None resolves per critic kind: zero-b for lora, normal-both for nobase/fresh bases
    init_mode: str | None = None
    alpha_lora: float | None = None
    base: str | None = None
    kappa: float = 0.5
    base_rank: int | None = None
    projection: str = "none"
    weight_decay: float = 0.0
    head: str = "scalar"
    num_atoms: int = 51
    v_min: float = -1.0
    v_max: float = 20.0
    sweep_ranks: list = field(default_factory=lambda: list(TABLE8_RANKS))

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.critic_kind not in CRITIC_KINDS:
            raise ConfigError(f"critic_kind must be one of {CRITIC_KINDS}, got {self.critic_kind!r}")
        if self.rank < 1:
            raise ConfigError("rank must be >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError("sparsity must lie in [0, 1)")
        if self.steps < 0 or self.eval_every < 1 or self.batch < 1:
            raise ConfigError("steps >= 0, eval_every >= 1 and batch >= 1 are required")
        if self.projection not in ("none", "project_lora"):
            raise ConfigError("projection must be 'none' or 'project_lora'")
        if self.projection == "project_lora" and self.critic_kind not in ("lora", "nobase"):
            raise ConfigError("project_lora needs a LoRA critic")
        if self.head not in ("scalar", "categorical"):
            raise ConfigError("head must be 'scalar' or 'categorical'")
        if self.base not in (None, "keep", "fresh", "none"):
            raise ConfigError("base must be keep, fresh or none")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        ChainMDP(self.num_states, 2, self.p, self.gamma, self.boundary)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return self.from_dict({**self.to_dict(), **changes})

    @property
    def mdp(self) -> ChainMDP:
        return ChainMDP(self.num_states, 2, self.p, self.gamma, self.boundary)

    def resolved_base(self) -> str:
        if self.base is not None:
            return self.base
        if self.critic_kind == "nobase":
            return "none"
        return "fresh" if self.projection == "project_lora" else "keep"

    def resolved_init(self) -> LoRAInit:
        mode = self.init_mode
        if mode is None:
            mode = "zero-b" if self.resolved_base() == "keep" else "normal-both"
        return LoRAInit(mode)


@dataclass(frozen=True)
class ToyWorld:
    """Everything exact about the chain for one seed."""

    mdp: ChainMDP
    target_policy: Policy
    behaviour_policy: Policy
    P: np.ndarray
    R: np.ndarray
    q_true: np.ndarray
    d_pi: np.ndarray
    features: np.ndarray
    buffer: ReplayBuffer

    @classmethod
    def build(cls, cfg: ExperimentConfig, seed: int) -> "ToyWorld":
        mdp = cfg.mdp
        pi, mu = Policy.always_right(mdp), Policy.uniform(mdp)
        return cls(
            mdp=mdp,
            target_policy=pi,
            behaviour_policy=mu,
            P=mdp.transition_model(),
            R=mdp.reward_table(),
            q_true=solve_true_q(mdp, pi),
            d_pi=stationary_distribution(mdp, pi),
            features=build_feature_map(mdp, cfg.feature_dim, seed).table,
            buffer=collect_buffer(mdp, mu, cfg.buffer_size, seed),
        )


@dataclass
class MetricTrace:
    seed: int
    label: str
    steps: list = field(default_factory=list)
    eps_q: list = field(default_factory=list)
    eps_b: list = field(default_factory=list)

    def record(self, step: int, eps_q: float, eps_b: float):
        self.steps.append(step)
        self.eps_q.append(eps_q)
        self.eps_b.append(eps_b)

    @property
    def final_eps_q(self) -> float:
        return self.eps_q[-1]

    def late_eps_b(self, frac: float = 0.1) -> float:
        """Mean Bellman residual over the last ``ceil(frac * n)`` evaluations."""
        k = max(1, math.ceil(frac * len(self.eps_b)))
        return float(np.mean(self.eps_b[-k:]))


def compute_metrics(q_table: np.ndarray, world: ToyWorld) -> tuple[float, float]:
    """True-Q error on ``d^pi`` and the RMS exact Bellman residual of ``q_table``.

    Uses only the exact model; never the replay buffer.
    """
    pi = world.target_policy
    err = policy_values(q_table, pi) - policy_values(world.q_true, pi)
    eps_q = math.sqrt(float(np.sum(world.d_pi * err ** 2)))
    residual = q_table - exact_bellman_operator(q_table, world.mdp, pi, world.P)
    eps_b = math.sqrt(float(np.mean(residual ** 2)))
    return eps_q, eps_b


def build_critic(cfg: ExperimentConfig, seed: int):
    dense = build_toy_critic(cfg.feature_dim, cfg.hidden, seed, cfg.head, cfg.num_atoms)
    if cfg.critic_kind == "dense":
        return dense
    if cfg.critic_kind == "pruned":
        return prune_wrap(dense, cfg.sparsity, seed)
    critic = lora_wrap(dense, cfg.rank, cfg.resolved_init(), cfg.kappa, cfg.base_rank,
                       base=cfg.resolved_base(), alpha=cfg.alpha_lora, seed=seed)
    if cfg.projection == "project_lora":
        for m in critic.maps():
            project_lora(m)
    return critic


class ToyRun:
    """One training run; exposes the critic so callers can inspect it."""

    def __init__(self, cfg: ExperimentConfig, seed: int, world: ToyWorld | None = None):
        self.cfg = cfg
        self.seed = seed
        self.world = world or ToyWorld.build(cfg, seed)
        self.critic = build_critic(cfg, seed)
        self.opt = make_optimizer(self.critic, cfg.lr, cfg.weight_decay)
        self.target = copy.deepcopy(self.critic) if cfg.regime == "td" else None
        self.support = ValueSupport(cfg.v_min, cfg.v_max, cfg.num_atoms)
        self._noise = stream(seed, "noise")
        self._online = ParamRegistry(self.critic).named
        if self.target is not None:
            self._target = ParamRegistry(self.target).named
        S, A = cfg.num_states, 2
        self._n_pairs = S * A
        buf = self.world.buffer
        self._buf_pairs = pair_index(buf.states, buf.actions)
        self._q_flat = self.world.q_true.reshape(-1)

    def q_table(self, critic=None) -> np.ndarray:
        out = (critic or self.critic).forward(self.world.features)
        if self.cfg.head == "categorical":
            out = expectation(logits_to_probs(out), self.support)
        return out.reshape(self.cfg.num_states, 2)

    def metrics(self) -> tuple[float, float]:
        return compute_metrics(self.q_table(), self.world)

    def _targets(self, rows):
        """Regression targets (scalar) or target distributions (categorical) for a batch."""
        cfg, world = self.cfg, self.world
        if cfg.regime == "static":
            y = self._q_flat[rows]
            if cfg.head == "scalar":
                return y
            point = np.zeros((len(y), self.support.num_atoms))
            point[:, 0] = 1.0
            return c51_project(point, y, 0.0, self.support)
        buf = world.buffer
        pi_next = world.target_policy.action_probs[buf.next_states[rows]]
        out = self.target.forward(world.features)
        if cfg.head == "scalar":
            q_next = np.sum(pi_next * out.reshape(cfg.num_states, 2)[buf.next_states[rows]], axis=1)
            return buf.rewards[rows] + cfg.gamma * q_next
        probs = logits_to_probs(out).reshape(cfg.num_states, 2, -1)[buf.next_states[rows]]
        mixed = np.einsum("ba,ban->bn", pi_next, probs)
        return c51_project(mixed, buf.rewards[rows], cfg.gamma, self.support)

    def step(self) -> float:
        """One optimizer step; returns the minibatch loss."""
        cfg = self.cfg
        if cfg.regime == "static":
            rows = self._noise.integers(self._n_pairs, size=cfg.batch)
            pairs = rows
        else:
            rows = self._noise.integers(len(self.world.buffer), size=cfg.batch)
            pairs = self._buf_pairs[rows]
        # targets are computed before the online forward and carry no gradient
        y = self._targets(rows)
        self.opt.zero_grad()
        out = self.critic.forward(self.world.features)
        if cfg.head == "scalar":
            residual = out[pairs] - y
            loss = 0.5 * float(np.mean(residual ** 2))
            grad = np.bincount(pairs, weights=residual, minlength=self._n_pairs) / cfg.batch
        else:
            loss, g_rows = cross_entropy_loss(out[pairs], y)
            grad = np.zeros_like(out)
            np.add.at(grad, pairs, g_rows)
        self.critic.backward(grad)
        self.opt.step()
        if cfg.projection != "none":
            post_update_hook(self.critic, cfg.projection, ProjectionConfig())
        if self.target is not None:
            polyak_update(self._target, self._online, cfg.tau)
        return loss

    def run(self, callback: Callable[["ToyRun", int], None] | None = None) -> MetricTrace:
        cfg = self.cfg
        trace = MetricTrace(self.seed, run_label(cfg))
        trace.record(0, *self.metrics())
        for t in range(1, cfg.steps + 1):
            self.step()
            if callback is not None:
                callback(self, t)
            if t % cfg.eval_every == 0:
                eq, eb = self.metrics()
                if not (math.isfinite(eq) and math.isfinite(eb)):
                    raise FloatingPointError(f"non-finite metrics at step {t}")
                trace.record(t, eq, eb)
        return trace


def run_label(cfg: ExperimentConfig) -> str:
    if cfg.critic_kind in ("lora", "nobase"):
        return f"{cfg.critic_kind}-r{cfg.rank}"
    if cfg.critic_kind == "pruned":
        return f"pruned-s{cfg.sparsity:g}"
    return "dense"


def run_static_regression(cfg: ExperimentConfig, seed: int, callback=None) -> MetricTrace:
    if cfg.regime != "static":
        raise ConfigError("run_static_regression needs regime='static'")
    return ToyRun(cfg, seed).run(callback)


def run_bootstrapped_td(cfg: ExperimentConfig, seed: int, callback=None) -> MetricTrace:
    if cfg.regime != "td":
        raise ConfigError("run_bootstrapped_td needs regime='td'")
    return ToyRun(cfg, seed).run(callback)


def run_experiment(cfg: ExperimentConfig, seed: int) -> MetricTrace:
    runner = run_static_regression if cfg.regime == "static" else run_bootstrapped_td
    return runner(cfg, seed)


def ablation_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    """Config for one of the ablation variants.

    ``lora-nown`` and ``hypersphere-td`` share a fresh base of row norm
    ``kappa`` with both factors random; they differ only in the projection.
    """
    if variant == "nobase":
        return cfg.replace(critic_kind="nobase", projection="none")
    if variant == "lora-nown":
        return cfg.replace(critic_kind="lora", base="fresh", projection="none")
    if variant == "pruned":
        return cfg.replace(critic_kind="pruned", projection="none")
    if variant == "hypersphere-td":
        return cfg.replace(regime="td", critic_kind="lora", base="fresh", projection="project_lora")
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


def run_ablation(cfg: ExperimentConfig, variant: str, seed: int, callback=None) -> MetricTrace:
    acfg = ablation_config(cfg, variant)
    trace = ToyRun(acfg, seed).run(callback)
    trace.label = variant
    return trace


@dataclass(frozen=True)
class SweepRow:
    regime: str
    critic: str
    rank: int
    seed: int
    final_eps_q: float
    late_eps_b: float

    @property
    def dense(self) -> bool:
        return self.critic == "dense"


def _sweep_task(args) -> tuple[dict, MetricTrace]:
    cfg_dict, seed = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    return cfg_dict, run_experiment(cfg, seed)


def sweep_configs(cfg: ExperimentConfig, ranks, regimes=REGIMES) -> list[ExperimentConfig]:
    out = []
    for regime in regimes:
        out.append(cfg.replace(regime=regime, critic_kind="dense"))
        for r in ranks:
            out.append(cfg.replace(regime=regime, critic_kind="lora", rank=int(r)))
    return out


def rank_sweep(cfg: ExperimentConfig, ranks=None, seeds=None, regimes=REGIMES,
               jobs: int = 1, traces: dict | None = None) -> list[SweepRow]:
    """Final metrics for dense and every LoRA rank, per regime and seed.

    Rows are sorted by (regime, dense first, rank, seed) whatever the
    completion order. If ``traces`` is given it is filled with the full
    :class:`MetricTrace` of every run keyed like the rows.
    """
    ranks = list(cfg.sweep_ranks if ranks is None else ranks)
    if not ranks:
        raise ConfigError("rank sweep needs at least one rank")
    seeds = list(cfg.seeds if seeds is None else seeds)
    tasks = [(c.to_dict(), s) for c in sweep_configs(cfg, ranks, regimes) for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_task, tasks))
    else:
        results = [_sweep_task(t) for t in tasks]
    rows = []
    for cfg_dict, trace in results:
        kind = cfg_dict["critic_kind"]
        rank = 0 if kind == "dense" else cfg_dict["rank"]
        row = SweepRow(cfg_dict["regime"], kind, rank, trace.seed,
                       trace.final_eps_q, trace.late_eps_b())
        rows.append(row)
        if traces is not None:
            traces[(row.regime, row.critic, row.rank, row.seed)] = trace
    rows.sort(key=lambda r: (r.regime, not r.dense, r.rank, r.seed))
    return rows


@dataclass(frozen=True)
class SweepSummary:
    regime: str
    critic: str
    rank: int
    n: int
    mean_eps_q: float
    std_eps_q: float
    mean_late_eps_b: float
    std_late_eps_b: float

    @property
    def dense(self) -> bool:
        return self.critic == "dense"


def summarize(rows: list[SweepRow]) -> list[SweepSummary]:
    """Mean and population standard deviation over seeds per (regime, critic, rank)."""
    groups: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        groups.setdefault((r.regime, r.critic, r.rank), []).append(r)
    out = []
    for (regime, critic, rank), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1] != "dense", kv[0][2])):
        q = np.array([r.final_eps_q for r in rs])
        b = np.array([r.late_eps_b for r in rs])
        out.append(SweepSummary(regime, critic, rank, len(rs), float(q.mean()), float(q.std()),
                                float(b.mean()), float(b.std())))
    return out
