"""Planner-only GRPO on a trainable plan-template policy.

The policy is a softmax over plan templates with a logit row per context,
where a context is (task domain tag, bucket of the top retrieved memory's
keywords). Only the Planner is trained; Actor, memory and judge are frozen.

For a batch of rollout groups the objective is

    J = sum_j w_j * (rho_j * A_j - beta * KL(pi(.|c_j) || pi_ref(.|c_j)))

with rho_j = pi(a_j|c_j) / pi_old(a_j|c_j), group-normalized advantages
A_j broadcast from the trajectory to each of its planning decisions, and
w_j = 1/N (uniform over decisions) or per-trajectory weights. Gradients are
analytic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .agent_core import (
    ActorPort,
    EpisodeLimits,
    ScriptedActor,
    ScriptedPlanner,
    Trajectory,
    format_plan_output,
    run_episode,
)
from .env_sim import Task, World, WorldSpec
from .judge import JudgePort, RewardRecord, ScriptedJudge, judge_trajectory
from .memory import MemoryContext, MemoryManager, MemoryBank, NullGate, ScriptedSummarizer, ingest_successes

logger = logging.getLogger(__name__)

RATIO_MIN, RATIO_MAX = 1e-8, 1e8
STD_EPS = 1e-12
# Reference learning rate for LLM-scale planner training. The template policy
# here uses TrainConfig.learning_rate instead.
LLM_REFERENCE_LR = 2e-6


class GroupNotNormalizedError(ValueError):
    pass


class TemplateMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PlanTemplate:
    name: str
    plan: tuple[str, ...]
    subgoals: tuple[str, ...]

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PlanTemplate":
        return cls(str(d["name"]), tuple(d["plan"]), tuple(d["subgoals"]))

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "plan": list(self.plan), "subgoals": list(self.subgoals)}


def keyword_bucket(keywords: Sequence[str], n_buckets: int) -> int:
    digest = hashlib.blake2b(" ".join(keywords).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") % n_buckets


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class PolicyParams:
    """Logit table over templates. Row index = domain * (n_buckets + 1) + bucket,
    with an extra trailing domain for unknown tags and bucket ``n_buckets``
    meaning "no memory retrieved"."""

    templates: tuple[PlanTemplate, ...]
    logits: np.ndarray
    domains: tuple[str, ...] = ()
    n_buckets: int = 8
    temperature: float = 0.5

    def __post_init__(self) -> None:
        if not self.templates:
            raise ValueError("need at least one template")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        shape = (self.n_contexts, len(self.templates))
        if self.logits.shape != shape:
            raise ValueError(f"logits must have shape {shape}, got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits must be finite")

    @classmethod
    def uniform(cls, templates: Sequence[PlanTemplate], domains: Sequence[str] = (),
                n_buckets: int = 8, temperature: float = 0.5) -> "PolicyParams":
        n_ctx = (len(domains) + 1) * (n_buckets + 1)
        return cls(tuple(templates), np.zeros((n_ctx, len(templates))), tuple(domains),
                   n_buckets, temperature)

    @property
    def n_contexts(self) -> int:
        return (len(self.domains) + 1) * (self.n_buckets + 1)

    def context_index(self, domain_tag: str, memory: MemoryContext | None = None) -> int:
        d = self.domains.index(domain_tag) if domain_tag in self.domains else len(self.domains)
        if memory is None or not memory.discrete:
            b = self.n_buckets
        else:
            b = keyword_bucket(memory.discrete[0].keywords, self.n_buckets)
        return d * (self.n_buckets + 1) + b

    def log_probs(self, context: int | np.ndarray) -> np.ndarray:
        return log_softmax(self.logits[context] / self.temperature)

    def probs(self, context: int | np.ndarray) -> np.ndarray:
        return np.exp(self.log_probs(context))

    def with_logits(self, logits: np.ndarray) -> "PolicyParams":
        return replace(self, logits=np.array(logits, dtype=float))

    def to_dict(self) -> dict[str, Any]:
        return {
            "templates": [t.to_dict() for t in self.templates],
            "domains": list(self.domains),
            "n_buckets": self.n_buckets,
            "temperature": self.temperature,
            "logits": [[float(x) for x in row] for row in self.logits],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PolicyParams":
        return cls(tuple(PlanTemplate.from_dict(t) for t in d["templates"]),
                   np.array(d["logits"], dtype=float), tuple(d["domains"]),
                   int(d["n_buckets"]), float(d["temperature"]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PolicyParams):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PolicyParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


def templates_from_spec(spec: WorldSpec) -> list[PlanTemplate]:
    if not spec.plan_templates:
        raise ValueError(f"world {spec.name!r} declares no plan_templates")
    return [PlanTemplate.from_dict(t) for t in spec.plan_templates]


class PolicyPlanner:
    """Planner port backed by a ``PolicyParams``; one instance per episode.

    A template is sampled at the first planning step and again whenever the
    context row changes (e.g. after a memory update). Otherwise the planner
    keeps its plan and hands out the template's next scheduled subgoal.
    Sampled decisions are recorded in ``decisions``.
    """

    def __init__(self, policy: PolicyParams, rng: np.random.Generator, greedy: bool = False):
        self.policy = policy
        self.rng = rng
        self.greedy = greedy
        self.decisions: list[dict[str, Any]] = []
        self._template: int | None = None
        self._context: int | None = None

    def respond(self, request: Any) -> str:
        c = self.policy.context_index(request.task.domain_tag, request.memory)
        if self._template is None or c != self._context:
            logp = self.policy.log_probs(c)
            if self.greedy:
                z = int(np.argmax(logp))
            else:
                z = int(self.rng.choice(len(logp), p=np.exp(logp)))
            self.decisions.append({"step": request.step_index, "context": int(c), "template": z,
                                   "logprob": float(logp[z])})
            self._template, self._context = z, c
        tmpl = self.policy.templates[self._template]
        t = request.step_index
        return format_plan_output(tmpl.plan, tmpl.subgoals[t] if t < len(tmpl.subgoals) else "STOP")


# --------------------------------------------------------------------------
# Groups and advantages
# --------------------------------------------------------------------------


@dataclass
class RolloutGroup:
    task: Task
    trajectories: list[Trajectory]
    rewards: list[float]
    old_logprobs: list[list[float]]
    records: list[RewardRecord | None] = field(default_factory=list)
    advantages: list[float] | None = None

    def __post_init__(self) -> None:
        n = len(self.trajectories)
        if len(self.rewards) != n or len(self.old_logprobs) != n:
            raise ValueError("rewards, old_logprobs and trajectories must have equal length")

    @property
    def size(self) -> int:
        return len(self.trajectories)

    def step_rewards(self) -> list[list[float]]:
        """Trajectory reward broadcast to each of its planning decisions."""
        return [[r] * len(lps) for r, lps in zip(self.rewards, self.old_logprobs)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.to_dict(),
            "trajectories": [t.to_dict() for t in self.trajectories],
            "rewards": list(self.rewards),
            "old_logprobs": self.old_logprobs,
            "records": [None if r is None else r.to_dict() for r in self.records],
            "advantages": self.advantages,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RolloutGroup":
        return cls(Task.from_dict(d["task"]), [Trajectory.from_dict(t) for t in d["trajectories"]],
                   list(d["rewards"]), [list(x) for x in d["old_logprobs"]],
                   [None if r is None else RewardRecord.from_dict(r) for r in d.get("records", [])],
                   d.get("advantages"))


def normalize_advantages(rewards: Sequence[float], population: bool = True) -> list[float]:
    """(r - mean) / std over the group; all zeros when the group is tied."""
    r = np.asarray(rewards, dtype=float)
    if r.size < 2:
        raise ValueError("group size must be >= 2")
    std = r.std(ddof=0 if population else 1)
    if std < STD_EPS:
        return [0.0] * r.size
    return list((r - r.mean()) / std)


def importance_ratio(logp_new: float, logp_old: float) -> float:
    raw = math.exp(min(max(logp_new - logp_old, -700.0), 700.0))
    ratio = min(max(raw, RATIO_MIN), RATIO_MAX)
    if ratio != raw:
        logger.info("importance ratio %g clamped to %g", raw, ratio)
    return ratio


def _check_templates(policy: PolicyParams, ref: PolicyParams) -> None:
    if policy.templates != ref.templates or policy.logits.shape != ref.logits.shape:
        raise TemplateMismatchError("policies do not share a template set / context layout")


def kl_divergence(policy: PolicyParams, ref_policy: PolicyParams, context: int) -> float:
    _check_templates(policy, ref_policy)
    logp = policy.log_probs(context)
    logq = ref_policy.log_probs(context)
    return float(np.sum(np.exp(logp) * (logp - logq)))


def categorical_kl(p: Sequence[float], q: Sequence[float]) -> float:
    """KL(p || q) for explicit probability vectors, in log space."""
    lp, lq = np.log(np.asarray(p, float)), np.log(np.asarray(q, float))
    return float(np.sum(np.exp(lp) * (lp - lq)))


@dataclass
class Experiences:
    contexts: np.ndarray
    actions: np.ndarray
    old_logprobs: np.ndarray
    advantages: np.ndarray
    weights: np.ndarray


def gather_experiences(groups: Sequence[RolloutGroup], weighting: str = "step") -> Experiences:
    ctx, act, old, adv, traj_id = [], [], [], [], []
    tid = 0
    for g in groups:
        if g.advantages is None:
            raise GroupNotNormalizedError("group advantages are not populated")
        for traj, lps, a in zip(g.trajectories, g.old_logprobs, g.advantages):
            if len(traj.decisions) != len(lps):
                raise ValueError("decisions and old_logprobs disagree")
            for d, lp in zip(traj.decisions, lps):
                ctx.append(d["context"])
                act.append(d["template"])
                old.append(lp)
                adv.append(a)
                traj_id.append(tid)
            tid += 1
    n = len(ctx)
    if weighting == "step":
        w = np.full(n, 1.0 / n) if n else np.zeros(0)
    elif weighting == "trajectory":
        ids = np.asarray(traj_id)
        counts = np.bincount(ids) if n else np.zeros(0)
        n_traj = int(np.count_nonzero(counts))
        w = 1.0 / (n_traj * counts[ids]) if n else np.zeros(0)
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    return Experiences(np.asarray(ctx, dtype=int), np.asarray(act, dtype=int),
                       np.asarray(old, dtype=float), np.asarray(adv, dtype=float), w)


def grpo_objective(groups: RolloutGroup | Sequence[RolloutGroup], policy: PolicyParams,
                   ref_policy: PolicyParams, beta: float, clip_eps: float | None = None,
                   weighting: str = "step") -> tuple[float, np.ndarray]:
    """Objective value and its gradient with respect to ``policy.logits``."""
    if isinstance(groups, RolloutGroup):
        groups = [groups]
    _check_templates(policy, ref_policy)
    ex = gather_experiences(groups, weighting)
    grad = np.zeros_like(policy.logits)
    if ex.contexts.size == 0:
        return 0.0, grad
    T = policy.temperature
    logp = log_softmax(policy.logits[ex.contexts] / T)  # (N, M)
    logq = log_softmax(ref_policy.logits[ex.contexts] / ref_policy.temperature)
    p = np.exp(logp)
    rows = np.arange(ex.contexts.size)
    onehot = np.zeros_like(p)
    onehot[rows, ex.actions] = 1.0

    log_ratio = np.clip(logp[rows, ex.actions] - ex.old_logprobs, -700.0, 700.0)
    raw = np.exp(log_ratio)
    rho = np.clip(raw, RATIO_MIN, RATIO_MAX)
    live = (rho == raw).astype(float)  # clamped ratios carry no gradient
    if np.any(live == 0):
        logger.info("%d importance ratios clamped", int(np.sum(live == 0)))

    surrogate = rho * ex.advantages
    d_surrogate = (live * rho * ex.advantages)[:, None] * (onehot - p)
    if clip_eps is not None:
        clipped = np.clip(rho, 1.0 - clip_eps, 1.0 + clip_eps) * ex.advantages
        use_clip = clipped < surrogate
        surrogate = np.where(use_clip, clipped, surrogate)
        frozen = use_clip & ((rho < 1.0 - clip_eps) | (rho > 1.0 + clip_eps))
        d_surrogate[frozen] = 0.0

    kl = np.sum(p * (logp - logq), axis=1)
    d_kl = p * (logp - logq - kl[:, None])

    objective = float(np.sum(ex.weights * (surrogate - beta * kl)))
    d_z = ex.weights[:, None] * (d_surrogate - beta * d_kl)
    np.add.at(grad, ex.contexts, d_z / T)
    return objective, grad


def mean_visited_kl(groups: Sequence[RolloutGroup], policy: PolicyParams, ref_policy: PolicyParams) -> float:
    ctx = [d["context"] for g in groups for t in g.trajectories for d in t.decisions]
    if not ctx:
        return 0.0
    return float(np.mean([kl_divergence(policy, ref_policy, c) for c in ctx]))


def update_policy(policy: PolicyParams, gradient: np.ndarray, learning_rate: float) -> PolicyParams:
    """One gradient-ascent step on the logits; returns a new policy."""
    if gradient.shape != policy.logits.shape:
        raise ValueError(f"gradient shape {gradient.shape} != logits shape {policy.logits.shape}")
    return policy.with_logits(policy.logits + learning_rate * gradient)


# --------------------------------------------------------------------------
# Rollout collection and training
# --------------------------------------------------------------------------


def _failed_trajectory(task: Task, spec: WorldSpec, exc: Exception) -> Trajectory:
    return Trajectory(task=task, world=spec.name, termination="planner_error",
                      error=f"{type(exc).__name__}: {exc}", goal_progress=(0, len(task.goal)))


def collect_group(world_spec: WorldSpec, task: Task, policy: PolicyParams, actor: ActorPort,
                  memory_mgr: MemoryManager | None, judge: JudgePort, group_size: int,
                  rng: np.random.Generator, k_votes: int = 3,
                  limits: EpisodeLimits = EpisodeLimits(), jobs: int = 1) -> RolloutGroup:
    """G independent episodes of ``task`` under ``policy``, each judged by K votes."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    child_rngs = rng.spawn(group_size)

    def one(i: int) -> tuple[Trajectory, float, RewardRecord | None]:
        planner = PolicyPlanner(policy, child_rngs[i])
        try:
            traj = run_episode(World.from_spec(world_spec), task, planner, actor, memory_mgr, limits)
        except Exception as exc:  # a crashed episode is a failed, reward-1 rollout
            logger.warning("episode %d of %s crashed: %s", i, task.task_id, exc)
            traj = _failed_trajectory(task, world_spec, exc)
            traj.decisions = planner.decisions
            return traj, 1.0, None
        traj.decisions = planner.decisions
        record = judge_trajectory(traj, judge, k_votes)
        return traj, float(record.reward), record

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, range(group_size)))
    else:
        results = [one(i) for i in range(group_size)]
    trajs = [r[0] for r in results]
    return RolloutGroup(task, trajs, [r[1] for r in results],
                        [[d["logprob"] for d in t.decisions] for t in trajs], [r[2] for r in results])


@dataclass
class TrainConfig:
    group_size: int = 8
    batch_tasks: int = 6
    kl_coeff: float = 0.1
    learning_rate: float = 0.2
    temperature: float = 0.5
    iterations: int = 500
    ref_refresh_every: int = 0  # 0 keeps the initial reference policy
    judge_votes: int = 3
    clip_eps: float | None = None
    weighting: str = "step"
    population_std: bool = True
    n_buckets: int = 8
    max_steps: int = 15
    seed: int = 0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.kl_coeff < 0:
            raise ValueError("kl_coeff must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")


@dataclass
class IterationStats:
    iteration: int
    mean_reward: float
    mean_kl: float
    success_rate: float
    grad_norm: float
    objective: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainReport:
    config: TrainConfig
    iterations: list[IterationStats] = field(default_factory=list)
    policy: PolicyParams | None = None

    @property
    def mean_reward(self) -> list[float]:
        return [s.mean_reward for s in self.iterations]

    @property
    def success_rate(self) -> list[float]:
        return [s.success_rate for s in self.iterations]

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"config": asdict(self.config)}, sort_keys=True)]
        lines += [json.dumps(s.to_dict(), sort_keys=True) for s in self.iterations]
        return lines

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrainReport":
        lines = Path(path).read_text().splitlines()
        if not lines:
            raise ValueError(f"{path}: line 1: empty report")
        try:
            config = TrainConfig(**json.loads(lines[0])["config"])
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}: line 1: {exc}") from None
        rows = []
        for lineno, line in enumerate(lines[1:], start=2):
            try:
                rows.append(IterationStats(**json.loads(line)))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
        return cls(config, rows)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainReport):
            return NotImplemented
        return self.to_lines() == other.to_lines()

    def table(self, every: int = 50) -> str:
        out = ["iter  reward  success      kl  |grad|"]
        for s in self.iterations:
            if s.iteration % every == 0 or s.iteration == len(self.iterations) - 1:
                out.append(f"{s.iteration:4d}  {s.mean_reward:6.3f}  {s.success_rate:7.3f}  "
                           f"{s.mean_kl:6.3f}  {s.grad_norm:6.3f}")
        return "\n".join(out)


def build_task_memory(world_spec: WorldSpec, tasks: Sequence[Task], dim: int = 64) -> MemoryBank:
    """Bank of scripted-solution trajectories for tasks that ship a solution."""
    bank = MemoryBank(dim=dim)
    trajs = [run_episode(World.from_spec(world_spec), task, ScriptedPlanner(), ScriptedActor())
             for task in tasks if task.solution]
    ingest_successes(bank, trajs, ScriptedSummarizer())
    return bank


def default_policy(world_spec: WorldSpec, tasks: Sequence[Task], config: TrainConfig) -> PolicyParams:
    domains = sorted({t.domain_tag for t in tasks})
    return PolicyParams.uniform(templates_from_spec(world_spec), domains, config.n_buckets,
                                config.temperature)


def train_planner(world_spec: WorldSpec, tasks: Sequence[Task], config: TrainConfig,
                  actor: ActorPort | None = None, memory_mgr: MemoryManager | None = None,
                  judge: JudgePort | None = None, policy: PolicyParams | None = None,
                  jobs: int = 1) -> TrainReport:
    """GRPO loop: sample tasks, collect groups, normalize, one ascent step."""
    if not tasks:
        raise ValueError("no tasks to train on")
    rng = np.random.default_rng(config.seed)
    actor = actor or ScriptedActor()
    judge = judge or ScriptedJudge()
    if memory_mgr is None:
        memory_mgr = MemoryManager(build_task_memory(world_spec, tasks), NullGate(), update_every=0)
    policy = policy or default_policy(world_spec, tasks, config)
    ref_policy = policy
    limits = EpisodeLimits(max_steps=config.max_steps)
    report = TrainReport(config)

    for it in range(config.iterations):
        if config.ref_refresh_every and it and it % config.ref_refresh_every == 0:
            ref_policy = policy
        old_policy = policy  # immutable snapshot used for sampling
        picks = rng.choice(len(tasks), size=min(config.batch_tasks, len(tasks)), replace=False)
        groups = []
        for idx in picks:
            g = collect_group(world_spec, tasks[int(idx)], old_policy, actor, memory_mgr, judge,
                              config.group_size, rng, config.judge_votes, limits, jobs)
            g.advantages = normalize_advantages(g.rewards, config.population_std)
            groups.append(g)
        objective, grad = grpo_objective(groups, policy, ref_policy, config.kl_coeff,
                                         config.clip_eps, config.weighting)
        trajs = [t for g in groups for t in g.trajectories]
        report.iterations.append(IterationStats(
            iteration=it,
            mean_reward=float(np.mean([r for g in groups for r in g.rewards])),
            mean_kl=mean_visited_kl(groups, policy, ref_policy),
            success_rate=float(np.mean([t.success for t in trajs])),
            grad_norm=float(np.linalg.norm(grad)),
            objective=objective,
        ))
        policy = update_policy(policy, grad, config.learning_rate)
    report.policy = policy
    return report


def evaluate_policy(world_spec: WorldSpec, tasks: Sequence[Task], policy: PolicyParams,
                    episodes_per_task: int, rng: np.random.Generator, actor: ActorPort | None = None,
                    memory_mgr: MemoryManager | None = None) -> float:
    """Success rate of sampled episodes under ``policy``."""
    actor = actor or ScriptedActor()
    if memory_mgr is None:
        memory_mgr = MemoryManager(build_task_memory(world_spec, tasks), NullGate(), update_every=0)
    wins = 0
    for task in tasks:
        for child in rng.spawn(episodes_per_task):
            traj = run_episode(World.from_spec(world_spec), task, PolicyPlanner(policy, child),
                               actor, memory_mgr)
            wins += traj.success
    return wins / (len(tasks) * episodes_per_task)
