"""Task proposal and filtering, memory-building rollouts, JSONL persistence.

File formats (one JSON object per line):

* ``tasks.jsonl``: ``Task.to_dict()`` records.
* ``candidates.jsonl``: ``{"task": ..., "rollout_successes": n, "rollout_total": m}``;
  bare task records are accepted too.
* ``trajectories.jsonl``: ``Trajectory.to_dict()`` records.
* ``filter_report.jsonl``: a ``{"proposed", "kept", "n"}`` header line, then
  one ``{"task_id", "successes", "total", "kept"}`` line per candidate.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .agent_core import (
    ActorPort,
    EpisodeLimits,
    PlannerPort,
    ScriptedActor,
    ScriptedPlanner,
    Trajectory,
    format_plan_output,
    run_episode,
)
from .env_sim import DIFFICULTIES, Condition, Page, Task, World, WorldSpec, render_tree, validate_task
from .memory import MemoryBank, MemoryManager, SummarizerPort, ScriptedSummarizer, ingest_successes
from .model_client import ChatMessage

logger = logging.getLogger(__name__)

DEFAULT_K = 10
DEFAULT_N = 6


class RecordError(ValueError):
    """A persisted record could not be read; message names file and line."""


# --------------------------------------------------------------------------
# Proposal
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskCandidate:
    task: Task
    rollout_successes: int = 0
    rollout_total: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.rollout_successes <= self.rollout_total:
            raise ValueError("need 0 <= successes <= total")

    @property
    def success_rate(self) -> float:
        return self.rollout_successes / self.rollout_total if self.rollout_total else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {"task": self.task.to_dict(), "rollout_successes": self.rollout_successes,
                "rollout_total": self.rollout_total}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TaskCandidate":
        if "task" not in d:
            return cls(Task.from_dict(d))
        return cls(Task.from_dict(d["task"]), int(d.get("rollout_successes", 0)),
                   int(d.get("rollout_total", 0)))


def _page(spec: WorldSpec, page_id: str) -> Page:
    for page in spec.pages:
        if page.page_id == page_id:
            return page
    raise KeyError(f"world {spec.name!r} has no page {page_id!r}")


@dataclass(frozen=True)
class PageContext:
    world: str
    page_id: str
    tree_text: str
    domain_tag: str = "general"

    @classmethod
    def of(cls, spec: WorldSpec, page_id: str | None = None, domain_tag: str | None = None) -> "PageContext":
        page_id = page_id or spec.start_page
        page = _page(spec, page_id)
        tag = domain_tag or (spec.tasks[0].domain_tag if spec.tasks else "general")
        return cls(spec.name, page_id, render_tree(page), tag)


@dataclass
class ProposalRequest:
    context: PageContext
    k: int

    @cached_property
    def messages(self) -> list[ChatMessage]:
        system = ("You write web-navigation tasks. Reply with one JSON object per line, "
                  'each with keys "instruction", "goal", "difficulty" (easy, medium or hard).')
        user = f"Page {self.context.page_id}:\n{self.context.tree_text}\n\nPropose {self.k} tasks."
        return [ChatMessage("system", (system,)), ChatMessage("user", (user,))]


class ProposerPort(Protocol):
    def respond(self, request: ProposalRequest) -> str: ...


class ScriptedProposer:
    """Template tasks from the interactive elements of one page.

    Links and buttons give click tasks, inputs give typing tasks, and selects
    give one task per option, in document order.
    """

    def __init__(self, spec: WorldSpec):
        self.spec = spec

    def candidates(self, page_id: str) -> list[dict[str, Any]]:
        out = []
        for _, el in _page(self.spec, page_id).root.walk():
            label = el.label or f"element {el.element_id}"
            if el.kind == "link" and el.target:
                out.append({"instruction": f"Open {label}.", "difficulty": "easy",
                            "goal": [{"type": "page_reached", "page_id": el.target}]})
            elif el.kind in ("button", "link"):
                out.append({"instruction": f"Press {label}.", "difficulty": "easy",
                            "goal": [{"type": "element_clicked", "element_id": el.element_id}]})
            elif el.kind == "input":
                out.append({"instruction": f"Enter 'test' in {label}.", "difficulty": "medium",
                            "goal": [{"type": "element_value_equals", "element_id": el.element_id,
                                      "value": "test"}]})
            elif el.kind == "select":
                for opt in el.options:
                    out.append({"instruction": f"Set {label} to {opt}.", "difficulty": "medium",
                                "goal": [{"type": "element_value_equals", "element_id": el.element_id,
                                          "value": opt}]})
        return out

    def respond(self, request: ProposalRequest) -> str:
        rows = self.candidates(request.context.page_id)[: request.k]
        return "\n".join(json.dumps(r) for r in rows)


def parse_candidate_line(line: str, task_id: str, domain_tag: str) -> Task:
    data = json.loads(line)
    if not isinstance(data, dict):
        raise ValueError("not a JSON object")
    if not str(data.get("instruction", "")).strip():
        raise ValueError("empty instruction")
    goal = data.get("goal")
    if not isinstance(goal, list) or not goal:
        raise ValueError("goal must be a non-empty list")
    return Task(task_id=task_id, instruction=str(data["instruction"]).strip(),
                goal=tuple(Condition.from_dict(c) for c in goal),
                domain_tag=str(data.get("domain_tag", domain_tag)),
                # stored verbatim; labels carry no semantics here
                difficulty=str(data.get("difficulty", "medium")))


def propose_tasks(page_context: PageContext, proposer: ProposerPort, k: int = DEFAULT_K,
                  id_prefix: str = "C") -> list[TaskCandidate]:
    """Up to ``k`` candidates; unparseable proposer lines are skipped with a warning."""
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        return []
    text = proposer.respond(ProposalRequest(page_context, k))
    out: list[TaskCandidate] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if len(out) == k:
            break
        try:
            task = parse_candidate_line(line, f"{id_prefix}{len(out) + 1}", page_context.domain_tag)
        except (ValueError, KeyError, TypeError) as exc:
            logger.warning("proposal line %d skipped: %s", lineno, exc)
            continue
        if task.difficulty not in DIFFICULTIES:
            logger.info("proposal line %d: nonstandard difficulty %r kept", lineno, task.difficulty)
        out.append(TaskCandidate(task))
    return out


# --------------------------------------------------------------------------
# Filtering
# --------------------------------------------------------------------------


class RolloutAgent(Protocol):
    def rollout(self, spec: WorldSpec, task: Task, rng: np.random.Generator) -> bool: ...


class _StopPlanner:
    def respond(self, request: Any) -> str:
        return format_plan_output(["Give up"], "STOP")


@dataclass
class StackAgent:
    """Runs a full Planner/Actor episode; success is the episode's goal check.

    ``planner_factory(spec, rng)`` builds a fresh planner per rollout.
    """

    planner_factory: Callable[[WorldSpec, np.random.Generator], PlannerPort] = (
        lambda spec, rng: ScriptedPlanner(spec=spec))
    actor: ActorPort = field(default_factory=ScriptedActor)
    memory_mgr: MemoryManager | None = None
    limits: EpisodeLimits = EpisodeLimits()
    clock: Callable[[], float] = time.perf_counter

    def episode(self, spec: WorldSpec, task: Task, rng: np.random.Generator) -> Trajectory:
        planner = self.planner_factory(spec, rng)
        return run_episode(World.from_spec(spec), task, planner, self.actor, self.memory_mgr,
                           self.limits, self.clock)

    def rollout(self, spec: WorldSpec, task: Task, rng: np.random.Generator) -> bool:
        return self.episode(spec, task, rng).success


@dataclass
class BernoulliAgent:
    """Attempts the goal-directed script with probability ``p``, else stops at once."""

    p: float = 0.5
    limits: EpisodeLimits = EpisodeLimits()

    def rollout(self, spec: WorldSpec, task: Task, rng: np.random.Generator) -> bool:
        planner = ScriptedPlanner(spec=spec) if rng.random() < self.p else _StopPlanner()
        traj = run_episode(World.from_spec(spec), task, planner, ScriptedActor(), None, self.limits)
        return traj.success


@dataclass
class FilterReport:
    proposed: int
    kept: int
    n: int
    rates: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kept > self.proposed:
            raise ValueError("kept > proposed")

    def rate(self, task_id: str) -> float:
        s, t = self.rates[task_id]
        return s / t if t else 0.0

    def to_lines(self) -> list[str]:
        lines = [json.dumps({"proposed": self.proposed, "kept": self.kept, "n": self.n})]
        for tid, (s, t) in self.rates.items():
            lines.append(json.dumps({"task_id": tid, "successes": s, "total": t, "kept": s > 0}))
        return lines

    def table(self) -> str:
        width = max([len(t) for t in self.rates] + [4])
        rows = [f"{'task':<{width}}  succ/total  kept"]
        rows += [f"{tid:<{width}}  {s:>4}/{t:<5}  {'yes' if s else 'no'}"
                 for tid, (s, t) in self.rates.items()]
        rows.append(f"kept {self.kept} of {self.proposed}")
        return "\n".join(rows)


def _rollout_rng(seed: int, cand: int, i: int) -> np.random.Generator:
    # rollout i of candidate j does not depend on N, so larger N is a superset
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(cand, i)))


def filter_tasks(candidates: Sequence[TaskCandidate], world_spec: WorldSpec,
                 rollout_agent: RolloutAgent | None = None, n: int = DEFAULT_N, seed: int = 0,
                 jobs: int = 1, allow: Iterable[str] | None = None,
                 deny: Iterable[str] | None = None) -> tuple[list[Task], FilterReport]:
    """Keep candidates with at least one successful rollout out of ``n``.

    ``allow``/``deny`` stand in for manual review: denied ids are dropped
    and, when an allow list is given, ids outside it are dropped. Reviewed
    drops still appear in the report with their rates.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    agent = rollout_agent or StackAgent()
    allow_set = set(allow) if allow is not None else None
    deny_set = set(deny or ())

    def run(j: int, cand: TaskCandidate) -> int:
        try:
            validate_task(world_spec, cand.task)
        except Exception as exc:
            logger.warning("candidate %s references missing elements: %s", cand.task.task_id, exc)
            return 0
        wins = 0
        for i in range(n):
            try:
                wins += bool(agent.rollout(world_spec, cand.task, _rollout_rng(seed, j, i)))
            except Exception as exc:  # a crash is a failed rollout
                logger.warning("rollout %d of %s crashed: %s", i, cand.task.task_id, exc)
        return wins

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            wins = list(pool.map(run, range(len(candidates)), candidates))
    else:
        wins = [run(j, c) for j, c in enumerate(candidates)]

    kept, rates = [], {}
    for cand, w in zip(candidates, wins):
        tid = cand.task.task_id
        rates[tid] = (w, n)
        reviewed_out = tid in deny_set or (allow_set is not None and tid not in allow_set)
        if w > 0 and not reviewed_out:
            kept.append(cand.task)
    return kept, FilterReport(len(candidates), len(kept), n, rates)


def read_review_list(path: str | Path) -> list[str]:
    """Task ids, one per line; blank lines and ``#`` comments ignored."""
    lines = Path(path).read_text().splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


# --------------------------------------------------------------------------
# Memory construction
# --------------------------------------------------------------------------


def collect_memory(spec: WorldSpec, tasks: Sequence[Task], agent: StackAgent | None = None,
                   summarizer: SummarizerPort | None = None, rollouts_per_task: int = 1,
                   dim: int = 64, seed: int = 0) -> tuple[MemoryBank, list[Trajectory]]:
    """Roll out each task and ingest the successful trajectories into a new bank."""
    agent = agent or StackAgent()
    summarizer = summarizer or ScriptedSummarizer()
    bank = MemoryBank(dim=dim)
    trajs = []
    for j, task in enumerate(tasks):
        for i in range(rollouts_per_task):
            trajs.append(agent.episode(spec, task, _rollout_rng(seed, j, i)))
    ingest_successes(bank, trajs, summarizer)
    return bank, trajs


# --------------------------------------------------------------------------
# JSONL persistence
# --------------------------------------------------------------------------


def _write_jsonl(rows: Iterable[Mapping[str, Any]], path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: str | Path, decode: Callable[[Any], Any]) -> list[Any]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(decode(json.loads(line)))
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise RecordError(f"{path}: line {lineno}: {exc}") from None
    return out


def save_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> None:
    _write_jsonl((t.to_dict() for t in trajs), path)


def load_trajectories(path: str | Path) -> list[Trajectory]:
    return _read_jsonl(path, Trajectory.from_dict)


def save_tasks(tasks: Iterable[Task], path: str | Path) -> None:
    _write_jsonl((t.to_dict() for t in tasks), path)


def load_tasks(path: str | Path) -> list[Task]:
    return _read_jsonl(path, Task.from_dict)


def save_candidates(cands: Iterable[TaskCandidate], path: str | Path) -> None:
    _write_jsonl((c.to_dict() for c in cands), path)


def load_candidates(path: str | Path) -> list[TaskCandidate]:
    return _read_jsonl(path, TaskCandidate.from_dict)


def save_filter_report(report: FilterReport, path: str | Path) -> None:
    Path(path).write_text("\n".join(report.to_lines()) + "\n")


def load_filter_report(path: str | Path) -> FilterReport:
    rows = _read_jsonl(path, lambda d: d)
    if not rows:
        raise RecordError(f"{path}: line 1: missing header")
    rates = {}
    for lineno, r in enumerate(rows[1:], start=2):
        try:
            rates[str(r["task_id"])] = (int(r["successes"]), int(r["total"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise RecordError(f"{path}: line {lineno}: {exc}") from None
    try:
        head = rows[0]
        return FilterReport(int(head["proposed"]), int(head["kept"]), int(head["n"]), rates)
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"{path}: line 1: {exc}") from None
