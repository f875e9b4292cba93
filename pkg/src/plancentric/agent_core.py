"""Planner / Actor / Memory Manager orchestration loop.

Each step: the memory session supplies the current context, the Planner
returns a plan and focused subgoal, the Actor turns the subgoal into one
action, the environment executes it, and the memory gate decides whether
to refresh the context. Episodes end on a Stop action, a ``STOP`` subgoal,
or the step limit.

Ports are plain objects with ``respond(request) -> str``. Requests carry the
structured inputs and render their prompt lazily through ``.messages``, so
scripted ports never pay for prompt rendering.
"""

from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Mapping, Protocol, Sequence

from .env_sim import (
    Action,
    MalformedActionError,
    Observation,
    Task,
    World,
    WorldSpec,
    derive_solution,
    goal_progress,
    reset,
    step_detailed,
)
from .memory import MemoryContext, MemoryManager, empty_context
from .model_client import ChatMessage, render_prompt

logger = logging.getLogger(__name__)

MAX_STEPS = 15
HISTORY_K = 5

ACTION_SPACE_TEXT = """\
Click(element_id): Click on the element identified by its index in the accessibility tree.
Type(element_id, "text"): Enter text into the specified input field.
Scroll(direction, amount): Scroll the page up or down by a number of rows.
Select(element_id, "option"): Choose an option from a dropdown menu.
Stop("answer"): Terminate the episode and return a final answer.
ToolInvoke(tool_name, {"param": "value"}): Invoke a tool with the given parameters."""


class ParseError(ValueError):
    pass


class PlanParseError(ParseError):
    pass


class SubgoalMissingError(PlanParseError):
    def __init__(self, plan: "Plan"):
        super().__init__("missing <subgoal> tag")
        self.plan = plan


class ActionParseError(ParseError):
    pass


class UnknownActionError(ActionParseError):
    pass


class PlannerOutputError(RuntimeError):
    pass


class ActorOutputError(RuntimeError):
    pass


@dataclass(frozen=True)
class Plan:
    steps: tuple[str, ...]
    raw: str = ""

    def __post_init__(self) -> None:
        if not self.steps:
            raise PlanParseError("plan has no steps")

    @property
    def text(self) -> str:
        return "\n".join(self.steps)


@dataclass(frozen=True)
class Subgoal:
    text: str
    is_stop: bool = False

    @classmethod
    def of(cls, text: str) -> "Subgoal":
        text = text.strip()
        return cls(text, text.upper() == "STOP")


@dataclass(frozen=True)
class EpisodeLimits:
    max_steps: int = MAX_STEPS
    parse_retries: int = 2  # total parse attempts per call
    history_k: int = HISTORY_K

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


# --------------------------------------------------------------------------
# Output parsing
# --------------------------------------------------------------------------

_PLAN_TAG = re.compile(r"<plan>(.*?)</plan>", re.S | re.I)
_SUBGOAL_TAG = re.compile(r"<subgoal>(.*?)</subgoal>", re.S | re.I)
_INLINE_NUMBER = re.compile(r"\s+(?=\d+[.)]\s)")


def _plan_steps(body: str) -> tuple[str, ...]:
    steps: list[str] = []
    for line in body.splitlines():
        for piece in _INLINE_NUMBER.split(line.strip()):
            if piece.strip():
                steps.append(piece.strip())
    return tuple(steps)


def parse_plan_output(text: str) -> tuple[Plan, Subgoal]:
    """Extract the first ``<plan>`` and ``<subgoal>`` blocks anywhere in ``text``."""
    m = _PLAN_TAG.search(text)
    if m is None:
        raise PlanParseError("missing <plan> tag")
    steps = _plan_steps(m.group(1))
    if not steps:
        raise PlanParseError("empty plan")
    plan = Plan(steps, m.group(1).strip())
    s = _SUBGOAL_TAG.search(text)
    if s is None or not s.group(1).strip():
        raise SubgoalMissingError(plan)
    return plan, Subgoal.of(s.group(1))


def parse_plan_generation(text: str) -> tuple[Plan, Subgoal]:
    """Parse the initial plan. Tags are optional here because the generation
    prompt asks for a bare numbered list; the first step becomes the subgoal."""
    if _PLAN_TAG.search(text):
        try:
            return parse_plan_output(text)
        except SubgoalMissingError as exc:
            return exc.plan, Subgoal.of(exc.plan.steps[0])
    steps = _plan_steps(text)
    if not steps:
        raise PlanParseError("empty plan")
    return Plan(steps, text.strip()), Subgoal.of(steps[0])


_ACTION_NAMES = {name.lower(): name for name in
                 ("Click", "Type", "Scroll", "Select", "Stop", "ToolInvoke")}
_CALL = re.compile(r"([A-Za-z_]+)\s*\(")
_INT = re.compile(r"[+-]?\d+\Z")


def _read_args(text: str, pos: int) -> list[Any]:
    """Parse a comma-separated argument list starting after ``(``."""
    args: list[Any] = []
    decoder = json.JSONDecoder()
    n = len(text)
    while True:
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            raise ActionParseError("unterminated argument list")
        if text[pos] == ")" and not args:
            return args
        ch = text[pos]
        if ch == '"':
            try:
                value, pos = decoder.raw_decode(text, pos)
            except json.JSONDecodeError as exc:
                raise ActionParseError(f"bad string literal: {exc.msg}") from None
        elif ch == "'":
            end = pos + 1
            while end < n and text[end] != "'":
                end += 2 if text[end] == "\\" else 1
            if end >= n:
                raise ActionParseError("unterminated string literal")
            raw = text[pos + 1:end]
            value = json.loads('"' + raw.replace('"', '\\"').replace("\\'", "'") + '"')
            pos = end + 1
        elif ch == "{":
            try:
                value, pos = decoder.raw_decode(text, pos)
            except json.JSONDecodeError as exc:
                raise ActionParseError(f"bad parameter object: {exc.msg}") from None
        else:
            end = pos
            while end < n and text[end] not in ",)":
                end += 1
            token = text[pos:end].strip()
            value = int(token) if _INT.match(token) else token
            pos = end
        args.append(value)
        while pos < n and text[pos].isspace():
            pos += 1
        if pos >= n:
            raise ActionParseError("unterminated argument list")
        if text[pos] == ")":
            return args
        if text[pos] != ",":
            raise ActionParseError(f"expected ',' or ')' at offset {pos}")
        pos += 1


def _as_int(value: Any, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ActionParseError(f"{what} must be an integer, got {value!r}")
    return value


def _as_text(value: Any) -> str:
    if isinstance(value, (dict, list)):
        raise ActionParseError("expected text")
    return str(value)


_ARITY = {"Click": 1, "Type": 2, "Scroll": 2, "Select": 2, "Stop": 1, "ToolInvoke": 2}


def parse_action_output(text: str) -> Action:
    """Parse one action such as ``Click(12)`` or ``Type(3, "usb hub")``.

    The first known action call in ``text`` wins; names match
    case-insensitively. Strings may be double-quoted (JSON escapes),
    single-quoted, or bare.
    """
    first_unknown = None
    for m in _CALL.finditer(text):
        name = _ACTION_NAMES.get(m.group(1).lower())
        if name is None:
            first_unknown = first_unknown or m.group(1)
            continue
        args = _read_args(text, m.end())
        if len(args) != _ARITY[name]:
            raise ActionParseError(f"{name} takes {_ARITY[name]} argument(s), got {len(args)}")
        try:
            if name == "Click":
                return Action("Click", element_id=_as_int(args[0], "element_id"))
            if name == "Type":
                return Action("Type", element_id=_as_int(args[0], "element_id"), text=_as_text(args[1]))
            if name == "Scroll":
                return Action("Scroll", direction=_as_text(args[0]).lower(),
                              amount=_as_int(args[1], "amount"))
            if name == "Select":
                return Action("Select", element_id=_as_int(args[0], "element_id"),
                              option=_as_text(args[1]))
            if name == "Stop":
                return Action("Stop", answer=_as_text(args[0]))
            if not isinstance(args[1], dict):
                raise ActionParseError("ToolInvoke parameters must be an object")
            return Action("ToolInvoke", tool_name=_as_text(args[0]), tool_params=args[1])
        except MalformedActionError as exc:
            raise ActionParseError(str(exc)) from None
    if first_unknown is not None:
        raise UnknownActionError(f"unknown action {first_unknown!r}")
    raise ActionParseError("no action found")


def format_action(action: Action) -> str:
    """Canonical text form; ``parse_action_output(format_action(a)) == a``."""
    q = lambda s: json.dumps(s, ensure_ascii=False)  # noqa: E731
    t = action.action_type
    if t == "Click":
        return f"Click({action.element_id})"
    if t == "Type":
        return f"Type({action.element_id}, {q(action.text)})"
    if t == "Scroll":
        return f"Scroll({action.direction}, {action.amount})"
    if t == "Select":
        return f"Select({action.element_id}, {q(action.option)})"
    if t == "Stop":
        return f"Stop({q(action.answer)})"
    return f"ToolInvoke({q(action.tool_name)}, {json.dumps(dict(action.tool_params), ensure_ascii=False)})"


# --------------------------------------------------------------------------
# Requests and ports
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class HistoryItem:
    observation: Observation
    action: Action
    note: str


@dataclass
class PlanRequest:
    task: Task
    observation: Observation
    memory: MemoryContext
    history: Sequence[HistoryItem]
    step_index: int
    previous_plan: Plan | None = None
    attempt: int = 0

    @cached_property
    def messages(self) -> list[ChatMessage]:
        memory_text = self.memory.render() if self.memory.discrete else ""
        if self.step_index == 0 or self.previous_plan is None:
            return render_prompt("plan_generate", {"QUERY": self.task.instruction,
                                                   "DISCRETE MEMORY": memory_text})
        return render_prompt("plan_update", {
            "DISCRETE MEMORY": memory_text,
            "PLAN": self.previous_plan.text,
            "SCREENSHOTS": "\n\n".join(h.observation.tree_text for h in self.history) or "(none)",
            "ACTIONS": "\n".join(f"{format_action(h.action)} -> {h.note}" for h in self.history) or "(none)",
            "SCREENSHOT": self.observation.tree_text,
        })


@dataclass
class ActRequest:
    task: Task
    plan: Plan
    subgoal: Subgoal
    observation: Observation
    action_space: str = ACTION_SPACE_TEXT
    attempt: int = 0

    @cached_property
    def messages(self) -> list[ChatMessage]:
        return render_prompt("action_generate", {
            "QUERY": self.task.instruction,
            "PLAN": self.plan.text,
            "ACTION_SPACE": self.action_space,
            "SUBGOAL": self.subgoal.text,
            "SCREENSHOT": self.observation.tree_text,
        })


class PlannerPort(Protocol):
    def respond(self, request: PlanRequest) -> str: ...


class ActorPort(Protocol):
    def respond(self, request: ActRequest) -> str: ...


def format_plan_output(steps: Sequence[str], subgoal: str) -> str:
    body = "\n".join(f"{i}. {s}" for i, s in enumerate(steps, 1))
    return f"<plan>{body}</plan>\n<subgoal>{subgoal}</subgoal>"


class ScriptedPlanner:
    """Replays a fixed action script as subgoals, then yields STOP.

    The script is ``script`` if given, else the task's committed solution,
    else one derived from the goal conditions (needs ``spec``).
    """

    def __init__(self, script: Sequence[str] | None = None, spec: WorldSpec | None = None):
        self.script = list(script) if script is not None else None
        self.spec = spec

    def _script_for(self, task: Task) -> list[str]:
        if self.script is not None:
            return self.script
        if task.solution:
            return list(task.solution)
        if self.spec is not None:
            return derive_solution(self.spec, task)
        return []

    def respond(self, request: PlanRequest) -> str:
        steps = self._script_for(request.task) or ["STOP"]
        t = request.step_index
        return format_plan_output(steps, steps[t] if t < len(steps) else "STOP")

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "scripted_planner", "script": self.script}


class ReplayPort:
    """Returns canned outputs in order, repeating the last one when exhausted."""

    def __init__(self, outputs: Sequence[str]):
        if not outputs:
            raise ValueError("need at least one output")
        self.outputs = list(outputs)
        self.calls = 0

    def respond(self, request: Any) -> str:
        out = self.outputs[min(self.calls, len(self.outputs) - 1)]
        self.calls += 1
        return out


_NUMBER_PREFIX = re.compile(r"^\s*\d+[.)]\s*")


class ScriptedActor:
    """Treats the subgoal text as the action (after stripping list numbering).

    ``mapping`` translates natural-language subgoals to action strings.
    """

    def __init__(self, mapping: Mapping[str, str] | None = None):
        self.mapping = dict(mapping or {})

    def respond(self, request: ActRequest) -> str:
        text = _NUMBER_PREFIX.sub("", request.subgoal.text)
        return self.mapping.get(text, text)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "scripted_actor", "mapping": self.mapping}


# --------------------------------------------------------------------------
# Trajectory records
# --------------------------------------------------------------------------


@dataclass
class TrajectoryStep:
    observation: Observation
    plan: Plan
    subgoal: Subgoal
    action: Action | None
    note: str = ""
    wall_ms: int = 0
    changed: bool = False
    page_after: str = ""
    memory_delta: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "observation": self.observation.to_dict(),
            "plan": {"steps": list(self.plan.steps), "raw": self.plan.raw},
            "subgoal": {"text": self.subgoal.text, "is_stop": self.subgoal.is_stop},
            "action": None if self.action is None else self.action.to_dict(),
            "note": self.note,
            "wall_ms": self.wall_ms,
            "changed": self.changed,
            "page_after": self.page_after,
            "memory_delta": self.memory_delta,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TrajectoryStep":
        return cls(
            observation=Observation.from_dict(d["observation"]),
            plan=Plan(tuple(d["plan"]["steps"]), d["plan"].get("raw", "")),
            subgoal=Subgoal(d["subgoal"]["text"], bool(d["subgoal"]["is_stop"])),
            action=None if d.get("action") is None else Action.from_dict(d["action"]),
            note=d.get("note", ""),
            wall_ms=int(d.get("wall_ms", 0)),
            changed=bool(d.get("changed", False)),
            page_after=d.get("page_after", ""),
            memory_delta=d.get("memory_delta"),
        )


TERMINATIONS = ("stop_action", "stop_subgoal", "step_limit", "planner_error", "actor_error")


@dataclass
class Trajectory:
    task: Task
    steps: list[TrajectoryStep] = field(default_factory=list)
    final_answer: str | None = None
    success: bool = False
    total_ms: int = 0
    termination: str = "step_limit"
    goal_progress: tuple[int, int] = (0, 0)
    error: str | None = None
    world: str = ""
    # policy decisions (context index, template index, log-prob at sampling time)
    decisions: list[dict[str, Any]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task.to_dict(),
            "world": self.world,
            "steps": [s.to_dict() for s in self.steps],
            "final_answer": self.final_answer,
            "success": self.success,
            "total_ms": self.total_ms,
            "termination": self.termination,
            "goal_progress": list(self.goal_progress),
            "error": self.error,
            "decisions": self.decisions,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Trajectory":
        return cls(
            task=Task.from_dict(d["task"]),
            steps=[TrajectoryStep.from_dict(s) for s in d["steps"]],
            final_answer=d.get("final_answer"),
            success=bool(d["success"]),
            total_ms=int(d.get("total_ms", 0)),
            termination=d.get("termination", "step_limit"),
            goal_progress=tuple(d.get("goal_progress", (0, 0))),
            error=d.get("error"),
            world=d.get("world", ""),
            decisions=list(d.get("decisions", [])),
        )


# --------------------------------------------------------------------------
# The loop
# --------------------------------------------------------------------------


def plan_step(planner: PlannerPort, task: Task, observation: Observation, memory_ctx: MemoryContext,
              history: Sequence[HistoryItem], step_index: int = 0, previous_plan: Plan | None = None,
              limits: EpisodeLimits = EpisodeLimits()) -> tuple[Plan, Subgoal]:
    fallback: Plan | None = None
    last_error = ""
    for attempt in range(max(1, limits.parse_retries)):
        request = PlanRequest(task, observation, memory_ctx, history, step_index, previous_plan, attempt)
        text = planner.respond(request)
        try:
            if step_index == 0 or previous_plan is None:
                return parse_plan_generation(text)
            return parse_plan_output(text)
        except SubgoalMissingError as exc:
            fallback, last_error = exc.plan, str(exc)
        except PlanParseError as exc:
            last_error = str(exc)
        logger.debug("planner output unparseable (attempt %d): %s", attempt + 1, last_error)
    if fallback is not None:
        logger.info("no subgoal after %d attempts; using first plan step", limits.parse_retries)
        return fallback, Subgoal.of(fallback.steps[0])
    raise PlannerOutputError(f"planner output unparseable: {last_error}")


def act_step(actor: ActorPort, task: Task, plan: Plan, subgoal: Subgoal, observation: Observation,
             action_space: str = ACTION_SPACE_TEXT, limits: EpisodeLimits = EpisodeLimits()) -> Action:
    if subgoal.is_stop:
        raise ValueError("act_step called with a STOP subgoal")
    last_error = ""
    for attempt in range(max(1, limits.parse_retries)):
        text = actor.respond(ActRequest(task, plan, subgoal, observation, action_space, attempt))
        try:
            return parse_action_output(text)
        except ParseError as exc:
            last_error = str(exc)
    raise ActorOutputError(f"actor output unparseable: {last_error}")


def run_episode(world: World, task: Task, planner: PlannerPort, actor: ActorPort,
                memory_mgr: MemoryManager | None = None, limits: EpisodeLimits = EpisodeLimits(),
                clock: Callable[[], float] = time.perf_counter) -> Trajectory:
    obs = reset(world, task)
    session = memory_mgr.start(task) if memory_mgr is not None else None
    traj = Trajectory(task=task, world=world.spec.name)
    history: list[HistoryItem] = []
    plan: Plan | None = None
    started = clock()

    def ms_since(t0: float) -> int:
        return max(0, int(round((clock() - t0) * 1000)))

    for t in range(limits.max_steps):
        t0 = clock()
        ctx = session.context if session is not None else empty_context()
        window = history[-limits.history_k:]
        try:
            plan, subgoal = plan_step(planner, task, obs, ctx, window, t, plan, limits)
        except PlannerOutputError as exc:
            traj.termination, traj.error = "planner_error", str(exc)
            break
        if subgoal.is_stop:
            traj.steps.append(TrajectoryStep(obs, plan, subgoal, None, "planner yielded STOP",
                                             ms_since(t0), False, obs.page_id))
            traj.termination = "stop_subgoal"
            break
        try:
            action = act_step(actor, task, plan, subgoal, obs, limits=limits)
        except ActorOutputError as exc:
            traj.steps.append(TrajectoryStep(obs, plan, subgoal, None, str(exc), ms_since(t0),
                                             False, obs.page_id))
            traj.termination, traj.error = "actor_error", str(exc)
            break
        result = step_detailed(world, action)
        history.append(HistoryItem(obs, action, result.note))
        delta = None
        if session is not None:
            recent = history[-limits.history_k:]
            delta = session.after_step(t, [h.observation for h in recent] + [result.observation],
                                       [h.action for h in recent])
        traj.steps.append(TrajectoryStep(obs, plan, subgoal, action, result.note, ms_since(t0),
                                         result.changed, result.observation.page_id, delta))
        obs = result.observation
        if result.terminal:
            traj.termination = "stop_action"
            break
    else:
        traj.termination = "step_limit"

    traj.final_answer = world.answer
    traj.goal_progress = goal_progress(world, task)
    traj.success = traj.termination in ("stop_action", "stop_subgoal", "step_limit") and \
        traj.goal_progress[0] == traj.goal_progress[1]
    traj.total_ms = ms_since(started)
    return traj
