"""Deterministic simulated web environment.

A world is a small set of pages, each holding a tree of interactive
elements. Agents observe an accessibility-tree rendering of the current
page and act through six parameterized primitives (Click, Type, Scroll,
Select, Stop, ToolInvoke). Everything here is pure Python and replays
bit-identically for a given (world spec, action sequence).

World-spec files are JSON documents; see ``docs/world_spec.md`` for the
schema.
"""

from __future__ import annotations

import ast
import copy
import json
import operator
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

WINDOW_ROWS = 20

ELEMENT_KINDS = ("button", "link", "input", "select", "static_text")
ACTION_TYPES = ("Click", "Type", "Scroll", "Select", "Stop", "ToolInvoke")
DIFFICULTIES = ("easy", "medium", "hard")
CONDITION_TYPES = ("element_value_equals", "page_reached", "answer_matches", "element_clicked")


class EnvError(Exception):
    """Base class for environment errors."""


class WorldSpecError(EnvError, ValueError):
    """A world-spec document failed to parse or validate.

    ``location`` is a field path such as ``pages[1].root.children[2].kind``
    or ``line 12`` for JSON syntax errors.
    """

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class DuplicateElementError(WorldSpecError):
    pass


class DanglingLinkError(WorldSpecError):
    pass


class UnknownReferenceError(EnvError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class MalformedActionError(EnvError, ValueError):
    pass


class EpisodeTerminatedError(EnvError, RuntimeError):
    pass


# --------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------


@dataclass
class Element:
    element_id: int
    kind: str
    label: str = ""
    value: str = ""
    options: list[str] = field(default_factory=list)
    children: list["Element"] = field(default_factory=list)
    target: str | None = None  # page_id followed on Click (links and buttons)

    def walk(self, depth: int = 0) -> Iterator[tuple[int, "Element"]]:
        """Depth-first document order, yielding (depth, element)."""
        yield depth, self
        for child in self.children:
            yield from child.walk(depth + 1)


@dataclass
class Page:
    page_id: str
    root: Element
    scroll_offset: int = 0

    @property
    def height(self) -> int:
        return sum(1 for _ in self.root.walk())

    def rows(self) -> list[tuple[int, Element]]:
        return list(self.root.walk())

    def find(self, element_id: int) -> Element | None:
        for _, el in self.root.walk():
            if el.element_id == element_id:
                return el
        return None


@dataclass(frozen=True)
class Action:
    action_type: str
    element_id: int | None = None
    text: str | None = None
    direction: str | None = None
    amount: int | None = None
    option: str | None = None
    answer: str | None = None
    tool_name: str | None = None
    tool_params: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        validate_action(self)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"action_type": self.action_type}
        for name in ("element_id", "text", "direction", "amount", "option", "answer", "tool_name"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        if self.tool_params is not None:
            out["tool_params"] = dict(self.tool_params)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Action":
        return cls(**data)

    def __hash__(self) -> int:
        params = None if self.tool_params is None else json.dumps(self.tool_params, sort_keys=True)
        return hash((self.action_type, self.element_id, self.text, self.direction,
                     self.amount, self.option, self.answer, self.tool_name, params))


_REQUIRED = {
    "Click": ("element_id",),
    "Type": ("element_id", "text"),
    "Scroll": ("direction", "amount"),
    "Select": ("element_id", "option"),
    "Stop": ("answer",),
    "ToolInvoke": ("tool_name", "tool_params"),
}


def validate_action(action: Action) -> None:
    if action.action_type not in _REQUIRED:
        raise MalformedActionError(f"unknown action type {action.action_type!r}")
    for name in _REQUIRED[action.action_type]:
        if getattr(action, name) is None:
            raise MalformedActionError(f"{action.action_type} requires {name}")
    if action.element_id is not None and (
        isinstance(action.element_id, bool) or not isinstance(action.element_id, int)
    ):
        raise MalformedActionError("element_id must be an integer")
    if action.action_type == "Scroll":
        if action.direction not in ("up", "down"):
            raise MalformedActionError(f"scroll direction must be up or down, got {action.direction!r}")
        if isinstance(action.amount, bool) or not isinstance(action.amount, int):
            raise MalformedActionError("scroll amount must be an integer")
    if action.tool_params is not None and not isinstance(action.tool_params, Mapping):
        raise MalformedActionError("tool_params must be a key-value map")


@dataclass(frozen=True)
class Condition:
    kind: str
    element_id: int | None = None
    text: str | None = None
    page_id: str | None = None
    pattern: str | None = None

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.kind}
        if self.element_id is not None:
            out["element_id"] = self.element_id
        if self.text is not None:
            out["value"] = self.text
        if self.page_id is not None:
            out["page_id"] = self.page_id
        if self.pattern is not None:
            out["pattern"] = self.pattern
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "goal") -> "Condition":
        kind = data.get("type")
        try:
            if kind == "element_value_equals":
                return cls(kind, element_id=_int(data["element_id"]), text=str(data["value"]))
            if kind == "element_clicked":
                return cls(kind, element_id=_int(data["element_id"]))
            if kind == "page_reached":
                return cls(kind, page_id=str(data["page_id"]))
            if kind == "answer_matches":
                re.compile(data["pattern"])
                return cls(kind, pattern=str(data["pattern"]))
        except KeyError as exc:
            raise WorldSpecError(f"missing field {exc.args[0]!r}", where) from None
        except re.error as exc:
            raise WorldSpecError(f"bad regex: {exc}", f"{where}.pattern") from None
        raise WorldSpecError(f"unknown condition type {kind!r}", f"{where}.type")


def _int(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise KeyError("element_id")
    return value


@dataclass(frozen=True)
class Task:
    task_id: str
    instruction: str
    goal: tuple[Condition, ...] = ()
    domain_tag: str = "general"
    difficulty: str = "easy"
    solution: tuple[str, ...] = ()  # scripted action strings, optional

    def to_dict(self) -> dict[str, Any]:
        out = {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "domain_tag": self.domain_tag,
            "difficulty": self.difficulty,
            "goal": [c.to_dict() for c in self.goal],
        }
        if self.solution:
            out["solution"] = list(self.solution)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], where: str = "task") -> "Task":
        for key in ("task_id", "instruction"):
            if key not in data:
                raise WorldSpecError(f"missing field {key!r}", where)
        goal = tuple(
            Condition.from_dict(c, f"{where}.goal[{i}]") for i, c in enumerate(data.get("goal", []))
        )
        return cls(
            task_id=str(data["task_id"]),
            instruction=str(data["instruction"]),
            goal=goal,
            domain_tag=str(data.get("domain_tag", "general")),
            difficulty=str(data.get("difficulty", "easy")),
            solution=tuple(data.get("solution", ())),
        )


@dataclass(frozen=True)
class Observation:
    step_index: int
    page_id: str
    tree_text: str
    visible_window: tuple[int, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "step_index": self.step_index,
            "page_id": self.page_id,
            "tree_text": self.tree_text,
            "visible_window": list(self.visible_window),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Observation":
        return cls(data["step_index"], data["page_id"], data["tree_text"],
                   tuple(data["visible_window"]))


# --------------------------------------------------------------------------
# Simulated tools
# --------------------------------------------------------------------------

_BINOPS: dict[type, Callable[[Any, Any], Any]] = {
    ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
    ast.Div: operator.truediv, ast.Mod: operator.mod, ast.FloorDiv: operator.floordiv,
}


def _eval_arith(node: ast.AST) -> float:
    if isinstance(node, ast.Expression):
        return _eval_arith(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_arith(node.left), _eval_arith(node.right))
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        val = _eval_arith(node.operand)
        return -val if isinstance(node.op, ast.USub) else val
    raise ValueError("unsupported expression")


def calculator_tool(params: Mapping[str, Any], world: "World") -> str:
    expr = str(params.get("expression", ""))
    try:
        result = _eval_arith(ast.parse(expr, mode="eval"))
    except (SyntaxError, ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"calculator cannot evaluate {expr!r}: {exc}") from None
    if isinstance(result, float) and result.is_integer():
        result = int(result)
    return str(result)


def lookup_tool(params: Mapping[str, Any], world: "World") -> str:
    table = world.spec.lookup_tables.get(str(params.get("table", "")))
    if table is None:
        raise ValueError(f"no lookup table {params.get('table')!r}")
    key = str(params.get("key", ""))
    if key not in table:
        raise ValueError(f"key {key!r} not in table")
    return table[key]


DEFAULT_TOOLS: dict[str, Callable[[Mapping[str, Any], "World"], str]] = {
    "calculator": calculator_tool,
    "lookup": lookup_tool,
}


# --------------------------------------------------------------------------
# World spec and mutable world state
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldSpec:
    """Parsed, immutable world description. Shared freely between worlds."""

    name: str
    start_page: str
    pages: tuple[Page, ...]
    tasks: tuple[Task, ...] = ()
    lookup_tables: Mapping[str, Mapping[str, str]] = field(default_factory=dict)
    plan_templates: tuple[Mapping[str, Any], ...] = ()
    source: str = ""

    @property
    def element_count(self) -> int:
        return sum(p.height for p in self.pages)

    def task(self, task_id: str) -> Task:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise UnknownReferenceError(f"unknown task {task_id!r} in world {self.name!r}")

    def page_of(self, element_id: int) -> str | None:
        for page in self.pages:
            if page.find(element_id) is not None:
                return page.page_id
        return None


@dataclass
class World:
    spec: WorldSpec
    pages: dict[str, Page]
    current_page: str
    clicked_set: set[int] = field(default_factory=set)
    seed: int = 0
    step_count: int = 0
    visited_pages: list[str] = field(default_factory=list)
    answer: str | None = None
    terminal: bool = False
    tool_log: list[tuple[str, str]] = field(default_factory=list)
    tools: dict[str, Callable[[Mapping[str, Any], "World"], str]] = field(
        default_factory=lambda: dict(DEFAULT_TOOLS)
    )

    @classmethod
    def from_spec(cls, spec: WorldSpec, seed: int = 0) -> "World":
        world = cls(spec=spec, pages={}, current_page=spec.start_page, seed=seed)
        world._restore()
        return world

    def _restore(self) -> None:
        self.pages = {p.page_id: copy.deepcopy(p) for p in self.spec.pages}
        self.current_page = self.spec.start_page
        self.clicked_set = set()
        self.step_count = 0
        self.visited_pages = [self.spec.start_page]
        self.answer = None
        self.terminal = False
        self.tool_log = []

    def clone(self) -> "World":
        """A fresh world at the spec-initial state, sharing the immutable spec."""
        return World.from_spec(self.spec, self.seed)

    @property
    def page(self) -> Page:
        return self.pages[self.current_page]

    def find(self, element_id: int) -> tuple[str, Element] | None:
        for page_id, page in self.pages.items():
            el = page.find(element_id)
            if el is not None:
                return page_id, el
        return None

    def state_fingerprint(self) -> str:
        values = {
            str(el.element_id): el.value
            for page in self.pages.values()
            for _, el in page.root.walk()
            if el.kind in ("input", "select")
        }
        state = {
            "page": self.current_page,
            "values": values,
            "scroll": {pid: p.scroll_offset for pid, p in self.pages.items()},
            "clicked": sorted(self.clicked_set),
            "visited": self.visited_pages,
            "tools": self.tool_log,
        }
        return json.dumps(state, sort_keys=True)


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def _parse_element(data: Any, where: str, seen: dict[int, str]) -> Element:
    if not isinstance(data, Mapping):
        raise WorldSpecError("element must be an object", where)
    if "id" not in data:
        raise WorldSpecError("missing field 'id'", where)
    eid = data["id"]
    if isinstance(eid, bool) or not isinstance(eid, int) or eid < 0:
        raise WorldSpecError("id must be a non-negative integer", f"{where}.id")
    if eid in seen:
        raise DuplicateElementError(f"duplicate element_id {eid} (first at {seen[eid]})", f"{where}.id")
    seen[eid] = where
    kind = data.get("kind")
    if kind not in ELEMENT_KINDS:
        raise WorldSpecError(f"kind must be one of {ELEMENT_KINDS}, got {kind!r}", f"{where}.kind")
    options = [str(o) for o in data.get("options", [])]
    if kind == "select" and not options:
        raise WorldSpecError("select requires non-empty options", f"{where}.options")
    if kind != "select" and options:
        raise WorldSpecError("options are only allowed on select", f"{where}.options")
    value = str(data.get("value", options[0] if options else ""))
    if kind == "select" and value not in options:
        raise WorldSpecError(f"initial value {value!r} not among options", f"{where}.value")
    target = data.get("target")
    if target is not None and kind not in ("link", "button"):
        raise WorldSpecError("target is only allowed on link or button", f"{where}.target")
    children = [
        _parse_element(c, f"{where}.children[{i}]", seen) for i, c in enumerate(data.get("children", []))
    ]
    return Element(eid, kind, str(data.get("label", "")), value, options, children,
                   None if target is None else str(target))


def parse_world(data: Any, source: str = "") -> WorldSpec:
    if not isinstance(data, Mapping):
        raise WorldSpecError("world spec must be an object")
    pages_data = data.get("pages")
    if not isinstance(pages_data, list) or not pages_data:
        raise WorldSpecError("pages must be a non-empty list", "pages")
    seen: dict[int, str] = {}
    pages: list[Page] = []
    for i, p in enumerate(pages_data):
        where = f"pages[{i}]"
        if not isinstance(p, Mapping) or "page_id" not in p or "root" not in p:
            raise WorldSpecError("page requires page_id and root", where)
        if any(q.page_id == p["page_id"] for q in pages):
            raise WorldSpecError(f"duplicate page_id {p['page_id']!r}", f"{where}.page_id")
        pages.append(Page(str(p["page_id"]), _parse_element(p["root"], f"{where}.root", seen)))
    page_ids = {p.page_id for p in pages}
    for i, page in enumerate(pages):
        for _, el in page.root.walk():
            if el.target is not None and el.target not in page_ids:
                raise DanglingLinkError(
                    f"element {el.element_id} targets unknown page {el.target!r}", f"pages[{i}]"
                )
    start = str(data.get("start_page", pages[0].page_id))
    if start not in page_ids:
        raise DanglingLinkError(f"start_page {start!r} is not a page", "start_page")
    tasks = tuple(Task.from_dict(t, f"tasks[{i}]") for i, t in enumerate(data.get("tasks", [])))
    spec = WorldSpec(
        name=str(data.get("name", "world")),
        start_page=start,
        pages=tuple(pages),
        tasks=tasks,
        lookup_tables={k: dict(v) for k, v in data.get("lookup_tables", {}).items()},
        plan_templates=tuple(data.get("plan_templates", ())),
        source=source,
    )
    for i, t in enumerate(tasks):
        try:
            validate_task(spec, t)
        except UnknownReferenceError as exc:
            raise WorldSpecError(str(exc), f"tasks[{i}]") from None
    return spec


BUNDLED_WORLDS = ("synthshop", "synthmaps", "planbench")


def resolve_world_path(name_or_path: str | Path) -> Path:
    """Bundled world name (e.g. ``synthshop``) or a filesystem path."""
    path = Path(name_or_path)
    if path.exists():
        return path
    if str(name_or_path) in BUNDLED_WORLDS:
        ref = resources.files("plancentric") / "worlds" / f"{name_or_path}.json"
        return Path(str(ref))
    raise FileNotFoundError(f"no world spec at {name_or_path!s}")


def load_world_spec(spec_file: str | Path) -> WorldSpec:
    path = resolve_world_path(spec_file)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise WorldSpecError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return parse_world(data, source=str(path))


def load_world(spec_file: str | Path, seed: int = 0) -> World:
    return World.from_spec(load_world_spec(spec_file), seed=seed)


# --------------------------------------------------------------------------
# Episode operations
# --------------------------------------------------------------------------


def validate_task(spec: WorldSpec, task: Task) -> None:
    page_ids = {p.page_id for p in spec.pages}
    for cond in task.goal:
        if cond.element_id is not None and spec.page_of(cond.element_id) is None:
            raise UnknownReferenceError(
                f"task {task.task_id!r} references missing element {cond.element_id}"
            )
        if cond.page_id is not None and cond.page_id not in page_ids:
            raise UnknownReferenceError(f"task {task.task_id!r} references missing page {cond.page_id!r}")


def render_tree(page: Page, window: tuple[int, int] | None = None) -> str:
    """One line per visible element, depth-first, ``[id] kind label (value)``.

    Inputs and selects always show their value in parentheses; selects
    additionally list their options in braces. Children are indented by
    two spaces per depth level.
    """
    rows = page.rows()
    start, end = window if window is not None else (0, len(rows))
    lines = []
    for depth, el in rows[start:end]:
        parts = [f"[{el.element_id}]", el.kind]
        if el.label:
            parts.append(el.label)
        if el.kind in ("input", "select"):
            parts.append(f"({el.value})")
        if el.kind == "select":
            parts.append("{" + "|".join(el.options) + "}")
        lines.append("  " * depth + " ".join(parts))
    return "\n".join(lines)


def visible_window(page: Page) -> tuple[int, int]:
    return page.scroll_offset, min(page.scroll_offset + WINDOW_ROWS, page.height)


def observe(world: World) -> Observation:
    page = world.page
    window = visible_window(page)
    return Observation(world.step_count, page.page_id, render_tree(page, window), window)


def reset(world: World, task: Task | None = None) -> Observation:
    if task is not None:
        validate_task(world.spec, task)
    world._restore()
    return observe(world)


def _navigate(world: World, page_id: str) -> None:
    world.current_page = page_id
    world.pages[page_id].scroll_offset = 0
    if page_id not in world.visited_pages:
        world.visited_pages.append(page_id)


def _apply(world: World, action: Action) -> str:
    """Mutate ``world`` for ``action``; return a note. Soft failures leave it untouched."""
    kind = action.action_type
    if kind == "Stop":
        world.answer = action.answer
        world.terminal = True
        return f"stopped with answer {action.answer!r}"
    if kind == "Scroll":
        page = world.page
        delta = action.amount if action.direction == "down" else -action.amount
        limit = max(0, page.height - WINDOW_ROWS)
        page.scroll_offset = min(max(page.scroll_offset + delta, 0), limit)
        return f"scrolled {action.direction} to row {page.scroll_offset}"
    if kind == "ToolInvoke":
        tool = world.tools.get(action.tool_name)
        if tool is None:
            return f"unknown tool {action.tool_name!r}"
        try:
            result = tool(action.tool_params, world)
        except ValueError as exc:
            return f"tool {action.tool_name} failed: {exc}"
        world.tool_log.append((action.tool_name, result))
        return f"tool {action.tool_name} returned {result}"

    el = world.page.find(action.element_id)
    if el is None:
        where = world.find(action.element_id)
        if where is None:
            return f"element {action.element_id} does not exist"
        return f"element {action.element_id} is not on page {world.current_page!r}"
    if kind == "Click":
        world.clicked_set.add(el.element_id)
        if el.target is not None:
            _navigate(world, el.target)
            return f"clicked {el.element_id}, now on {el.target!r}"
        return f"clicked {el.element_id}"
    if kind == "Type":
        if el.kind != "input":
            return "type target is not an input"
        el.value = action.text
        return f"typed into {el.element_id}"
    if kind == "Select":
        if el.kind != "select":
            return "select target is not a select"
        if action.option not in el.options:
            return f"option {action.option!r} not available"
        el.value = action.option
        return f"selected {action.option!r} in {el.element_id}"
    raise MalformedActionError(f"unknown action type {kind!r}")  # pragma: no cover


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    terminal: bool
    note: str
    changed: bool


def step(world: World, action: Action) -> tuple[Observation, bool, str]:
    """Advance one step. Malformed actions raise; invalid targets return a note."""
    result = step_detailed(world, action)
    return result.observation, result.terminal, result.note


def step_detailed(world: World, action: Action) -> StepResult:
    if world.terminal:
        raise EpisodeTerminatedError("episode already terminated")
    validate_action(action)
    before = world.state_fingerprint()
    note = _apply(world, action)
    world.step_count += 1
    changed = world.state_fingerprint() != before
    return StepResult(observe(world), world.terminal, note, changed)


def condition_holds(world: World, cond: Condition, answer: str | None) -> bool:
    if cond.kind == "element_value_equals":
        found = world.find(cond.element_id)
        return found is not None and found[1].value == cond.text
    if cond.kind == "element_clicked":
        return cond.element_id in world.clicked_set
    if cond.kind == "page_reached":
        return cond.page_id in world.visited_pages
    if cond.kind == "answer_matches":
        return answer is not None and re.search(cond.pattern, answer) is not None
    raise ValueError(f"unknown condition {cond.kind!r}")  # pragma: no cover


def goal_progress(world: World, task: Task, answer: str | None = None) -> tuple[int, int]:
    """(conditions satisfied, total conditions)."""
    ans = world.answer if answer is None else answer
    return sum(condition_holds(world, c, ans) for c in task.goal), len(task.goal)


def check_goal(world: World, task: Task, answer: str | None = None) -> bool:
    done, total = goal_progress(world, task, answer)
    return done == total


# --------------------------------------------------------------------------
# Goal-directed scripted solver
# --------------------------------------------------------------------------


def _route(world: World, target_page: str) -> list[int] | None:
    """Element ids to click, breadth-first over link/button targets."""
    if world.current_page == target_page:
        return []
    frontier = [(world.current_page, [])]
    seen = {world.current_page}
    while frontier:
        nxt = []
        for page_id, path in frontier:
            for _, el in world.pages[page_id].root.walk():
                if el.target is None or el.target in seen:
                    continue
                if el.target == target_page:
                    return path + [el.element_id]
                seen.add(el.target)
                nxt.append((el.target, path + [el.element_id]))
        frontier = nxt
    return None


def _answer_for(pattern: str) -> str:
    literal = re.sub(r"\\(.)", r"\1", pattern.strip("^$"))
    literal = literal.replace(" ?", " ")
    return literal if re.search(pattern, literal) else "done"


def derive_solution(spec: WorldSpec, task: Task) -> list[str]:
    """Action strings that attempt each goal condition in order.

    Conditions that cannot be satisfied (unknown select option, a value on a
    non-input element) are skipped, so the resulting episode simply fails.
    """
    world = World.from_spec(spec)
    script: list[str] = []

    def do(text: str, action: Action) -> None:
        script.append(text)
        step(world, action)

    def go_to(page_id: str) -> bool:
        route = _route(world, page_id)
        if route is None:
            return False
        for eid in route:
            do(f"Click({eid})", Action("Click", element_id=eid))
        return True

    answer = "done"
    for cond in task.goal:
        if cond.kind == "answer_matches":
            answer = _answer_for(cond.pattern)
            continue
        if cond.kind == "page_reached":
            go_to(cond.page_id)
            continue
        page_id = spec.page_of(cond.element_id)
        if page_id is None or not go_to(page_id):
            continue
        el = world.page.find(cond.element_id)
        if cond.kind == "element_clicked":
            do(f"Click({el.element_id})", Action("Click", element_id=el.element_id))
        elif el.kind == "input":
            do(f"Type({el.element_id}, {json.dumps(cond.text)})",
               Action("Type", element_id=el.element_id, text=cond.text))
        elif el.kind == "select" and cond.text in el.options:
            do(f"Select({el.element_id}, {json.dumps(cond.text)})",
               Action("Select", element_id=el.element_id, option=cond.text))
    script.append(f"Stop({json.dumps(answer)})")
    return script
