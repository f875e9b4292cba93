"""Hybrid discrete/continuous memory with retrieval and gated updates.

Discrete entries hold key-step summaries of successful trajectories; each
entry also owns an ``n_slots x dim`` continuous slot matrix. A gate decides
after every step whether the retrieved context should be refreshed:

    M_{t+1} = (1 - delta) * M_t + delta * M_t'

With ``delta == 0`` the previous context object is returned as is.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .env_sim import Action, Observation, Task
from .model_client import ChatMessage, render_prompt

if TYPE_CHECKING:
    from .agent_core import Trajectory

logger = logging.getLogger(__name__)

N_SLOTS = 8
DEFAULT_DIM = 64
DEFAULT_K = 10

_TOKEN = re.compile(r"[a-z0-9$]+(?:[.'][a-z0-9]+)*")
STOPWORDS = frozenset(
    "a an and are as at be by for from in into is it its of on or the to with this that "
    "then than find get use show open".split()
)


class MemoryError_(Exception):
    """Memory precondition failure (kept distinct from the builtin MemoryError)."""


class EncodeError(MemoryError_, ValueError):
    pass


class PreconditionError(MemoryError_, ValueError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dim


def encode_text(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Hashed bag-of-tokens feature vector, L2-normalized.

    Tokens are lowercase alphanumeric words; text with no such words falls
    back to its non-space characters so every non-blank string encodes.
    """
    if dim < 8:
        raise EncodeError("dim must be >= 8")
    if not text or not text.strip():
        raise EncodeError("cannot encode empty text")
    tokens = tokenize(text) or [c for c in text if not c.isspace()]
    vec = np.zeros(dim)
    for tok in tokens:
        vec[_bucket(tok, dim)] += 1.0
    return vec / np.linalg.norm(vec)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass
class DiscreteEntry:
    entry_id: int
    source_task: str
    key_steps: list[str]
    keywords: list[str]
    feature_vec: np.ndarray

    def __post_init__(self) -> None:
        if not self.key_steps:
            raise ValueError("key_steps must be non-empty")
        norm = float(np.linalg.norm(self.feature_vec))
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"feature_vec must be unit norm, got {norm}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "entry_id": self.entry_id,
            "source_task": self.source_task,
            "key_steps": list(self.key_steps),
            "keywords": list(self.keywords),
            "feature_vec": [float(x) for x in self.feature_vec],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DiscreteEntry":
        return cls(int(data["entry_id"]), data["source_task"], list(data["key_steps"]),
                   list(data["keywords"]), np.asarray(data["feature_vec"], dtype=float))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DiscreteEntry):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass
class MemoryBank:
    """Entries plus their slot matrices. Reads are lock-free; writes serialize."""

    dim: int = DEFAULT_DIM
    entries: list[DiscreteEntry] = field(default_factory=list)
    slots_by_entry: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self._write_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.entries)

    def check(self) -> None:
        ids = {e.entry_id for e in self.entries}
        assert set(self.slots_by_entry) <= ids, "slots for unknown entry"
        for eid, slots in self.slots_by_entry.items():
            assert slots.shape == (N_SLOTS, self.dim), f"entry {eid} has slots {slots.shape}"

    def add(self, entry: DiscreteEntry, slots: np.ndarray) -> int:
        if slots.shape != (N_SLOTS, self.dim):
            raise ValueError(f"slots must be {N_SLOTS}x{self.dim}, got {slots.shape}")
        if not np.all(np.isfinite(slots)):
            raise ValueError("slots must be finite")
        with self._write_lock:
            entry.entry_id = max((e.entry_id for e in self.entries), default=-1) + 1
            # copy-on-write so concurrent readers iterate a stable list
            self.entries = [*self.entries, entry]
            self.slots_by_entry = {**self.slots_by_entry, entry.entry_id: slots.astype(np.float32)}
        return entry.entry_id

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.entries == other.entries
            and self.slots_by_entry.keys() == other.slots_by_entry.keys()
            and all(np.array_equal(v, other.slots_by_entry[k]) for k, v in self.slots_by_entry.items())
        )

    def serialize(self) -> bytes:
        doc = {
            "dim": self.dim,
            "entries": [e.to_dict() for e in self.entries],
            "slots": {str(k): v.tolist() for k, v in sorted(self.slots_by_entry.items())},
        }
        return json.dumps(doc, sort_keys=True).encode()


@dataclass(frozen=True)
class MemoryContext:
    discrete: tuple[DiscreteEntry, ...]
    continuous: np.ndarray
    retrieval_query: str
    similarities: tuple[float, ...] = ()

    def serialize(self) -> bytes:
        doc = {
            "discrete": [e.to_dict() for e in self.discrete],
            "continuous": self.continuous.tolist(),
            "retrieval_query": self.retrieval_query,
            "similarities": list(self.similarities),
        }
        return json.dumps(doc, sort_keys=True).encode()

    def render(self) -> str:
        """Text form of the discrete memories for prompts."""
        if not self.discrete:
            return "(none)"
        blocks = []
        for i, e in enumerate(self.discrete, 1):
            steps = "\n".join(f"  - {s}" for s in e.key_steps)
            blocks.append(f"Experience {i} ({', '.join(e.keywords)}):\n{steps}")
        return "\n".join(blocks)


def empty_context(dim: int = DEFAULT_DIM, query: str = "") -> MemoryContext:
    return MemoryContext((), np.zeros((N_SLOTS, dim), dtype=np.float32), query)


def retrieve(bank: MemoryBank, query_text: str, k: int = DEFAULT_K) -> MemoryContext:
    """Top-k entries by cosine similarity; ties go to the smaller entry_id."""
    if k < 0:
        raise ValueError("k must be >= 0")
    entries = bank.entries
    if not entries or k == 0:
        return empty_context(bank.dim, query_text)
    q = encode_text(query_text, bank.dim)
    sims = np.stack([e.feature_vec for e in entries]) @ q
    order = sorted(range(len(entries)), key=lambda i: (-sims[i], entries[i].entry_id))[:k]
    chosen = tuple(entries[i] for i in order)
    slots = np.mean([bank.slots_by_entry[e.entry_id] for e in chosen], axis=0).astype(np.float32)
    return MemoryContext(chosen, slots, query_text, tuple(float(sims[i]) for i in order))


# --------------------------------------------------------------------------
# Gate
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class UpdateDecision:
    delta: int
    keywords: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.delta not in (0, 1):
            raise ValueError("delta must be 0 or 1")
        if self.delta == 0 and self.keywords:
            raise ValueError("NO_UPDATE carries no keywords")
        if self.delta == 1 and not 2 <= len(self.keywords) <= 5:
            raise ValueError("NEEDS_UPDATE carries 2-5 keywords")


NO_UPDATE = UpdateDecision(0)


@dataclass
class GateRequest:
    task: Task
    recent_obs: Sequence[Observation]
    recent_actions: Sequence[Action]
    context: MemoryContext

    @property
    def messages(self) -> list[ChatMessage]:
        from .agent_core import format_action

        return render_prompt("memory_gate", {
            "QUERY": self.task.instruction,
            "SCREENSHOTS": "\n\n".join(o.tree_text for o in self.recent_obs),
            "ACTIONS": "\n".join(format_action(a) for a in self.recent_actions) or "(none)",
            "DISCRETE MEMORY": self.context.render(),
        })


class GatePort(Protocol):
    def respond(self, request: GateRequest) -> str: ...


_NEEDS = re.compile(r"NEEDS_UPDATE\s*:\s*(.+)", re.S)


def parse_gate_output(text: str) -> UpdateDecision:
    cleaned = text.strip().strip('"').strip()
    m = _NEEDS.search(cleaned)
    if m:
        words = [w.strip(" .\"'") for w in re.split(r"[,\n]+", m.group(1))]
        words = [w for w in words if w]
        if len(words) == 1:
            words = words[0].split()
        if len(words) >= 2:
            return UpdateDecision(1, tuple(words[:5]))
        logger.warning("gate asked for an update with too few keywords: %r", text)
        return NO_UPDATE
    if cleaned.upper().startswith("NO_UPDATE") or cleaned.upper() == "NO_UPDATE":
        return NO_UPDATE
    logger.warning("unparseable gate output treated as NO_UPDATE: %r", text)
    return NO_UPDATE


def decide_update(task: Task, recent_obs: Sequence[Observation], recent_actions: Sequence[Action],
                  current_ctx: MemoryContext, gate: GatePort) -> UpdateDecision:
    if not recent_obs:
        raise PreconditionError("decide_update needs at least one recent observation")
    return parse_gate_output(gate.respond(GateRequest(task, recent_obs, recent_actions, current_ctx)))


class ScriptedGate:
    """Deterministic gate: the current activity is the domain mapped from the
    current page (``page_domains``), falling back to the task's domain tag.
    Memories whose keywords mention that domain count as related."""

    def __init__(self, page_domains: Mapping[str, str] | None = None):
        self.page_domains = dict(page_domains or {})

    def respond(self, request: GateRequest) -> str:
        page = request.recent_obs[-1].page_id
        domain = self.page_domains.get(page, request.task.domain_tag)
        if any(domain in e.keywords for e in request.context.discrete):
            return "NO_UPDATE"
        words = [domain] + [w for w in re.split(r"[^A-Za-z0-9]+", page.lower()) if w and w != domain]
        if len(words) < 2:
            words.append(request.task.domain_tag if request.task.domain_tag != domain else "task")
        return "NEEDS_UPDATE: " + ", ".join(words[:5])

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "scripted_gate", "page_domains": self.page_domains}


class NullGate:
    """Never updates."""

    def respond(self, request: GateRequest) -> str:
        return "NO_UPDATE"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "null_gate"}


def apply_update(bank: MemoryBank, decision: UpdateDecision, prior: MemoryContext,
                 k: int = DEFAULT_K) -> MemoryContext:
    if decision.delta == 0:
        return prior
    return retrieve(bank, " ".join(decision.keywords), k)


# --------------------------------------------------------------------------
# Building memories from trajectories
# --------------------------------------------------------------------------


@dataclass
class SummaryRequest:
    trajectory: "Trajectory"

    @property
    def messages(self) -> list[ChatMessage]:
        from .agent_core import format_action

        lines = []
        for i, s in enumerate(self.trajectory.steps, 1):
            act = format_action(s.action) if s.action else "(none)"
            lines.append(f"{i}. subgoal: {s.subgoal.text} | action: {act} | page: {s.page_after}")
        return [
            ChatMessage("system", ("Extract the key steps from a successful GUI agent trajectory. "
                                   "Keep important subgoals, salient UI elements and critical actions. "
                                   "Output one key step per line.",)),
            ChatMessage("user", (f"Task: {self.trajectory.task.instruction}\n" + "\n".join(lines),)),
        ]


class SummarizerPort(Protocol):
    def respond(self, request: SummaryRequest) -> str: ...


class ScriptedSummarizer:
    """One line per state-changing action: ``subgoal -> action -> page``."""

    def respond(self, request: SummaryRequest) -> str:
        from .agent_core import format_action

        return "\n".join(
            f"{s.subgoal.text} -> {format_action(s.action)} -> {s.page_after}"
            for s in request.trajectory.steps
            if s.action is not None and s.changed
        )


def instruction_keywords(instruction: str, n: int = 4) -> list[str]:
    tokens = [t for t in tokenize(instruction) if t not in STOPWORDS and len(t) > 1]
    counts = Counter(tokens)
    first = {t: i for i, t in reversed(list(enumerate(tokens)))}
    return sorted(counts, key=lambda t: (-counts[t], first[t]))[:n]


def summarize_trajectory(traj: "Trajectory", summarizer: SummarizerPort,
                         dim: int = DEFAULT_DIM) -> DiscreteEntry:
    if not traj.success:
        raise PreconditionError("only successful trajectories become memories")
    text = summarizer.respond(SummaryRequest(traj))
    key_steps = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not key_steps:
        raise PreconditionError("summarizer produced no key steps")
    keywords = [traj.task.domain_tag]
    keywords += [w for w in instruction_keywords(traj.task.instruction) if w != traj.task.domain_tag]
    return DiscreteEntry(-1, traj.task.task_id, key_steps, keywords,
                         encode_text(traj.task.instruction, dim))


def encode_continuous(traj: "Trajectory", n_slots: int = N_SLOTS, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Split steps into ``n_slots`` contiguous chunks and mean-encode each.

    Chunk sizes follow ``numpy.array_split``: earlier chunks take the
    remainder, so trajectories shorter than ``n_slots`` leave trailing zero
    rows.
    """
    from .agent_core import format_action

    if not traj.steps:
        raise EncodeError("cannot encode an empty trajectory")
    slots = np.zeros((n_slots, dim))
    for row, chunk in enumerate(np.array_split(np.arange(len(traj.steps)), n_slots)):
        if len(chunk) == 0:
            continue
        vecs = []
        for i in chunk:
            s = traj.steps[i]
            act = format_action(s.action) if s.action is not None else "none"
            vecs.append(encode_text(f"{s.subgoal.text} {act}", dim))
        slots[row] = np.mean(vecs, axis=0)
    return slots.astype(np.float32)


def ingest(bank: MemoryBank, traj: "Trajectory", summarizer: SummarizerPort) -> int:
    entry = summarize_trajectory(traj, summarizer, bank.dim)
    return bank.add(entry, encode_continuous(traj, N_SLOTS, bank.dim))


def ingest_successes(bank: MemoryBank, trajs: Iterable["Trajectory"], summarizer: SummarizerPort) -> int:
    """Ingest every successful trajectory that yields key steps; returns how many.

    A success with no state-changing step (goal already held) has nothing to
    remember and is skipped with a warning.
    """
    added = 0
    for traj in trajs:
        if not traj.success:
            continue
        try:
            ingest(bank, traj, summarizer)
            added += 1
        except PreconditionError as exc:
            logger.warning("trajectory for %s not stored: %s", traj.task.task_id, exc)
    return added


# --------------------------------------------------------------------------
# Per-episode manager
# --------------------------------------------------------------------------


@dataclass
class UpdateEvent:
    step_index: int
    delta: int
    before: bytes
    after: bytes
    retrieved: bool


class MemorySession:
    """Current memory context for one episode."""

    def __init__(self, manager: "MemoryManager", task: Task):
        self.manager = manager
        self.task = task
        self.context = retrieve(manager.bank, task.instruction, manager.k)
        self.events: list[UpdateEvent] = []
        self._retrievals = 0

    def after_step(self, step_index: int, recent_obs: Sequence[Observation],
                   recent_actions: Sequence[Action]) -> int | None:
        """Run the gate (at the configured cadence); returns delta or None if skipped."""
        m = self.manager
        if m.update_every <= 0 or (step_index + 1) % m.update_every:
            return None
        decision = decide_update(self.task, recent_obs, recent_actions, self.context, m.gate)
        before = self.context.serialize() if m.record_events else b""
        new_ctx = apply_update(m.bank, decision, self.context, m.k)
        if m.record_events:
            self.events.append(UpdateEvent(step_index, decision.delta, before, new_ctx.serialize(),
                                           new_ctx is not self.context))
        self.context = new_ctx
        return decision.delta


@dataclass
class MemoryManager:
    """Retrieval plus gated updates over a (read-only during episodes) bank.

    ``update_every`` sets the gate cadence in steps; 0 disables updates.
    """

    bank: MemoryBank
    gate: GatePort = field(default_factory=NullGate)
    k: int = DEFAULT_K
    update_every: int = 1
    history_k: int = 5
    record_events: bool = False

    def start(self, task: Task) -> MemorySession:
        return MemorySession(self, task)

    def state(self) -> bytes:
        gate = getattr(self.gate, "to_dict", lambda: {"kind": type(self.gate).__name__})()
        head = json.dumps({"k": self.k, "update_every": self.update_every, "gate": gate},
                          sort_keys=True).encode()
        return head + b"\n" + self.bank.serialize()


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------

_SLOT_HEADER = struct.Struct("<III")


def save_bank(bank: MemoryBank, directory: str | Path) -> None:
    """Write ``entries.jsonl`` plus ``slots.bin`` (uint32 n_entries, n_slots, dim;
    then row-major little-endian float32 in entry order)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "entries.jsonl", "w") as fh:
        fh.write(json.dumps({"dim": bank.dim}) + "\n")
        for e in bank.entries:
            fh.write(json.dumps(e.to_dict()) + "\n")
    with open(out / "slots.bin", "wb") as fh:
        fh.write(_SLOT_HEADER.pack(len(bank.entries), N_SLOTS, bank.dim))
        for e in bank.entries:
            fh.write(np.ascontiguousarray(bank.slots_by_entry[e.entry_id], dtype="<f4").tobytes())


def load_bank(directory: str | Path) -> MemoryBank:
    src = Path(directory)
    lines = (src / "entries.jsonl").read_text().splitlines()
    if not lines:
        raise ValueError(f"{src / 'entries.jsonl'}: line 1: missing header")
    try:
        dim = int(json.loads(lines[0])["dim"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"{src / 'entries.jsonl'}: line 1: bad header ({exc})") from None
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            entries.append(DiscreteEntry.from_dict(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{src / 'entries.jsonl'}: line {lineno}: {exc}") from None
    raw = (src / "slots.bin").read_bytes()
    if len(raw) < _SLOT_HEADER.size:
        raise ValueError(f"{src / 'slots.bin'}: truncated header")
    n, n_slots, sdim = _SLOT_HEADER.unpack_from(raw)
    if (n, n_slots, sdim) != (len(entries), N_SLOTS, dim):
        raise ValueError(f"{src / 'slots.bin'}: header {(n, n_slots, sdim)} does not match entries")
    expected = n * n_slots * sdim
    if len(raw) - _SLOT_HEADER.size != 4 * expected:
        raise ValueError(f"{src / 'slots.bin'}: expected {expected} floats "
                         f"({4 * expected} bytes after the header), got {len(raw) - _SLOT_HEADER.size} bytes")
    body = np.frombuffer(raw, dtype="<f4", offset=_SLOT_HEADER.size)
    body = body.reshape(n, n_slots, sdim)
    bank = MemoryBank(dim=dim, entries=entries)
    bank.slots_by_entry = {e.entry_id: body[i].astype(np.float32) for i, e in enumerate(entries)}
    return bank
