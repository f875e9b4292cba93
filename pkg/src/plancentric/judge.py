"""Trajectory-level rewards from K judge votes on the {1, 3, 5} rubric."""

from __future__ import annotations

import logging
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Mapping, Protocol, Sequence

from .agent_core import Trajectory, format_action
from .model_client import ChatMessage, render_prompt

logger = logging.getLogger(__name__)

RUBRIC = (1, 3, 5)
LEVEL = {1: 0, 3: 1, 5: 2}
DEFAULT_K = 3

_SCORE = re.compile(r"SCORE:\s*\[?\s*(-?\d+)\s*\]?", re.I)


class JudgeParseError(ValueError):
    pass


@dataclass(frozen=True)
class Vote:
    score: int
    rationale: str = ""
    defaulted: bool = False

    def __post_init__(self) -> None:
        if self.score not in RUBRIC:
            raise ValueError(f"score {self.score} is not on the 1/3/5 rubric")


@dataclass(frozen=True)
class RewardRecord:
    votes: tuple[Vote, ...]
    reward: int
    tie_broken: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "votes": [{"score": v.score, "rationale": v.rationale, "defaulted": v.defaulted}
                      for v in self.votes],
            "reward": self.reward,
            "tie_broken": self.tie_broken,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RewardRecord":
        votes = tuple(Vote(v["score"], v.get("rationale", ""), v.get("defaulted", False))
                      for v in d["votes"])
        return cls(votes, d["reward"], d.get("tie_broken", False))


def screenshot_log(traj: Trajectory) -> str:
    """Per-step evidence for the judge: observation text, plan, subgoal, action."""
    blocks = []
    for i, s in enumerate(traj.steps, 1):
        act = format_action(s.action) if s.action is not None else "(no action)"
        blocks.append(
            f"Screenshot {i} (page {s.observation.page_id}):\n{s.observation.tree_text}\n"
            f"Plan:\n{s.plan.text}\nSubgoal: {s.subgoal.text}\nAction: {act}\nResult: {s.note}"
        )
    blocks.append(f"Final answer: {traj.final_answer if traj.final_answer is not None else '(none)'}")
    return "\n\n".join(blocks)


@dataclass
class JudgeRequest:
    trajectory: Trajectory
    attempt: int = 0

    @cached_property
    def messages(self) -> list[ChatMessage]:
        return render_prompt("judge_eval", {
            "instruction": self.trajectory.task.instruction,
            "SCREENSHOTS": screenshot_log(self.trajectory),
        })


class JudgePort(Protocol):
    def respond(self, request: JudgeRequest) -> str: ...


class ScriptedJudge:
    """success -> 5, some goal conditions met -> 3, otherwise 1.

    With ``flip_prob > 0`` each vote is replaced by a uniformly random rubric
    score with that probability, drawn from ``rng``.
    """

    def __init__(self, flip_prob: float = 0.0, rng: random.Random | None = None):
        self.flip_prob = flip_prob
        self.rng = rng or random.Random(0)

    def respond(self, request: JudgeRequest) -> str:
        traj = request.trajectory
        done, total = traj.goal_progress
        if traj.success:
            score = 5
        elif done > 0 and total > 0:
            score = 3
        else:
            score = 1
        if self.flip_prob and self.rng.random() < self.flip_prob:
            score = self.rng.choice(RUBRIC)
        return f"REASONING:\n{done}/{total} goal conditions satisfied.\n\nSCORE: {score}"

    def to_dict(self) -> dict[str, Any]:
        return {"kind": "scripted_judge", "flip_prob": self.flip_prob}


def parse_score(text: str) -> int:
    matches = _SCORE.findall(text)
    if not matches:
        raise JudgeParseError("no SCORE line")
    score = int(matches[-1])
    if score not in RUBRIC:
        raise JudgeParseError(f"SCORE {score} is not on the rubric")
    return score


def score_trajectory(traj: Trajectory, judge: JudgePort, retries: int = 1) -> Vote:
    """One judge vote. Unparseable output is retried, then scored 1."""
    for attempt in range(retries + 1):
        text = judge.respond(JudgeRequest(traj, attempt))
        try:
            return Vote(parse_score(text), text)
        except JudgeParseError as exc:
            logger.warning("judge output rejected (attempt %d): %s", attempt + 1, exc)
    logger.warning("judge unparseable after %d attempts; vote defaults to 1", retries + 1)
    return Vote(1, "unparseable judge output", defaulted=True)


def aggregate_votes(votes: Sequence[Vote | int]) -> RewardRecord:
    """Strict mode if one exists, otherwise the (lower) median of the votes."""
    if not votes:
        raise ValueError("no votes to aggregate")
    vs = tuple(v if isinstance(v, Vote) else Vote(v) for v in votes)
    counts = Counter(v.score for v in vs).most_common()
    if len(counts) == 1 or counts[0][1] > counts[1][1]:
        return RewardRecord(vs, counts[0][0], False)
    ordered = sorted(v.score for v in vs)
    return RewardRecord(vs, ordered[(len(ordered) - 1) // 2], True)


def judge_trajectory(traj: Trajectory, judge: JudgePort, k: int = DEFAULT_K, jobs: int = 1) -> RewardRecord:
    """K votes (concurrently when ``jobs > 1``) aggregated into one reward."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=min(jobs, k)) as pool:
            votes = list(pool.map(lambda _: score_trajectory(traj, judge), range(k)))
    else:
        votes = [score_trajectory(traj, judge) for _ in range(k)]
    return aggregate_votes(votes)


def agreement_stats(judge_scores: Sequence[int], human_scores: Sequence[int]) -> tuple[float, float]:
    """(exact %, within-one-rubric-level %). Levels: 1 -> 0, 3 -> 1, 5 -> 2."""
    if len(judge_scores) != len(human_scores):
        raise ValueError("score lists differ in length")
    if not judge_scores:
        raise ValueError("need at least one pair")
    for s in (*judge_scores, *human_scores):
        if s not in LEVEL:
            raise ValueError(f"score {s} is not on the 1/3/5 rubric")
    n = len(judge_scores)
    exact = sum(a == b for a, b in zip(judge_scores, human_scores))
    near = sum(abs(LEVEL[a] - LEVEL[b]) <= 1 for a, b in zip(judge_scores, human_scores))
    return 100.0 * exact / n, 100.0 * near / n
