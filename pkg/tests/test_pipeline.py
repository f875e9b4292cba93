import json
import logging
import random
from pathlib import Path

import numpy as np
import pytest

from plancentric.agent_core import ScriptedActor, ScriptedPlanner, run_episode
from plancentric.env_sim import Condition, Task, World
from plancentric.memory import load_bank, save_bank
from plancentric.pipeline import (
    BernoulliAgent,
    FilterReport,
    PageContext,
    RecordError,
    ScriptedProposer,
    StackAgent,
    TaskCandidate,
    collect_memory,
    filter_tasks,
    load_candidates,
    load_filter_report,
    load_tasks,
    load_trajectories,
    propose_tasks,
    read_review_list,
    save_candidates,
    save_filter_report,
    save_tasks,
    save_trajectories,
)

from conftest import zero_clock

FIXTURES = Path(__file__).parent / "fixtures"


class LinesProposer:
    def __init__(self, lines):
        self.lines = lines

    def respond(self, request):
        return "\n".join(self.lines)


# -- proposal ----------------------------------------------------------------

def test_scripted_proposer_home(shop):
    cands = propose_tasks(PageContext.of(shop, "home"), ScriptedProposer(shop))
    assert len(cands) == 10
    assert [c.task.task_id for c in cands] == [f"C{i}" for i in range(1, 11)]
    assert all(c.task.difficulty in ("easy", "medium", "hard") for c in cands)


def test_k_zero(shop):
    assert propose_tasks(PageContext.of(shop), ScriptedProposer(shop), k=0) == []


def test_garbage_lines_skipped(shop, caplog):
    good = [json.dumps({"instruction": f"Press {i}", "difficulty": "easy",
                        "goal": [{"type": "element_clicked", "element_id": 2}]}) for i in range(7)]
    bad = ["not json", json.dumps({"instruction": "", "goal": []}), json.dumps([1, 2])]
    lines = good[:3] + bad[:1] + good[3:5] + bad[1:] + good[5:]
    caplog.set_level(logging.WARNING)
    cands = propose_tasks(PageContext.of(shop), LinesProposer(lines))
    assert len(cands) == 7
    assert sum("skipped" in r.message for r in caplog.records) == 3


def test_proposal_prompt_renders(shop):
    from plancentric.pipeline import ProposalRequest

    msgs = ProposalRequest(PageContext.of(shop, "home"), 10).messages
    assert "[0] static_text SynthShop" in msgs[1].text and "10" in msgs[1].text


def test_candidate_invariant(shop):
    with pytest.raises(ValueError):
        TaskCandidate(shop.task("T1"), 7, 6)


# -- filtering ---------------------------------------------------------------

def test_filter_fixture_drops_impossible(shop):
    cands = load_candidates(FIXTURES / "filter_candidates.jsonl")
    kept, report = filter_tasks(cands, shop, n=6)
    impossible = {c.task.task_id for c in cands if c.task.task_id.startswith("X")}
    assert len(cands) == 10 and len(impossible) == 3
    assert {t.task_id for t in kept} == {c.task.task_id for c in cands} - impossible
    assert report.kept == len(kept) == sum(s > 0 for s, _ in report.rates.values())
    assert all(report.rates[t] == (0, 6) for t in impossible)
    assert all(report.rate(t.task_id) == 1.0 for t in kept)


def test_unknown_element_counts_as_failure(shop):
    bad = TaskCandidate(Task("B", "click a ghost", (Condition("element_clicked", element_id=999),)))
    kept, report = filter_tasks([bad], shop, n=2)
    assert kept == [] and report.rates["B"] == (0, 2)


def test_crashing_agent_counts_as_failure(shop):
    class Crash:
        def rollout(self, spec, task, rng):
            raise RuntimeError("boom")

    kept, report = filter_tasks([TaskCandidate(shop.task("T1"))], shop, Crash(), n=3)
    assert kept == [] and report.kept == 0


def test_bernoulli_rates(shop):
    cands = propose_tasks(PageContext.of(shop, "home"), ScriptedProposer(shop))
    # C4 holds from the start, so even the stop branch succeeds there
    kept, report = filter_tasks(cands, shop, BernoulliAgent(0.5), n=6, seed=3)
    assert all(1 / 6 <= report.rate(c.task.task_id) <= 1.0 for c in cands)
    assert report.rates["C4"] == (6, 6)
    # pooled rate over many seeded rollouts stays near p: 4-sigma binomial band
    trials = [filter_tasks([cands[1]], shop, BernoulliAgent(0.5), n=6, seed=s)[1].rates["C2"][0]
              for s in range(50)]
    total = 50 * 6
    assert abs(sum(trials) / total - 0.5) < 4 * (0.25 / total) ** 0.5


def test_filter_monotone_in_n(shop):
    cands = propose_tasks(PageContext.of(shop, "home"), ScriptedProposer(shop))
    agent = BernoulliAgent(0.2)
    prev = None
    for n in (1, 2, 4, 6, 10):
        kept, report = filter_tasks(cands, shop, agent, n=n, seed=1)
        ids = {t.task_id for t in kept}
        if prev is not None:
            assert prev <= ids
        prev = ids


def test_filter_parallel_matches_serial(shop):
    cands = propose_tasks(PageContext.of(shop, "home"), ScriptedProposer(shop))
    a = filter_tasks(cands, shop, BernoulliAgent(0.3), n=6, seed=2)[1]
    b = filter_tasks(cands, shop, BernoulliAgent(0.3), n=6, seed=2, jobs=4)[1]
    assert a == b


def test_review_lists(shop, tmp_path):
    cands = load_candidates(FIXTURES / "filter_candidates.jsonl")
    path = tmp_path / "deny.txt"
    path.write_text("# reviewer notes\nC1\n\nC3\n")
    deny = read_review_list(path)
    kept, report = filter_tasks(cands, shop, deny=deny)
    assert {"C1", "C3"}.isdisjoint(t.task_id for t in kept) and report.kept == 5
    kept, _ = filter_tasks(cands, shop, allow=["C2", "X1"])
    assert [t.task_id for t in kept] == ["C2"]


def test_filter_needs_n(shop):
    with pytest.raises(ValueError):
        filter_tasks([], shop, n=0)


# -- memory construction -----------------------------------------------------

def test_collect_memory(shop, tmp_path):
    tasks = [shop.task(t) for t in ("T1", "T2", "T3")]
    bank, trajs = collect_memory(shop, tasks, StackAgent(clock=zero_clock))
    assert len(trajs) == 3 and len(bank.entries) == 3
    save_bank(bank, tmp_path)
    assert load_bank(tmp_path) == bank


# -- persistence -------------------------------------------------------------

def random_trajectories(spec, count, seed):
    rng = random.Random(seed)
    pool = ["Click(2)", "Click(3)", "Click(16)", 'Type(1, "usb hub")', "Scroll(down, 2)",
            'Select(4, "Books")', 'ToolInvoke(calculator, {"expression": "2+2"})', "Click(999)"]
    out = []
    for _ in range(count):
        task = rng.choice(spec.tasks)
        script = [rng.choice(pool) for _ in range(rng.randint(0, 6))]
        if rng.random() < 0.5:
            script.append(f'Stop("{rng.randint(0, 99)}")')
        out.append(run_episode(World.from_spec(spec), task, ScriptedPlanner(script), ScriptedActor(),
                               clock=zero_clock))
    return out


def test_trajectory_round_trip(shop, tmp_path):
    trajs = random_trajectories(shop, 100, 0)
    path = tmp_path / "t.jsonl"
    save_trajectories(trajs, path)
    assert load_trajectories(path) == trajs


def test_truncated_trajectories_name_line(shop, tmp_path):
    path = tmp_path / "t.jsonl"
    save_trajectories(random_trajectories(shop, 5, 1), path)
    text = path.read_text()
    path.write_text(text[: len(text) - 50])
    with pytest.raises(RecordError, match="line 5"):
        load_trajectories(path)


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_trajectories(path) == [] and load_tasks(path) == []


def test_tasks_candidates_reports_round_trip(shop, tmp_path):
    save_tasks(shop.tasks, tmp_path / "tasks.jsonl")
    assert load_tasks(tmp_path / "tasks.jsonl") == list(shop.tasks)
    cands = load_candidates(FIXTURES / "filter_candidates.jsonl")
    save_candidates(cands, tmp_path / "c.jsonl")
    assert load_candidates(tmp_path / "c.jsonl") == cands
    rng = np.random.default_rng(0)
    for i in range(20):
        n = int(rng.integers(1, 10))
        rates = {f"T{j}": (int(rng.integers(0, n + 1)), n) for j in range(int(rng.integers(0, 6)))}
        report = FilterReport(len(rates), sum(s > 0 for s, _ in rates.values()), n, rates)
        save_filter_report(report, tmp_path / f"r{i}.jsonl")
        assert load_filter_report(tmp_path / f"r{i}.jsonl") == report


def test_collect_memory_skips_goal_already_met(shop):
    cands = propose_tasks(PageContext.of(shop, "home"), ScriptedProposer(shop))
    kept, _ = filter_tasks(cands, shop)
    bank, trajs = collect_memory(shop, kept, StackAgent(clock=zero_clock))
    # C4 succeeds without acting, so it leaves nothing to remember
    assert all(t.success for t in trajs) and len(bank) == len(trajs) - 1
