"""
Proposing and filtering tasks
=============================

Propose candidate tasks from a page, add two that cannot be done, and keep
only candidates with at least one successful rollout out of six.
"""

from plancentric.env_sim import Condition, Task, load_world_spec
from plancentric.pipeline import (
    BernoulliAgent,
    PageContext,
    ScriptedProposer,
    TaskCandidate,
    collect_memory,
    filter_tasks,
    propose_tasks,
)

spec = load_world_spec("synthshop")
cands = propose_tasks(PageContext.of(spec, "home"), ScriptedProposer(spec), k=8)
cands += [
    TaskCandidate(Task("X1", "Set Department to Garden.",
                       (Condition("element_value_equals", element_id=4, text="Garden"),))),
    TaskCandidate(Task("X2", "Report the secret code.",
                       (Condition("answer_matches", pattern=r"^code-\d{9}$"),))),
]
for c in cands:
    print(f"{c.task.task_id:>3} [{c.task.difficulty}] {c.task.instruction}")

kept, report = filter_tasks(cands, spec, n=6)
print("\nscripted stack agent\n" + report.table())

# a flaky agent still keeps most tasks, at lower rates
_, flaky = filter_tasks(cands, spec, BernoulliAgent(0.3), n=6, seed=1)
print("\nagent that tries 30% of the time\n" + flaky.table())

bank, trajs = collect_memory(spec, kept)
print(f"\nmemory bank: {len(bank)} entries from {len(trajs)} rollouts")
