"""
Training the plan-template policy
=================================

Ten tasks, six plan templates, and exactly one template that solves each
task. The Actor and memory stay frozen; only the template logits move.
"""

import numpy as np

from plancentric.agent_core import ScriptedActor, run_episode
from plancentric.env_sim import World, load_world_spec
from plancentric.grpo import (
    PolicyPlanner,
    TrainConfig,
    build_task_memory,
    default_policy,
    evaluate_policy,
    train_planner,
)
from plancentric.memory import MemoryManager, NullGate

spec = load_world_spec("planbench")
config = TrainConfig(iterations=200, seed=0)

before = evaluate_policy(spec, spec.tasks, default_policy(spec, spec.tasks, config), 20,
                         np.random.default_rng(1))
print(f"uniform policy success: {before:.2f}")

report = train_planner(spec, spec.tasks, config)
print(report.table(every=25))

after = evaluate_policy(spec, spec.tasks, report.policy, 20, np.random.default_rng(1))
print(f"trained policy success: {after:.2f}")

# greedy choice per task; the context includes the retrieved memory's bucket
memory = MemoryManager(build_task_memory(spec, spec.tasks), NullGate(), update_every=0)
for task in spec.tasks:
    planner = PolicyPlanner(report.policy, np.random.default_rng(0), greedy=True)
    traj = run_episode(World.from_spec(spec), task, planner, ScriptedActor(), memory)
    choice = report.policy.templates[planner.decisions[0]["template"]].name
    print(f"{task.task_id:>3} ({task.domain_tag}): {choice:<16} success={traj.success}")
