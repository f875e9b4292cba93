"""
One episode, step by step
=========================

Run the scripted Planner/Actor stack on a shopping task, with a memory bank
built from the other tasks, and print what the agent saw and did.
"""

from plancentric.agent_core import ScriptedActor, ScriptedPlanner, run_episode
from plancentric.env_sim import World, load_world_spec, observe
from plancentric.memory import MemoryManager, ScriptedGate, ScriptedSummarizer, ingest, MemoryBank

spec = load_world_spec("synthshop")
print(observe(World.from_spec(spec)).tree_text)

# memory from every other task's successful run
bank = MemoryBank()
for task in spec.tasks:
    if task.task_id != "T1":
        traj = run_episode(World.from_spec(spec), task, ScriptedPlanner(spec=spec), ScriptedActor())
        ingest(bank, traj, ScriptedSummarizer())
print(f"\n{len(bank)} memories:", [e.source_task for e in bank.entries])

mgr = MemoryManager(bank, ScriptedGate({"cart": "checkout"}), k=2)
task = spec.task("T1")
traj = run_episode(World.from_spec(spec), task, ScriptedPlanner(spec=spec), ScriptedActor(), mgr)

print(f"\n{task.instruction}")
for i, step in enumerate(traj.steps):
    action = step.action.to_dict()["action_type"] if step.action else "-"
    print(f"{i:2d} {step.observation.page_id:>8} -> {step.page_after:<8} {action:<10} "
          f"subgoal={step.subgoal.text!r} gate={step.memory_delta}")
print(f"success={traj.success} termination={traj.termination} goal={traj.goal_progress}")
