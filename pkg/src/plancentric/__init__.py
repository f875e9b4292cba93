"""Planner-centric web agent toolkit: simulated web worlds, a Planner/Actor
loop with hybrid memory, judge-based rewards, planner-only GRPO, and
log-linear scaling fits."""

__version__ = "0.1.0"
