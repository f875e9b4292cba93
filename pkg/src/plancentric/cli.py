"""Command-line entry point: ``plancentric <subcommand> ...``.

Exit codes: 0 success, 1 domain error (bad parse, degenerate fit, ...),
2 usage error (bad flags, missing input files, bad config).

``--config FILE`` is a JSON object. Its ``client`` section configures the
chat endpoint for remote ports; a section named after a subcommand (or the
top level) supplies defaults for that subcommand's flags, keyed by flag
name without dashes (``"group_size": 8``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import random
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import __version__
from .agent_core import EpisodeLimits, ScriptedActor, ScriptedPlanner, run_episode
from .env_sim import EnvError, World, load_world_spec, resolve_world_path
from .grpo import PolicyParams, PolicyPlanner, TrainConfig, train_planner
from .judge import RewardRecord, ScriptedJudge, agreement_stats, judge_trajectory
from .memory import (
    MemoryBank,
    MemoryManager,
    NullGate,
    ScriptedGate,
    ScriptedSummarizer,
    ingest_successes,
    load_bank,
    save_bank,
)
from .model_client import ChatClient, ClientConfig, RemotePort
from .pipeline import (
    BernoulliAgent,
    PageContext,
    ScriptedProposer,
    StackAgent,
    collect_memory,
    filter_tasks,
    load_candidates,
    load_tasks,
    load_trajectories,
    propose_tasks,
    read_review_list,
    save_candidates,
    save_filter_report,
    save_tasks,
    save_trajectories,
)
from .scaling import (
    coefficient_table,
    fit_by_component,
    predict_success,
    read_points,
    write_fits,
)

logger = logging.getLogger("plancentric")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2
SUBCOMMANDS = ("run", "train", "judge", "agree", "fitscale", "filter-tasks", "memory-build")


class UsageError(Exception):
    pass


def _zero_clock() -> float:
    return 0.0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _common(defaults: bool) -> argparse.ArgumentParser:
    # Shared by the top-level parser (with defaults) and each subparser
    # (suppressed, so a flag given before the subcommand is not overwritten).
    p = argparse.ArgumentParser(add_help=False,
                                argument_default=None if defaults else argparse.SUPPRESS)
    kw: Callable[[Any], dict] = (lambda v: {"default": v}) if defaults else (lambda v: {})
    p.add_argument("--seed", type=int, help="seed for every random draw (default 0)", **kw(0))
    p.add_argument("--jobs", type=int, help="max concurrent rollouts / judge calls (default 1)", **kw(1))
    p.add_argument("--config", help="JSON config file (client section and flag defaults)", **kw(None))
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level",
                   **({"default": False} if defaults else {}))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plancentric", parents=[_common(True)],
                                     description="Planner-centric web agent toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    common = [_common(False)]

    p = sub.add_parser("run", parents=common, help="run one episode and write its trajectory")
    p.add_argument("--world", required=True, help="bundled world name or path to a world JSON file")
    p.add_argument("--task", required=True, help="task id within the world")
    p.add_argument("--planner", choices=("scripted", "remote", "policy"), default="scripted",
                   help="planner port (default scripted)")
    p.add_argument("--actor", choices=("scripted", "remote"), default="scripted",
                   help="actor port (default scripted)")
    p.add_argument("--policy", help="policy JSON for --planner policy")
    p.add_argument("--max-steps", type=int, default=15, help="episode step limit (default 15)")
    p.add_argument("--parse-retries", type=int, default=2,
                   help="attempts per planner/actor call before failing (default 2)")
    p.add_argument("--history-k", type=int, default=5, help="recent steps shown to the planner (default 5)")
    p.add_argument("--memory", help="memory bank directory (entries.jsonl + slots.bin)")
    p.add_argument("--gate", choices=("null", "scripted", "remote"), default="scripted",
                   help="memory update gate (default scripted)")
    p.add_argument("--k", type=int, default=10, help="memories retrieved (default 10)")
    p.add_argument("--update-every", type=int, default=1,
                   help="gate cadence in steps, 0 disables updates (default 1)")
    p.add_argument("--out", default="trajectories.jsonl", help="trajectory output (default trajectories.jsonl)")
    p.add_argument("--record-timing", action="store_true",
                   help="store wall-clock step timings (output is then not byte-reproducible)")

    p = sub.add_parser("train", parents=common, help="GRPO-train the template planner policy")
    p.add_argument("--world", default="planbench", help="world with plan_templates (default planbench)")
    p.add_argument("--tasks", help="tasks.jsonl to train on (default: the world's tasks)")
    d = TrainConfig()
    p.add_argument("--iters", type=int, default=d.iterations, help=f"iterations (default {d.iterations})")
    p.add_argument("--group-size", type=int, default=d.group_size, help=f"rollouts per task, G (default {d.group_size})")
    p.add_argument("--batch", type=int, default=d.batch_tasks, help=f"tasks per iteration (default {d.batch_tasks})")
    p.add_argument("--beta", "--kl", type=float, default=d.kl_coeff, help=f"KL coefficient (default {d.kl_coeff})")
    p.add_argument("--lr", type=float, default=d.learning_rate, help=f"learning rate (default {d.learning_rate})")
    p.add_argument("--temperature", type=float, default=d.temperature,
                   help=f"planner sampling temperature (default {d.temperature})")
    p.add_argument("--judge-votes", type=int, default=d.judge_votes, help=f"judge votes K (default {d.judge_votes})")
    p.add_argument("--judge-flip-prob", type=float, default=0.0,
                   help="probability a scripted judge vote is replaced by noise (default 0)")
    p.add_argument("--clip-eps", type=float, default=None, help="optional ratio clip epsilon (default off)")
    p.add_argument("--weighting", choices=("step", "trajectory"), default=d.weighting,
                   help="experience weighting (default step)")
    p.add_argument("--sample-std", action="store_true",
                   help="normalize advantages with sample std instead of population std")
    p.add_argument("--ref-refresh-every", type=int, default=d.ref_refresh_every,
                   help="refresh the KL reference every N iterations, 0 never (default 0)")
    p.add_argument("--n-buckets", type=int, default=d.n_buckets,
                   help=f"memory keyword buckets per domain (default {d.n_buckets})")
    p.add_argument("--max-steps", type=int, default=d.max_steps, help=f"episode step limit (default {d.max_steps})")
    p.add_argument("--report", "--out", default="train_report.jsonl", help="report output (default train_report.jsonl)")
    p.add_argument("--policy-out", help="write the trained policy JSON here")
    p.add_argument("--table", action="store_true", help="print a plain-text progress table")

    p = sub.add_parser("judge", parents=common, help="score trajectories with K judge votes")
    p.add_argument("--trajectories", required=True, help="trajectories.jsonl input")
    p.add_argument("--judge", choices=("scripted", "remote"), default="scripted", help="judge port (default scripted)")
    p.add_argument("--k", "--votes", dest="votes", type=int, default=3, help="votes per trajectory (default 3)")
    p.add_argument("--judge-temperature", type=float, default=0.7,
                   help="sampling temperature for remote judge votes (default 0.7)")
    p.add_argument("--flip-prob", type=float, default=0.0, help="scripted judge noise (default 0)")
    p.add_argument("--out", default="rewards.jsonl", help="reward records output (default rewards.jsonl)")

    p = sub.add_parser("agree", parents=common, help="judge/human agreement on paired scores")
    p.add_argument("--pairs", help="CSV with judge_score,human_score columns")
    p.add_argument("--judge", help="file of judge scores, one per line (optional header)")
    p.add_argument("--human", help="file of human scores, one per line (optional header)")

    p = sub.add_parser("fitscale", parents=common, help="log-linear success-vs-size fits")
    p.add_argument("--points", required=True, help="CSV with params_billions,success_pct[,component_label]")
    p.add_argument("--log-base", type=float, default=10.0, help="logarithm base (default 10)")
    p.add_argument("--out", help="write fits CSV here")
    p.add_argument("--predict", type=float, action="append", default=[],
                   help="size in billions to predict at (repeatable)")
    p.add_argument("--report", action="store_true", help="print the coefficient table")

    p = sub.add_parser("filter-tasks", parents=common, help="keep candidate tasks with a successful rollout")
    p.add_argument("--world", required=True, help="bundled world name or path")
    p.add_argument("--candidates", help="candidates.jsonl (task or candidate records)")
    p.add_argument("--propose", metavar="PAGE", help="propose candidates from this page instead")
    p.add_argument("--propose-k", type=int, default=10, help="tasks to propose, K (default 10)")
    p.add_argument("--n", type=int, default=6, help="rollouts per candidate, N (default 6)")
    p.add_argument("--agent", choices=("stack", "bernoulli"), default="stack",
                   help="rollout agent (default stack: scripted planner + actor)")
    p.add_argument("--p", type=float, default=0.5, help="success attempt probability for --agent bernoulli")
    p.add_argument("--allow", help="file of task ids to keep (manual review)")
    p.add_argument("--deny", help="file of task ids to drop (manual review)")
    p.add_argument("--out", default="tasks.jsonl", help="kept tasks output (default tasks.jsonl)")
    p.add_argument("--report-out", default="filter_report.jsonl",
                   help="filter report output (default filter_report.jsonl)")
    p.add_argument("--candidates-out", help="also write proposed candidates here")

    p = sub.add_parser("memory-build", parents=common, help="build a memory bank from successful rollouts")
    p.add_argument("--world", help="bundled world name or path (needed unless --from is given)")
    p.add_argument("--tasks", help="tasks.jsonl (default: the world's tasks)")
    p.add_argument("--from", dest="from_trajectories",
                   help="ingest successful trajectories from this file instead of rolling out")
    p.add_argument("--rollouts", type=int, default=1, help="rollouts per task (default 1)")
    p.add_argument("--dim", type=int, default=64, help="embedding dimension (default 64)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trajectories-out", help="also write all rollouts here")
    return parser


# --------------------------------------------------------------------------
# Config handling
# --------------------------------------------------------------------------


def _load_config(path: str | None) -> dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object")
    return data


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], cfg: dict[str, Any]) -> argparse.Namespace:
    cmd = next((a for a in argv if a in SUBCOMMANDS), None)
    sub = None
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction) and cmd:
            sub = action.choices[cmd]
    if sub is not None:
        known = {a.dest for a in sub._actions}
        defaults = {k: v for k, v in cfg.items() if k not in SUBCOMMANDS and k != "client" and k in known}
        section = cfg.get(cmd, {})
        if not isinstance(section, dict):
            raise UsageError(f"config section {cmd!r} must be an object")
        unknown = set(section) - known
        if unknown:
            raise UsageError(f"config section {cmd!r}: unknown keys {sorted(unknown)}")
        defaults.update(section)
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _client(cfg: dict[str, Any], seed: int) -> ChatClient:
    if "client" not in cfg:
        raise UsageError("remote ports need a 'client' section in --config")
    try:
        conf = ClientConfig.from_dict(cfg["client"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad client config: {exc}") from None
    return ChatClient(conf, rng=random.Random(seed))


def _need(path: str | None, what: str) -> None:
    if path is not None and not Path(path).exists():
        raise UsageError(f"{what} not found: {path}")


def _world(name: str):
    try:
        path = resolve_world_path(name)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return load_world_spec(path)


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def cmd_run(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    _need(args.memory, "memory directory")
    _need(args.policy, "policy file")
    if args.planner == "policy" and not args.policy:
        raise UsageError("--planner policy needs --policy")
    spec = _world(args.world)
    task = spec.task(args.task)
    client = _client(cfg, args.seed) if "remote" in (args.planner, args.actor, args.gate) else None
    if args.planner == "scripted":
        planner = ScriptedPlanner(spec=spec)
    elif args.planner == "policy":
        planner = PolicyPlanner(PolicyParams.load(args.policy), np.random.default_rng(args.seed))
    else:
        planner = RemotePort(client)
    actor = ScriptedActor() if args.actor == "scripted" else RemotePort(client)
    memory_mgr = None
    if args.memory:
        gate = {"null": NullGate(), "scripted": ScriptedGate()}.get(args.gate) or RemotePort(client)
        memory_mgr = MemoryManager(load_bank(args.memory), gate, args.k, args.update_every, args.history_k)
    limits = EpisodeLimits(args.max_steps, args.parse_retries, args.history_k)
    clock = {} if args.record_timing else {"clock": _zero_clock}
    traj = run_episode(World.from_spec(spec), task, planner, actor, memory_mgr, limits, **clock)
    save_trajectories([traj], args.out)
    done, total = traj.goal_progress
    print(f"{task.task_id}: success={traj.success} steps={len(traj.steps)} "
          f"termination={traj.termination} goal={done}/{total} -> {args.out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    _need(args.tasks, "tasks file")
    spec = _world(args.world)
    tasks = load_tasks(args.tasks) if args.tasks else list(spec.tasks)
    config = TrainConfig(group_size=args.group_size, batch_tasks=args.batch, kl_coeff=args.beta,
                         learning_rate=args.lr, temperature=args.temperature, iterations=args.iters,
                         ref_refresh_every=args.ref_refresh_every, judge_votes=args.judge_votes,
                         clip_eps=args.clip_eps, weighting=args.weighting,
                         population_std=not args.sample_std, n_buckets=args.n_buckets,
                         max_steps=args.max_steps, seed=args.seed)
    judge = ScriptedJudge(args.judge_flip_prob, random.Random(args.seed))
    report = train_planner(spec, tasks, config, judge=judge, jobs=args.jobs)
    report.save(args.report)
    if args.policy_out:
        report.policy.save(args.policy_out)
    if args.table:
        print(report.table())
    sr = report.success_rate
    w = min(25, len(sr))
    if sr:
        print(f"success rate: first {w} iters {np.mean(sr[:w]):.3f}, last {w} iters {np.mean(sr[-w:]):.3f}")
    print(f"report -> {args.report}")
    return EXIT_OK


def cmd_judge(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    _need(args.trajectories, "trajectories file")
    trajs = load_trajectories(args.trajectories)
    judge = (ScriptedJudge(args.flip_prob, random.Random(args.seed)) if args.judge == "scripted"
             else RemotePort(_client(cfg, args.seed), temperature=args.judge_temperature))
    # votes run sequentially when the judge is a seeded scripted one so that
    # noise draws stay in a fixed order
    jobs = args.jobs if args.judge == "remote" else 1
    with open(args.out, "w") as fh:
        for traj in trajs:
            rec: RewardRecord = judge_trajectory(traj, judge, args.votes, jobs)
            fh.write(json.dumps({"task_id": traj.task.task_id, **rec.to_dict()}, sort_keys=True) + "\n")
            print(f"{traj.task.task_id}: reward {rec.reward}{' (tie broken)' if rec.tie_broken else ''}")
    return EXIT_OK


def _score_column(path: str) -> list[int]:
    scores = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        cell = line.split(",")[-1].strip()
        if not cell:
            continue
        try:
            scores.append(int(cell))
        except ValueError:
            if lineno == 1:
                continue  # header
            raise ValueError(f"{path}: line {lineno}: not an integer score: {cell!r}") from None
    return scores


def cmd_agree(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    for path, what in ((args.pairs, "pairs file"), (args.judge, "judge scores"), (args.human, "human scores")):
        _need(path, what)
    if args.pairs:
        judge, human = [], []
        with open(args.pairs, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    judge.append(int(row["judge_score"]))
                    human.append(int(row["human_score"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{args.pairs}: line {lineno}: {exc}") from None
    elif args.judge and args.human:
        judge, human = _score_column(args.judge), _score_column(args.human)
    else:
        raise UsageError("give --pairs, or both --judge and --human")
    exact, near = agreement_stats(judge, human)
    print(f"pairs {len(judge)}  exact {exact:.1f}%  within-one {near:.1f}%")
    return EXIT_OK


def cmd_fitscale(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    _need(args.points, "points file")
    fits = fit_by_component(read_points(args.points), args.log_base)
    if args.out:
        write_fits(fits.values(), args.out)
    if args.report or not args.out:
        print(coefficient_table(fits.values()))
    for x in args.predict:
        for label, fit in fits.items():
            y, clamped = predict_success(fit, x)
            print(f"{label or '(all)'} @ {x:g}B: {y:.1f}%{' (clamped)' if clamped else ''}")
    return EXIT_OK


def cmd_filter(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    for path, what in ((args.candidates, "candidates file"), (args.allow, "allow list"),
                       (args.deny, "deny list")):
        _need(path, what)
    if bool(args.candidates) == bool(args.propose):
        raise UsageError("give exactly one of --candidates or --propose")
    spec = _world(args.world)
    if args.candidates:
        cands = load_candidates(args.candidates)
    else:
        cands = propose_tasks(PageContext.of(spec, args.propose), ScriptedProposer(spec), args.propose_k)
        if args.candidates_out:
            save_candidates(cands, args.candidates_out)
    agent = StackAgent() if args.agent == "stack" else BernoulliAgent(args.p)
    kept, report = filter_tasks(cands, spec, agent, args.n, args.seed, args.jobs,
                                read_review_list(args.allow) if args.allow else None,
                                read_review_list(args.deny) if args.deny else None)
    save_tasks(kept, args.out)
    save_filter_report(report, args.report_out)
    print(report.table())
    return EXIT_OK


def cmd_memory_build(args: argparse.Namespace, cfg: dict[str, Any]) -> int:
    _need(args.tasks, "tasks file")
    _need(args.from_trajectories, "trajectories file")
    if args.from_trajectories:
        bank = MemoryBank(dim=args.dim)
        trajs = load_trajectories(args.from_trajectories)
        ingest_successes(bank, trajs, ScriptedSummarizer())
    else:
        if not args.world:
            raise UsageError("memory-build needs --world or --from")
        spec = _world(args.world)
        tasks = load_tasks(args.tasks) if args.tasks else list(spec.tasks)
        bank, trajs = collect_memory(spec, tasks, StackAgent(clock=_zero_clock),
                                     rollouts_per_task=args.rollouts, dim=args.dim, seed=args.seed)
        if args.trajectories_out:
            save_trajectories(trajs, args.trajectories_out)
    save_bank(bank, args.out)
    print(f"{len(bank)} memories from {sum(t.success for t in trajs)}/{len(trajs)} successful rollouts -> {args.out}")
    return EXIT_OK


HANDLERS = {
    "run": cmd_run, "train": cmd_train, "judge": cmd_judge, "agree": cmd_agree,
    "fitscale": cmd_fitscale, "filter-tasks": cmd_filter, "memory-build": cmd_memory_build,
}


def dispatch(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre, _ = _common(True).parse_known_args(argv)
        cfg = _load_config(pre.config)
        args = _apply_config(parser, argv, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"plancentric: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse: --help / --version exit 0, bad usage exits 2
        positional = [a for a in argv if not a.startswith("-")]
        if exc.code and positional and positional[0] not in SUBCOMMANDS and argv[0] == positional[0]:
            parser.print_help(sys.stderr)
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"plancentric {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EnvError, ValueError, KeyError, RuntimeError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"plancentric {args.command}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_DOMAIN


def main() -> None:
    sys.exit(dispatch())
