import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plancentric.agent_core import (
    ActionParseError,
    ActorOutputError,
    EpisodeLimits,
    PlanParseError,
    PlannerOutputError,
    PlanRequest,
    ReplayPort,
    ScriptedActor,
    ScriptedPlanner,
    Subgoal,
    SubgoalMissingError,
    Trajectory,
    UnknownActionError,
    act_step,
    format_action,
    format_plan_output,
    parse_action_output,
    parse_plan_output,
    plan_step,
    run_episode,
)
from plancentric.env_sim import Action, World, observe
from plancentric.memory import empty_context

from conftest import scripted_run, zero_clock


def test_subgoal_stop_detection():
    assert Subgoal.of("  stop ").is_stop
    assert not Subgoal.of("STOP now").is_stop


# -- plan parsing ------------------------------------------------------------

def test_parse_plan_basic():
    plan, sub = parse_plan_output("<plan>1. search</plan><subgoal>type query</subgoal>")
    assert plan.steps == ("1. search",)
    assert sub == Subgoal("type query", False)


def test_parse_plan_numbered_lines():
    plan, sub = parse_plan_output("<plan>1. a\n2. b</plan><subgoal>a</subgoal>")
    assert plan.steps == ("1. a", "2. b") and sub.text == "a"


def test_parse_plan_wrapped_in_chatter():
    rng = random.Random(5)
    core = "<plan>1. open cart\n2. check out</plan> <subgoal>open cart</subgoal>"
    chatter = ["Sure!", "Here is my plan:", "Thinking...\n", "```", "Done.", "Note: <b>bold</b>"]
    for _ in range(50):
        text = " ".join(rng.sample(chatter, 2)) + "\n" + core + "\n" + rng.choice(chatter)
        plan, sub = parse_plan_output(text)
        assert plan.steps == ("1. open cart", "2. check out") and sub.text == "open cart"


def test_parse_plan_errors():
    with pytest.raises(PlanParseError):
        parse_plan_output("<plan></plan><subgoal>x</subgoal>")
    with pytest.raises(PlanParseError):
        parse_plan_output("no tags at all")
    with pytest.raises(SubgoalMissingError) as err:
        parse_plan_output("<plan>1. search</plan>")
    assert err.value.plan.steps == ("1. search",)


def test_format_plan_output_round_trip():
    plan, sub = parse_plan_output(format_plan_output(["a", "b"], "b"))
    assert plan.steps == ("1. a", "2. b") and sub.text == "b"


# -- action parsing ----------------------------------------------------------

@pytest.mark.parametrize("text,expected", [
    ("Click(12)", Action("Click", element_id=12)),
    ('Stop("done")', Action("Stop", answer="done")),
    ("Scroll(down, 2)", Action("Scroll", direction="down", amount=2)),
    ('Select(4, "Large")', Action("Select", element_id=4, option="Large")),
    ('type(3, "say \\"hi\\"")', Action("Type", element_id=3, text='say "hi"')),
    ("I will now Click(5) to continue", Action("Click", element_id=5)),
    ('ToolInvoke(lookup, {"table": "prices", "key": "hub"})',
     Action("ToolInvoke", tool_name="lookup", tool_params={"table": "prices", "key": "hub"})),
])
def test_parse_action(text, expected):
    assert parse_action_output(text) == expected


def test_parse_action_errors():
    with pytest.raises(UnknownActionError):
        parse_action_output("Fly(3)")
    with pytest.raises(ActionParseError):
        parse_action_output("Click(1, 2)")
    with pytest.raises(ActionParseError):
        parse_action_output("Click(abc)")
    with pytest.raises(ActionParseError):
        parse_action_output("nothing here")


text_st = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), max_size=12)
actions = st.one_of(
    st.builds(lambda i: Action("Click", element_id=i), st.integers(-5, 10**6)),
    st.builds(lambda i, t: Action("Type", element_id=i, text=t), st.integers(0, 999), text_st),
    st.builds(lambda d, n: Action("Scroll", direction=d, amount=n), st.sampled_from(["up", "down"]),
              st.integers(-1000, 1000)),
    st.builds(lambda i, o: Action("Select", element_id=i, option=o), st.integers(0, 999), text_st),
    st.builds(lambda a: Action("Stop", answer=a), text_st),
    st.builds(lambda n, p: Action("ToolInvoke", tool_name=n, tool_params=p),
              st.sampled_from(["calculator", "lookup"]),
              st.dictionaries(st.text(max_size=4), st.one_of(st.integers(), text_st), max_size=3)),
)


@settings(max_examples=300, deadline=None)
@given(actions)
def test_action_round_trip(action):
    assert parse_action_output(format_action(action)) == action


# -- plan_step / act_step ----------------------------------------------------

def _obs(shop):
    return observe(World.from_spec(shop))


def test_plan_step_fallback_to_first_step(shop):
    planner = ReplayPort(["<plan>1. search\n2. buy</plan>"])
    plan, sub = plan_step(planner, shop.task("T1"), _obs(shop), empty_context(), [], step_index=1,
                          previous_plan=parse_plan_output("<plan>1. x</plan><subgoal>x</subgoal>")[0])
    assert sub.text == "1. search" and plan.steps == ("1. search", "2. buy")
    assert planner.calls == 2


def test_plan_step_unparseable_raises(shop):
    with pytest.raises(PlannerOutputError):
        plan_step(ReplayPort(["???"]), shop.task("T1"), _obs(shop), empty_context(), [], step_index=1,
                  previous_plan=parse_plan_output("<plan>1. x</plan><subgoal>x</subgoal>")[0])


def test_plan_generation_accepts_bare_list(shop):
    plan, sub = plan_step(ReplayPort(["1. search for a hub\n2. add it"]), shop.task("T1"), _obs(shop),
                          empty_context(), [])
    assert plan.steps == ("1. search for a hub", "2. add it") and sub.text == "1. search for a hub"


def test_plan_request_uses_update_prompt_after_step0(shop):
    task = shop.task("T1")
    plan = parse_plan_output("<plan>1. x</plan><subgoal>x</subgoal>")[0]
    first = PlanRequest(task, _obs(shop), empty_context(), [], 0)
    later = PlanRequest(task, _obs(shop), empty_context(), [], 3, plan)
    assert "Current Task: " + task.instruction in first.messages[1].text
    assert "Original Plan: 1. x" in later.messages[1].text
    assert first.messages != later.messages


def test_act_step_parses(shop):
    sub = Subgoal.of("Click(12)")
    plan = parse_plan_output("<plan>1. x</plan><subgoal>x</subgoal>")[0]
    assert act_step(ScriptedActor(), shop.task("T1"), plan, sub, _obs(shop)) == Action("Click", element_id=12)
    assert act_step(ReplayPort(['Stop("done")']), shop.task("T1"), plan, Subgoal.of("finish"),
                    _obs(shop)) == Action("Stop", answer="done")


def test_act_step_garbage(shop):
    plan = parse_plan_output("<plan>1. x</plan><subgoal>x</subgoal>")[0]
    actor = ReplayPort(["Clikc(12)"])
    with pytest.raises(ActorOutputError):
        act_step(actor, shop.task("T1"), plan, Subgoal.of("x"), _obs(shop))
    assert actor.calls == 2


# -- episodes ----------------------------------------------------------------

def test_t1_scripted_success(shop):
    traj = scripted_run(shop, "T1")
    assert traj.success and len(traj.steps) <= 6 and traj.termination == "stop_action"


@pytest.mark.parametrize("task_id", ["T1", "T2", "T3", "T4", "T5"])
def test_all_shop_solutions(shop, task_id):
    assert scripted_run(shop, task_id).success


@pytest.mark.parametrize("task_id", ["M1", "M2", "M3"])
def test_all_maps_solutions(maps, task_id):
    assert scripted_run(maps, task_id).success


def test_derived_solutions_match_goals(bench):
    for task in bench.tasks:
        traj = run_episode(World.from_spec(bench), task, ScriptedPlanner(spec=bench, script=None),
                           ScriptedActor(), clock=zero_clock)
        assert traj.success, task.task_id


def test_never_stop_planner_hits_limit(shop):
    planner = ReplayPort(["<plan>1. look around</plan><subgoal>Scroll(down, 1)</subgoal>"])
    traj = run_episode(World.from_spec(shop), shop.task("T1"), planner, ScriptedActor(), clock=zero_clock)
    assert len(traj.steps) == 15 and not traj.success and traj.termination == "step_limit"


def test_stop_wrong_answer_first_step(shop):
    traj = scripted_run(shop, "T3", script=['Stop("$1")'])
    assert len(traj.steps) == 1 and not traj.success and traj.final_answer == "$1"


def test_stop_subgoal_terminates(shop):
    traj = scripted_run(shop, "T2", script=[])
    assert traj.termination == "stop_subgoal" and traj.steps[0].action is None


def test_actor_error_marks_failure(shop):
    planner = ScriptedPlanner(["Click(3)"])
    traj = run_episode(World.from_spec(shop), shop.task("T1"), planner, ReplayPort(["Clikc(12)"]),
                       clock=zero_clock)
    assert traj.termination == "actor_error" and not traj.success and traj.error


def test_planner_error_marks_failure(shop):
    traj = run_episode(World.from_spec(shop), shop.task("T1"), ReplayPort([""]), ScriptedActor(),
                       clock=zero_clock)
    assert traj.termination == "planner_error" and not traj.success


def test_episode_is_reproducible(shop):
    a, b = scripted_run(shop, "T4"), scripted_run(shop, "T4")
    assert a.to_dict() == b.to_dict()


def test_limits_validate():
    with pytest.raises(ValueError):
        EpisodeLimits(max_steps=0)


def test_trajectory_round_trip(shop):
    traj = scripted_run(shop, "T3")
    assert Trajectory.from_dict(traj.to_dict()) == traj
