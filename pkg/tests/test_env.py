from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from deckgym.briefs import BriefValidationError
from deckgym.env import (
    TOOL_CATEGORIES,
    TOOL_NAMES,
    ActionRewards,
    EnvConfig,
    ParseFailure,
    Phase,
    ProtocolError,
    SlideEnv,
    ToolCall,
    ToolCallParseError,
    parse_tool_call,
    try_parse_tool_call,
)

from conftest import make_brief, slide_html

SECTIONS = [{"heading": "Market", "body": "EV sales reached 14 million units"},
            {"heading": "Leaders", "body": "BYD and Tesla lead share"},
            {"heading": "Outlook", "body": "Growth continues through 2030"}]


def gen(idx, title="Slide", sections=SECTIONS):
    return {"tool": "generate_slide", "slide_idx": idx, "title": title, "sections": sections}


def fresh(brief=None, **cfg):
    env = SlideEnv(EnvConfig(**cfg))
    env.reset(brief or make_brief(), episode_id="ep")
    return env


def test_fourteen_tools_in_five_categories():
    assert len(TOOL_NAMES) == 14 and set(TOOL_CATEGORIES) == set(TOOL_NAMES)
    assert set(TOOL_CATEGORIES.values()) == {"research", "content", "design", "structure", "meta"}


def test_reset_initial_state():
    env = SlideEnv()
    obs = env.reset(make_brief(), episode_id="e1")
    s = env.state
    assert obs.success and obs.current_slide_count == 0 and obs.phase == Phase.RESEARCH
    assert s.step_budget == 35 and s.step_count == 0 and s.quality == 0.0
    assert not s.edit_mode and s.theme == "default"
    assert "Electric Vehicle Market Analysis" in obs.result


def test_reset_theme_hint_and_budget_override():
    env = SlideEnv(EnvConfig(max_turns=5))
    env.reset(make_brief(theme_hint="tech"))
    assert env.state.theme == "tech" and env.state.step_budget == 5


def test_reset_rejects_invalid_brief():
    with pytest.raises(BriefValidationError):
        SlideEnv().reset(make_brief(num_slides=0))


def test_reset_with_seed_slides_enables_edit_mode():
    seed = [slide_html("A", [("h", "b")]), slide_html("B", [("h", "b")])]
    env = SlideEnv()
    obs = env.reset(make_brief(), seed_slides=seed)
    assert env.state.edit_mode and obs.current_slide_count == 2
    assert env.state.original_slides_html == seed and env.state.initial_quality > 0


def test_step_before_reset():
    with pytest.raises(ProtocolError):
        SlideEnv().step({"tool": "review_deck"})


def test_generate_slide_reward_is_delta_plus_success():
    env = fresh()
    env.step(gen(0))
    env.step(gen(1))
    r = env.step(gen(2))
    assert r.observation.result == "Slide 2 generated and rendered (3 sections)."
    assert r.observation.current_slide_count == 3 and r.observation.phase == Phase.GENERATE
    assert math.isclose(r.reward, r.info["delta_q"] + 0.01, abs_tol=1e-15)
    assert r.info["delta_q"] > 0


def test_failure_and_finalize_rewards():
    env = fresh()
    r = env.step({"tool": "finalize"})  # empty deck
    assert not r.observation.success and r.reward == pytest.approx(-0.02, abs=1e-15)
    env.step(gen(0))
    r = env.step({"tool": "finalize"})
    assert r.terminated and r.info["finalized"] and not r.info["truncated"]
    assert r.info["delta_q"] == 0 and r.reward == pytest.approx(0.1, abs=1e-15)
    assert env.state.phase == Phase.DONE


def test_out_of_range_slide_index():
    env = fresh()
    env.step(gen(0))
    r = env.step(gen(5))
    assert not r.observation.success and "out of range" in r.observation.result
    assert len(env.state.slides_html) == 1


def test_reorder_must_be_permutation():
    env = fresh()
    for i in range(3):
        env.step(gen(i, f"S{i}"))
    before = list(env.state.slides_html)
    r = env.step({"tool": "reorder_slides", "order": [2, 0]})
    assert not r.observation.success and env.state.slides_html == before
    r = env.step({"tool": "reorder_slides", "order": [2, 0, 1]})
    assert r.observation.success and env.state.slides_html == [before[2], before[0], before[1]]


def test_malformed_params_fail_without_mutation():
    env = fresh()
    snap = env.state.copy()
    for bad in ({"tool": "generate_slide", "slide_idx": "zero", "title": "x", "sections": []},
                {"tool": "generate_slide", "slide_idx": 0, "title": "x"},
                {"tool": "review_deck", "verbose": True},
                {"tool": "set_theme", "theme": "neon"}):
        r = env.step(bad)
        assert not r.observation.success and r.reward == pytest.approx(-0.02, abs=1e-15)
    assert env.state.slides_html == snap.slides_html and env.state.theme == snap.theme


def test_review_deck_is_idempotent():
    env = fresh()
    env.step(gen(0))
    before = env.state.copy()
    first = env.step({"tool": "review_deck"})
    second = env.step({"tool": "review_deck"})
    assert first.observation.result == second.observation.result
    assert first.info["delta_q"] == 0 and first.reward == pytest.approx(0.01, abs=1e-15)
    s = env.state
    assert (s.slides_html, s.outline, s.theme, s.phase) == (before.slides_html, before.outline, before.theme, before.phase)


def test_phase_progression():
    env = fresh()
    env.step({"tool": "web_search", "query": "EV market"})
    assert env.state.phase == Phase.RESEARCH
    env.step({"tool": "create_outline", "sections": [{"title": "Intro", "bullet_points": ["a"]}]})
    assert env.state.phase == Phase.PLAN
    env.step(gen(0))
    assert env.state.phase == Phase.GENERATE
    env.step({"tool": "review_deck"})
    assert env.state.phase == Phase.GENERATE
    env.step({"tool": "edit_slide", "slide_idx": 0, "title": "Better"})
    assert env.state.phase == Phase.REFINE
    env.step({"tool": "create_outline", "sections": [{"title": "Again"}]})
    assert env.state.phase == Phase.REFINE  # never moves backwards


def test_research_tools():
    env = fresh()
    r = env.step({"tool": "web_search", "query": "EV sales"})
    assert r.observation.success and "offline://fixture/market_size" in r.observation.result
    r = env.step({"tool": "fetch_url", "url": "offline://fixture/leader"})
    assert r.observation.success and "BYD" in r.observation.result
    assert not env.step({"tool": "fetch_url", "url": "offline://fixture/none"}).observation.success
    assert len(env.state.research_context) == 2


def test_structure_tools_conserve_slides():
    env = fresh()
    for i in range(3):
        env.step(gen(i, f"S{i}"))
    env.step({"tool": "duplicate_slide", "idx": 1})
    assert len(env.state.slides_html) == 4
    env.step({"tool": "insert_slide", "pos": 0, "title": "Cover"})
    assert len(env.state.slides_html) == 5
    env.step({"tool": "delete_slide", "idx": 0})
    assert len(env.state.slides_html) == 4
    assert len(env.state.slides_png) == len(env.state.slides_html)
    r = env.step({"tool": "get_slide_content", "idx": 9})
    assert not r.observation.success


def test_set_theme_rerenders():
    env = fresh()
    env.step(gen(0))
    old = env.state.slides_html[0]
    r = env.step({"tool": "set_theme", "theme": "dark", "colors": 0.5})
    assert r.observation.success and env.state.slides_html[0] != old
    assert not env.step({"tool": "set_theme", "theme": "dark", "colors": 1.5}).observation.success


def test_budget_truncation_and_protocol_error():
    env = fresh(max_turns=3)
    results = [env.step({"tool": "review_deck"}) for _ in range(3)]
    assert [r.terminated for r in results] == [False, False, True]
    assert results[-1].info["truncated"]
    with pytest.raises(ProtocolError):
        env.step({"tool": "review_deck"})


def test_observation_text():
    env = fresh()
    r = env.step(gen(0))
    text = env.observation_text(r.observation)
    assert text.startswith("Tool result (success=true): Slide 0 generated")
    assert "phase=generate, slides=1/7, turns remaining=34" in text


def test_prose_completion_costs_failure():
    env = fresh()
    r = env.step("I would like to make a slide about EVs.")
    assert r.info["tool"] is None and r.reward == pytest.approx(-0.02, abs=1e-15)
    assert env.state.step_count == 1


@pytest.mark.parametrize(
    "text,tool",
    [('{"tool": "review_deck"}', "review_deck"),
     ('Sure! ```json\n{"tool": "web_search", "query": "x"}\n``` done', "web_search"),
     ('{"note": 1} then {"tool": "finalize"}', "finalize"),
     ('{"tool": "finalize", "params": {}}', "finalize")],
)
def test_parse_tool_call(text, tool):
    assert parse_tool_call(text).tool == tool


def test_parse_tool_call_failures():
    with pytest.raises(ToolCallParseError):
        parse_tool_call("no json")
    with pytest.raises(ToolCallParseError):
        parse_tool_call('{"tool": "make_coffee"}')
    assert isinstance(try_parse_tool_call('{"tool": 3}'), ParseFailure)
    call = parse_tool_call('{"tool": "web_search", "parameters": {"query": "q"}}')
    assert call == ToolCall("web_search", {"query": "q"})


def test_diminishing_review_rewards():
    ar = ActionRewards(review_free_uses=1, review_decay=0.01)
    vals = [ar.value("review_deck", True, k) for k in range(4)]
    assert vals == pytest.approx([0.01, 0.0, -0.01, -0.02], abs=1e-15)
    assert ar.value("generate_slide", True, 5) == 0.01


def _episode(seed: int, env: SlideEnv):
    rng = random.Random(seed)
    pool = [lambda: gen(rng.randint(0, 3), rng.choice(["A", ""]), SECTIONS[: rng.randint(0, 3)]),
            lambda: {"tool": "review_deck"},
            lambda: {"tool": "delete_slide", "idx": rng.randint(0, 2)},
            lambda: {"tool": "edit_slide", "slide_idx": 0, "title": "Edited"},
            lambda: {"tool": "set_theme", "theme": rng.choice(["dark", "tech"])},
            lambda: {"tool": "reorder_slides", "order": [1, 0]},
            lambda: "garbage",
            lambda: {"tool": "finalize"}]
    env.reset(make_brief(max_turns=rng.randint(1, 12)), episode_id=f"h{seed}")
    rewards = []
    while not env.state.terminated:
        rewards.append(env.step(rng.choice(pool)()))
    return rewards


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_reward_telescopes(seed):
    env = SlideEnv()
    results = _episode(seed, env)
    s = env.state
    total_action = sum(r.info["r_action"] for r in results)
    assert math.isclose(sum(r.reward for r in results), s.quality - s.initial_quality + total_action, abs_tol=1e-9)
    assert math.isclose(s.cumulative_reward, sum(r.reward for r in results), abs_tol=1e-12)
    assert len(results) <= s.step_budget
    ranks = [Phase.RESEARCH.rank] + [r.observation.phase.rank for r in results]
    assert ranks == sorted(ranks)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_episodes_are_deterministic(seed):
    a = [(r.reward, r.observation.result) for r in _episode(seed, SlideEnv())]
    b = [(r.reward, r.observation.result) for r in _episode(seed, SlideEnv())]
    assert a == b
