from __future__ import annotations

import io
import json
import threading
import time
import urllib.error
import urllib.request

import pytest

from deckgym.env import EnvConfig, SlideEnv
from deckgym.harness import (
    AgentTransportError,
    CompetentAgent,
    EnvService,
    EpisodeConfig,
    EvalConfig,
    EvalReport,
    RemoteAgent,
    ReviewAgent,
    ScriptedAgent,
    ServeConfig,
    Trajectory,
    brief_slide_plan,
    evaluate,
    export_rollouts,
    import_rollouts,
    import_sliderl_records,
    make_server,
    parse_agent_spec,
    run_episode,
    verify_step_rewards,
)
from deckgym.harness import _HttpError
from deckgym.render import validate_html
from deckgym.rewards import RewardBreakdown

from conftest import make_brief

SECTIONS = [{"heading": "Market", "body": "EV sales reached 14 million units"},
            {"heading": "Leaders", "body": "BYD and Tesla lead share"},
            {"heading": "Outlook", "body": "Growth continues through 2030"}]


def outline_and_slides(n=7):
    script = [{"tool": "create_outline", "sections": [{"title": f"S{i}", "bullet_points": []} for i in range(n)]}]
    script += [{"tool": "generate_slide", "slide_idx": i, "title": f"Slide {i}", "sections": SECTIONS} for i in range(n)]
    return script + [{"tool": "finalize"}]


def test_scripted_nine_turn_episode(tmp_path):
    traj = run_episode(ScriptedAgent(outline_and_slides()), make_brief(), EpisodeConfig(out_dir=tmp_path))
    assert traj.completed and traj.turns_used == 9 and traj.slides_created == 7
    assert traj.turns[-1].tool_call == {"tool": "finalize"}
    assert traj.turns[-1].observation["success"]
    assert sum(t.step_reward for t in traj.turns) == pytest.approx(traj.cumulative_reward, abs=1e-12)
    deck = tmp_path / "scripted" / "fixture" / "deck.html"
    assert deck.exists() and validate_html(deck.read_text()).valid
    assert (tmp_path / "scripted" / "fixture" / "deck.pptx").exists()


def test_all_review_episode():
    traj = run_episode(ReviewAgent(), make_brief())
    assert traj.turns_used == 35 and not traj.completed and traj.slides_created == 0
    assert traj.cumulative_reward == pytest.approx(0.35, abs=1e-12)
    assert traj.aggregate == 0.0


def test_prose_turn_costs_failure():
    traj = run_episode(ScriptedAgent(["Let me think about the audience first."]), make_brief(max_turns=3))
    assert traj.turns[0].tool_call is None
    assert traj.turns[0].step_reward == pytest.approx(-0.02, abs=1e-15)


def test_competent_agent_restates_brief():
    brief = make_brief()
    plan = brief_slide_plan(brief)
    assert len(plan) == 7 and plan[0]["title"] == brief.topic
    assert all(len(s["sections"]) == 3 for s in plan)
    traj = run_episode(CompetentAgent(), brief)
    assert traj.completed and traj.slides_created == 7
    assert traj.final.scores["spec_reconstruction"] >= 0.95


def test_agent_spec_parsing(tmp_path):
    assert parse_agent_spec("competent")().name == "competent"
    assert parse_agent_spec("expert=competent")().name == "expert"
    assert parse_agent_spec("loop=review")().name == "loop"
    f = tmp_path / "plan.jsonl"
    f.write_text('{"tool": "review_deck"}\n\n{"tool": "finalize"}\n')
    a = parse_agent_spec(f"script:{f}")()
    assert a.name == "plan"
    r = parse_agent_spec("remote:gpt-x@http://localhost:1/v1/chat/completions")()
    assert isinstance(r, RemoteAgent) and r.name == "gpt-x"
    for bad in ("remote:nourl", "wizard", "script:"):
        with pytest.raises(ValueError):
            parse_agent_spec(bad)


def _from_scores(model, brief_id, scores):
    return Trajectory(brief_id, model, [], RewardBreakdown.from_scores(scores), True, 1, 1, 0.1)


def test_report_from_published_component_scores():
    fine_tuned = {"code_rules": 0.905, "render_quality": 0.958, "content_quality": 0.783,
                  "aesthetic_html": 0.658, "aesthetic_visual": 0.539, "spec_reconstruction": 0.530}
    rep = EvalReport.from_trajectories([_from_scores("ft", "b", fine_tuned)])
    assert rep.models["ft"].overall_quality == pytest.approx(0.724, abs=0.002)


def test_eval_metrics_and_head_to_head(catalog, tmp_path):
    briefs = list(catalog)[:4]
    factories = {"a": lambda: CompetentAgent("a"), "b": lambda: CompetentAgent("b"), "r": ReviewAgent}
    rep = evaluate(factories, briefs, EvalConfig(EpisodeConfig(out_dir=tmp_path), workers=3))
    a = rep.models["a"]
    assert a.episodes == 4 and a.completion_rate == 1.0 and 0 <= a.overall_quality <= 1
    ts = [t for t in rep.trajectories if t.model_name == "a"]
    assert a.avg_turns == pytest.approx(sum(t.turns_used for t in ts) / 4)
    assert a.overall_quality == pytest.approx(sum(t.aggregate for t in ts) / 4)
    assert rep.head_to_head["a"]["b"] == {"win": 0, "tie": 4, "loss": 0}
    assert rep.head_to_head["a"]["review"] == {"win": 4, "tie": 0, "loss": 0}
    assert rep.models["review"].completion_rate == 0.0
    out = json.loads(rep.write(tmp_path / "report.json").read_text())
    assert set(out["models"]) == {"a", "b", "review"} and len(out["episodes"]) == 12
    assert "Quality" in rep.table()


def test_eval_singleton(catalog):
    rep = evaluate([CompetentAgent], list(catalog)[:1], EvalConfig(workers=1))
    assert rep.head_to_head == {"competent": {}}


def test_eval_captures_crashes(catalog):
    class Boom:
        name = "boom"

        def reset(self, brief, obs):
            raise RuntimeError("kaput")

        def act(self, obs):
            return ""

    rep = evaluate([Boom], list(catalog)[:2], EvalConfig(workers=1))
    assert rep.models["boom"].failed == 2 and rep.models["boom"].completion_rate == 0


def test_rollout_round_trip(tmp_path):
    trajs = [run_episode(ScriptedAgent(outline_and_slides(2)), make_brief()), run_episode(ReviewAgent(), make_brief())]
    path = export_rollouts(trajs, tmp_path / "r" / "rollouts.jsonl")
    back = import_rollouts(path)
    assert [t.to_dict() for t in back] == [t.to_dict() for t in trajs]
    review = back[1]
    assert len(review.turns) == 35 and review.reward_config["step_judge"] == "offline"
    assert not (tmp_path / "r" / "rollouts.jsonl.tmp").exists()


def test_replay_verifies_step_rewards():
    brief = make_brief()
    traj = run_episode(ScriptedAgent(outline_and_slides(3)), brief)
    check = verify_step_rewards(traj, brief)
    assert check.checked and check.max_error <= 1e-12
    traj.turns[1].step_reward += 0.5
    assert "error" in verify_step_rewards(traj, brief).notice
    traj.reward_config["step_judge"] = "remote"
    assert not verify_step_rewards(traj, brief).checked


def test_sliderl_import_shim():
    brief = make_brief()
    record = {
        "task_id": "fixture",
        "model": "ext-model",
        "steps": [
            {"step": 0, "action": '{"tool": "review_deck"}', "reward": 0.01, "obs": "Deck review: ...",
             "logprobs": [-0.1]},
            {"step": 1, "action": {"tool": "review_deck"}, "reward": 0.01},
        ],
        "final_scores": dict.fromkeys(
            ["code_rules", "render_quality", "aesthetic_html", "aesthetic_visual", "content_quality",
             "spec_reconstruction"], 0.0),
        "success": False,
        "dataset_version": "1.0",
        "reward_config": {"step_judge": "offline", "renderer": "StubRenderer"},
    }
    rep = import_sliderl_records([record, {"model": "no-turns"}])
    assert rep.unmapped_fields == {"dataset_version": 1, "turns.logprobs": 1}
    assert len(rep.skipped) == 1 and len(rep.trajectories) == 1
    t = rep.trajectories[0]
    assert t.brief_id == "fixture" and t.turns[0].tool_call == {"tool": "review_deck"}
    assert t.turns[0].observation == {"result": "Deck review: ..."}
    assert verify_step_rewards(t, brief).max_error <= 1e-12


class FakeChat:
    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []

    def __call__(self, req, timeout=None):
        self.requests.append(json.loads(req.data.decode()))
        reply = self.replies.pop(0)
        if isinstance(reply, Exception):
            raise reply
        return io.BytesIO(json.dumps({"choices": [{"message": {"content": reply}}]}).encode())


def test_remote_agent_sees_only_observations():
    opener = FakeChat(['```json\n{"tool": "review_deck"}\n```', '{"tool": "finalize"}'])
    agent = RemoteAgent("http://agent/v1/chat/completions", "m", opener=opener)
    traj = run_episode(agent, make_brief(max_turns=2))
    assert traj.turns_used == 2 and traj.model_name == "m"
    msgs = opener.requests[-1]["messages"]
    assert msgs[0]["role"] == "system" and "one" in msgs[0]["content"].lower()
    users = [m["content"] for m in msgs if m["role"] == "user"]
    assert users[0].startswith("Tool result (success=true): New brief")
    assert not any("reward" in u.lower() or "delta" in u.lower() for u in users)


def test_remote_transport_failure_keeps_partial_trajectory():
    opener = FakeChat(['{"tool": "review_deck"}', OSError("connection reset")])
    traj = run_episode(RemoteAgent("http://agent", "m", opener=opener), make_brief())
    assert traj.failed and not traj.completed and traj.turns_used == 1
    assert "connection reset" in traj.error
    with pytest.raises(AgentTransportError):
        RemoteAgent("http://agent", "m", opener=FakeChat([ValueError("bad json")])).act("x")


# --- service ---------------------------------------------------------------


def _service(catalog, **kw):
    return EnvService(ServeConfig(catalog=catalog, env=EnvConfig(), **kw))


def test_service_reset_step_state(catalog):
    svc = _service(catalog)
    bid = catalog.ids()[0]
    r = svc.reset({"brief_id": bid})
    eid = r["episode_id"]
    assert r["observation"]["phase"] == "research"
    out = svc.step({"episode_id": eid, "tool_call": {"tool": "web_search", "query": "market"}})
    assert set(out["info"]) == {"step", "tool", "success", "finalized", "truncated"}
    assert "reward" in out and "cumulative_reward" not in svc.state(eid)
    assert svc.state(eid)["step_count"] == 1


def test_service_errors(catalog):
    svc = _service(catalog)
    with pytest.raises(_HttpError) as e:
        svc.step({"episode_id": "nope", "tool_call": {"tool": "review_deck"}})
    assert e.value.status == 404
    with pytest.raises(_HttpError) as e:
        svc.reset({"brief_id": "no-such-brief"})
    assert e.value.status == 404
    with pytest.raises(_HttpError) as e:
        svc.reset({"brief": {"topic": "Inline Topic", "audience": "staff", "num_slides": 2}})
    assert e.value.status == 400 and "confidence" in str(e.value)
    inline = {"topic": "Inline Topic", "audience": "staff", "num_slides": 2, "confidence": 0.5}
    eid = svc.reset({"brief": inline})["episode_id"]
    svc.step({"episode_id": eid, "tool_call": {"tool": "create_outline", "sections": [{"title": "x"}]}})
    svc.step({"episode_id": eid, "tool_call": {"tool": "generate_slide", "slide_idx": 0, "title": "x", "sections": []}})
    assert svc.step({"episode_id": eid, "tool_call": '{"tool": "finalize"}'})["terminated"]
    with pytest.raises(_HttpError) as e:
        svc.step({"episode_id": eid, "tool_call": {"tool": "review_deck"}})
    assert e.value.status == 409
    assert "quality" in svc.state(eid)  # revealed once terminated


def test_interleaved_sessions_match_serial_replay(catalog):
    b1, b2 = list(catalog)[:2]
    svc = _service(catalog, expose_rewards=True)
    plans = {}
    for b in (b1, b2):
        agent = CompetentAgent()
        agent.reset(b, "")
        plans[b.id] = [json.loads(agent.act("")) for _ in range(b.num_slides + 6)]
    e1 = svc.reset({"brief_id": b1.id})["episode_id"]
    e2 = svc.reset({"brief_id": b2.id})["episode_id"]
    got = {b1.id: [], b2.id: []}
    for i in range(max(len(p) for p in plans.values())):
        for eid, b in ((e1, b1), (e2, b2)):
            if i < len(plans[b.id]) and not svc.state(eid)["terminated"]:
                got[b.id].append(svc.step({"episode_id": eid, "tool_call": plans[b.id][i]})["reward"])
    for b in (b1, b2):
        env = SlideEnv()
        env.reset(b)
        serial = []
        for call in plans[b.id]:
            if env.state.terminated:
                break
            serial.append(env.step(call).reward)
        assert got[b.id] == serial


def test_idle_sessions_evicted(catalog):
    svc = _service(catalog, idle_timeout=0.01)
    eid = svc.reset({"brief_id": catalog.ids()[0]})["episode_id"]
    time.sleep(0.05)
    with pytest.raises(_HttpError) as e:
        svc.state(eid)
    assert e.value.status == 404 and len(svc.sessions) == 0


def _call(base, method, path, body=None):
    data = json.dumps(body).encode() if body is not None else None
    req = urllib.request.Request(base + path, data=data, method=method, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def test_http_service(catalog):
    server = make_server(ServeConfig(port=0, catalog=catalog))
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base = "http://%s:%s" % server.server_address[:2]
    try:
        assert _call(base, "GET", "/health")[0] == 200
        status, r = _call(base, "POST", "/reset", {"brief_id": catalog.ids()[0]})
        assert status == 200
        eid = r["episode_id"]
        status, s = _call(base, "POST", "/step", {"episode_id": eid, "tool_call": {"tool": "review_deck"}})
        assert status == 200 and s["observation"]["success"]
        assert _call(base, "GET", f"/state/{eid}")[1]["step_count"] == 1
        assert _call(base, "GET", "/state/missing")[0] == 404
        assert _call(base, "POST", "/step", {"episode_id": eid})[0] == 400
        assert _call(base, "POST", "/nowhere", {})[0] == 404
    finally:
        server.shutdown()
        server.server_close()
