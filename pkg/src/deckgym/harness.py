"""Episode runner, agent adapters, catalog evaluation, rollout files and the HTTP service."""
from __future__ import annotations

import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

from deckgym.briefs import BriefCatalog, SlideBrief, ensure_valid
from deckgym.env import (
    ActionRewards,
    EnvConfig,
    Observation,
    ParseFailure,
    ProtocolError,
    SlideEnv,
    ToolCall,
    _content_facts,
    try_parse_tool_call,
)
from deckgym.export import export_deck
from deckgym.judge import JudgeGateway
from deckgym.rewards import COMPONENTS, ComponentWeights, RewardBreakdown, aggregate_rewards

logger = logging.getLogger(__name__)

SYSTEM_PROMPT = """You build presentation slide decks by calling tools, one step at a time.
Every reply must contain exactly one JSON tool call per turn, for example
{"tool": "web_search", "query": "..."}. Do not call more than one tool per reply.

Tools:
- web_search(query), fetch_url(url): gather facts
- create_outline(sections: [{title, bullet_points}]), revise_outline(slide_idx, title?, bullet_points?)
- generate_slide(slide_idx, title, sections: [{heading, body}]), edit_slide(slide_idx, title?, sections?)
- set_theme(theme: default|dark|corporate|creative|tech, colors?: 0..1)
- get_slide_content(idx), delete_slide(idx), duplicate_slide(idx), insert_slide(pos), reorder_slides(order)
- review_deck(), finalize()

Work through research, planning, generation and refinement, then call finalize once the deck is complete."""


class AgentTransportError(RuntimeError):
    """A remote agent could not be reached."""


# ---------------------------------------------------------------------------
# Agents


class Agent(Protocol):
    name: str

    def reset(self, brief: SlideBrief, first_observation: str) -> None: ...

    def act(self, observation_text: str) -> str: ...


class ScriptedAgent:
    """Replays a fixed list of completions (strings or tool-call objects), then finalizes."""

    def __init__(self, script: Sequence[str | Mapping[str, Any]], name: str = "scripted"):
        self.name = name
        self.script = [s if isinstance(s, str) else json.dumps(dict(s)) for s in script]
        self._i = 0

    def reset(self, brief: SlideBrief, first_observation: str) -> None:
        self._i = 0

    def act(self, observation_text: str) -> str:
        if self._i < len(self.script):
            out = self.script[self._i]
        else:
            out = '{"tool": "finalize"}'
        self._i += 1
        return out


class ReviewAgent:
    """Calls review_deck on every turn."""

    name = "review"

    def reset(self, brief: SlideBrief, first_observation: str) -> None:
        pass

    def act(self, observation_text: str) -> str:
        return '{"tool": "review_deck"}'


def _label(key: str) -> str:
    return key.split("/")[-1].replace("_", " ").strip().title()


def brief_slide_plan(brief: SlideBrief, sections_per_slide: int | None = None) -> list[dict[str, Any]]:
    """Slides that restate the brief: the topic, its audience and every content fact.

    Slide 0 is titled with the topic itself; later slides are titled
    ``"<topic>: <fact label>"`` so reconstruction can recover the topic.
    """
    n = brief.num_slides
    k = sections_per_slide or brief.targets.sections_per_slide
    facts = [(_label(key), text) for key, text in _content_facts(brief)]
    if not facts:
        words = [w for w in brief.topic.split() if len(w) > 3] or [brief.topic]
        facts = [(w.strip(":,-").title(), f"Key considerations about {w} within {brief.topic}") for w in words]
    per_words = max(brief.targets.words_per_slide // max(k, 1) - 4, 4)

    def body(text: str) -> str:
        base = f"{text}."
        filler = f" This shapes the {brief.topic} story for {brief.audience}."
        tokens = (base + filler).split()
        return " ".join(tokens[:per_words]) if len(tokens) > per_words else base + filler

    slides = []
    for i in range(n):
        if i == 0:
            title = brief.topic
            secs = [{"heading": "Audience", "body": f"Prepared for {brief.audience}."}]
            secs += [{"heading": lab, "body": body(t)} for lab, t in facts[: k - 1]]
        else:
            lab, t = facts[(i - 1) % len(facts)]
            title = f"{brief.topic}: {lab}" if i <= len(facts) else f"{brief.topic}: {lab} (part {i // len(facts) + 1})"
            secs = [{"heading": lab, "body": body(t)}]
            j = i
            while len(secs) < k:
                lab2, t2 = facts[j % len(facts)]
                secs.append({"heading": f"{lab2} detail", "body": body(f"{t2}, noted on slide {i + 1}")})
                j += 1
        slides.append({"title": title, "sections": secs[:k]})
    return slides


class CompetentAgent:
    """A deterministic expert: research, outline, one slide per target, finalize."""

    name = "competent"

    def __init__(self, name: str = "competent", theme: str | None = "corporate"):
        self.name = name
        self.theme = theme
        self._queue: list[dict[str, Any]] = []

    def reset(self, brief: SlideBrief, first_observation: str) -> None:
        plan = brief_slide_plan(brief)
        q: list[dict[str, Any]] = [{"tool": "web_search", "query": brief.topic}]
        for key, _ in _content_facts(brief)[:2]:
            q.append({"tool": "fetch_url", "url": f"offline://{brief.id}/{key}"})
        q.append({
            "tool": "create_outline",
            "sections": [{"title": s["title"], "bullet_points": [x["heading"] for x in s["sections"]]} for s in plan],
        })
        theme = brief.theme_hint or self.theme
        if theme:
            q.append({"tool": "set_theme", "theme": theme})
        for i, s in enumerate(plan):
            q.append({"tool": "generate_slide", "slide_idx": i, "title": s["title"], "sections": s["sections"]})
        q.append({"tool": "review_deck"})
        q.append({"tool": "finalize"})
        self._queue = q

    def act(self, observation_text: str) -> str:
        if not self._queue:
            return '{"tool": "finalize"}'
        return json.dumps(self._queue.pop(0))


@dataclass
class RemoteAgent:
    """OpenAI-compatible chat-completions agent.

    The model sees only the system prompt, the brief description and the
    two-line observations; it never sees reward values.
    """

    endpoint: str
    model_name: str
    system_prompt: str = SYSTEM_PROMPT
    timeout: float = 120.0
    api_key_env: str = "AGENT_API_KEY"
    temperature: float = 0.0
    max_history: int = 40
    opener: Callable[..., Any] = urllib.request.urlopen
    messages: list[dict[str, str]] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.model_name

    def reset(self, brief: SlideBrief, first_observation: str) -> None:
        self.messages = [{"role": "system", "content": self.system_prompt}]

    def act(self, observation_text: str) -> str:
        self.messages.append({"role": "user", "content": observation_text})
        history = self.messages[:1] + self.messages[1:][-self.max_history :]
        body = json.dumps({"model": self.model_name, "messages": history, "temperature": self.temperature})
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        req = urllib.request.Request(self.endpoint, data=body.encode("utf-8"), headers=headers, method="POST")
        try:
            with self.opener(req, timeout=self.timeout) as resp:
                data = json.loads(resp.read().decode("utf-8"))
            reply = data["choices"][0]["message"]["content"] or ""
        except (OSError, urllib.error.URLError, ValueError, KeyError, IndexError, TypeError) as exc:
            raise AgentTransportError(f"agent {self.model_name} at {self.endpoint}: {exc}") from exc
        self.messages.append({"role": "assistant", "content": reply})
        return reply


def parse_agent_spec(spec: str) -> Callable[[], Agent]:
    """Agent factory from a spec string.

    ``competent`` | ``review`` | ``script:<file of JSON lines>`` | ``remote:<model>@<url>``;
    any spec may carry a display name as ``<name>=<spec>``.
    """
    name = None
    if "=" in spec.split(":", 1)[0]:
        name, spec = spec.split("=", 1)
    kind, _, arg = spec.partition(":")
    if kind == "competent":
        return lambda: CompetentAgent(name or "competent")
    if kind == "review":
        def make_review() -> Agent:
            a = ReviewAgent()
            if name:
                a.name = name
            return a
        return make_review
    if kind in ("script", "scripted"):
        if not arg:
            raise ValueError("script agent needs a file: script:<path>")
        lines = [ln for ln in Path(arg).read_text(encoding="utf-8").splitlines() if ln.strip()]
        return lambda: ScriptedAgent(lines, name or Path(arg).stem)
    if kind == "remote":
        model, sep, url = arg.partition("@")
        if not sep or not model or not url:
            raise ValueError("remote agent spec is remote:<model>@<url>")
        return lambda: RemoteAgent(url, model if not name else name)
    raise ValueError(f"unknown agent spec {spec!r}")


# ---------------------------------------------------------------------------
# Trajectories


@dataclass
class Turn:
    turn_idx: int
    completion: str
    tool_call: dict[str, Any] | None
    observation: dict[str, Any]
    observation_text: str
    step_reward: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "turn_idx": self.turn_idx,
            "completion": self.completion,
            "tool_call": self.tool_call,
            "observation": self.observation,
            "observation_text": self.observation_text,
            "step_reward": self.step_reward,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Turn":
        return cls(
            int(d["turn_idx"]),
            str(d.get("completion", "")),
            d.get("tool_call"),
            dict(d["observation"]),
            str(d.get("observation_text", "")),
            float(d["step_reward"]),
        )


@dataclass
class Trajectory:
    brief_id: str
    model_name: str
    turns: list[Turn]
    final: RewardBreakdown | None
    completed: bool
    turns_used: int
    slides_created: int
    wall_time: float
    cumulative_reward: float = 0.0
    initial_quality: float = 0.0
    failed: bool = False
    error: str = ""
    reward_config: dict[str, Any] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)

    @property
    def aggregate(self) -> float:
        return self.final.aggregate if self.final else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "brief_id": self.brief_id,
            "model_name": self.model_name,
            "turns": [t.to_dict() for t in self.turns],
            "final": self.final.to_dict() if self.final else None,
            "completed": self.completed,
            "turns_used": self.turns_used,
            "slides_created": self.slides_created,
            "wall_time": self.wall_time,
            "cumulative_reward": self.cumulative_reward,
            "initial_quality": self.initial_quality,
            "failed": self.failed,
            "error": self.error,
            "reward_config": self.reward_config,
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Trajectory":
        return cls(
            brief_id=str(d["brief_id"]),
            model_name=str(d["model_name"]),
            turns=[Turn.from_dict(t) for t in d["turns"]],
            final=RewardBreakdown.from_dict(d["final"]) if d.get("final") else None,
            completed=bool(d["completed"]),
            turns_used=int(d["turns_used"]),
            slides_created=int(d["slides_created"]),
            wall_time=float(d["wall_time"]),
            cumulative_reward=float(d.get("cumulative_reward", 0.0)),
            initial_quality=float(d.get("initial_quality", 0.0)),
            failed=bool(d.get("failed", False)),
            error=str(d.get("error", "")),
            reward_config=dict(d.get("reward_config", {})),
            artifacts=dict(d.get("artifacts", {})),
        )


def reward_config_record(config: EnvConfig) -> dict[str, Any]:
    ar = config.action_rewards
    return {
        "weights": config.weights.as_dict(),
        "action_rewards": {
            "success": ar.success,
            "finalize": ar.finalize,
            "failure": ar.failure,
            "review_free_uses": ar.review_free_uses,
            "review_decay": ar.review_decay,
        },
        "step_judge": "offline" if config.judge().offline else "remote",
        "renderer": type(config.renderer).__name__,
        "max_turns": config.max_turns,
    }


@dataclass
class EpisodeConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    final_judge: JudgeGateway | None = None  # None: use the step judge
    out_dir: str | Path | None = None  # deck artifacts go to <out_dir>/<model>/<brief id>/
    seed_slides: Sequence[str] | None = None


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name) or "agent"


def run_episode(agent: Agent, brief: SlideBrief, config: EpisodeConfig | None = None) -> Trajectory:
    """Reset, then loop observation -> completion -> step until the episode ends."""
    cfg = config or EpisodeConfig()
    ensure_valid(brief)
    env = SlideEnv(cfg.env)
    t0 = time.perf_counter()
    obs = env.reset(brief, seed_slides=cfg.seed_slides, episode_id=f"{_safe(agent.name)}-{brief.id}")
    text = brief_observation_text(obs, env)
    turns: list[Turn] = []
    failed, error = False, ""
    try:
        agent.reset(brief, text)
        while not env.state.terminated:  # type: ignore[union-attr]
            completion = agent.act(text)
            call = try_parse_tool_call(completion)
            res = env.step(call)
            text = env.observation_text(res.observation)
            turns.append(Turn(
                turn_idx=len(turns),
                completion=completion,
                tool_call=None if isinstance(call, ParseFailure) else call.to_dict(),
                observation=res.observation.to_dict(),
                observation_text=text,
                step_reward=res.reward,
            ))
    except AgentTransportError as exc:
        failed, error = True, str(exc)
        logger.warning("episode %s/%s failed: %s", agent.name, brief.id, exc)
    state = env.state
    assert state is not None
    judge = cfg.final_judge or cfg.env.judge()
    final = aggregate_rewards(state, judge, cfg.env.weights, cfg.env.renormalize_unavailable)
    wall = time.perf_counter() - t0
    artifacts: dict[str, str] = {}
    if cfg.out_dir is not None and state.slides_html:
        paths = export_deck(state.slides_html, Path(cfg.out_dir) / _safe(agent.name) / _safe(brief.id), brief.topic)
        artifacts = {k: str(v) for k, v in paths.items()}
    return Trajectory(
        brief_id=brief.id,
        model_name=agent.name,
        turns=turns,
        final=final,
        completed=state.finalized and not failed,
        turns_used=len(turns),
        slides_created=len(state.slides_html),
        wall_time=wall,
        cumulative_reward=state.cumulative_reward,
        initial_quality=state.initial_quality,
        failed=failed,
        error=error,
        reward_config=reward_config_record(cfg.env),
        artifacts=artifacts,
    )


def brief_observation_text(obs: Observation, env: SlideEnv) -> str:
    return env.observation_text(obs)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class ModelSummary:
    model_name: str
    episodes: int
    overall_quality: float
    completion_rate: float
    avg_turns: float
    avg_slides: float
    avg_time: float
    failed: int
    components: dict[str, float]

    def to_dict(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    models: dict[str, ModelSummary]
    head_to_head: dict[str, dict[str, dict[str, int]]]
    trajectories: list[Trajectory] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "models": {k: v.to_dict() for k, v in self.models.items()},
            "head_to_head": self.head_to_head,
            "episodes": [
                {"model_name": t.model_name, "brief_id": t.brief_id, "aggregate": t.aggregate,
                 "completed": t.completed, "turns_used": t.turns_used, "slides_created": t.slides_created,
                 "failed": t.failed}
                for t in self.trajectories
            ],
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def table(self) -> str:
        cols = ["Model", "Quality", "Compl.", "Turns", "Slides", "Time(s)"]
        lines = [f"{cols[0]:<20}" + "".join(f"{c:>9}" for c in cols[1:])]
        for m in self.models.values():
            lines.append(f"{m.model_name:<20}{m.overall_quality:>9.3f}{m.completion_rate:>9.2f}"
                         f"{m.avg_turns:>9.1f}{m.avg_slides:>9.1f}{m.avg_time:>9.2f}")
        lines.append("")
        lines.append(f"{'Component':<20}" + "".join(f"{m[:9]:>10}" for m in self.models))
        for c in COMPONENTS:
            lines.append(f"{c:<20}" + "".join(f"{m.components[c]:>10.3f}" for m in self.models.values()))
        return "\n".join(lines)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory]) -> "EvalReport":
        by_model: dict[str, list[Trajectory]] = {}
        for t in trajectories:
            by_model.setdefault(t.model_name, []).append(t)
        models = {}
        for name, ts in by_model.items():
            n = len(ts)
            comps = {c: sum(t.final.scores[c] if t.final else 0.0 for t in ts) / n for c in COMPONENTS}
            models[name] = ModelSummary(
                model_name=name,
                episodes=n,
                overall_quality=sum(t.aggregate for t in ts) / n,
                completion_rate=sum(1 for t in ts if t.completed) / n,
                avg_turns=sum(t.turns_used for t in ts) / n,
                avg_slides=sum(t.slides_created for t in ts) / n,
                avg_time=sum(t.wall_time for t in ts) / n,
                failed=sum(1 for t in ts if t.failed),
                components=comps,
            )
        h2h: dict[str, dict[str, dict[str, int]]] = {}
        names = list(by_model)
        scores = {m: {t.brief_id: t.aggregate for t in by_model[m]} for m in names}
        for a in names:
            h2h[a] = {}
            for b in names:
                if a == b:
                    continue
                rec = {"win": 0, "tie": 0, "loss": 0}
                for bid in sorted(set(scores[a]) & set(scores[b])):
                    d = scores[a][bid] - scores[b][bid]
                    rec["tie" if abs(d) <= 1e-12 else ("win" if d > 0 else "loss")] += 1
                h2h[a][b] = rec
        return cls(models, h2h, list(trajectories))


@dataclass
class EvalConfig:
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    workers: int = 4


def evaluate(
    agents: Sequence[Callable[[], Agent]] | Mapping[str, Callable[[], Agent]],
    catalog: BriefCatalog | Sequence[SlideBrief],
    config: EvalConfig | None = None,
) -> EvalReport:
    """Run every (agent, brief) pair and summarize per model.

    ``agents`` are factories so each episode gets a fresh agent. Episodes run
    in a bounded thread pool; results are ordered by (agent, brief).
    """
    cfg = config or EvalConfig()
    factories = list(agents.values()) if isinstance(agents, Mapping) else list(agents)
    briefs = list(catalog)
    if not factories or not briefs:
        raise ValueError("evaluate needs at least one agent and one brief")
    jobs = [(i, b) for i in range(len(factories)) for b in briefs]
    cfg.episode.env.judge()  # create the shared gateway before threads start

    def run(job: tuple[int, SlideBrief]) -> Trajectory:
        i, b = job
        agent = factories[i]()
        try:
            return run_episode(agent, b, cfg.episode)
        except Exception as exc:  # one bad episode must not abort the sweep
            logger.exception("episode %s/%s crashed", agent.name, b.id)
            return Trajectory(b.id, agent.name, [], None, False, 0, 0, 0.0, failed=True, error=repr(exc))

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            trajectories = list(pool.map(run, jobs))
    else:
        trajectories = [run(j) for j in jobs]
    return EvalReport.from_trajectories(trajectories)


# ---------------------------------------------------------------------------
# Rollout files


def export_rollouts(trajectories: Iterable[Trajectory], out_path: str | Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    tmp = out_path.with_name(out_path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for t in trajectories:
            f.write(json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    os.replace(tmp, out_path)
    return out_path


def import_rollouts(path: str | Path) -> list[Trajectory]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(Trajectory.from_dict(json.loads(line)))
    return out


# Field names accepted from externally published rollout records, by our name.
SLIDERL_FIELDS: dict[str, tuple[str, ...]] = {
    "brief_id": ("brief_id", "task_id", "brief_name"),
    "model_name": ("model_name", "model"),
    "turns": ("turns", "steps", "trajectory"),
    "completed": ("completed", "finalized", "success"),
    "final": ("final", "final_scores", "quality_scores", "reward_breakdown"),
    "wall_time": ("wall_time", "elapsed_seconds", "duration"),
    "reward_config": ("reward_config",),
    "slides_created": ("slides_created", "num_slides_created"),
    "turns_used": ("turns_used",),
}
SLIDERL_TURN_FIELDS: dict[str, tuple[str, ...]] = {
    "turn_idx": ("turn_idx", "turn", "step"),
    "tool_call": ("tool_call", "action"),
    "observation": ("observation", "obs"),
    "step_reward": ("step_reward", "reward"),
    "completion": ("completion", "response", "model_output"),
    "observation_text": ("observation_text",),
}


@dataclass
class ImportReport:
    trajectories: list[Trajectory]
    unmapped_fields: dict[str, int]
    skipped: list[str]


def _pick(d: Mapping[str, Any], names: Sequence[str]) -> tuple[Any, str | None]:
    for n in names:
        if n in d:
            return d[n], n
    return None, None


def import_sliderl_records(records: Iterable[Mapping[str, Any]] | str | Path) -> ImportReport:
    """Map external rollout records onto Trajectory by documented field names.

    Fields that match no known name are counted in ``unmapped_fields``; records
    missing a brief id or turns are skipped with a reason.
    """
    if isinstance(records, (str, Path)):
        rows = [json.loads(ln) for ln in Path(records).read_text(encoding="utf-8").splitlines() if ln.strip()]
    else:
        rows = list(records)
    unmapped: dict[str, int] = {}
    skipped: list[str] = []
    out: list[Trajectory] = []
    known = {n for names in SLIDERL_FIELDS.values() for n in names}
    known_turn = {n for names in SLIDERL_TURN_FIELDS.values() for n in names}
    for i, r in enumerate(rows):
        for k in r:
            if k not in known:
                unmapped[k] = unmapped.get(k, 0) + 1
        bid, _ = _pick(r, SLIDERL_FIELDS["brief_id"])
        raw_turns, _ = _pick(r, SLIDERL_FIELDS["turns"])
        if bid is None or raw_turns is None:
            skipped.append(f"record {i}: missing brief id or turns")
            continue
        turns = []
        for j, t in enumerate(raw_turns):
            for k in t:
                if k not in known_turn:
                    unmapped[f"turns.{k}"] = unmapped.get(f"turns.{k}", 0) + 1
            call, _ = _pick(t, SLIDERL_TURN_FIELDS["tool_call"])
            if isinstance(call, str):
                parsed = try_parse_tool_call(call)
                call = None if isinstance(parsed, ParseFailure) else parsed.to_dict()
            obs, _ = _pick(t, SLIDERL_TURN_FIELDS["observation"])
            if isinstance(obs, str):
                obs = {"result": obs}
            idx, _ = _pick(t, SLIDERL_TURN_FIELDS["turn_idx"])
            rew, _ = _pick(t, SLIDERL_TURN_FIELDS["step_reward"])
            comp, _ = _pick(t, SLIDERL_TURN_FIELDS["completion"])
            obs_text, _ = _pick(t, SLIDERL_TURN_FIELDS["observation_text"])
            turns.append(Turn(
                int(idx) if idx is not None else j,
                str(comp) if comp is not None else (json.dumps(call) if call else ""),
                call,
                dict(obs or {}),
                str(obs_text or ""),
                float(rew or 0.0),
            ))
        final_raw, _ = _pick(r, SLIDERL_FIELDS["final"])
        final = None
        if isinstance(final_raw, Mapping):
            if "scores" in final_raw:
                final = RewardBreakdown.from_dict(final_raw)
            elif all(c in final_raw for c in COMPONENTS):
                final = RewardBreakdown.from_scores(final_raw)
        model, _ = _pick(r, SLIDERL_FIELDS["model_name"])
        completed, _ = _pick(r, SLIDERL_FIELDS["completed"])
        wall, _ = _pick(r, SLIDERL_FIELDS["wall_time"])
        rc, _ = _pick(r, SLIDERL_FIELDS["reward_config"])
        out.append(Trajectory(
            brief_id=str(bid),
            model_name=str(model or "unknown"),
            turns=turns,
            final=final,
            completed=bool(completed),
            turns_used=len(turns),
            slides_created=int(_pick(r, SLIDERL_FIELDS["slides_created"])[0] or 0),
            wall_time=float(wall or 0.0),
            cumulative_reward=sum(t.step_reward for t in turns),
            reward_config=dict(rc or {}),
        ))
    return ImportReport(out, unmapped, skipped)


@dataclass
class RewardCheck:
    brief_id: str
    checked: bool
    max_error: float = 0.0
    notice: str = ""


def verify_step_rewards(
    trajectory: Trajectory,
    brief: SlideBrief,
    env_config: EnvConfig | None = None,
    tol: float = 1e-6,
) -> RewardCheck:
    """Replay a trajectory's tool calls and compare recomputed step rewards.

    Only deterministic reward configurations can be replayed; anything else is
    skipped with a notice rather than compared.
    """
    rc = trajectory.reward_config
    if not rc:
        return RewardCheck(trajectory.brief_id, False, notice="no reward config recorded; skipped")
    if rc.get("step_judge") != "offline":
        return RewardCheck(trajectory.brief_id, False, notice="reward config uses a live judge; skipped")
    if rc.get("renderer") not in (None, "StubRenderer"):
        return RewardCheck(trajectory.brief_id, False, notice=f"renderer {rc.get('renderer')} not replayable; skipped")
    if env_config is None:
        ar = rc.get("action_rewards", {})
        env_config = EnvConfig(
            weights=ComponentWeights().with_overrides(rc.get("weights", {})),
            action_rewards=ActionRewards(**ar) if ar else ActionRewards(),
            max_turns=rc.get("max_turns"),
        )
    env = SlideEnv(env_config)
    env.reset(brief)
    worst = 0.0
    for t in trajectory.turns:
        if env.state.terminated:  # type: ignore[union-attr]
            return RewardCheck(trajectory.brief_id, False, worst, "replay ended before the recorded turns")
        call = ToolCall.from_dict(t.tool_call) if t.tool_call else ParseFailure("recorded parse failure")
        res = env.step(call)
        worst = max(worst, abs(res.reward - t.step_reward))
    ok = worst <= tol
    return RewardCheck(trajectory.brief_id, True, worst, "" if ok else f"max step-reward error {worst:.3g} > {tol}")


# ---------------------------------------------------------------------------
# HTTP service


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8000
    catalog: BriefCatalog | None = None
    env: EnvConfig = field(default_factory=EnvConfig)
    idle_timeout: float = 1800.0
    expose_rewards: bool = False  # include reward breakdowns in step info


class _Session:
    def __init__(self, env: SlideEnv):
        self.env = env
        self.lock = threading.Lock()
        self.last_used = time.monotonic()


class SessionStore:
    def __init__(self, idle_timeout: float):
        self.idle_timeout = idle_timeout
        self._sessions: dict[str, _Session] = {}
        self._lock = threading.Lock()

    def add(self, session: _Session, episode_id: str) -> None:
        with self._lock:
            self._sessions[episode_id] = session

    def get(self, episode_id: str) -> _Session | None:
        self.evict()
        with self._lock:
            s = self._sessions.get(episode_id)
            if s is not None:
                s.last_used = time.monotonic()
            return s

    def evict(self) -> int:
        now = time.monotonic()
        with self._lock:
            stale = [k for k, s in self._sessions.items() if now - s.last_used > self.idle_timeout]
            for k in stale:
                del self._sessions[k]
        return len(stale)

    def __len__(self) -> int:
        return len(self._sessions)


class _HttpError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class EnvService:
    """Transport-independent request handling for the environment service."""

    def __init__(self, config: ServeConfig):
        self.config = config
        self.sessions = SessionStore(config.idle_timeout)
        # one offline gateway shared by all sessions; its cache is thread-safe
        config.env.judge()

    def _brief(self, body: Mapping[str, Any]) -> SlideBrief:
        if "brief" in body:
            try:
                brief = SlideBrief.from_dict(body["brief"], default_id=f"adhoc-{uuid.uuid4().hex[:8]}")
                ensure_valid(brief)
            except ValueError as exc:
                raise _HttpError(400, str(exc)) from exc
            return brief
        bid = body.get("brief_id")
        if bid is None:
            raise _HttpError(400, "reset needs brief_id or brief")
        if self.config.catalog is None:
            raise _HttpError(400, "no catalog loaded; pass an inline brief")
        try:
            return self.config.catalog.get(str(bid))
        except KeyError:
            raise _HttpError(404, f"unknown brief_id {bid!r}") from None

    def reset(self, body: Mapping[str, Any]) -> dict[str, Any]:
        brief = self._brief(body)
        env = SlideEnv(self.config.env)
        episode_id = uuid.uuid4().hex
        obs = env.reset(brief, seed_slides=body.get("seed_slides"), episode_id=episode_id)
        self.sessions.add(_Session(env), episode_id)
        return {"episode_id": episode_id, "observation": obs.to_dict(), "observation_text": env.observation_text(obs)}

    def step(self, body: Mapping[str, Any]) -> dict[str, Any]:
        eid = body.get("episode_id")
        session = self.sessions.get(str(eid))
        if session is None:
            raise _HttpError(404, f"unknown episode_id {eid!r}")
        raw = body.get("tool_call")
        if raw is None:
            raise _HttpError(400, "step needs tool_call")
        with session.lock:
            try:
                res = session.env.step(raw if isinstance(raw, (str, Mapping)) else str(raw))
            except ProtocolError as exc:
                raise _HttpError(409, str(exc)) from exc
            out = res.to_dict()
            out["observation_text"] = session.env.observation_text(res.observation)
        if not self.config.expose_rewards:
            out["info"] = {k: v for k, v in out["info"].items() if k in ("step", "tool", "success", "finalized", "truncated")}
        return out

    def state(self, episode_id: str) -> dict[str, Any]:
        session = self.sessions.get(episode_id)
        if session is None:
            raise _HttpError(404, f"unknown episode_id {episode_id!r}")
        with session.lock:
            s = session.env.state
            assert s is not None
            summary = s.summary()
            if self.config.expose_rewards or s.terminated:
                summary["cumulative_reward"] = s.cumulative_reward
                summary["quality"] = s.quality
        return summary


def _handler(service: EnvService) -> type[BaseHTTPRequestHandler]:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt: str, *args: Any) -> None:
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, payload: Any) -> None:
            data = json.dumps(payload).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict[str, Any]:
            n = int(self.headers.get("Content-Length") or 0)
            try:
                body = json.loads(self.rfile.read(n) or b"{}")
            except json.JSONDecodeError as exc:
                raise _HttpError(400, f"bad JSON: {exc}") from exc
            if not isinstance(body, dict):
                raise _HttpError(400, "body must be a JSON object")
            return body

        def _dispatch(self, fn: Callable[[], Any]) -> None:
            try:
                self._send(200, fn())
            except _HttpError as exc:
                self._send(exc.status, {"error": str(exc)})

        def do_POST(self) -> None:  # noqa: N802
            if self.path == "/reset":
                self._dispatch(lambda: service.reset(self._body()))
            elif self.path == "/step":
                self._dispatch(lambda: service.step(self._body()))
            else:
                self._send(404, {"error": f"no route {self.path}"})

        def do_GET(self) -> None:  # noqa: N802
            if self.path.startswith("/state/"):
                eid = self.path[len("/state/") :]
                self._dispatch(lambda: service.state(eid))
            elif self.path == "/health":
                self._send(200, {"ok": True, "sessions": len(service.sessions)})
            else:
                self._send(404, {"error": f"no route {self.path}"})

    return Handler


def make_server(config: ServeConfig) -> ThreadingHTTPServer:
    """Bind the service (port 0 picks a free port) without starting it."""
    server = ThreadingHTTPServer((config.host, config.port), _handler(EnvService(config)))
    server.daemon_threads = True
    return server


def serve(config: ServeConfig) -> None:
    server = make_server(config)
    host, port = server.server_address[:2]
    logger.info("serving on http://%s:%s", host, port)
    try:
        server.serve_forever()
    finally:
        server.server_close()


__all__ = [
    "Agent",
    "AgentTransportError",
    "CompetentAgent",
    "EnvService",
    "EpisodeConfig",
    "EvalConfig",
    "EvalReport",
    "RemoteAgent",
    "ReviewAgent",
    "ScriptedAgent",
    "ServeConfig",
    "Trajectory",
    "Turn",
    "brief_slide_plan",
    "evaluate",
    "export_rollouts",
    "import_rollouts",
    "import_sliderl_records",
    "make_server",
    "parse_agent_spec",
    "run_episode",
    "serve",
    "verify_step_rewards",
]
