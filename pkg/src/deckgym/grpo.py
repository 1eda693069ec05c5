"""Desk-scale GRPO: group advantages, clipped surrogate, analytic gradients,
a linear-softmax policy over action templates, and the review_deck collapse run.

"Tokens" here are template selections. A completion is a short sequence of
templates executed on a copy of the prompt state; padding after an episode
ends is masked out exactly as padding tokens would be.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from deckgym.briefs import SlideBrief
from deckgym.env import (
    ActionRewards,
    EnvConfig,
    EnvState,
    ParseFailure,
    Phase,
    SlideEnv,
    ToolCall,
    _content_facts,
    try_parse_tool_call,
)
from deckgym.judge import offline_gateway
from deckgym.render import THEMES
from deckgym.rewards import ComponentWeights

logger = logging.getLogger(__name__)

REVIEW = "review_deck"


# ---------------------------------------------------------------------------
# Core math


def compute_advantages(rewards: Sequence[float] | np.ndarray, eps_adv: float = 1e-4) -> np.ndarray:
    """Group-normalized advantages with the population standard deviation."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need a group of at least 2 rewards")
    return (r - r.mean()) / (r.std() + eps_adv)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def token_logprob(logits: Sequence[float] | np.ndarray, token: int) -> float:
    z = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    if not 0 <= token < z.shape[-1]:
        raise IndexError(f"token {token} out of range for vocabulary of {z.shape[-1]}")
    return float(log_softmax(z)[token])


def importance_ratio(logp_new: float | np.ndarray, logp_old: float | np.ndarray) -> float | np.ndarray:
    return np.exp(np.asarray(logp_new) - np.asarray(logp_old))


def clipped_token_loss(ratio, advantage, eps_clip: float = 0.2):
    """-min(rho*A, clip(rho, 1-eps, 1+eps)*A), elementwise."""
    if not 0.0 < eps_clip < 1.0:
        raise ValueError("eps_clip must lie in (0, 1)")
    rho = np.asarray(ratio, dtype=float)
    a = np.asarray(advantage, dtype=float)
    out = -np.minimum(rho * a, np.clip(rho, 1.0 - eps_clip, 1.0 + eps_clip) * a)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Noise model


@dataclass(frozen=True)
class NoiseModel:
    component_sigmas: tuple[float, ...]
    weights: tuple[float, ...]
    sigma_true: float = 0.0
    sigma_eta: float = 0.0

    def __post_init__(self) -> None:
        if min((*self.component_sigmas, self.sigma_true, self.sigma_eta), default=0) < 0:
            raise ValueError("noise sigmas must be >= 0")

    @property
    def aggregate_sigma(self) -> float:
        return aggregate_noise(self.weights, self.component_sigmas)

    @property
    def snr_is_infinite(self) -> bool:
        return self.sigma_eta == 0

    @property
    def snr(self) -> float:
        return snr(self.sigma_true, self.sigma_eta)


def snr(sigma_true: float, sigma_eta: float) -> float:
    """sigma_true^2 / sigma_eta^2; ``math.inf`` when the noise is zero."""
    if sigma_true < 0 or sigma_eta < 0:
        raise ValueError("sigmas must be >= 0")
    if sigma_eta == 0:
        return math.inf
    return sigma_true**2 / sigma_eta**2


def aggregate_noise(
    weights: Sequence[float] | Mapping[str, float] | ComponentWeights,
    sigmas: Sequence[float] | Mapping[str, float],
) -> float:
    """Std of the weighted-mean reward when components carry independent noise."""
    if isinstance(weights, ComponentWeights):
        weights = weights.as_dict()
    if isinstance(weights, Mapping):
        keys = list(weights)
        w = np.array([weights[k] for k in keys], dtype=float)
        s = np.array([sigmas[k] if isinstance(sigmas, Mapping) else 0.0 for k in keys], dtype=float)
        if not isinstance(sigmas, Mapping):
            s = np.asarray(sigmas, dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
        s = np.asarray(list(sigmas.values()) if isinstance(sigmas, Mapping) else sigmas, dtype=float)
    if w.shape != s.shape:
        raise ValueError("weights and sigmas must align")
    if np.any(s < 0):
        raise ValueError("sigmas must be >= 0")
    return float(np.sqrt(np.sum(w**2 * s**2)) / np.sum(w))


# ---------------------------------------------------------------------------
# Batch and loss


@dataclass
class GrpoGroup:
    prompt_features: np.ndarray  # [D], features of the prompt state
    features: np.ndarray  # [K, L, D], per-token context features
    actions: np.ndarray  # [K, L] template indices
    masks: np.ndarray  # [K, L] 1 for real tokens, 0 for padding
    rewards: np.ndarray  # [K]
    advantages: np.ndarray  # [K]
    old_logprobs: np.ndarray  # [K, L]

    def __post_init__(self) -> None:
        k = self.rewards.shape[0]
        if k < 2:
            raise ValueError("a group needs K >= 2 completions")
        if self.actions.shape != self.masks.shape or self.actions.shape[0] != k:
            raise ValueError("actions, masks and rewards must align")

    @property
    def k(self) -> int:
        return int(self.rewards.shape[0])


@dataclass
class GrpoBatch:
    """Stacked groups: N = total completions, L = max tokens, D = feature dim."""

    features: np.ndarray  # [N, L, D]
    actions: np.ndarray  # [N, L]
    masks: np.ndarray  # [N, L]
    advantages: np.ndarray  # [N]
    old_logprobs: np.ndarray  # [N, L]
    rewards: np.ndarray  # [N]
    group_ids: np.ndarray  # [N]

    @classmethod
    def from_groups(cls, groups: Sequence[GrpoGroup]) -> "GrpoBatch":
        L = max(g.actions.shape[1] for g in groups)
        D = groups[0].features.shape[2]

        def pad(a: np.ndarray, fill: float = 0.0) -> np.ndarray:
            width = [(0, 0), (0, L - a.shape[1])] + [(0, 0)] * (a.ndim - 2)
            return np.pad(a, width, constant_values=fill)

        return cls(
            features=np.concatenate([pad(g.features) for g in groups]).reshape(-1, L, D),
            actions=np.concatenate([pad(g.actions) for g in groups]).astype(int),
            masks=np.concatenate([pad(g.masks) for g in groups]).astype(float),
            advantages=np.concatenate([g.advantages for g in groups]).astype(float),
            old_logprobs=np.concatenate([pad(g.old_logprobs) for g in groups]).astype(float),
            rewards=np.concatenate([g.rewards for g in groups]).astype(float),
            group_ids=np.concatenate([np.full(g.k, i) for i, g in enumerate(groups)]),
        )


@dataclass
class LossTerms:
    loss: float
    surrogate: float
    kl: float
    grad: np.ndarray
    excluded: int = 0
    clip_fraction: float = 0.0


def loss_and_grad(
    weights: np.ndarray,
    batch: GrpoBatch,
    eps_clip: float = 0.2,
    beta: float = 0.0,
    ref_weights: np.ndarray | None = None,
) -> LossTerms:
    """Clipped GRPO objective and its exact gradient with respect to ``weights``.

    loss = mean_i [ sum_t m_t l_t / sum_t m_t ] + beta * KL, where the KL is the
    exact divergence between the two softmax distributions averaged over all
    real tokens. Completions whose mask is all zero are dropped with a warning.
    """
    if beta > 0 and ref_weights is None:
        raise ValueError("beta > 0 needs a reference policy")
    X, A, M = batch.features, batch.actions, batch.masks
    denom = M.sum(axis=1)
    keep = denom > 0
    excluded = int((~keep).sum())
    if excluded:
        logger.warning("excluding %d completion(s) with all-zero masks", excluded)
    if not keep.any():
        return LossTerms(0.0, 0.0, 0.0, np.zeros_like(weights), excluded)
    X, A, M, denom = X[keep], A[keep], M[keep], denom[keep]
    adv = batch.advantages[keep][:, None]
    old = batch.old_logprobs[keep]
    n = X.shape[0]

    logits = X @ weights.T  # [n, L, V]
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    logp = np.take_along_axis(logp_all, A[..., None], axis=-1)[..., 0]
    rho = np.exp(logp - old)
    lo, hi = 1.0 - eps_clip, 1.0 + eps_clip
    unclipped = rho * adv
    clipped = np.clip(rho, lo, hi) * adv
    tok_loss = -np.minimum(unclipped, clipped)
    wtok = M / denom[:, None] / n  # per-token weight in the completion mean
    surrogate = float(np.sum(wtok * tok_loss))

    # d l_t / d logp_t: -rho*A where the unclipped branch is the active minimum
    active = unclipped <= clipped
    dlogp = np.where(active, -rho * adv, 0.0) * wtok
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, A[..., None], 1.0, axis=-1)
    dz = dlogp[..., None] * (onehot - p)  # [n, L, V]

    kl = 0.0
    if beta > 0:
        assert ref_weights is not None
        logq = log_softmax(X @ ref_weights.T)
        kl_tok = np.sum(p * (logp_all - logq), axis=-1)  # [n, L]
        tok_w = M / M.sum()
        kl = float(np.sum(tok_w * kl_tok))
        dz = dz + beta * tok_w[..., None] * p * (logp_all - logq - kl_tok[..., None])

    grad = np.einsum("nlv,nld->vd", dz, X)
    clip_fraction = float(np.sum(M * (~active)) / M.sum())
    return LossTerms(surrogate + beta * kl, surrogate, kl, grad, excluded, clip_fraction)


def grpo_loss(
    weights: np.ndarray,
    batch: GrpoBatch,
    eps_clip: float = 0.2,
    beta: float = 0.0,
    ref_weights: np.ndarray | None = None,
) -> float:
    return loss_and_grad(weights, batch, eps_clip, beta, ref_weights).loss


def finite_difference_check(
    weights: np.ndarray,
    batch: GrpoBatch,
    h: float = 1e-5,
    n_coords: int = 100,
    eps_clip: float = 0.2,
    beta: float = 0.0,
    ref_weights: np.ndarray | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error is ``|g - g_fd| / max(|g|, |g_fd|, floor)`` over
    ``n_coords`` random coordinates (all of them if fewer exist).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = np.random.default_rng(seed)
    g = loss_and_grad(weights, batch, eps_clip, beta, ref_weights).grad
    flat = weights.size
    coords = rng.choice(flat, size=min(n_coords, flat), replace=False)
    worst = 0.0
    for c in coords:
        idx = np.unravel_index(c, weights.shape)
        wp, wm = weights.copy(), weights.copy()
        wp[idx] += h
        wm[idx] -= h
        fd = (grpo_loss(wp, batch, eps_clip, beta, ref_weights) - grpo_loss(wm, batch, eps_clip, beta, ref_weights)) / (2 * h)
        err = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), floor)
        worst = max(worst, err)
    return float(worst)


# ---------------------------------------------------------------------------
# Action templates and state features


@dataclass(frozen=True)
class ActionTemplate:
    name: str
    tool: str
    slot: Any = None

    def expand(self, state: EnvState) -> ToolCall:
        return ToolCall(self.tool, _fill(self, state))


def _facts(brief: SlideBrief) -> list[tuple[str, str]]:
    facts = [(k.replace("/", " ").replace("_", " "), v) for k, v in _content_facts(brief)]
    return facts or [("overview", f"{brief.topic} for {brief.audience}")]


def _outline_titles(brief: SlideBrief, n: int) -> list[str]:
    facts = _facts(brief)
    titles = [brief.topic]
    for i in range(1, n):
        label = facts[(i - 1) % len(facts)][0].title()
        titles.append(f"{label} for {brief.topic}" if i > len(facts) else label)
    return titles


def _slide_sections(brief: SlideBrief, k: int) -> list[dict[str, str]]:
    facts = _facts(brief)
    out = []
    for j in range(3):
        label, text = facts[(k + j) % len(facts)]
        out.append({"heading": label.title(), "body": f"{text}. Why it matters to {brief.audience} in {brief.topic}."})
    return out


def _fill(t: ActionTemplate, state: EnvState) -> dict[str, Any]:
    b = state.brief
    if t.tool == "web_search":
        query = {
            "topic": b.topic,
            "market": f"{b.topic} market size",
            "audience": f"{b.audience} priorities {b.topic}",
            "fact": f"{_facts(b)[0][0]} {b.topic}",
            "trends": f"{b.topic} trends statistics",
            "competitors": f"{b.topic} competitive landscape",
            "risks": f"{b.topic} risks and mitigation",
        }[t.slot]
        return {"query": query}
    if t.tool == "fetch_url":
        if t.slot == "bogus":
            return {"url": "https://example.invalid/report"}
        facts = _content_facts(b)
        key = facts[t.slot % len(facts)][0] if facts else "missing"
        return {"url": f"offline://{b.id}/{key}"}
    if t.tool == "create_outline":
        n = b.num_slides if t.slot == "full" else 3
        return {"sections": [{"title": title, "bullet_points": []} for title in _outline_titles(b, n)]}
    if t.tool == "revise_outline":
        return {"slide_idx": t.slot, "title": f"{_outline_titles(b, t.slot + 1)[-1]} Overview"}
    if t.tool in ("generate_slide", "edit_slide"):
        k = t.slot
        titles = [o["title"] for o in state.outline] or _outline_titles(b, max(b.num_slides, k + 1))
        title = titles[k] if k < len(titles) else f"{b.topic}: Part {k + 1}"
        secs = _slide_sections(b, k + (1 if t.tool == "edit_slide" else 0))
        return {"slide_idx": k, "title": title, "sections": secs}
    if t.tool == "set_theme":
        return {"theme": t.slot}
    if t.tool in ("get_slide_content", "delete_slide", "duplicate_slide"):
        return {"idx": t.slot}
    if t.tool == "insert_slide":
        return {"pos": t.slot, "title": f"{b.topic} Agenda"}
    if t.tool == "reorder_slides":
        n = len(state.slides_html)
        order = list(range(n))[::-1] if t.slot == "reverse" else ([1, 0] + list(range(2, n)) if n >= 2 else [0, 1])
        return {"order": order}
    return {}


def default_templates() -> list[ActionTemplate]:
    """64 templates covering all 14 tools, many bound to a fixed slide index."""
    t: list[ActionTemplate] = []
    t += [ActionTemplate(f"web_search:{s}", "web_search", s) for s in ("topic", "market", "audience", "fact", "trends", "competitors", "risks")]
    t += [ActionTemplate(f"fetch_url:{s}", "fetch_url", s) for s in (0, 1, "bogus")]
    t += [ActionTemplate(f"create_outline:{s}", "create_outline", s) for s in ("full", "short")]
    t += [ActionTemplate(f"revise_outline:{i}", "revise_outline", i) for i in range(3)]
    t += [ActionTemplate(f"generate_slide:{i}", "generate_slide", i) for i in range(12)]
    t += [ActionTemplate(f"edit_slide:{i}", "edit_slide", i) for i in range(10)]
    t += [ActionTemplate(f"set_theme:{s}", "set_theme", s) for s in (*THEMES, "neon")]
    t += [ActionTemplate(f"get_slide_content:{i}", "get_slide_content", i) for i in range(5)]
    t += [ActionTemplate(f"delete_slide:{i}", "delete_slide", i) for i in range(4)]
    t += [ActionTemplate(f"duplicate_slide:{i}", "duplicate_slide", i) for i in range(4)]
    t += [ActionTemplate(f"insert_slide:{i}", "insert_slide", i) for i in range(4)]
    t += [ActionTemplate(f"reorder_slides:{s}", "reorder_slides", s) for s in ("reverse", "swap")]
    t += [ActionTemplate("review_deck", "review_deck"), ActionTemplate("finalize", "finalize")]
    assert len(t) == 64
    return t


SLIDE_BUCKETS = (0, 1, 3, 6, 10)  # lower edges
TURN_BUCKETS = (0, 7, 14, 21, 28)  # lower edges of turns remaining
FEATURE_DIM = len(Phase) + len(SLIDE_BUCKETS) + len(TURN_BUCKETS) + 1


def _bucket(value: int, edges: Sequence[int]) -> int:
    return max(i for i, e in enumerate(edges) if value >= e)


def state_features(state: EnvState) -> np.ndarray:
    """phase one-hot | slide-count bucket | turns-remaining bucket | bias."""
    x = np.zeros(FEATURE_DIM)
    x[state.phase.rank] = 1.0
    off = len(Phase)
    x[off + _bucket(len(state.slides_html), SLIDE_BUCKETS)] = 1.0
    off += len(SLIDE_BUCKETS)
    x[off + _bucket(max(state.turns_remaining, 0), TURN_BUCKETS)] = 1.0
    x[-1] = 1.0
    return x


@dataclass
class PolicyParams:
    template_vocab: list[ActionTemplate]
    weights: np.ndarray  # [V, D]

    def __post_init__(self) -> None:
        if self.weights.shape[0] != len(self.template_vocab):
            raise ValueError("weights rows must match the template vocabulary")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("policy weights must be finite")

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[1])

    @classmethod
    def init(cls, templates: Sequence[ActionTemplate] | None = None, feature_dim: int = FEATURE_DIM,
             scale: float = 0.0, seed: int = 0) -> "PolicyParams":
        vocab = list(templates or default_templates())
        rng = np.random.default_rng(seed)
        return cls(vocab, scale * rng.standard_normal((len(vocab), feature_dim)))

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.template_vocab, self.weights.copy())

    def probs(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.weights @ x)

    def logprob(self, x: np.ndarray, a: int) -> float:
        return token_logprob(self.weights @ x, a)

    def index(self, name: str) -> int:
        return next(i for i, t in enumerate(self.template_vocab) if t.name == name)


# ---------------------------------------------------------------------------
# Completion rewards


def completion_reward(
    completion: str,
    brief: SlideBrief,
    env_factory: Callable[[], SlideEnv] | None = None,
    state: EnvState | None = None,
) -> float:
    """Graduated penalty: -2 unparseable, -1 failed call, else the aggregate quality after the call.

    The call runs on a fresh episode for ``brief`` unless a prompt ``state`` is given.
    """
    env = env_factory() if env_factory else SlideEnv()
    if state is None:
        env.reset(brief)
    else:
        env.state = state.copy()
    call = try_parse_tool_call(completion)
    if isinstance(call, ParseFailure):
        return -2.0
    result = env.step(call)
    if not result.observation.success:
        return -1.0
    return float(result.info["q"])


# ---------------------------------------------------------------------------
# Training


@dataclass
class GrpoConfig:
    K: int = 2
    eps_adv: float = 1e-4
    eps_clip: float = 0.2
    beta: float = 0.0
    learning_rate: float = 0.5
    steps: int = 200
    episodes_per_step: int = 8  # prompts per step
    completion_length: int = 2  # template tokens per completion
    updates_per_batch: int = 1
    arg_error_rate: float = 0.0  # chance the toy model garbles a parameterized call
    reward_mode: str = "step"  # "step" (summed env step rewards) or "graduated"
    review_free_uses: int | None = None  # diminishing-return mitigation when set
    review_decay: float = 0.01
    window: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.eps_adv <= 0:
            raise ValueError("eps_adv must be > 0")
        if not 0 < self.eps_clip < 1:
            raise ValueError("eps_clip must lie in (0, 1)")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.completion_length < 1 or self.episodes_per_step < 1 or self.steps < 0:
            raise ValueError("completion_length, episodes_per_step >= 1 and steps >= 0")
        if self.reward_mode not in ("step", "graduated"):
            raise ValueError("reward_mode must be 'step' or 'graduated'")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump: dict[str, Any]):
        super().__init__(message)
        self.dump = dump


@dataclass
class StepRecord:
    step: int
    avg: float
    min: float
    max: float
    entropy: float
    p_review_deck: float
    loss: float

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainingLog:
    records: list[StepRecord] = field(default_factory=list)
    action_counts: dict[str, int] = field(default_factory=dict)

    def windows(self, size: int = 50) -> list[dict[str, Any]]:
        """Per-window mean of the step averages and the min/max over steps."""
        out = []
        for start in range(0, len(self.records), size):
            chunk = self.records[start : start + size]
            avgs = [r.avg for r in chunk]
            out.append({
                "start": chunk[0].step,
                "end": chunk[-1].step,
                "avg": float(np.mean(avgs)),
                "min": float(min(avgs)),
                "max": float(max(avgs)),
                "p_review_deck": float(np.mean([r.p_review_deck for r in chunk])),
                "entropy": float(np.mean([r.entropy for r in chunk])),
            })
        return out

    def write_jsonl(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for r in self.records:
                d = r.to_dict()
                f.write(json.dumps({k: d[k] for k in ("step", "avg", "min", "max", "entropy", "p_review_deck")}) + "\n")
        return path


def format_window_table(windows: Sequence[Mapping[str, Any]]) -> str:
    lines = [f"{'Steps':<12}{'Avg':>9}{'Min':>9}{'Max':>9}{'P(review)':>11}", "-" * 50]
    for w in windows:
        lines.append(f"{w['start']}-{w['end']:<{12 - len(str(w['start'])) - 1}}{w['avg']:>9.3f}{w['min']:>9.3f}"
                     f"{w['max']:>9.3f}{w['p_review_deck']:>11.3f}")
    return "\n".join(lines)


class _Episode:
    """A running on-policy episode whose states serve as GRPO prompts."""

    def __init__(self, env: SlideEnv, brief: SlideBrief):
        self.env = env
        self.brief = brief
        env.reset(brief, episode_id=f"grpo-{brief.id}")

    @property
    def state(self) -> EnvState:
        assert self.env.state is not None
        return self.env.state


class GrpoTrainer:
    def __init__(
        self,
        policy: PolicyParams,
        briefs: Sequence[SlideBrief],
        config: GrpoConfig | None = None,
        reward_fn: Callable[[EnvState, Sequence[ToolCall | str]], float] | None = None,
    ):
        if not briefs:
            raise ValueError("need at least one brief")
        self.policy = policy
        self.briefs = list(briefs)
        self.config = config or GrpoConfig()
        self.reward_fn = reward_fn
        self.rng = np.random.default_rng(self.config.seed)
        self.ref_weights = policy.weights.copy() if self.config.beta > 0 else None
        self.env_config = EnvConfig(
            action_rewards=ActionRewards(
                review_free_uses=self.config.review_free_uses, review_decay=self.config.review_decay
            ),
            step_judge=offline_gateway(),
        )
        self._next_brief = 0
        self.episodes = [self._new_episode() for _ in range(self.config.episodes_per_step)]
        self.log = TrainingLog()

    def _new_episode(self) -> _Episode:
        brief = self.briefs[self._next_brief % len(self.briefs)]
        self._next_brief += 1
        return _Episode(SlideEnv(self.env_config), brief)

    def _emit(self, template: ActionTemplate, state: EnvState) -> ToolCall | str:
        """The toy model's output for a template, possibly with a garbled argument."""
        call = template.expand(state)
        if call.params and self.rng.random() < self.config.arg_error_rate:
            params = dict(call.params)
            params.pop(next(iter(params)))
            return ToolCall(call.tool, params)
        return call

    def _rollout(self, prompt: EnvState) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, float, EnvState]:
        L, D = self.config.completion_length, self.policy.feature_dim
        feats, acts, masks, logps = np.zeros((L, D)), np.zeros(L, dtype=int), np.zeros(L), np.zeros(L)
        env = SlideEnv(self.env_config)
        env.state = prompt.copy()
        total = 0.0
        calls: list[ToolCall | str] = []
        for t in range(L):
            if env.state.terminated:
                break
            x = state_features(env.state)
            p = self.policy.probs(x)
            a = int(self.rng.choice(len(p), p=p))
            feats[t], acts[t], masks[t], logps[t] = x, a, 1.0, math.log(p[a])
            call = self._emit(self.policy.template_vocab[a], env.state)
            calls.append(call)
            res = env.step(call)
            if self.config.reward_mode == "step":
                total += res.reward
        if self.reward_fn is not None:
            total = float(self.reward_fn(prompt, calls))
        elif self.config.reward_mode == "graduated":
            total = _graduated(prompt, calls, self.env_config)
        return feats, acts, masks, logps, total, env.state

    def collect(self) -> tuple[list[GrpoGroup], list[EnvState]]:
        groups, next_states = [], []
        for ep in self.episodes:
            prompt = ep.state
            outs = [self._rollout(prompt) for _ in range(self.config.K)]
            rewards = np.array([o[4] for o in outs])
            groups.append(GrpoGroup(
                prompt_features=state_features(prompt),
                features=np.stack([o[0] for o in outs]),
                actions=np.stack([o[1] for o in outs]),
                masks=np.stack([o[2] for o in outs]),
                rewards=rewards,
                advantages=compute_advantages(rewards, self.config.eps_adv),
                old_logprobs=np.stack([o[3] for o in outs]),
            ))
            next_states.append(outs[0][5])
        return groups, next_states

    def step(self, step_idx: int) -> StepRecord:
        cfg = self.config
        groups, next_states = self.collect()
        batch = GrpoBatch.from_groups(groups)
        loss = 0.0
        for _ in range(cfg.updates_per_batch):
            terms = loss_and_grad(self.policy.weights, batch, cfg.eps_clip, cfg.beta, self.ref_weights)
            loss = terms.loss
            if not math.isfinite(loss) or not np.all(np.isfinite(terms.grad)):
                dump = {"step": step_idx, "loss": loss, "weights": self.policy.weights.tolist(),
                        "rewards": batch.rewards.tolist(), "advantages": batch.advantages.tolist()}
                raise TrainingDiverged(f"non-finite loss at step {step_idx}", dump)
            self.policy.weights -= cfg.learning_rate * terms.grad

        # statistics of the policy at the prompt states it was trained on
        probs = np.stack([self.policy.probs(g.prompt_features) for g in groups])
        entropy = float(np.mean(-np.sum(probs * np.log(np.clip(probs, 1e-300, None)), axis=1)))
        p_review = float(np.mean(probs[:, self.policy.index(REVIEW)]))
        for a, m in zip(batch.actions.ravel(), batch.masks.ravel()):
            if m:
                name = self.policy.template_vocab[a].name
                self.log.action_counts[name] = self.log.action_counts.get(name, 0) + 1

        # advance each episode along its first sampled completion
        for i, (ep, s) in enumerate(zip(self.episodes, next_states)):
            ep.env.state = s
            if s.terminated:
                self.episodes[i] = self._new_episode()
        r = batch.rewards
        rec = StepRecord(step_idx, float(r.mean()), float(r.min()), float(r.max()), entropy, p_review, loss)
        self.log.records.append(rec)
        return rec

    def train(self, steps: int | None = None, callback: Callable[[StepRecord], None] | None = None) -> TrainingLog:
        for i in range(self.config.steps if steps is None else steps):
            rec = self.step(len(self.log.records))
            if callback:
                callback(rec)
        return self.log


def _graduated(prompt: EnvState, calls: Sequence[ToolCall | str], env_config: EnvConfig) -> float:
    """Graduated-penalty score of a completion's first call."""
    env = SlideEnv(env_config)
    env.state = prompt.copy()
    first = calls[0]
    if isinstance(first, str):
        first = try_parse_tool_call(first)
    if isinstance(first, ParseFailure):
        return -2.0
    res = env.step(first)
    return float(res.info["q"]) if res.observation.success else -1.0


def train(
    policy: PolicyParams,
    briefs: Sequence[SlideBrief],
    config: GrpoConfig | None = None,
    reward_fn: Callable[[EnvState, Sequence[ToolCall | str]], float] | None = None,
) -> TrainingLog:
    return GrpoTrainer(policy, briefs, config, reward_fn).train()


# ---------------------------------------------------------------------------
# Collapse experiment


@dataclass
class CollapseConfig:
    steps: int = 400
    K: int = 2
    learning_rate: float = 0.5
    episodes_per_step: int = 8
    completion_length: int = 2
    arg_error_rate: float = 0.6
    beta: float = 0.0
    seed: int = 0
    window: int = 50
    n_briefs: int = 8
    mitigation: bool = False
    review_free_uses: int = 1
    review_decay: float = 0.01

    def grpo(self, mitigated: bool) -> GrpoConfig:
        return GrpoConfig(
            K=self.K,
            beta=self.beta,
            learning_rate=self.learning_rate,
            steps=self.steps,
            episodes_per_step=self.episodes_per_step,
            completion_length=self.completion_length,
            arg_error_rate=self.arg_error_rate,
            review_free_uses=self.review_free_uses if mitigated else None,
            review_decay=self.review_decay,
            window=self.window,
            seed=self.seed,
        )


@dataclass
class ScriptedReviewResult:
    turns: int
    cumulative_reward: float
    aggregate_quality: float
    slides: int
    completed: bool


@dataclass
class CollapseRun:
    mitigated: bool
    windows: list[dict[str, Any]]
    final_p_review: float
    final_distribution: dict[str, float]
    log: TrainingLog


@dataclass
class CollapseReport:
    scripted: ScriptedReviewResult
    baseline: CollapseRun
    mitigated: CollapseRun | None = None

    def table(self) -> str:
        parts = ["beta=0 run", format_window_table(self.baseline.windows)]
        if self.mitigated is not None:
            parts += ["", "diminishing-return run", format_window_table(self.mitigated.windows)]
        s = self.scripted
        parts += ["", f"scripted review_deck x{s.turns}: cumulative reward {s.cumulative_reward:.2f}, "
                      f"aggregate quality {s.aggregate_quality:.1f}, slides {s.slides}"]
        return "\n".join(parts)


def scripted_review_episode(brief: SlideBrief, turns: int = 35) -> ScriptedReviewResult:
    env = SlideEnv(EnvConfig(max_turns=turns))
    env.reset(brief)
    while not env.state.terminated:  # type: ignore[union-attr]
        env.step(ToolCall(REVIEW))
    s = env.state
    assert s is not None
    return ScriptedReviewResult(s.step_count, s.cumulative_reward, s.quality, len(s.slides_html), s.finalized)


def _final_distribution(trainer: GrpoTrainer, probe: Sequence[EnvState]) -> dict[str, float]:
    probs = np.mean([trainer.policy.probs(state_features(s)) for s in probe], axis=0)
    by_tool: dict[str, float] = {}
    for t, p in zip(trainer.policy.template_vocab, probs):
        by_tool[t.tool] = by_tool.get(t.tool, 0.0) + float(p)
    return by_tool


def _run(cfg: CollapseConfig, briefs: Sequence[SlideBrief], mitigated: bool) -> CollapseRun:
    gcfg = cfg.grpo(mitigated)
    trainer = GrpoTrainer(PolicyParams.init(seed=cfg.seed), briefs, gcfg)
    log = trainer.train()
    tail = log.records[-cfg.window :]
    final_p = float(np.mean([r.p_review_deck for r in tail]))
    probe = [ep.state for ep in trainer.episodes]
    return CollapseRun(mitigated, log.windows(cfg.window), final_p, _final_distribution(trainer, probe), log)


def run_collapse_experiment(
    config: CollapseConfig | None = None, briefs: Sequence[SlideBrief] | None = None
) -> CollapseReport:
    """Train with beta=0 on step rewards and report how review_deck takes over.

    With ``config.mitigation`` a second run charges repeated review_deck use.
    """
    cfg = config or CollapseConfig()
    if briefs is None:
        from deckgym.briefs import builtin_catalog

        briefs = list(builtin_catalog())[: cfg.n_briefs]
    scripted = scripted_review_episode(briefs[0])
    baseline = _run(cfg, briefs, mitigated=False)
    mitigated = _run(cfg, briefs, mitigated=True) if cfg.mitigation else None
    return CollapseReport(scripted, baseline, mitigated)


def random_batch(
    n_groups: int = 4,
    K: int = 2,
    L: int = 3,
    V: int = 8,
    D: int = 5,
    seed: int = 0,
    off_policy: float = 0.3,
) -> tuple[np.ndarray, GrpoBatch]:
    """A random policy and batch for gradient checks; old logprobs are perturbed by ``off_policy``."""
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((V, D))
    groups = []
    for _ in range(n_groups):
        X = rng.standard_normal((K, L, D))
        acts = rng.integers(0, V, size=(K, L))
        masks = np.ones((K, L))
        lengths = rng.integers(1, L + 1, size=K)
        for k, n in enumerate(lengths):
            masks[k, n:] = 0.0
        logp = np.take_along_axis(log_softmax(X @ W.T), acts[..., None], axis=-1)[..., 0]
        old = logp + off_policy * rng.standard_normal(logp.shape)
        rewards = rng.standard_normal(K)
        groups.append(GrpoGroup(X[:, 0, :], X, acts, masks, rewards, compute_advantages(rewards), old))
    return W, GrpoBatch.from_groups(groups)


__all__ = [
    "ActionTemplate",
    "CollapseConfig",
    "CollapseReport",
    "GrpoBatch",
    "GrpoConfig",
    "GrpoGroup",
    "GrpoTrainer",
    "NoiseModel",
    "PolicyParams",
    "TrainingDiverged",
    "TrainingLog",
    "aggregate_noise",
    "clipped_token_loss",
    "completion_reward",
    "compute_advantages",
    "default_templates",
    "finite_difference_check",
    "grpo_loss",
    "importance_ratio",
    "loss_and_grad",
    "random_batch",
    "run_collapse_experiment",
    "scripted_review_episode",
    "snr",
    "state_features",
    "token_logprob",
    "train",
]
