"""Command-line entry points: ``deckgym <subcommand>`` and ``grpo-train``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Sequence

from deckgym.briefs import BriefCatalog, builtin_catalog, load_catalog
from deckgym.env import EnvConfig
from deckgym.judge import JudgeConfig, JudgeGateway
from deckgym.render import StubRenderer, browser_renderer
from deckgym.rewards import COMPONENTS, ComponentWeights


def _catalog(path: str | None) -> BriefCatalog:
    return load_catalog(path) if path else builtin_catalog()


def _add_briefs(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--briefs", help="brief file or directory (default: built-in 48-brief catalog)")


def _add_reward_flags(ap: argparse.ArgumentParser) -> None:
    g = ap.add_argument_group("reward weights")
    g.add_argument("--weights", help="JSON file of component weights")
    for c in COMPONENTS:
        g.add_argument(f"--{c}", type=float, metavar="W", help=f"weight for {c}")
    ap.add_argument("--judge", choices=("offline", "remote"), help="judge mode (default: $JUDGE_MODE or offline)")
    ap.add_argument("--renderer", choices=("stub", "browser"), default="stub")
    ap.add_argument("--renormalize-unavailable", action="store_true",
                    help="drop failed judge components instead of failing the reward")


def weights_from_args(args: argparse.Namespace) -> ComponentWeights:
    w = ComponentWeights.from_file(args.weights) if getattr(args, "weights", None) else ComponentWeights()
    overrides = {c: getattr(args, c) for c in COMPONENTS if getattr(args, c, None) is not None}
    return w.with_overrides(overrides)


def env_config_from_args(args: argparse.Namespace) -> EnvConfig:
    jc = JudgeConfig.from_env()
    if args.judge:
        jc = JudgeConfig(jc.endpoint, jc.model_name, jc.timeout, jc.max_retries, jc.cache_path, args.judge)
    return EnvConfig(
        weights=weights_from_args(args),
        renderer=browser_renderer() if args.renderer == "browser" else StubRenderer(),
        step_judge=JudgeGateway(jc),
        renormalize_unavailable=args.renormalize_unavailable,
    )


def _agents(spec: str):
    from deckgym.harness import parse_agent_spec

    return [parse_agent_spec(s.strip()) for s in spec.split(",") if s.strip()]


def cmd_run(args: argparse.Namespace) -> int:
    from deckgym.harness import EpisodeConfig, run_episode

    brief = _catalog(args.briefs).get(args.brief)
    agent = _agents(args.agent)[0]()
    traj = run_episode(agent, brief, EpisodeConfig(env=env_config_from_args(args), out_dir=args.out_dir))
    if args.verbose:
        for t in traj.turns:
            print(f"[{t.turn_idx:02d}] {t.completion[:100]}")
            print("     " + t.observation_text.replace("\n", "\n     "))
    f = traj.final
    print(json.dumps({
        "brief_id": traj.brief_id, "model_name": traj.model_name, "completed": traj.completed,
        "turns_used": traj.turns_used, "slides_created": traj.slides_created,
        "cumulative_reward": round(traj.cumulative_reward, 6), "aggregate": f.aggregate if f else None,
        "scores": f.scores if f else None, "artifacts": traj.artifacts, "error": traj.error or None,
    }, indent=2))
    return 0 if not traj.failed else 1


def _sweep(args: argparse.Namespace):
    from deckgym.harness import EpisodeConfig, EvalConfig, evaluate

    cfg = EvalConfig(EpisodeConfig(env=env_config_from_args(args), out_dir=args.out_dir), workers=args.workers)
    return evaluate(_agents(args.agents), _catalog(args.briefs), cfg)


def cmd_eval(args: argparse.Namespace) -> int:
    from deckgym.harness import export_rollouts

    report = _sweep(args)
    report.write(args.out)
    if args.rollouts:
        export_rollouts(report.trajectories, args.rollouts)
    print(report.table())
    print(f"\nwrote {args.out}")
    return 0


def cmd_export_rollouts(args: argparse.Namespace) -> int:
    from deckgym.harness import export_rollouts, import_sliderl_records

    if args.from_sliderl:
        rep = import_sliderl_records(args.from_sliderl)
        export_rollouts(rep.trajectories, args.out)
        print(f"imported {len(rep.trajectories)} records, skipped {len(rep.skipped)}")
        for name, n in sorted(rep.unmapped_fields.items()):
            print(f"  unmapped field {name!r} in {n} records")
    else:
        report = _sweep(args)
        export_rollouts(report.trajectories, args.out)
        print(f"wrote {len(report.trajectories)} trajectories")
    print(args.out)
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from deckgym.harness import ServeConfig, serve

    serve(ServeConfig(
        host=args.host,
        port=args.port,
        catalog=_catalog(args.briefs),
        env=env_config_from_args(args),
        idle_timeout=args.idle_timeout,
        expose_rewards=args.expose_rewards,
    ))
    return 0


def _add_grpo_args(ap: argparse.ArgumentParser) -> None:
    _add_briefs(ap)
    ap.add_argument("--steps", type=int, default=400)
    ap.add_argument("--k", type=int, default=2, help="completions per group")
    ap.add_argument("--beta", type=float, default=0.0, help="KL penalty coefficient")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr", type=float, default=0.5)
    ap.add_argument("--episodes", type=int, default=8, help="prompts per step")
    ap.add_argument("--arg-error-rate", type=float, default=0.6,
                    help="chance the toy model drops an argument from a parameterized call")
    ap.add_argument("--reward-mode", choices=("step", "graduated"), default="step")
    ap.add_argument("--mitigation", action="store_true", help="diminishing returns on repeated review_deck")
    ap.add_argument("--window", type=int, default=50)
    ap.add_argument("--n-briefs", type=int, default=8)
    ap.add_argument("--log", help="write the JSONL training log here instead of stdout")


def cmd_grpo_train(args: argparse.Namespace) -> int:
    from deckgym.grpo import GrpoConfig, GrpoTrainer, PolicyParams, format_window_table

    briefs = list(_catalog(args.briefs))[: args.n_briefs]
    cfg = GrpoConfig(
        K=args.k, beta=args.beta, learning_rate=args.lr, steps=args.steps, episodes_per_step=args.episodes,
        arg_error_rate=args.arg_error_rate, reward_mode=args.reward_mode,
        review_free_uses=1 if args.mitigation else None, window=args.window, seed=args.seed,
    )
    trainer = GrpoTrainer(PolicyParams.init(seed=args.seed), briefs, cfg)
    keys = ("step", "avg", "min", "max", "entropy", "p_review_deck")
    sink = open(args.log, "w", encoding="utf-8") if args.log else sys.stdout
    try:
        def emit(rec) -> None:
            d = rec.to_dict()
            sink.write(json.dumps({k: d[k] for k in keys}) + "\n")

        log = trainer.train(callback=emit)
    finally:
        if args.log:
            sink.close()
    print(format_window_table(log.windows(args.window)), file=sys.stderr if not args.log else sys.stdout)
    return 0


def cmd_collapse(args: argparse.Namespace) -> int:
    from deckgym.grpo import CollapseConfig, run_collapse_experiment

    briefs = list(_catalog(args.briefs))[: args.n_briefs]
    rep = run_collapse_experiment(CollapseConfig(
        steps=args.steps, K=args.k, beta=args.beta, seed=args.seed, learning_rate=args.lr,
        episodes_per_step=args.episodes, arg_error_rate=args.arg_error_rate, window=args.window,
        n_briefs=args.n_briefs, mitigation=True,
    ), briefs)
    print(rep.table())
    print(f"\nterminal P(review_deck): beta=0 {rep.baseline.final_p_review:.3f}, "
          f"mitigated {rep.mitigated.final_p_review:.3f}")  # type: ignore[union-attr]
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deckgym", description="Slide-deck RL environment tools")
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one episode")
    _add_briefs(p)
    p.add_argument("--brief", required=True, help="brief id")
    p.add_argument("--agent", default="competent", help="agent spec (competent, review, script:<file>, remote:<model>@<url>)")
    p.add_argument("--out-dir", help="export deck.html/deck.pptx under <dir>/<model>/<brief>")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_reward_flags(p)
    p.set_defaults(func=cmd_run)

    for name, func, helptext in (
        ("eval", cmd_eval, "evaluate agents over a brief catalog"),
        ("export-rollouts", cmd_export_rollouts, "write rollout trajectories as JSONL"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_briefs(p)
        p.add_argument("--agents", default="competent", help="comma-separated agent specs")
        p.add_argument("--out-dir", help="export decks under <dir>/<model>/<brief>")
        p.add_argument("--workers", type=int, default=4)
        _add_reward_flags(p)
        if name == "eval":
            p.add_argument("--out", default="report.json")
            p.add_argument("--rollouts", help="also write rollouts JSONL here")
        else:
            p.add_argument("--out", default="rollouts.jsonl")
            p.add_argument("--from-sliderl", help="convert externally published rollout records instead of running")
        p.set_defaults(func=func)

    p = sub.add_parser("serve", help="serve reset/step over HTTP")
    _add_briefs(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--idle-timeout", type=float, default=1800.0)
    p.add_argument("--expose-rewards", action="store_true", help="include reward internals in step info")
    _add_reward_flags(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("grpo-train", help="train the toy GRPO policy")
    _add_grpo_args(p)
    p.set_defaults(func=cmd_grpo_train)

    p = sub.add_parser("collapse", help="run the review_deck collapse experiment with and without mitigation")
    _add_grpo_args(p)
    p.set_defaults(func=cmd_collapse)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    return int(args.func(args) or 0)


def grpo_train_main(argv: Sequence[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="grpo-train", description="Train the toy GRPO policy; JSONL log on stdout")
    _add_grpo_args(ap)
    args = ap.parse_args(argv)
    return cmd_grpo_train(args)


if __name__ == "__main__":
    sys.exit(main())
