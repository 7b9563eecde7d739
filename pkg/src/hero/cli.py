"""Command-line entry point: ``hero <subcommand> [--config F] [--seed N] [--out D] [--fast]``.

Exit status: 0 on success, 1 for configuration problems (bad config file,
missing checkpoints), 2 for failures during a run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from hero import coop
from hero import low_agent as L
from hero import metrics
from hero.config import RunConfig, build
from hero.errors import ConfigError, HeroError
from hero.options import LEARNED_OPTIONS, OptionId

log = logging.getLogger("hero")

STAGE_OF = {"train-skills": "skills", "train-coop": "cooperate", "train-dqn": "baseline",
            "evaluate": "evaluate", "emit-curves": "evaluate"}


def write_json(path: Path, body) -> None:
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def skill_hyper(cfg: RunConfig) -> L.SkillHyper:
    h = cfg.hyper
    return L.SkillHyper(hidden=h.hidden_dim, lr=h.learning_rate, gamma=h.discount_factor,
                        tau=h.target_update_rate, batch_size=h.batch_size, alpha=h.skill_entropy_weight,
                        buffer_capacity=h.buffer_capacity)


def train_skills(cfg: RunConfig, args) -> None:
    seed = cfg.seeds[0]
    out = Path(cfg.out_dir) / "skills"
    out.mkdir(parents=True, exist_ok=True)
    env_cfg = cfg.skill_env_config()
    entries: dict[OptionId, dict | None] = {OptionId.KEEP_LANE: None}
    report = {}
    for k, option in enumerate(LEARNED_OPTIONS):
        log.info("training %s for %d episodes", option.name, cfg.hyper.skill_episodes)
        policy, curve = L.train_skill(env_cfg, option, cfg.hyper.skill_episodes, seed * 10 + k, skill_hyper(cfg))
        entries[option] = L.save_skill(out, policy)
        metrics.write_csv(out / f"curve_{option.name.lower()}.csv", ("episode", "reward"),
                          ({"episode": e, "reward": r} for e, r in enumerate(curve)))
        rep = L.evaluate_skill(policy, option, env_cfg, cfg.hyper.eval_episodes, seed)
        report[option.name] = {"mean_abs_deviation": rep.mean_abs_deviation,
                               "success_rate": rep.success_rate, "mean_speed": rep.mean_speed}
    L.write_manifest(out, entries)
    write_json(out / "report.json", report)


def _skills_dir(cfg: RunConfig, args) -> Path:
    return Path(args.skills) if args.skills else Path(cfg.out_dir) / "skills"


def train_team(cfg: RunConfig, args, kind: str) -> None:
    skills = L.load_skills(_skills_dir(cfg, args))
    env_cfg = cfg.env_config()
    for seed in cfg.seeds:
        out = Path(cfg.out_dir) / kind / f"seed_{seed}"
        out.mkdir(parents=True, exist_ok=True)
        log.info("%s seed %d: %d episodes", kind, seed, cfg.hyper.training_episodes)
        team, rows = coop.run_training(env_cfg, skills, cfg.hyper.training_episodes, seed, cfg.hyper, kind)
        metrics.write_csv(out / "episodes.csv", metrics.episode_columns(env_cfg.learner_ids), rows)
        coop.save_team(out / "checkpoints", team, cfg.digest())
        _evaluate_into(out, env_cfg, team, skills, cfg, seed)


def _evaluate_into(out: Path, env_cfg, team, skills, cfg: RunConfig, seed: int) -> metrics.EvalReport:
    report, rows, results = coop.evaluate(env_cfg, team, skills, cfg.hyper.eval_episodes, seed)
    metrics.write_csv(out / "trajectory.csv", metrics.TRAJECTORY_COLUMNS, rows)
    body = report.as_dict()
    body["lane_change_episode_rate"] = sum(r.lane_change_options > 0 for r in results) / max(len(results), 1)
    write_json(out / "report.json", body)
    return report


def evaluate(cfg: RunConfig, args) -> None:
    skills = L.load_skills(_skills_dir(cfg, args))
    env_cfg = cfg.env_config()
    found = False
    for kind in ("hero", "dqn"):
        for seed in cfg.seeds:
            out = Path(cfg.out_dir) / kind / f"seed_{seed}"
            if not (out / "checkpoints" / coop.BUNDLE_NAME).exists():
                continue
            found = True
            team = coop.load_team(out / "checkpoints", env_cfg, cfg.hyper, cfg.digest())
            _evaluate_into(out, env_cfg, team, skills, cfg, seed)
    if not found:
        raise ConfigError(f"no trained checkpoints under {cfg.out_dir}")


def emit_curves(cfg: RunConfig, args) -> None:
    logs = [Path(args.log)] if args.log else sorted(Path(cfg.out_dir).glob("*/seed_*/episodes.csv"))
    if not logs:
        raise ConfigError(f"no episodes.csv under {cfg.out_dir}")
    for path in logs:
        if not path.exists():
            raise ConfigError(f"no training log at {path}")
        metrics.emit_curves(path, path.parent)


COMMANDS = {
    "train-skills": train_skills,
    "train-coop": lambda cfg, args: train_team(cfg, args, "hero"),
    "train-dqn": lambda cfg, args: train_team(cfg, args, "dqn"),
    "evaluate": evaluate,
    "emit-curves": emit_curves,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hero", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="single seed (overrides the config's list)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--fast", action="store_true", help="2,000 episodes with 2 vehicles")
        p.add_argument("--skills", help="skill checkpoint directory (default <out>/skills)")
        p.add_argument("--log", help="emit-curves: a single episodes.csv")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _flag_partial(args, exc) -> None:
    """Leave an ``INCOMPLETE`` marker next to whatever was written before the failure."""
    out = Path(args.out or "runs")
    if out.is_dir():
        (out / "INCOMPLETE").write_text(f"{args.command}: {exc}\n")


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = build(STAGE_OF[args.command], args.config, args.seed, args.out, args.fast)
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"hero: configuration error: {exc}", file=sys.stderr)
        return 1
    except (HeroError, ArithmeticError, ValueError, OSError) as exc:
        print(f"hero: run failed: {exc}", file=sys.stderr)
        _flag_partial(args, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
