"""Config-driven experiment runner.

Subcommands: train-clean, inject, evaluate, sweep, trace.  Every command is
reproducible from (config, seed): a repeated run writes byte-identical
artifacts.  Exit codes: 0 success, 1 validation failure, 2 runtime failure,
3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .arena import Arena, ArenaError
from .backdoor import (
    attack_metadata,
    inject_backdoor,
    load_backdoored_model,
    save_backdoored_model,
)
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, component_seed, load_experiment_config
from .evaluation import (
    clean_curves_csv,
    evaluate,
    lambda_sweep,
    metrics_table,
    training_curves_csv,
)
from .marl import (
    DivergenceError,
    load_team_model,
    record_to_jsonl,
    save_team_model,
    train_clean,
)
from .nets import NonFiniteError
from .trigger import TriggerParseError

log = logging.getLogger("marltrap")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_DIVERGENCE = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="marltrap", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="experiment YAML")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if checkpoint:
            p.add_argument(
                "--checkpoint",
                action="append",
                required=True,
                help="model container path (repeatable where multiple models apply)",
            )

    common(sub.add_parser("train-clean", help="train a clean team model"))
    common(sub.add_parser("inject", help="retrain one agent with the backdoor"), checkpoint=True)
    p_eval = sub.add_parser("evaluate", help="measure winning rates and attack metrics")
    common(p_eval, checkpoint=True)
    p_eval.add_argument(
        "--condition",
        choices=["clean", "poisoned", "full"],
        default="full",
        help="single-condition report, or the full metric table",
    )
    common(sub.add_parser("sweep", help="inject and evaluate across blend values"), checkpoint=True)
    p_trace = sub.add_parser("trace", help="dump annotated episode trajectories")
    common(p_trace, checkpoint=True)
    p_trace.add_argument("--condition", choices=["clean", "poisoned"], default="clean")
    p_trace.add_argument("--episodes", type=int, default=1)
    return parser


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    log.info("wrote %s", path)


def _write_summary(out_dir: Path, name: str, payload: dict):
    _write(out_dir / name, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _config_echo(cfg) -> dict:
    echo = {
        "seed": cfg.seed,
        "algo": cfg.algo,
        "arena": cfg.arena.to_dict(),
        "train": dataclasses.asdict(cfg.train),
        "evaluation": dataclasses.asdict(cfg.evaluation),
        "source": cfg.source,
    }
    if cfg.attack is not None:
        attack = dataclasses.asdict(cfg.attack.attack)
        attack.pop("trigger")
        echo["attack"] = attack
        echo["attack"]["trigger_file"] = cfg.attack.trigger_file
        echo["attack"]["episodes"] = cfg.attack.episodes
        echo["attack"]["lambdas"] = cfg.attack.lambdas
    return echo


def _load_any_model(path: str):
    _, topology, _ = load_checkpoint(path)
    kind = topology.get("kind")
    if kind == "clean":
        return load_team_model(path)[0], "clean"
    if kind == "backdoored":
        return load_backdoored_model(path)[0], "backdoored"
    raise CheckpointError(f"{path}: unknown model kind {kind!r}")


def cmd_train_clean(args) -> int:
    cfg = load_experiment_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = cfg.resolve_output_dir(args.out)
    model, curves = train_clean(
        cfg.algo, cfg.arena, cfg.train, component_seed(seed, "train_clean"),
        progress=lambda row: log.info("clean %s", row),
    )
    ckpt = out_dir / f"clean_{cfg.algo}.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    digest = save_team_model(ckpt, model, {"seed": seed, "algo": cfg.algo})
    _write(out_dir / "clean_curves.csv", clean_curves_csv(curves))
    _write_summary(
        out_dir,
        "train_clean_summary.json",
        {
            "checkpoint": str(ckpt),
            "payload_sha256": digest,
            "model_sha256": model.digest(),
            "final": curves[-1] if curves else None,
            "config": _config_echo(cfg),
        },
    )
    return EXIT_OK


def cmd_inject(args) -> int:
    cfg = load_experiment_config(args.config, need_attack=True)
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = cfg.resolve_output_dir(args.out)
    clean_model, _ = load_team_model(args.checkpoint[0])
    if cfg.attack.lambdas:
        return _run_sweep(args, cfg, seed, out_dir, clean_model)
    train = dataclasses.replace(cfg.train, episodes=cfg.attack.episodes, eps_start=cfg.train.eps, eps_anneal_episodes=0)
    model, curves = inject_backdoor(
        clean_model, cfg.attack.attack, cfg.arena, train,
        component_seed(seed, "inject"),
        progress=lambda row: log.info("inject %s", row),
    )
    baseline = evaluate(
        clean_model, cfg.arena, "clean", cfg.train.eval_episodes, component_seed(seed, "evaluate")
    )
    ckpt = out_dir / f"backdoored_{cfg.algo}.ckpt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    meta = attack_metadata(cfg.attack.attack, clean_model.digest())
    meta["seed"] = seed
    digest = save_backdoored_model(ckpt, model, meta)
    reference = {"r_cc": baseline.mean_reward, "wr_cc": baseline.winning_rate}
    _write(
        out_dir / "inject_curves.csv",
        training_curves_csv(curves, reference, cfg.evaluation.smooth_window),
    )
    _write_summary(
        out_dir,
        "inject_summary.json",
        {
            "checkpoint": str(ckpt),
            "payload_sha256": digest,
            "attack": meta,
            "final": curves[-1] if curves else None,
            "config": _config_echo(cfg),
        },
    )
    return EXIT_OK


def _run_sweep(args, cfg, seed, out_dir, clean_model):
    train = dataclasses.replace(cfg.train, episodes=cfg.attack.episodes, eps_start=cfg.train.eps, eps_anneal_episodes=0)
    rows = lambda_sweep(
        clean_model,
        cfg.attack.lambdas or [0.0, 0.2, 0.5, 0.8, 1.0],
        cfg.attack.attack,
        cfg.arena,
        train,
        cfg.evaluation.episodes,
        component_seed(seed, "sweep"),
        progress=lambda row: log.info("sweep %s", row),
    )
    lines = ["lambda,wr_cc,wr_bc,wr_bp,cpvr,asr"]
    for row in rows:
        lines.append(
            f"{row['lambda']},{row['wr_cc']},{row['wr_bc']},{row['wr_bp']},{row['cpvr']},{row['asr']}"
        )
    _write(out_dir / "sweep.csv", "\n".join(lines) + "\n")
    _write_summary(
        out_dir, "sweep_summary.json", {"rows": rows, "config": _config_echo(cfg)}
    )
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_experiment_config(args.config, need_attack=True)
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = cfg.resolve_output_dir(args.out)
    clean_model, _ = load_team_model(args.checkpoint[0])
    return _run_sweep(args, cfg, seed, out_dir, clean_model)


def cmd_evaluate(args) -> int:
    cfg = load_experiment_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = cfg.resolve_output_dir(args.out)
    eval_seed = component_seed(seed, "evaluate")
    n = cfg.evaluation.episodes
    models = [(_load_any_model(p), p) for p in args.checkpoint]
    trigger = cfg.attack.attack.trigger if cfg.attack else None
    agent_k = cfg.attack.attack.agent if cfg.attack else 0
    if args.condition == "poisoned" and trigger is None:
        raise ConfigError("poisoned-condition evaluation needs the attack section")

    reports = {}
    if args.condition in ("clean", "poisoned"):
        for (model, kind), path in models:
            rep = evaluate(
                model, cfg.arena, args.condition, n, eval_seed,
                trigger=trigger, agent_k=agent_k,
            )
            reports[f"{kind}:{Path(path).name}"] = rep.summary()
        payload = {"condition": args.condition, "reports": reports}
        metrics_csv = "\n".join(
            ["model,condition,winning_rate,mean_reward"]
            + [
                f"{name},{r['condition']},{r['winning_rate']},{r['mean_reward']}"
                for name, r in reports.items()
            ]
        ) + "\n"
    else:
        clean_models = [m for (m, kind), _ in models if kind == "clean"]
        bd_models = [m for (m, kind), _ in models if kind == "backdoored"]
        if not clean_models:
            raise ConfigError("full evaluation needs a clean checkpoint")
        clean_model = clean_models[0]
        wr_cc_rep = evaluate(clean_model, cfg.arena, "clean", n, eval_seed)
        payload = {"wr_cc": wr_cc_rep.summary()}
        table = {"wr_cc": wr_cc_rep.winning_rate}
        if bd_models:
            if trigger is None:
                raise ConfigError("evaluating a backdoored model needs the attack section")
            bd = bd_models[0]
            bc = evaluate(bd, cfg.arena, "clean", n, eval_seed)
            bp = evaluate(bd, cfg.arena, "poisoned", n, eval_seed, trigger=trigger, agent_k=agent_k)
            table = metrics_table(wr_cc_rep.winning_rate, bc.winning_rate, bp.winning_rate)
            payload.update({"wr_bc": bc.summary(), "wr_bp": bp.summary()})
        payload["metrics"] = table
        metrics_csv = (
            ",".join(table.keys()) + "\n" + ",".join(str(v) for v in table.values()) + "\n"
        )
    payload["checkpoints"] = {
        p: load_checkpoint(p)[2] or {"payload": "unannotated"} for p in args.checkpoint
    }
    payload["config"] = _config_echo(cfg)
    _write(out_dir / "metrics.csv", metrics_csv)
    _write_summary(out_dir, "evaluate_summary.json", payload)
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = load_experiment_config(args.config, need_attack=args.condition == "poisoned")
    seed = args.seed if args.seed is not None else cfg.seed
    out_dir = cfg.resolve_output_dir(args.out)
    model, kind = _load_any_model(args.checkpoint[0])
    trigger = cfg.attack.attack.trigger if cfg.attack else None
    agent_k = cfg.attack.attack.agent if cfg.attack else 0
    arena = Arena(cfg.arena)
    from .backdoor import TriggerHooks
    from .marl import greedy_rollouts

    if kind == "backdoored":
        policy_factory = model.policy
        agent_k = model.agent_k
    else:
        from .marl import SharedTeamPolicy

        policy_factory = lambda: SharedTeamPolicy(model.agent, model.n_agents)
    hooks_factory = None
    if args.condition == "poisoned":
        hooks_factory = lambda: TriggerHooks(arena, trigger, agent_k)
    records = greedy_rollouts(
        arena, policy_factory, args.episodes,
        np.random.SeedSequence(component_seed(seed, "trace")),
        record_units=True, hooks_factory=hooks_factory,
    )
    lines = [record_to_jsonl(rec, arena) for rec in records]
    _write(out_dir / "trace.jsonl", "".join(lines))
    annotations = []
    for rec in records:
        ann = {
            "poisoned": rec.poisoned,
            "completion_step": rec.completion_step,
            "controlled_enemy": rec.controlled_enemy,
            "won": rec.won,
            "length": rec.length,
        }
        if rec.completion_step is not None and cfg.attack is not None:
            c = rec.completion_step
            ann["attack_window"] = [c, c + cfg.attack.attack.attack_duration - 1]
        annotations.append(ann)
    _write_summary(
        out_dir,
        "trace_summary.json",
        {"episodes": annotations, "condition": args.condition, "config": _config_echo(cfg)},
    )
    return EXIT_OK


COMMANDS = {
    "train-clean": cmd_train_clean,
    "inject": cmd_inject,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "trace": cmd_trace,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigError, TriggerParseError, ArenaError) as e:
        log.error("validation: %s", e)
        return EXIT_VALIDATION
    except DivergenceError as e:
        log.error("divergence: %s (episode %s)", e, e.dump.episode)
        return EXIT_DIVERGENCE
    except NonFiniteError as e:
        log.error("divergence: %s", e)
        return EXIT_DIVERGENCE
    except (CheckpointError, OSError, RuntimeError, ValueError) as e:
        log.error("runtime: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
