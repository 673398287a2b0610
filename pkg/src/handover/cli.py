"""``handover`` command line: train, eval, prethrow, perturb, estimator-train, inspect-ckpt.

Exit codes: 0 ok, 2 configuration or usage error, 3 missing or unreadable artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from handover.config import GapInjection
from handover.errors import CheckpointError, ConfigError, ContractError, MissingArtifactError, NonFiniteError
from handover.harness import (
    EVAL_SEEDS,
    EVAL_TRIALS,
    SETTINGS,
    Policy,
    evaluate,
    perturb,
    prethrow_study,
    record_open_loop,
    require,
    run_episodes,
    write_curves,
    write_jsonl,
)
from handover.pipeline import (
    PipelineConfig,
    atomic_write,
    config_text,
    load_checkpoint,
    load_config,
    run_stage1,
    run_stage2,
    run_stage3,
    save_checkpoint,
)

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _objects(text: str) -> list[str]:
    return [o.strip() for o in text.split(",") if o.strip()]


def _gap(args) -> GapInjection:
    return GapInjection(enabled=True, goal_bias_range=args.goal_bias) if args.goal_bias > 0 else GapInjection()


def cmd_train(args) -> dict:
    cfg = _config(args)
    out = Path(args.out)
    log: list[dict] = []
    if args.stage == 1:
        ck = run_stage1(cfg, log=log.append, ckpt_dir=out, budget=args.updates)
    else:
        if not args.parent:
            raise ConfigError(f"stage {args.stage} needs --from <stage-{args.stage - 1} checkpoint>")
        parent = load_checkpoint(require(args.parent))
        if args.stage == 2:
            ck = run_stage2(parent, cfg)
        else:
            ck = run_stage3(parent, cfg, log=log.append, ckpt_dir=out, budget=args.updates)
    digest = save_checkpoint(out / f"stage{args.stage}.ckpt", ck)
    atomic_write(out / "resolved_config.txt", config_text(cfg))
    if args.stage != 2:
        write_curves(out, ck.curve, args.stage)
        write_jsonl(out / f"metrics_stage{args.stage}.jsonl", [dict(r, seed=cfg.seed) for r in log])
    return {"stage": args.stage, "checkpoint": str(out / f"stage{args.stage}.ckpt"), "sha256": digest,
            "updates": ck.updates, "seed": cfg.seed, "metrics": _short(ck.metrics)}


def _short(metrics: dict) -> dict:
    return {k: v for k, v in metrics.items() if not isinstance(v, list)}


def _policy_for(args, cfg: PipelineConfig) -> Policy:
    if args.setting == "open_loop":
        if args.recording:
            return Policy.open_loop(np.loadtxt(require(args.recording), delimiter=",", ndmin=2))
        ck = load_checkpoint(require(args.ckpt))
        return Policy.open_loop(record_open_loop(Policy.from_checkpoint(ck), cfg.env, cfg.seed))
    ck = load_checkpoint(require(args.ckpt))
    return Policy.from_checkpoint(ck)


def cmd_eval(args) -> dict:
    cfg = _config(args)
    if args.setting not in SETTINGS:
        raise ConfigError(f"unknown setting {args.setting!r}; expected one of {SETTINGS}")
    pol = _policy_for(args, cfg)
    seeds = [cfg.seed * 100 + s for s in range(args.seeds)]
    reports = []
    for obj in _objects(args.objects):
        rep, _ = evaluate(pol, cfg.env, args.setting, obj, seeds, args.trials, gap=_gap(args),
                          schedule=cfg.randomization)
        reports.append(dict(rep.as_dict(), seed=cfg.seed))
    if args.out:
        write_jsonl(args.out, reports)
    if args.trace:
        trace: list = []
        run_episodes(pol, cfg.env.replace(objects=(_objects(args.objects)[0],)), 1, seeds[0], gap=_gap(args),
                     schedule=cfg.randomization, trace=trace)
        write_jsonl(args.trace, trace)
    return {"reports": reports}


def cmd_prethrow(args) -> dict:
    cfg = _config(args)
    paths = {"A": args.ckpt_a or args.ckpt, "B": args.ckpt_b or args.ckpt, "C": args.ckpt_c or args.ckpt}
    if not all(paths.values()):
        raise ConfigError("give --ckpt, or all of --ckpt-a/--ckpt-b/--ckpt-c")
    pols = {p: Policy.from_checkpoint(load_checkpoint(require(path))) for p, path in paths.items()}
    table = prethrow_study(pols, cfg.env, args.trials, seed=cfg.seed)
    rows = [{"pose": p, "std_x": sx, "std_y": sy, "n_landed": n, "n_trials": args.trials, "seed": cfg.seed}
            for p, (sx, sy, n) in table.items()]
    if args.out:
        write_jsonl(args.out, rows)
    return {"prethrow": rows}


def cmd_perturb(args) -> dict:
    cfg = _config(args)
    try:
        direction, mag = args.wind.split(":")
        magnitude = float(mag)
    except ValueError:
        raise ConfigError(f"--wind must look like DIRECTION:MAGNITUDE, got {args.wind!r}") from None
    pol = Policy.from_checkpoint(load_checkpoint(require(args.ckpt)))
    seeds = [cfg.seed * 100 + s for s in range(args.seeds)]
    rep = perturb(pol, cfg.env, direction, magnitude, seeds, args.trials, object_kind=args.object, gap=_gap(args))
    out = dict(rep.as_dict(), seed=cfg.seed)
    if args.out:
        write_jsonl(args.out, [out])
    return {"report": out}


def cmd_estimator_train(args) -> dict:
    cfg = _config(args)
    ck1 = load_checkpoint(require(args.parent))
    ck2 = run_stage2(ck1, cfg)
    out = Path(args.out)
    digest = save_checkpoint(out / "stage2.ckpt", ck2)
    atomic_write(out / "resolved_config.txt", config_text(cfg))
    write_jsonl(out / "estimator_loss.jsonl",
                [{"epoch": i, "train_loss": t, "val_loss": v, "seed": cfg.seed}
                 for i, (t, v) in enumerate(zip(ck2.metrics["train_loss"], ck2.metrics["val_loss"]))])
    return {"checkpoint": str(out / "stage2.ckpt"), "sha256": digest, "val_mae": ck2.metrics["val_mae"],
            "seed": cfg.seed}


def cmd_inspect(args) -> dict:
    ck = load_checkpoint(require(args.path))
    return {"stage": ck.stage, "algo": ck.algo, "updates": ck.updates, "seeds": ck.seeds,
            "parent_hash": ck.parent_hash, "sha256": ck.digest(), "frozen": ck.frozen,
            "has_estimator": ck.estimator is not None, "metrics": _short(ck.metrics),
            "learners": [{"actor": list(lr_.actor.layer_sizes), "critic": list(lr_.critic.layer_sizes)}
                         for lr_ in ck.learners]}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handover", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file (default: built-in defaults)")
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")

    t = sub.add_parser("train", help="run one training stage")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2, 3), required=True)
    t.add_argument("--from", dest="parent", help="parent checkpoint for stages 2 and 3")
    t.add_argument("--updates", type=int, default=None, help="override the stage update budget")
    t.add_argument("--out", default="runs/latest", help="output directory (default: runs/latest)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint under one setting")
    common(e)
    e.add_argument("--ckpt", help="checkpoint to evaluate")
    e.add_argument("--setting", default="ours", help=f"one of {', '.join(SETTINGS)} (default: ours)")
    e.add_argument("--recording", help="CSV action sequence for the open_loop setting")
    e.add_argument("--objects", default="ball,cube,rod")
    e.add_argument("--seeds", type=int, default=EVAL_SEEDS)
    e.add_argument("--trials", type=int, default=EVAL_TRIALS)
    e.add_argument("--goal-bias", type=float, default=0.0, help="gap injection range in metres (0 = off)")
    e.add_argument("--out", help="write reports as JSON lines")
    e.add_argument("--trace", help="write a per-step trace of one episode as JSON lines")
    e.set_defaults(func=cmd_eval)

    pt = sub.add_parser("prethrow", help="landing spread per pre-throw pose")
    common(pt)
    pt.add_argument("--ckpt", help="checkpoint used for every pose")
    pt.add_argument("--ckpt-a")
    pt.add_argument("--ckpt-b")
    pt.add_argument("--ckpt-c")
    pt.add_argument("--trials", type=int, default=100)
    pt.add_argument("--out")
    pt.set_defaults(func=cmd_prethrow)

    w = sub.add_parser("perturb", help="evaluate under constant wind")
    common(w)
    w.add_argument("--ckpt", required=True)
    w.add_argument("--wind", default="opposing:1.0", help="DIRECTION:MAGNITUDE, direction in opposing|along|orthogonal")
    w.add_argument("--object", default="ball")
    w.add_argument("--seeds", type=int, default=EVAL_SEEDS)
    w.add_argument("--trials", type=int, default=EVAL_TRIALS)
    w.add_argument("--goal-bias", type=float, default=0.0)
    w.add_argument("--out")
    w.set_defaults(func=cmd_perturb)

    s = sub.add_parser("estimator-train", help="stage 2: fit the goal estimator on frozen stage-1 policies")
    common(s)
    s.add_argument("--from", dest="parent", required=True)
    s.add_argument("--out", default="runs/latest")
    s.set_defaults(func=cmd_estimator_train)

    i = sub.add_parser("inspect-ckpt", help="print a checkpoint summary")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, CheckpointError) as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
