"""``mcqlab`` command line.

Exit status: 0 on success, 1 when a verification or acceptance check
fails, 2 on usage, configuration or input-file errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import List, Optional

from .errors import ConfigError, FormatError, McqError
from .io import RunConfig, read_metrics_csv, write_dataset
from .runner import (dataset_from_config, env_from_config, evaluate_agent, load_agent, parse_seeds,
                     refs_from_config, run_finetune, run_training)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p, seed_required=False):
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mcqlab", description="Mildly conservative Q-learning toolkit")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("verify", help="run the tabular proposition checks")
    _common(p, seed_required=True)
    p.add_argument("--out", default="certificates", help="output directory")

    p = sub.add_parser("gen-dataset", help="roll out a behavior controller into a dataset file")
    _common(p, seed_required=True)
    p.add_argument("--out", required=True, help="dataset file to write")

    p = sub.add_parser("train", help="offline training with periodic evaluation")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds; each run writes to OUT/seed<N>")
    p.add_argument("--out", help="run directory (default: run.out_dir)")
    p.add_argument("--deterministic", action="store_true", help="TD3-style deterministic variant")
    p.add_argument("--resume", help="continue from this checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("finetune", help="offline-to-online fine-tuning from a checkpoint")
    _common(p, seed_required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--online-steps", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-plots", help="turn run metrics into per-figure CSV series")
    p.add_argument("runs", nargs="+", help="run directories containing metrics.csv and manifest.json")
    p.add_argument("--out", required=True)
    return parser


def _config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set)


def cmd_verify(args) -> int:
    from .theory import HarnessConfig, run_all, write_certificates

    cfg = _config(args)
    v = cfg.section("verify")
    known = {"contraction_trials", "sandwich_trials", "improvement_trials", "bound_pairs"}
    harness = HarnessConfig(**{k: val for k, val in v.items() if k not in known and val is not None})
    certs = run_all(args.seed, harness, **{k: int(val) for k, val in v.items() if k in known})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_certificates(certs, out / "certificates.txt", out / "certificates.jsonl")
    for c in certs:
        print(c.summary())
    return EXIT_OK if all(c.holds for c in certs) else EXIT_FAILED


def cmd_gen_dataset(args) -> int:
    cfg = _config(args)
    cfg.set_override(f"dataset.seed={args.seed}")
    env = env_from_config(cfg)
    data = dataset_from_config(cfg, env)
    write_dataset(args.out, data)
    print(f"wrote {len(data)} transitions to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.deterministic:
        cfg.set_override("run.mode=train-det")
    if args.seeds:
        seeds, fan_out = parse_seeds(args.seeds), True
    elif args.seed is not None:
        seeds, fan_out = [args.seed], False
    else:
        raise ConfigError("train needs --seed or --seeds")
    base = Path(args.out or cfg.get("run", "out_dir", "runs"))
    env = env_from_config(cfg)
    data = dataset_from_config(cfg, env)
    for seed in seeds:
        out = base / f"seed{seed}" if fan_out else base
        res = run_training(cfg, seed, out, data=data, resume_from=args.resume)
        print(f"seed {seed}: return {res.final_return:.3f} score {res.final_score:.2f} -> {out}")
    return EXIT_OK


def _run_config(args, manifest) -> RunConfig:
    """Explicit ``--config`` wins; otherwise reuse the config recorded with the run."""
    if args.config is not None:
        return _config(args)
    cfg = RunConfig({k: dict(v) for k, v in manifest["config"].items()})
    for item in args.set:
        cfg.set_override(item)
    return cfg


def cmd_eval(args) -> int:
    agent, manifest = load_agent(args.checkpoint)
    cfg = _run_config(args, manifest)
    env = env_from_config(cfg)
    refs = refs_from_config(cfg, env)
    episodes = args.episodes or int(cfg.get("run", "final_eval_episodes", 50))
    seed = int(cfg.get("run", "eval_seed", 0)) if args.seed is None else args.seed
    ret, score = evaluate_agent(agent, env, episodes, seed, refs)
    report = {"checkpoint": str(args.checkpoint), "episodes": episodes, "eval_seed": seed,
              "eval_return": ret, "normalized_score": score}
    Path(args.checkpoint).with_suffix(".eval.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"return {ret:.3f} score {score:.2f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    agent, manifest = load_agent(args.checkpoint)
    agent.seed = args.seed
    cfg = _run_config(args, manifest)
    env = env_from_config(cfg)
    data = dataset_from_config(cfg, env)
    rows, _ = run_finetune(agent, cfg, data, args.online_steps, args.out)
    for r in rows:
        print(f"online step {r['online_step']}: return {r['eval_return']:.3f} score {r['normalized_score']:.2f}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves, by_lam, by_n = [], [], []
    for run in args.runs:
        run = Path(run)
        try:
            manifest = json.loads((run / "manifest.json").read_text())
            rows = read_metrics_csv(run / "metrics.csv")
        except OSError as exc:
            raise ConfigError(f"{run} is not a run directory: {exc}") from exc
        lam, n, seed = manifest["hyper"]["lam"], manifest["hyper"]["n_ood"], manifest["seed"]
        for r in rows:
            curves.append([str(run), seed, lam, n, int(r["step"]), r["eval_return"], r["normalized_score"]])
            by_lam.append([lam, seed, int(r["step"]), r["q_in_dist"], r["q_ood"]])
            by_n.append([n, seed, int(r["step"]), r["eval_return"], r["normalized_score"]])
    series = {
        "learning_curves.csv": (["run", "seed", "lam", "n_ood", "step", "eval_return", "normalized_score"], curves),
        "q_vs_lambda.csv": (["lam", "seed", "step", "q_in_dist", "q_ood"], sorted(by_lam)),
        "score_vs_n.csv": (["n_ood", "seed", "step", "eval_return", "normalized_score"], sorted(by_n)),
    }
    for name, (header, rows) in series.items():
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    print(f"wrote {len(series)} series to {out}")
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "gen-dataset": cmd_gen_dataset,
    "train": cmd_train,
    "eval": cmd_eval,
    "finetune": cmd_finetune,
    "export-plots": cmd_export_plots,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"mcqlab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except McqError as exc:
        print(f"mcqlab: error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
