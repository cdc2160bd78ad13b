"""Run orchestration shared by the command line and the experiment tests:
build env, dataset and agent from a :class:`RunConfig`, train with periodic
evaluation, and write checkpoints, metrics and manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional

from .agent import METRIC_KEYS, McqAgent, McqHyper, sample_batch, train_step
from .envs import (PointEnv, ReplayBuffer, TaskRefs, compute_task_refs, evaluate_policy, generate_dataset,
                   normalized_score, offline_to_online)
from .errors import ConfigError
from .io import (RunConfig, read_checkpoint, read_dataset, write_checkpoint, write_manifest,
                 write_metrics_csv)
from .mdp import Dataset


def env_from_config(cfg: RunConfig) -> PointEnv:
    goal = cfg.get("env", "goal")
    if goal is not None and not isinstance(goal, tuple):
        goal = (goal,)
    return PointEnv(dim=int(cfg.get("env", "dim", 2)), mode=cfg.get("env", "mode", "mass"), goal=goal,
                    step_scale=float(cfg.get("env", "step_scale", 0.1)), horizon=int(cfg.get("env", "horizon", 100)))


def refs_from_config(cfg: RunConfig, env: PointEnv) -> TaskRefs:
    lo, hi = cfg.get("env", "ref_min"), cfg.get("env", "ref_max")
    if lo is None or hi is None:
        return compute_task_refs(env, 1000, 0)
    return TaskRefs(float(lo), float(hi))


def _as_tuple(v):
    return tuple(int(x) for x in v) if isinstance(v, tuple) else (int(v),)


def hyper_from_config(cfg: RunConfig, env: Optional[PointEnv] = None) -> McqHyper:
    raw = cfg.section("hyper")
    known = {f.name: f for f in fields(McqHyper)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown [hyper] keys: {sorted(unknown)}")
    values = {}
    for k, v in raw.items():
        if v is None:
            continue
        if k in ("hidden", "cvae_hidden"):
            v = _as_tuple(v)
        elif k == "n_ood" or k == "batch_size":
            v = int(v)
        values[k] = v
    if "r_max" not in values and env is not None:
        values["r_max"] = env.r_max
    if cfg.get("run", "mode") == "train-det":
        values["deterministic"] = True
    try:
        return McqHyper(**values).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def dataset_from_config(cfg: RunConfig, env: PointEnv) -> Dataset:
    path = cfg.get("run", "dataset")
    if path:
        return read_dataset(path)
    sec = cfg.section("dataset")
    return generate_dataset(env, sec.get("kind") or "medium", int(sec.get("episodes") or 500),
                            int(sec.get("seed") or 0), noise=float(sec.get("noise", 0.1)),
                            gain=float(sec.get("gain", 0.5)), mix=float(sec.get("mix", 0.5)))


@dataclass
class RunResult:
    agent: McqAgent
    rows: List[Dict[str, float]]
    refs: TaskRefs
    final_return: float
    final_score: float


def evaluate_agent(agent: McqAgent, env: PointEnv, episodes: int, seed: int, refs: TaskRefs):
    res = evaluate_policy(env, lambda x: agent.act(x, deterministic=True), episodes, seed)
    return res.mean, normalized_score(res.mean, refs)


def train_agent(agent: McqAgent, data, env: PointEnv, refs: TaskRefs, steps: int, eval_every=1000,
                eval_episodes=10, eval_seed=0, on_row=None) -> List[Dict[str, float]]:
    """Train until ``agent.step == steps`` and return one metrics row per
    ``eval_every`` steps. Rows only depend on the agent state at entry, so a
    run resumed from a checkpoint taken at a row boundary reproduces the
    remaining rows exactly."""
    rows = []
    sums = dict.fromkeys(METRIC_KEYS, 0.0)
    count = 0
    bs = agent.hyper.batch_size
    while agent.step < steps:
        m = train_step(agent, sample_batch(agent, data, bs))
        for k in METRIC_KEYS:
            sums[k] += m[k]
        count += 1
        if agent.step % eval_every == 0 or agent.step == steps:
            ret, score = evaluate_agent(agent, env, eval_episodes, eval_seed, refs)
            row = {"step": agent.step, **{k: v / count for k, v in sums.items()},
                   "eval_return": ret, "normalized_score": score}
            rows.append(row)
            if on_row is not None:
                on_row(agent, row)
            sums = dict.fromkeys(METRIC_KEYS, 0.0)
            count = 0
    return rows


def run_training(cfg: RunConfig, seed: int, out_dir=None, data: Optional[Dataset] = None,
                 resume_from=None) -> RunResult:
    """One offline training run. With ``out_dir`` it writes ``manifest.json``,
    ``metrics.csv``, ``final.ckpt`` and, if ``run.checkpoint_every`` is set,
    intermediate ``step{N}.ckpt`` files."""
    env = env_from_config(cfg)
    refs = refs_from_config(cfg, env)
    hyper = hyper_from_config(cfg, env)
    data = dataset_from_config(cfg, env) if data is None else data
    agent = McqAgent(data.state_dim, data.action_dim, hyper, seed)
    if resume_from is not None:
        agent.load_named(read_checkpoint(resume_from))
    steps = int(cfg.get("run", "steps", 50000))
    eval_every = int(cfg.get("run", "eval_every", 1000))
    ck_every = int(cfg.get("run", "checkpoint_every", 0) or 0)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_manifest(out / "manifest.json", cfg, seed, {
            "hyper": hyper.to_dict(), "env": env.to_dict(), "refs": [refs.ref_min, refs.ref_max],
            "state_dim": data.state_dim, "action_dim": data.action_dim, "dataset_meta": data.meta})

    def on_row(a, row):
        if out is not None and ck_every and a.step % ck_every == 0:
            write_checkpoint(out / f"step{a.step}.ckpt", a.named_tensors())

    rows = train_agent(agent, data, env, refs, steps, eval_every, int(cfg.get("run", "eval_episodes", 10)),
                       int(cfg.get("run", "eval_seed", 0)), on_row)
    final_ret, final_score = evaluate_agent(agent, env, int(cfg.get("run", "final_eval_episodes", 50)),
                                            int(cfg.get("run", "eval_seed", 0)), refs)
    if out is not None:
        write_metrics_csv(out / "metrics.csv", rows)
        write_checkpoint(out / "final.ckpt", agent.named_tensors())
        (out / "final_eval.json").write_text(json.dumps(
            {"eval_return": final_ret, "normalized_score": final_score, "step": agent.step}, indent=2) + "\n")
    return RunResult(agent, rows, refs, final_ret, final_score)


def load_agent(checkpoint, manifest_path=None) -> tuple:
    """Rebuild an agent from a checkpoint and the ``manifest.json`` written
    next to it. Returns ``(agent, manifest)``."""
    checkpoint = Path(checkpoint)
    manifest_path = Path(manifest_path) if manifest_path else checkpoint.parent / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no manifest found at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    hp = dict(manifest["hyper"])
    for k in ("hidden", "cvae_hidden"):
        hp[k] = tuple(hp[k])
    agent = McqAgent(manifest["state_dim"], manifest["action_dim"], McqHyper(**hp), manifest["seed"])
    agent.load_named(read_checkpoint(checkpoint))
    return agent, manifest


def run_finetune(agent: McqAgent, cfg: RunConfig, data: Dataset, online_steps: Optional[int] = None,
                 out_dir=None):
    env = env_from_config(cfg)
    refs = refs_from_config(cfg, env)
    steps = int(cfg.get("run", "online_steps", 20000)) if online_steps is None else online_steps
    buffer = ReplayBuffer.from_dataset(data, extra=steps)
    rows = offline_to_online(agent, env, steps, buffer, int(cfg.get("run", "eval_every", 1000)),
                             int(cfg.get("run", "final_eval_episodes", 50)), int(cfg.get("run", "eval_seed", 0)),
                             refs)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "finetune.csv", rows, ("online_step", "eval_return", "normalized_score"))
        write_checkpoint(out / "finetuned.ckpt", agent.named_tensors())
    return rows, buffer


def parse_seeds(text) -> List[int]:
    if isinstance(text, int):
        return [text]
    if isinstance(text, tuple):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad seed list {text!r}") from exc

