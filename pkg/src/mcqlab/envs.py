"""Point-mass navigation tasks, scripted behavior controllers, dataset
generation, evaluation, normalized scoring and online fine-tuning."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateRefs, UnknownKind
from .mdp import Dataset

F32 = np.float32
BEHAVIOR_KINDS = ("random", "medium", "replay-mix", "expert")
_STREAM_EVAL = 7
_STREAM_ONLINE = 4


@dataclass(frozen=True)
class PointEnv:
    """A point in ``[-1, 1]^dim`` steered toward ``goal``.

    In ``position`` mode the action moves the point directly by
    ``step_scale * action``. In ``mass`` mode the action accelerates a
    velocity (also boxed to ``[-1, 1]``) and the state is
    ``[position, velocity]``. The reward is the negative distance to the
    goal after the move, so it lies in ``[-2 sqrt(dim), 0]``. Episodes end
    only at the horizon.
    """

    dim: int = 2
    mode: str = "position"
    goal: Optional[Sequence[float]] = None
    step_scale: float = 0.1
    horizon: int = 100

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ConfigError("dim must be 1 or 2")
        if self.mode not in ("position", "mass"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        goal = (0.5,) * self.dim if self.goal is None else tuple(float(g) for g in self.goal)
        if len(goal) != self.dim or any(abs(g) > 1 for g in goal):
            raise ConfigError("goal must have dim coordinates inside the box")
        object.__setattr__(self, "goal", goal)
        if self.horizon < 1 or self.step_scale <= 0:
            raise ConfigError("horizon and step_scale must be positive")

    @property
    def state_dim(self) -> int:
        return self.dim if self.mode == "position" else 2 * self.dim

    @property
    def action_dim(self) -> int:
        return self.dim

    @property
    def r_max(self) -> float:
        return 0.0

    @property
    def r_min(self) -> float:
        return -2.0 * math.sqrt(self.dim)

    @property
    def name(self) -> str:
        return f"point{self.dim}d-{self.mode}"

    def position(self, states):
        return np.asarray(states)[..., : self.dim]

    def reset(self, rng, n=1):
        """``n`` start states: uniform positions, zero velocity."""
        pos = rng.uniform(-1.0, 1.0, size=(n, self.dim))
        if self.mode == "mass":
            pos = np.concatenate([pos, np.zeros_like(pos)], axis=1)
        return pos.astype(F32)

    def step(self, states, actions, t):
        """Vectorized transition. ``t`` is the 0-based index of the step being
        taken; ``d`` is 1 exactly when ``t + 1`` reaches the horizon."""
        states = np.atleast_2d(np.asarray(states, dtype=F32))
        actions = np.atleast_2d(np.asarray(actions, dtype=F32))
        if np.any(np.abs(actions) > 1.0):
            warnings.warn("action outside [-1, 1] was clamped", RuntimeWarning, stacklevel=2)
            actions = np.clip(actions, -1.0, 1.0)
        pos = states[:, : self.dim]
        if self.mode == "position":
            nxt = np.clip(pos + F32(self.step_scale) * actions, -1.0, 1.0)
        else:
            vel = np.clip(states[:, self.dim:] + F32(self.step_scale) * actions, -1.0, 1.0)
            pos = np.clip(pos + F32(self.step_scale) * vel, -1.0, 1.0)
            nxt = np.concatenate([pos, vel], axis=1)
        reward = -np.linalg.norm(nxt[:, : self.dim] - np.asarray(self.goal, F32), axis=1)
        done = np.full(len(states), 1 if t + 1 >= self.horizon else 0, dtype=np.uint8)
        return nxt.astype(F32), reward.astype(F32), done

    def to_dict(self):
        return {"dim": self.dim, "mode": self.mode, "goal": list(self.goal),
                "step_scale": self.step_scale, "horizon": self.horizon}


class Controller:
    """Scripted behavior policy acting on a batch of parallel episodes."""

    kind = "base"

    def begin(self, n_episodes, rng):
        """Per-episode setup, called once before a batch of rollouts."""

    def __call__(self, states, rng):
        raise NotImplementedError


class RandomController(Controller):
    kind = "random"

    def __init__(self, env: PointEnv):
        self.env = env

    def __call__(self, states, rng):
        return rng.uniform(-1.0, 1.0, size=(len(states), self.env.action_dim)).astype(F32)


class ProportionalController(Controller):
    """``clip(clip(gain * (goal - pos) - damping * vel) + noise)``."""

    kind = "medium"

    def __init__(self, env: PointEnv, gain=0.5, noise=0.3, damping=None):
        self.env = env
        self.gain = float(gain)
        self.noise = float(noise)
        self.damping = 2.0 * math.sqrt(self.gain) if damping is None else float(damping)

    def __call__(self, states, rng):
        env = self.env
        states = np.asarray(states, F32)
        err = np.asarray(env.goal, F32) - states[:, : env.dim]
        a = self.gain * err
        if env.mode == "mass":
            a = a - self.damping * states[:, env.dim:]
        a = np.clip(a, -1.0, 1.0)
        if self.noise > 0:
            a = np.clip(a + self.noise * rng.standard_normal(a.shape), -1.0, 1.0)
        return a.astype(F32)


class ReplayMixController(Controller):
    """Each episode follows either the random or the medium controller; the
    medium one is chosen with probability ``1 - mix``."""

    kind = "replay-mix"

    def __init__(self, random: Controller, medium: Controller, mix=0.5):
        if not 0.0 <= mix <= 1.0:
            raise ConfigError("mix must lie in [0, 1]")
        self.random = random
        self.medium = medium
        self.mix = float(mix)
        self.is_random = np.zeros(0, dtype=bool)

    def begin(self, n_episodes, rng):
        self.is_random = rng.random(n_episodes) < self.mix

    def __call__(self, states, rng):
        a_rand = self.random(states, rng)
        a_med = self.medium(states, rng)
        return np.where(self.is_random[:, None], a_rand, a_med)


def expert_gain(env: PointEnv) -> float:
    return 1.0 / env.step_scale


def make_behavior(kind: str, env: PointEnv, noise=0.3, gain=0.5, mix=0.5) -> Controller:
    """``random``, ``medium`` (noisy proportional), ``replay-mix`` (per-episode
    mixture) or ``expert`` (noiseless proportional at full gain)."""
    if kind == "random":
        return RandomController(env)
    if kind == "medium":
        return ProportionalController(env, gain, noise)
    if kind == "replay-mix":
        return ReplayMixController(RandomController(env), ProportionalController(env, gain, noise), mix)
    if kind == "expert":
        return ProportionalController(env, expert_gain(env), 0.0)
    raise UnknownKind(f"unknown behavior kind {kind!r}; expected one of {BEHAVIOR_KINDS}")


def rollout(env: PointEnv, policy, starts, rng=None):
    """Run every start state for a full horizon. ``policy(states, rng)``
    returns actions. Returns per-step arrays shaped ``(horizon, n, ...)``."""
    s = np.asarray(starts, F32)
    obs, acts, rews, nxts, dones = [], [], [], [], []
    for t in range(env.horizon):
        a = np.asarray(policy(s, rng), F32)
        s2, r, d = env.step(s, a, t)
        obs.append(s)
        acts.append(a)
        rews.append(r)
        nxts.append(s2)
        dones.append(d)
        s = s2
    return np.stack(obs), np.stack(acts), np.stack(rews), np.stack(nxts), np.stack(dones)


def generate_dataset(env: PointEnv, kind: str, episodes: int, seed: int, noise=0.3, gain=0.5, mix=0.5) -> Dataset:
    """Episode-major dataset of ``episodes * horizon`` transitions."""
    ctrl = make_behavior(kind, env, noise, gain, mix)
    rng = np.random.default_rng(seed)
    starts = env.reset(rng, episodes)
    ctrl.begin(episodes, rng)
    cols = rollout(env, ctrl, starts, rng)

    def flat(x):
        x = np.swapaxes(x, 0, 1)
        return np.ascontiguousarray(x.reshape(episodes * env.horizon, *x.shape[2:]))

    s, a, r, s2, d = (flat(c) for c in cols)
    meta = {"env": env.to_dict(), "policy": kind, "seed": int(seed), "noise": noise, "gain": gain, "mix": mix}
    return Dataset(s, a, r.astype(F32), s2, d.astype(np.uint8), discrete=False, meta=meta)


def episode_returns(data: Dataset, horizon: int) -> np.ndarray:
    return data.rewards.reshape(-1, horizon).sum(axis=1, dtype=np.float64)


@dataclass(frozen=True)
class EvalResult:
    mean: float
    std: float
    returns: np.ndarray = field(repr=False)


def evaluate_policy(env: PointEnv, policy, episodes=10, seed=0) -> EvalResult:
    """Undiscounted returns of ``policy`` from ``episodes`` start states.

    ``policy`` maps a state batch to actions (``policy(states)``) or is a
    :class:`Controller`. Start states depend only on ``seed`` so different
    policies evaluated with one seed face the same starts.
    """
    rng = np.random.default_rng([seed, _STREAM_EVAL])
    starts = env.reset(rng, episodes)
    if isinstance(policy, Controller):
        policy.begin(episodes, rng)
        fn = policy
    else:
        def fn(states, _rng):
            return policy(states)
    rews = rollout(env, fn, starts, rng)[2]
    returns = rews.sum(axis=0, dtype=np.float64)
    return EvalResult(float(returns.mean()), float(returns.std()), returns)


@dataclass(frozen=True)
class TaskRefs:
    ref_min: float
    ref_max: float

    def __post_init__(self):
        if not (math.isfinite(self.ref_min) and math.isfinite(self.ref_max)) or self.ref_max <= self.ref_min:
            raise DegenerateRefs(f"need ref_max > ref_min, got {self.ref_min}, {self.ref_max}")


# reference returns of the random and expert policies on three locomotion tasks
LOCOMOTION_REFS: Dict[str, TaskRefs] = {
    "halfcheetah": TaskRefs(-280.18, 12135.0),
    "hopper": TaskRefs(-20.27, 3234.3),
    "walker2d": TaskRefs(1.63, 4592.3),
}


def normalized_score(raw: float, refs: TaskRefs) -> float:
    """``100 * (raw - ref_min) / (ref_max - ref_min)``, unclamped."""
    if not isinstance(refs, TaskRefs):
        refs = TaskRefs(*refs)
    return (raw - refs.ref_min) / (refs.ref_max - refs.ref_min) * 100.0


def compute_task_refs(env: PointEnv, episodes=1000, seed=0) -> TaskRefs:
    """Mean return of the random controller and of the noiseless full-gain
    proportional controller, from shared start states."""
    lo = evaluate_policy(env, make_behavior("random", env), episodes, seed).mean
    hi = evaluate_policy(env, make_behavior("expert", env), episodes, seed).mean
    return TaskRefs(lo, hi)


class ReplayBuffer:
    """Growable transition store exposing the same columns as a Dataset."""

    def __init__(self, state_dim, action_dim, capacity=1024):
        self._s = np.zeros((capacity, state_dim), F32)
        self._a = np.zeros((capacity, action_dim), F32)
        self._r = np.zeros(capacity, F32)
        self._s2 = np.zeros((capacity, state_dim), F32)
        self._d = np.zeros(capacity, np.uint8)
        self.size = 0

    @classmethod
    def from_dataset(cls, data: Dataset, extra=0):
        buf = cls(data.state_dim, data.action_dim, len(data) + max(extra, 1))
        buf.add(data.observations, data.actions, data.rewards, data.next_observations, data.dones)
        return buf

    def __len__(self):
        return self.size

    def _grow(self, need):
        cap = len(self._r)
        if need <= cap:
            return
        new = max(need, 2 * cap)
        for name in ("_s", "_a", "_r", "_s2", "_d"):
            old = getattr(self, name)
            arr = np.zeros((new, *old.shape[1:]), old.dtype)
            arr[: self.size] = old[: self.size]
            setattr(self, name, arr)

    def add(self, s, a, r, s2, d):
        s = np.atleast_2d(s)
        n = len(s)
        self._grow(self.size + n)
        sl = slice(self.size, self.size + n)
        self._s[sl] = s
        self._a[sl] = np.atleast_2d(a)
        self._r[sl] = np.ravel(r)
        self._s2[sl] = np.atleast_2d(s2)
        self._d[sl] = np.ravel(d)
        self.size += n

    @property
    def observations(self):
        return self._s[: self.size]

    @property
    def actions(self):
        return self._a[: self.size]

    @property
    def rewards(self):
        return self._r[: self.size]

    @property
    def next_observations(self):
        return self._s2[: self.size]

    @property
    def dones(self):
        return self._d[: self.size]

    @property
    def state_dim(self):
        return self._s.shape[1]

    @property
    def action_dim(self):
        return self._a.shape[1]

    def to_dataset(self, meta=None) -> Dataset:
        return Dataset(self.observations.copy(), self.actions.copy(), self.rewards.copy(),
                       self.next_observations.copy(), self.dones.copy(), discrete=False, meta=dict(meta or {}))


def offline_to_online(agent, env: PointEnv, online_steps: int, buffer: ReplayBuffer, eval_every=1000,
                      eval_episodes=10, eval_seed=0, refs: Optional[TaskRefs] = None) -> List[dict]:
    """Fine-tune ``agent`` online: each environment step (stochastic policy)
    appends one transition to ``buffer`` and is followed by one gradient
    step on a uniform batch from the merged buffer.

    Returns evaluation rows at step 0 and every ``eval_every`` steps.
    """
    from .agent import sample_batch, train_step

    def evaluate(step):
        res = evaluate_policy(env, lambda x: agent.act(x, deterministic=True), eval_episodes, eval_seed)
        row = {"online_step": step, "eval_return": res.mean}
        if refs is not None:
            row["normalized_score"] = normalized_score(res.mean, refs)
        return row

    rows = [evaluate(0)]
    if online_steps <= 0:
        return rows
    rng = np.random.default_rng([agent.seed, _STREAM_ONLINE, agent.step])
    state = env.reset(rng, 1)
    t = 0
    for i in range(1, online_steps + 1):
        action = agent.act(state, deterministic=False, rng=rng)
        nxt, r, d = env.step(state, action, t)
        buffer.add(state, action, r, nxt, d)
        t += 1
        if d[0]:
            state, t = env.reset(rng, 1), 0
        else:
            state = nxt
        train_step(agent, sample_batch(agent, buffer, agent.hyper.batch_size))
        if i % eval_every == 0 or i == online_steps:
            rows.append(evaluate(i))
    return rows
