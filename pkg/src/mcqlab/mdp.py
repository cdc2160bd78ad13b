"""Finite MDPs, tabular behavior policies and logged transition datasets.

Tabular MDPs here are discounted and never terminate; the done flag on a
transition only matters for the continuous environments in
:mod:`mcqlab.envs`, which share the same :class:`Dataset` container.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyDataset,
    InvalidDistribution,
    LengthMismatch,
    RewardOutOfBounds,
)

SIMPLEX_ATOL = 1e-9


def _check_simplex(rows, what):
    rows = np.asarray(rows, dtype=np.float64)
    if np.any(~np.isfinite(rows)) or np.any(rows < 0):
        raise InvalidDistribution(f"{what} has negative or non-finite entries")
    sums = rows.sum(axis=-1)
    bad = np.abs(sums - 1.0) > SIMPLEX_ATOL
    if np.any(bad):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise InvalidDistribution(f"{what} off the simplex by {worst:.3g}")
    return rows


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Validated finite MDP ``<S, A, r, rho0, p, gamma>``.

    ``transition[s, a, s2]`` is ``p(s2 | s, a)``.
    """

    transition: np.ndarray
    reward: np.ndarray
    rho0: np.ndarray
    gamma: float
    r_max: float

    @property
    def n_states(self) -> int:
        return self.reward.shape[0]

    @property
    def n_actions(self) -> int:
        return self.reward.shape[1]

    @property
    def value_bound(self) -> float:
        """``r_max / (1 - gamma)``, the largest attainable |Q|."""
        return self.r_max / (1.0 - self.gamma)


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Row-stochastic ``probs[s, a]``; support is tested exactly (``> 0``)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = _check_simplex(self.probs, "policy")
        if probs.ndim != 2:
            raise DimensionMismatch("policy table must be 2-D")
        object.__setattr__(self, "probs", probs)

    @property
    def support(self) -> np.ndarray:
        """Boolean mask ``[n_states, n_actions]`` of actions with mass."""
        return self.probs > 0

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states, n_actions):
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions):
        actions = np.asarray(actions, dtype=np.int64)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


class Transition(NamedTuple):
    s: object
    a: object
    r: float
    s_next: object
    d: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Columnar ``(s, a, r, s', d)`` transitions.

    Discrete datasets hold 1-D integer id arrays for states and actions;
    continuous ones hold float32 arrays of shape ``(n, dim)``.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_observations: np.ndarray
    dones: np.ndarray
    discrete: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("observations", "actions", "next_observations", "dones"):
            if len(getattr(self, name)) != n:
                raise LengthMismatch(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if n and not np.all((self.dones == 0) | (self.dones == 1)):
            raise ValueError("done flags must be 0 or 1")

    def __len__(self):
        return len(self.rewards)

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> Transition:
        conv = int if self.discrete else np.asarray
        return Transition(
            conv(self.observations[i]),
            conv(self.actions[i]),
            float(self.rewards[i]),
            conv(self.next_observations[i]),
            int(self.dones[i]),
        )

    @property
    def state_dim(self) -> int:
        return 1 if self.observations.ndim == 1 else self.observations.shape[1]

    @property
    def action_dim(self) -> int:
        return 1 if self.actions.ndim == 1 else self.actions.shape[1]

    def equals(self, other) -> bool:
        """Exact (bitwise) equality of every column and the metadata."""
        if not isinstance(other, Dataset) or self.discrete != other.discrete:
            return False
        cols = ("observations", "actions", "rewards", "next_observations", "dones")
        for c in cols:
            x, y = getattr(self, c), getattr(other, c)
            if x.shape != y.shape or x.dtype != y.dtype or x.tobytes() != y.tobytes():
                return False
        return self.meta == other.meta

    def concat(self, other: "Dataset") -> "Dataset":
        if self.discrete != other.discrete:
            raise ValueError("cannot mix discrete and continuous datasets")
        return Dataset(
            np.concatenate([self.observations, other.observations]),
            np.concatenate([self.actions, other.actions]),
            np.concatenate([self.rewards, other.rewards]),
            np.concatenate([self.next_observations, other.next_observations]),
            np.concatenate([self.dones, other.dones]),
            discrete=self.discrete,
            meta=dict(self.meta),
        )


def build_mdp(transition, reward, rho0=None, gamma=0.9, r_max=None) -> TabularMdp:
    """Validate tables and return a :class:`TabularMdp`.

    ``rho0`` defaults to uniform, ``r_max`` to ``max |reward|`` (or 1 when
    the reward table is identically zero).

    Raises
    ------
    DimensionMismatch
        Table shapes disagree.
    InvalidDistribution
        A transition row or ``rho0`` leaves the simplex by more than 1e-9.
    RewardOutOfBounds
        Some ``|reward[s, a]|`` exceeds the declared ``r_max``.
    """
    transition = np.asarray(transition, dtype=np.float64)
    reward = np.asarray(reward, dtype=np.float64)
    if transition.ndim != 3 or reward.ndim != 2:
        raise DimensionMismatch("transition must be [S, A, S] and reward [S, A]")
    n_s, n_a = reward.shape
    if transition.shape != (n_s, n_a, n_s):
        raise DimensionMismatch(
            f"transition shape {transition.shape} does not match reward {reward.shape}"
        )
    _check_simplex(transition, "transition")
    rho0 = np.full(n_s, 1.0 / n_s) if rho0 is None else np.asarray(rho0, dtype=np.float64)
    if rho0.shape != (n_s,):
        raise DimensionMismatch(f"rho0 has shape {rho0.shape}, expected ({n_s},)")
    _check_simplex(rho0, "rho0")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    if not np.all(np.isfinite(reward)):
        raise RewardOutOfBounds("reward table has non-finite entries")
    bound = float(np.max(np.abs(reward))) if reward.size else 0.0
    if r_max is None:
        r_max = bound if bound > 0 else 1.0
    if r_max <= 0:
        raise ValueError("r_max must be positive")
    if bound > r_max:
        raise RewardOutOfBounds(f"max |reward| = {bound} exceeds r_max = {r_max}")
    for arr in (transition, reward, rho0):
        arr.setflags(write=False)
    return TabularMdp(transition, reward, rho0, float(gamma), float(r_max))


def generate_mdp(seed, n_states, n_actions, gamma=0.9, r_max=1.0) -> TabularMdp:
    """Random MDP: Dirichlet(1) transition rows, rewards uniform in [-r_max, r_max]."""
    rng = np.random.default_rng(seed)
    return _random_tables(rng, n_states, n_actions, gamma, r_max)


def _random_tables(rng, n_states, n_actions, gamma, r_max):
    transition = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    reward = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    return build_mdp(transition, reward, None, gamma, r_max)


def _floats(text):
    return [float(tok) for tok in text.replace(",", " ").split()]


def load_mdp_spec(path) -> TabularMdp:
    """Read an MDP spec file.

    The ``[mdp]`` section declares ``n_states``, ``n_actions``, ``gamma``
    and optionally ``r_max``; then either ``seed`` (random tables) or
    whitespace-separated ``transition`` (S*A*S values, row-major),
    ``reward`` (S*A values) and optional ``rho0``.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read MDP spec {path}")
    return mdp_from_section(parser["mdp"] if parser.has_section("mdp") else {})


def mdp_from_section(sec) -> TabularMdp:
    try:
        n_s = int(sec["n_states"])
        n_a = int(sec["n_actions"])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"[mdp] needs integer n_states and n_actions: {exc}") from exc
    gamma = float(sec.get("gamma", 0.9))
    r_max = float(sec["r_max"]) if "r_max" in sec else None
    if "seed" in sec:
        return generate_mdp(int(sec["seed"]), n_s, n_a, gamma, 1.0 if r_max is None else r_max)
    try:
        transition = np.array(_floats(sec["transition"])).reshape(n_s, n_a, n_s)
        reward = np.array(_floats(sec["reward"])).reshape(n_s, n_a)
    except KeyError as exc:
        raise ConfigError("[mdp] needs either seed or transition + reward tables") from exc
    except ValueError as exc:
        raise DimensionMismatch(f"table sizes do not match declared dimensions: {exc}") from exc
    rho0 = np.array(_floats(sec["rho0"])) if "rho0" in sec else None
    return build_mdp(transition, reward, rho0, gamma, r_max)


def _sample_rows(cdf_rows, u):
    # inverse-CDF draw, one uniform per row
    idx = (u[:, None] > cdf_rows).sum(axis=1)
    return np.minimum(idx, cdf_rows.shape[1] - 1)


def collect_dataset(mdp: TabularMdp, mu: TabularPolicy, episodes: int, horizon: int, rng) -> Dataset:
    """Roll out ``mu`` for ``episodes`` x ``horizon`` steps.

    Transitions are returned episode-major. Episodes are truncated, never
    terminated, so every done flag is 0.
    """
    if horizon < 1 or episodes < 1:
        raise ValueError("episodes and horizon must be >= 1")
    if mu.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch("policy shape does not match the MDP")
    pi_cdf = np.cumsum(mu.probs, axis=1)
    p_cdf = np.cumsum(mdp.transition, axis=2)
    s = _sample_rows(np.broadcast_to(np.cumsum(mdp.rho0), (episodes, mdp.n_states)), rng.random(episodes))
    obs = np.empty((horizon, episodes), dtype=np.int64)
    act = np.empty_like(obs)
    nxt = np.empty_like(obs)
    for t in range(horizon):
        a = _sample_rows(pi_cdf[s], rng.random(episodes))
        s2 = _sample_rows(p_cdf[s, a], rng.random(episodes))
        obs[t], act[t], nxt[t] = s, a, s2
        s = s2
    obs, act, nxt = (x.T.reshape(-1) for x in (obs, act, nxt))
    return Dataset(
        obs,
        act,
        mdp.reward[obs, act].astype(np.float32),
        nxt,
        np.zeros(obs.size, dtype=np.uint8),
        discrete=True,
        meta={"episodes": episodes, "horizon": horizon},
    )


def empirical_behavior(dataset: Dataset, n_states: int, n_actions: int, smoothing: float = 0.0) -> TabularPolicy:
    """Count-based maximum likelihood estimate of the behavior policy.

    ``probs[s, a] = (count(s, a) + smoothing) / (count(s) + n_actions * smoothing)``;
    unvisited states get the uniform row.
    """
    if len(dataset) == 0:
        raise EmptyDataset("cannot estimate a policy from an empty dataset")
    if smoothing < 0:
        raise ValueError("smoothing must be nonnegative")
    s = np.asarray(dataset.observations, dtype=np.int64)
    a = np.asarray(dataset.actions, dtype=np.int64)
    if s.min() < 0 or s.max() >= n_states or a.min() < 0 or a.max() >= n_actions:
        raise DimensionMismatch("dataset ids out of range")
    counts = np.zeros((n_states, n_actions))
    np.add.at(counts, (s, a), 1.0)
    counts += smoothing
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / n_actions)
    return TabularPolicy(probs)


def state_frequencies(dataset: Dataset, n_states: int) -> np.ndarray:
    s = np.asarray(dataset.observations, dtype=np.int64)
    if s.size == 0:
        raise EmptyDataset("empty dataset")
    return np.bincount(s, minlength=n_states) / s.size


def tv_distance(p, q) -> float:
    """Total variation ``0.5 * sum |p - q|``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LengthMismatch(f"{p.shape} vs {q.shape}")
    return float(min(1.0, 0.5 * np.abs(p - q).sum()))


def support_size(fraction: float, n_actions: int) -> int:
    k = math.ceil(fraction * n_actions - 1e-12)
    if k < 1:
        raise ValueError("support_fraction too small for at least one action")
    return min(k, n_actions)
