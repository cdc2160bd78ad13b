"""Mildly conservative Q-learning on top of SAC (stochastic actor) or TD3
(deterministic actor, no smoothing noise, no policy delay).

Every random draw of a training step comes from a generator seeded by
``(seed, stream, step)`` so an agent restored from a checkpoint continues
bit-identically to an uninterrupted run.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Optional, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cvae import CvaeModel
from .errors import ConfigError, EmptyDataset, NonFiniteLoss, ShapeMismatch
from .mdp import Dataset
from .nn import Adam, DenseNet, tanh_gaussian, tanh_gaussian_backward

F32 = np.float32

# independent random streams of one training step
_STREAM_STEP = 1
_STREAM_BATCH = 2
_STREAM_PROBE = 3

METRIC_KEYS = ("critic_loss", "actor_loss", "alpha", "q_in_dist", "q_ood", "target_q")


@dataclass
class McqHyper:
    lam: float = 0.9
    n_ood: int = 10
    batch_size: int = 256
    gamma: float = 0.99
    tau: float = 5e-3
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    cvae_lr: float = 1e-3
    hidden: Tuple[int, ...] = (400, 400)
    cvae_hidden: Tuple[int, ...] = (750, 750)
    activation: str = "relu"
    ood_aggregator: str = "min"
    target_entropy: Optional[float] = None
    init_alpha: float = 1.0
    auto_alpha: bool = True
    pseudo_target_margin: float = 0.0
    # None with a known r_max means r_max / (1 - gamma); nan disables the clip
    clip_pseudo_target_to: Optional[float] = None
    r_max: Optional[float] = None
    pseudo_target_critics: str = "online"
    kl_weight: float = 1.0
    latent_clip: Optional[float] = None
    deterministic: bool = False

    def validate(self):
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError(f"lam must lie in (0, 1], got {self.lam}")
        if self.n_ood < 1:
            raise ConfigError("n_ood must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.ood_aggregator not in ("min", "mean"):
            raise ConfigError(f"unknown aggregator {self.ood_aggregator!r}")
        if self.pseudo_target_critics not in ("online", "target"):
            raise ConfigError(f"unknown pseudo target critics {self.pseudo_target_critics!r}")
        if self.init_alpha <= 0:
            raise ConfigError("init_alpha must be positive")
        return self

    @property
    def pseudo_clip(self) -> Optional[float]:
        c = self.clip_pseudo_target_to
        if c is None:
            return None if self.r_max is None else self.r_max / (1.0 - self.gamma)
        return None if math.isnan(c) else float(c)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    d: np.ndarray

    @classmethod
    def take(cls, data: Dataset, idx):
        return cls(data.observations[idx], data.actions[idx], data.rewards[idx],
                   data.next_observations[idx], data.dones[idx].astype(F32))


class McqAgent:
    """All trainable state of one agent: actor, twin critics with targets,
    the behavior CVAE, the entropy temperature and every optimizer."""

    def __init__(self, state_dim: int, action_dim: int, hyper: McqHyper, seed: int = 0):
        hyper.validate()
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.hyper = hyper
        self.seed = int(seed)
        self.step = 0
        rng = np.random.default_rng([self.seed, 0])
        h, act = tuple(hyper.hidden), hyper.activation
        head = action_dim if hyper.deterministic else 2 * action_dim
        self.actor = DenseNet([state_dim, *h, head], act, rng)
        self.critic1 = DenseNet([state_dim + action_dim, *h, 1], act, rng)
        self.critic2 = DenseNet([state_dim + action_dim, *h, 1], act, rng)
        self.target1 = self.critic1.copy()
        self.target2 = self.critic2.copy()
        self.target_actor = self.actor.copy() if hyper.deterministic else None
        self.cvae = CvaeModel(state_dim, action_dim, hyper.cvae_hidden, None, act, rng,
                              kl_weight=hyper.kl_weight, latent_clip=hyper.latent_clip)
        self.log_alpha = np.array([math.log(hyper.init_alpha)], dtype=F32)
        self.actor_opt = Adam([self.actor.flat], lr=hyper.actor_lr)
        self.critic_opt = Adam([self.critic1.flat, self.critic2.flat], lr=hyper.critic_lr)
        self.alpha_opt = Adam([self.log_alpha], lr=hyper.alpha_lr)
        self.cvae_opt = Adam(self.cvae.flats, lr=hyper.cvae_lr)

    def astype(self, dtype) -> "McqAgent":
        """Copy with every network in ``dtype`` and fresh optimizers; used to
        run gradient checks in float64."""
        other = McqAgent.__new__(McqAgent)
        other.__dict__.update(self.__dict__)
        for name in ("actor", "critic1", "critic2", "target1", "target2"):
            setattr(other, name, getattr(self, name).copy(dtype))
        if self.target_actor is not None:
            other.target_actor = self.target_actor.copy(dtype)
        other.cvae = self.cvae.astype(dtype)
        other.log_alpha = self.log_alpha.astype(dtype)
        hp = self.hyper
        other.actor_opt = Adam([other.actor.flat], lr=hp.actor_lr)
        other.critic_opt = Adam([other.critic1.flat, other.critic2.flat], lr=hp.critic_lr)
        other.alpha_opt = Adam([other.log_alpha], lr=hp.alpha_lr)
        other.cvae_opt = Adam(other.cvae.flats, lr=hp.cvae_lr)
        return other

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha[0]))

    @property
    def target_entropy(self) -> float:
        te = self.hyper.target_entropy
        return -float(self.action_dim) if te is None else float(te)

    def step_rng(self, stream=_STREAM_STEP):
        return np.random.default_rng([self.seed, stream, self.step])

    def act(self, states, deterministic=True, rng=None):
        """Actions for a state batch; deterministic mode is tanh of the mean."""
        states = np.asarray(states, dtype=F32)
        raw = self.actor.forward(states)
        if self.hyper.deterministic:
            return np.tanh(raw)
        d = self.action_dim
        if deterministic:
            return np.tanh(raw[:, :d])
        noise = rng.standard_normal((len(states), d)).astype(F32)
        return tanh_gaussian(raw, noise).action

    def q_values(self, states, actions) -> np.ndarray:
        x = np.concatenate([np.asarray(states, F32), np.asarray(actions, F32)], axis=1)
        return np.stack([self.critic1.forward(x)[:, 0], self.critic2.forward(x)[:, 0]], axis=1)

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        out.update(self.actor.named_tensors("actor"))
        out.update(self.critic1.named_tensors("critic1"))
        out.update(self.critic2.named_tensors("critic2"))
        out.update(self.target1.named_tensors("target1"))
        out.update(self.target2.named_tensors("target2"))
        if self.target_actor is not None:
            out.update(self.target_actor.named_tensors("target_actor"))
        out.update(self.cvae.named_tensors("cvae"))
        out["alpha/log_value"] = self.log_alpha
        out["meta/step"] = np.array([self.step], dtype=np.float64)
        out["meta/seed"] = np.array([self.seed], dtype=np.float64)
        for name, opt in (("actor", self.actor_opt), ("critic", self.critic_opt),
                          ("alpha", self.alpha_opt), ("cvae", self.cvae_opt)):
            out.update(opt.named_tensors(f"optim/{name}"))
        return out

    def load_named(self, tensors):
        self.actor.load_named(tensors, "actor")
        self.critic1.load_named(tensors, "critic1")
        self.critic2.load_named(tensors, "critic2")
        self.target1.load_named(tensors, "target1")
        self.target2.load_named(tensors, "target2")
        if self.target_actor is not None:
            self.target_actor.load_named(tensors, "target_actor")
        self.cvae.load_named(tensors, "cvae")
        self.log_alpha[...] = tensors["alpha/log_value"]
        self.step = int(np.asarray(tensors["meta/step"]).reshape(-1)[0])
        self.seed = int(np.asarray(tensors["meta/seed"]).reshape(-1)[0])
        for name, opt in (("actor", self.actor_opt), ("critic", self.critic_opt),
                          ("alpha", self.alpha_opt), ("cvae", self.cvae_opt)):
            if f"optim/{name}/t" in tensors:
                opt.load_named(tensors, f"optim/{name}")
        return self


def _critic_pair(agent, use_target):
    return (agent.target1, agent.target2) if use_target else (agent.critic1, agent.critic2)


def _q(net, s, a):
    return net.forward(np.concatenate([s, a], axis=1))[:, 0]


def in_dist_target(agent: McqAgent, r, s2, d, noise=None) -> np.ndarray:
    """``r + gamma (1 - d) [min_i Q'_i(s', a') - alpha log pi(a'|s')]`` with
    ``a' ~ pi(.|s')`` drawn from ``noise``. The deterministic variant uses
    the target actor and no entropy term."""
    hp = agent.hyper
    if hp.deterministic:
        a2 = np.tanh(agent.target_actor.forward(s2))
        soft = np.minimum(_q(agent.target1, s2, a2), _q(agent.target2, s2, a2))
    else:
        head = tanh_gaussian(agent.actor.forward(s2), noise)
        q_next = np.minimum(_q(agent.target1, s2, head.action), _q(agent.target2, s2, head.action))
        soft = q_next - agent.alpha * head.log_prob
    return (np.asarray(r, F32) + hp.gamma * (1.0 - np.asarray(d, F32)) * soft).astype(F32)


def ood_pseudo_target(agent: McqAgent, s_in, n: int, rng=None, draws=None) -> np.ndarray:
    """Per-state pseudo target ``min_j max_{k <= n} Q_j(s, a_k)`` with
    ``a_k`` drawn from the behavior CVAE.

    ``draws`` (shape ``(len(s_in), n, action_dim)``) overrides sampling.
    Applies the configured margin and upper clip.
    """
    hp = agent.hyper
    s_in = np.asarray(s_in, F32)
    if draws is None:
        draws = agent.cvae.sample(s_in, n, rng)
    m, k = draws.shape[0], draws.shape[1]
    rep = np.repeat(s_in, k, axis=0)
    flat = draws.reshape(m * k, -1)
    q1, q2 = _critic_pair(agent, hp.pseudo_target_critics == "target")
    best1 = _q(q1, rep, flat).reshape(m, k).max(axis=1)
    best2 = _q(q2, rep, flat).reshape(m, k).max(axis=1)
    y = np.minimum(best1, best2) if hp.ood_aggregator == "min" else 0.5 * (best1 + best2)
    y = y - hp.pseudo_target_margin
    clip = hp.pseudo_clip
    if clip is not None:
        y = np.minimum(y, clip)
    return y.astype(F32)


def critic_loss(agent: McqAgent, s, a, y, s_in=None, a_ood=None, y_ood=None):
    """Weighted in-distribution and OOD regression for both critics.

    ``a_ood`` has shape ``(len(s_in), K, action_dim)``; every one of the K
    actions at a state regresses onto that state's ``y_ood`` and the OOD
    term averages over all ``len(s_in) * K`` pairs. Returns
    ``(loss, grads, info)`` with ``loss`` summed over the two critics and
    ``grads`` aligned with ``critic1.params + critic2.params``.
    """
    lam = agent.hyper.lam
    b = len(s)
    if len(a) != b or len(y) != b:
        raise ShapeMismatch("batch columns differ in length")
    x = np.concatenate([s, a], axis=1)
    use_ood = a_ood is not None and lam < 1.0
    if use_ood:
        m, k = a_ood.shape[0], a_ood.shape[1]
        if len(s_in) != m or len(y_ood) != m:
            raise ShapeMismatch("OOD states, actions and targets differ in length")
        x = np.concatenate([x, np.concatenate([np.repeat(s_in, k, axis=0), a_ood.reshape(m * k, -1)], axis=1)])
        y_rep = np.repeat(y_ood, k)
    total = 0.0
    grads = []
    q_in = q_o = 0.0
    for net in (agent.critic1, agent.critic2):
        out, cache = net.forward(x, keep=True)
        q = out[:, 0]
        err_in = q[:b] - y
        g = np.empty_like(out)
        loss = lam * float(np.mean(np.square(err_in, dtype=np.float64)))
        g[:b, 0] = (2.0 * lam / b) * err_in
        q_in += float(np.mean(q[:b], dtype=np.float64)) / 2
        if use_ood:
            err_o = q[b:] - y_rep
            loss += (1.0 - lam) * float(np.mean(np.square(err_o, dtype=np.float64)))
            g[b:, 0] = (2.0 * (1.0 - lam) / len(err_o)) * err_o
            q_o += float(np.mean(q[b:], dtype=np.float64)) / 2
        grads.extend(net.backward(cache, g)[0])
        total += loss
    if not math.isfinite(total):
        raise NonFiniteLoss("critic loss is not finite")
    return total, grads, {"q_in_dist": q_in, "q_ood": q_o if use_ood else float("nan")}


def _min_q_action_grad(agent, s, action, scale):
    """Value of ``min_i Q_i(s, a)`` and ``scale * d min_i Q_i / d a``."""
    x = np.concatenate([s, action], axis=1)
    o1, c1 = agent.critic1.forward(x, keep=True)
    o2, c2 = agent.critic2.forward(x, keep=True)
    pick1 = (o1 <= o2).astype(x.dtype)
    qmin = np.minimum(o1, o2)[:, 0]
    _, g1 = agent.critic1.backward(c1, scale * pick1)
    _, g2 = agent.critic2.backward(c2, scale * (1 - pick1))
    return qmin, (g1 + g2)[:, agent.state_dim:]


def actor_loss(agent: McqAgent, s, noise):
    """``mean(alpha log pi(a|s) - min_i Q_i(s, a))`` with reparameterized
    ``a``. Returns ``(loss, actor_grads, log_prob)``."""
    b = len(s)
    alpha = agent.alpha
    raw, cache = agent.actor.forward(s, keep=True)
    head = tanh_gaussian(raw, noise)
    qmin, g_a = _min_q_action_grad(agent, s, head.action, -1.0 / b)
    loss = float(np.mean(alpha * head.log_prob.astype(np.float64) - qmin))
    if not math.isfinite(loss):
        raise NonFiniteLoss("actor loss is not finite")
    g_lp = np.full(b, alpha / b, dtype=raw.dtype)
    g_raw = tanh_gaussian_backward(head, g_a, g_lp)
    grads, _ = agent.actor.backward(cache, g_raw)
    return loss, grads, head.log_prob


def alpha_grad(agent: McqAgent, log_prob) -> float:
    """Gradient of ``-alpha (log pi + target_entropy)`` w.r.t. ``log alpha``."""
    return -agent.alpha * float(np.mean(log_prob.astype(np.float64) + agent.target_entropy))


def deterministic_actor_loss(agent: McqAgent, s):
    """``-mean Q_1(s, pi(s))``; returns ``(loss, actor_grads)``."""
    b = len(s)
    raw, cache = agent.actor.forward(s, keep=True)
    action = np.tanh(raw)
    out, c = agent.critic1.forward(np.concatenate([s, action], axis=1), keep=True)
    _, g_in = agent.critic1.backward(c, np.full_like(out, -1.0 / b))
    g_raw = g_in[:, agent.state_dim:] * (1.0 - action * action)
    grads, _ = agent.actor.backward(cache, g_raw)
    loss = -float(np.mean(out, dtype=np.float64))
    if not math.isfinite(loss):
        raise NonFiniteLoss("actor loss is not finite")
    return loss, grads


def _critic_update(agent, grads):
    k = len(agent.critic1.params)
    agent.critic_opt.step([agent.critic1.flatten(grads[:k]), agent.critic2.flatten(grads[k:])])


def _polyak(agent):
    tau = agent.hyper.tau
    if tau > 0:
        agent.target1.soft_update(agent.critic1, tau)
        agent.target2.soft_update(agent.critic2, tau)
        if agent.target_actor is not None:
            agent.target_actor.soft_update(agent.actor, tau)


def _policy_draws(agent, states, k, rng):
    """``k`` reparameterized actions per state, shaped ``(len, k, action_dim)``."""
    raw = np.repeat(agent.actor.forward(states), k, axis=0)
    noise = rng.standard_normal((len(raw), agent.action_dim)).astype(F32)
    return tanh_gaussian(raw, noise).action.reshape(len(states), k, agent.action_dim)


def train_step(agent: McqAgent, batch: Batch, rng=None) -> Dict[str, float]:
    """One SAC-based MCQ update: CVAE, critics, actor and temperature, then
    Polyak averaging of the target critics."""
    if agent.hyper.deterministic:
        return train_step_deterministic(agent, batch, rng)
    hp = agent.hyper
    rng = agent.step_rng() if rng is None else rng
    s, a, r, s2, d = batch.s, batch.a, batch.r, batch.s2, batch.d
    b, da = len(s), agent.action_dim
    mcq = hp.lam < 1.0

    if mcq:
        noise = rng.standard_normal((b, agent.cvae.latent_dim)).astype(F32)
        _, g, _ = agent.cvae.loss(s, a, noise)
        agent.cvae_opt.step(agent.cvae.flat_grads(g))

    y = in_dist_target(agent, r, s2, d, rng.standard_normal((b, da)).astype(F32))
    s_in = np.concatenate([s, s2])
    if mcq:
        a_ood = _policy_draws(agent, s_in, hp.n_ood, rng)
        y_ood = ood_pseudo_target(agent, s_in, hp.n_ood, rng)
        c_loss, c_grads, info = critic_loss(agent, s, a, y, s_in, a_ood, y_ood)
    else:
        c_loss, c_grads, info = critic_loss(agent, s, a, y)
        # metric only, on its own stream so the update matches plain SAC
        probe = _policy_draws(agent, s_in, 1, agent.step_rng(_STREAM_PROBE))
        info["q_ood"] = float(agent.q_values(s_in, probe[:, 0]).mean())
    _critic_update(agent, c_grads)

    a_loss, a_grads, log_prob = actor_loss(agent, s, rng.standard_normal((b, da)).astype(F32))
    agent.actor_opt.step([agent.actor.flatten(a_grads)])
    if hp.auto_alpha:
        agent.alpha_opt.step([np.array([alpha_grad(agent, log_prob)])])

    _polyak(agent)
    agent.step += 1
    return {"critic_loss": c_loss, "actor_loss": a_loss, "alpha": agent.alpha,
            "q_in_dist": info["q_in_dist"], "q_ood": info["q_ood"], "target_q": float(np.mean(y, dtype=np.float64))}


def train_step_deterministic(agent: McqAgent, batch: Batch, rng=None) -> Dict[str, float]:
    """TD3-flavoured MCQ update: the OOD action at each state is the actor's
    own output, the actor ascends the first critic, and the actor target and
    critic targets are all averaged every step."""
    hp = agent.hyper
    if not hp.deterministic:
        raise ConfigError("agent was not built in deterministic mode")
    rng = agent.step_rng() if rng is None else rng
    s, a, r, s2, d = batch.s, batch.a, batch.r, batch.s2, batch.d
    mcq = hp.lam < 1.0
    if mcq:
        noise = rng.standard_normal((len(s), agent.cvae.latent_dim)).astype(F32)
        _, g, _ = agent.cvae.loss(s, a, noise)
        agent.cvae_opt.step(agent.cvae.flat_grads(g))

    y = in_dist_target(agent, r, s2, d)
    s_in = np.concatenate([s, s2])
    a_ood = np.tanh(agent.actor.forward(s_in))[:, None, :]
    if mcq:
        y_ood = ood_pseudo_target(agent, s_in, hp.n_ood, rng)
        c_loss, c_grads, info = critic_loss(agent, s, a, y, s_in, a_ood, y_ood)
    else:
        c_loss, c_grads, info = critic_loss(agent, s, a, y)
        info["q_ood"] = float(agent.q_values(s_in, a_ood[:, 0]).mean())
    _critic_update(agent, c_grads)

    a_loss, a_grads = deterministic_actor_loss(agent, s)
    agent.actor_opt.step([agent.actor.flatten(a_grads)])
    _polyak(agent)
    agent.step += 1
    return {"critic_loss": c_loss, "actor_loss": a_loss, "alpha": 0.0,
            "q_in_dist": info["q_in_dist"], "q_ood": info["q_ood"], "target_q": float(np.mean(y, dtype=np.float64))}


def sample_batch(agent: McqAgent, data: Dataset, batch_size: int) -> Batch:
    rng = agent.step_rng(_STREAM_BATCH)
    return Batch.take(data, rng.integers(0, len(data), size=batch_size))


class MCQ(BaseEstimator):
    """Estimator front end for offline training on a :class:`Dataset`.

    ``fit`` builds a fresh agent and runs ``n_steps`` updates;
    ``partial_fit`` continues from the current step. ``history_`` holds one
    row of step-averaged metrics per ``log_every`` steps.

    Examples
    --------
    >>> from mcqlab.envs import PointEnv, generate_dataset
    >>> env = PointEnv(dim=1)
    >>> data = generate_dataset(env, "medium", episodes=4, seed=0)
    >>> m = MCQ(n_steps=3, hidden=(8, 8), cvae_hidden=(8, 8), batch_size=16, random_state=0).fit(data)
    >>> m.predict(data.observations[:2]).shape
    (2, 1)
    """

    def __init__(self, lam=0.9, n_ood=10, n_steps=1000, batch_size=256, gamma=0.99, tau=5e-3,
                 actor_lr=3e-4, critic_lr=3e-4, alpha_lr=3e-4, cvae_lr=1e-3, hidden=(400, 400),
                 cvae_hidden=(750, 750), activation="relu", ood_aggregator="min", target_entropy=None,
                 init_alpha=1.0, pseudo_target_margin=0.0, clip_pseudo_target_to=None, r_max=None,
                 pseudo_target_critics="online", deterministic=False, log_every=1000, random_state=0):
        self.lam = lam
        self.n_ood = n_ood
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.gamma = gamma
        self.tau = tau
        self.actor_lr = actor_lr
        self.critic_lr = critic_lr
        self.alpha_lr = alpha_lr
        self.cvae_lr = cvae_lr
        self.hidden = hidden
        self.cvae_hidden = cvae_hidden
        self.activation = activation
        self.ood_aggregator = ood_aggregator
        self.target_entropy = target_entropy
        self.init_alpha = init_alpha
        self.pseudo_target_margin = pseudo_target_margin
        self.clip_pseudo_target_to = clip_pseudo_target_to
        self.r_max = r_max
        self.pseudo_target_critics = pseudo_target_critics
        self.deterministic = deterministic
        self.log_every = log_every
        self.random_state = random_state

    def make_hyper(self) -> McqHyper:
        p = self.get_params()
        return McqHyper.from_dict({f.name: p[f.name] for f in fields(McqHyper) if f.name in p})

    def fit(self, data: Dataset, callback=None):
        if len(data) == 0:
            raise EmptyDataset("cannot train on an empty dataset")
        seed = 0 if self.random_state is None else int(self.random_state)
        self.agent_ = McqAgent(data.state_dim, data.action_dim, self.make_hyper(), seed)
        self.history_ = []
        return self.partial_fit(data, callback=callback)

    def partial_fit(self, data: Dataset, n_steps=None, callback=None):
        """Continue training. ``callback(agent, row)`` runs after each logged
        row and may add columns to it."""
        check_is_fitted(self, "agent_")
        agent = self.agent_
        sums = dict.fromkeys(METRIC_KEYS, 0.0)
        count = 0
        for _ in range(self.n_steps if n_steps is None else n_steps):
            m = train_step(agent, sample_batch(agent, data, self.batch_size))
            for key in METRIC_KEYS:
                sums[key] += m[key]
            count += 1
            if agent.step % self.log_every == 0:
                row = {"step": agent.step, **{k: v / count for k, v in sums.items()}}
                if callback is not None:
                    callback(agent, row)
                self.history_.append(row)
                sums = dict.fromkeys(METRIC_KEYS, 0.0)
                count = 0
        return self

    def predict(self, X):
        check_is_fitted(self, "agent_")
        return self.agent_.act(np.asarray(X, F32), deterministic=True)

    def q_values(self, X, actions):
        check_is_fitted(self, "agent_")
        return self.agent_.q_values(X, actions)
