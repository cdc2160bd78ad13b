"""Exact dynamic programming: Bellman operators, the mildly conservative
operator and its sampled-maximum variant, fixed-point iteration and
exact policy evaluation.

Q tables are plain ``float64`` arrays of shape ``[n_states, n_actions]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import DimensionMismatch, EmptyMask, MissingDataset, NonFinite
from .mdp import Dataset, TabularMdp, TabularPolicy, state_frequencies

EXACT_MAX_ACTIONS = 12
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 100_000


@dataclass(frozen=True)
class OperatorReport:
    iterations: int
    final_residual: float
    converged: bool
    initial_residual: float = float("nan")
    seed: Optional[int] = None


def _check_q(q, mdp):
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch(f"Q table {q.shape} vs MDP ({mdp.n_states}, {mdp.n_actions})")
    return q


def _check_policy(pi, mdp):
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionMismatch("policy shape does not match the MDP")


def default_delta(mdp: TabularMdp) -> float:
    return 1e-6 * mdp.value_bound


def bellman_backup(q, mdp: TabularMdp, pi: TabularPolicy) -> np.ndarray:
    """``r + gamma * E_{s'} E_{a' ~ pi} q(s', a')``."""
    q = _check_q(q, mdp)
    _check_policy(pi, mdp)
    v = np.einsum("sa,sa->s", pi.probs, q)
    return mdp.reward + mdp.gamma * (mdp.transition @ v)


def masked_max(q, mask=None):
    if mask is None:
        return q.max(axis=1)
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=1)):
        raise EmptyMask("every state needs at least one allowed action")
    return np.where(mask, q, -np.inf).max(axis=1)


def bellman_optimal(q, mdp: TabularMdp, action_mask=None) -> np.ndarray:
    """``r + gamma * E_{s'} max_{a' in mask(s')} q(s', a')``.

    With ``action_mask = mu.support`` the fixed point is the best value
    achievable without leaving the behavior policy's support.
    """
    q = _check_q(q, mdp)
    if action_mask is not None and np.shape(action_mask) != q.shape:
        raise DimensionMismatch("mask shape does not match Q")
    return mdp.reward + mdp.gamma * (mdp.transition @ masked_max(q, action_mask))


def _backup_on_support(q, mdp, support):
    # inner step of the conservative operators: back up in-support entries
    # with a max over *all* actions, leave the rest untouched
    backed = mdp.reward + mdp.gamma * (mdp.transition @ q.max(axis=1))
    return np.where(support, backed, q)


def mcb_apply(q, mdp: TabularMdp, mu: TabularPolicy, delta: float) -> np.ndarray:
    """One application of the mildly conservative Bellman operator.

    In-support entries get the usual optimal backup; every out-of-support
    entry is set to the best backed-up in-support value minus ``delta``.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    q = _check_q(q, mdp)
    _check_policy(mu, mdp)
    support = mu.support
    t2 = _backup_on_support(q, mdp, support)
    best = masked_max(t2, support)
    return np.where(support, t2, best[:, None] - delta)


def expected_max_exact(values, probs, n_draws: int) -> np.ndarray:
    """``E[max of n_draws iid actions ~ probs]`` of ``values``, row-wise.

    Uses the order-statistics identity
    ``E[max] = v_(K) - sum_k (v_(k+1) - v_(k)) * F_k^N`` over the
    distinct-mass actions sorted by value, where ``F_k`` is the CDF. The
    result never exceeds the largest value that carries mass, and is
    nondecreasing in ``n_draws``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    out = np.empty(values.shape[0])
    for i, (v, p) in enumerate(zip(values, probs)):
        keep = p > 0
        v, p = v[keep], p[keep]
        order = np.argsort(v, kind="stable")
        v, p = v[order], p[order]
        cdf = np.minimum(np.cumsum(p[:-1]), 1.0)
        out[i] = v[-1] - np.sum(np.diff(v) * cdf**n_draws)
    return out


def expected_max_mc(values, probs, n_draws: int, draw_sets: int, rng) -> np.ndarray:
    """Monte Carlo estimate of :func:`expected_max_exact`."""
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    out = np.empty(values.shape[0])
    for i, (v, p) in enumerate(zip(values, probs)):
        idx = rng.choice(v.size, size=(draw_sets, n_draws), p=p / p.sum())
        out[i] = v[idx].max(axis=1).mean()
    return out


def practical_mcb_apply(q, mdp, mu, mu_hat, n_samples, rng=None, *, exact=None, draw_sets=256):
    """Sampled-maximum variant: out-of-support entries become
    ``E[max over n_samples draws from mu_hat(.|s)]`` of the backed-up row.

    Exact enumeration is used when ``exact`` is true, or by default when
    the action count is at most 12; otherwise ``draw_sets`` Monte Carlo
    draw-sets are averaged using ``rng``.
    """
    q = _check_q(q, mdp)
    _check_policy(mu, mdp)
    _check_policy(mu_hat, mdp)
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if exact is None:
        exact = mdp.n_actions <= EXACT_MAX_ACTIONS
    support = mu.support
    t2 = _backup_on_support(q, mdp, support)
    ood_rows = np.flatnonzero(~support.all(axis=1))
    out = t2.copy()
    if ood_rows.size:
        if exact:
            em = expected_max_exact(t2[ood_rows], mu_hat.probs[ood_rows], n_samples)
        else:
            if rng is None:
                raise ValueError("Monte Carlo mode needs an rng")
            em = expected_max_mc(t2[ood_rows], mu_hat.probs[ood_rows], n_samples, draw_sets, rng)
        fill = np.broadcast_to(em[:, None], (ood_rows.size, mdp.n_actions))
        out[ood_rows] = np.where(support[ood_rows], t2[ood_rows], fill)
    return out


def make_operator(kind, mdp, *, pi=None, mu=None, mu_hat=None, delta=None, n_samples=10,
                  action_mask=None, rng=None, exact=None) -> Callable[[np.ndarray], np.ndarray]:
    """Bind one of ``backup``, ``optimal``, ``mcb``, ``practical`` to its arguments."""
    if kind == "backup":
        return partial(bellman_backup, mdp=mdp, pi=pi)
    if kind == "optimal":
        return partial(bellman_optimal, mdp=mdp, action_mask=action_mask)
    if kind == "mcb":
        return partial(mcb_apply, mdp=mdp, mu=mu, delta=default_delta(mdp) if delta is None else delta)
    if kind == "practical":
        return partial(practical_mcb_apply, mdp=mdp, mu=mu, mu_hat=mu_hat,
                       n_samples=n_samples, rng=rng, exact=exact)
    raise ValueError(f"unknown operator kind {kind!r}")


def value_iteration(operator, q0, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, seed=None):
    """Iterate ``q <- operator(q)`` until the sup-norm step is at most ``tol``.

    Returns ``(q, OperatorReport)``. Raises :class:`NonFinite` if an iterate
    overflows.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    q = np.array(q0, dtype=np.float64)
    first = float("nan")
    residual = float("inf")
    it = 0
    while it < max_iter:
        nxt = operator(q)
        it += 1
        if not np.all(np.isfinite(nxt)):
            raise NonFinite(f"iterate {it} is not finite")
        residual = float(np.max(np.abs(nxt - q)))
        if it == 1:
            first = residual
        q = nxt
        if residual <= tol:
            break
    return q, OperatorReport(it, residual, residual <= tol, first, seed)


def greedy_policy(q, action_mask=None) -> TabularPolicy:
    """Deterministic argmax policy; ties go to the lowest action id."""
    q = np.asarray(q, dtype=np.float64)
    scores = q if action_mask is None else np.where(action_mask, q, -np.inf)
    if action_mask is not None and not np.all(np.asarray(action_mask).any(axis=1)):
        raise EmptyMask("every state needs at least one allowed action")
    return TabularPolicy.deterministic(np.argmax(scores, axis=1), q.shape[1])


def policy_evaluation(mdp: TabularMdp, pi: TabularPolicy, tol=1e-10, max_iter=DEFAULT_MAX_ITER) -> np.ndarray:
    """Q of ``pi`` by iterating the policy backup from zero."""
    _check_policy(pi, mdp)
    q, report = value_iteration(
        partial(bellman_backup, mdp=mdp, pi=pi), np.zeros((mdp.n_states, mdp.n_actions)), tol, max_iter
    )
    if not report.converged:
        warnings.warn(f"policy evaluation stopped at residual {report.final_residual:.3g}")
    return q


def policy_return(mdp: TabularMdp, pi: TabularPolicy, mode="rho0", dataset: Optional[Dataset] = None,
                  tol=1e-10) -> float:
    """Expected discounted return.

    ``mode="rho0"`` weights state values by the initial distribution;
    ``mode="dataset"`` by the empirical state frequency of ``dataset``.
    """
    if mode == "dataset":
        if dataset is None:
            raise MissingDataset("dataset-states mode needs a dataset")
        weights = state_frequencies(dataset, mdp.n_states)
    elif mode == "rho0":
        weights = mdp.rho0
    else:
        raise ValueError(f"unknown mode {mode!r}")
    q = policy_evaluation(mdp, pi, tol)
    v = np.einsum("sa,sa->s", pi.probs, q)
    return float(weights @ v)


def delta_upper_bound(q, mdp: TabularMdp, mu: TabularPolicy) -> float:
    """Largest delta for which the lower half of the value sandwich is
    guaranteed: ``min_{s,a} E_{s'}[max_supp Q(s') - E_mu Q(s')]``."""
    gap = masked_max(q, mu.support) - np.einsum("sa,sa->s", mu.probs, q)
    return float((mdp.transition @ gap).min())


def iterations_bound(gamma, tol, span) -> int:
    """Sufficient iteration count for a gamma-contraction whose first step
    is ``span``: ``ceil(log(tol * (1 - gamma) / span) / log(gamma))``."""
    if span <= tol:
        return 1
    return max(1, math.ceil(math.log(tol * (1 - gamma) / span) / math.log(gamma)))


class MCBValueIteration(BaseEstimator):
    """Estimator wrapper around the conservative fixed point.

    ``fit(mdp, mu)`` computes the fixed point of the exact (``operator="mcb"``)
    or sampled-maximum (``operator="practical"``) operator; ``predict``
    returns greedy actions for state ids.

    Examples
    --------
    >>> from mcqlab.mdp import generate_mdp, TabularPolicy
    >>> mdp = generate_mdp(0, 4, 2)
    >>> est = MCBValueIteration().fit(mdp, TabularPolicy.uniform(4, 2))
    >>> est.predict([0, 1]).shape
    (2,)
    """

    def __init__(self, operator="mcb", delta=None, n_samples=10, tol=DEFAULT_TOL,
                 max_iter=DEFAULT_MAX_ITER, random_state=None):
        self.operator = operator
        self.delta = delta
        self.n_samples = n_samples
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, mdp: TabularMdp, mu: TabularPolicy, mu_hat: Optional[TabularPolicy] = None):
        rng = np.random.default_rng(self.random_state)
        op = make_operator(
            self.operator, mdp, mu=mu, mu_hat=mu if mu_hat is None else mu_hat,
            delta=self.delta, n_samples=self.n_samples, rng=rng,
        )
        q0 = np.zeros((mdp.n_states, mdp.n_actions))
        self.q_, self.report_ = value_iteration(op, q0, self.tol, self.max_iter, seed=self.random_state)
        self.support_ = mu.support.copy()
        self.policy_ = greedy_policy(self.q_)
        return self

    def predict(self, states):
        check_is_fitted(self, "q_")
        states = np.asarray(states, dtype=np.int64)
        return np.argmax(self.q_[states], axis=-1)

    def named_tensors(self):
        check_is_fitted(self, "q_")
        return {"qtable/values": self.q_}

    def load_named(self, tensors):
        """Restore a fitted table; the greedy policy is rebuilt from it."""
        self.q_ = np.asarray(tensors["qtable/values"], dtype=np.float64)
        self.policy_ = greedy_policy(self.q_)
        return self
