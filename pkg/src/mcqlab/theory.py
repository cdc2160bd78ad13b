"""Randomized numerical checks of the conservative operator's guarantees.

Each ``check_*`` function draws random instances, measures a slack that
must be nonnegative when the guarantee holds, and folds the per-trial
results into a :class:`PropositionCertificate`. Trial ``i`` of a run with
seed ``s`` always uses the generator ``default_rng([s, i])``, so the
certificate does not depend on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import EpsilonOutOfRange
from .mdp import TabularMdp, TabularPolicy, _random_tables, collect_dataset, support_size
from .tabular import (
    bellman_optimal,
    default_delta,
    delta_upper_bound,
    expected_max_exact,
    expected_max_mc,
    greedy_policy,
    masked_max,
    mcb_apply,
    policy_evaluation,
    policy_return,
    practical_mcb_apply,
    value_iteration,
    EXACT_MAX_ACTIONS,
)

MARGIN_TOL = 1e-6

PROPOSITIONS = {
    1: "contraction of the exact operator",
    2: "value sandwich Q_mu <= Q_MCB <= Q_mu* on the support",
    3: "greedy policy improves on the behavior policy",
    4: "contraction of the sampled-maximum operator",
    5: "bounded overestimation of the sampled maximum",
}


@dataclass
class PropositionCertificate:
    proposition_id: int
    trials: int
    worst_margin: float
    seed: int
    tolerance: float = MARGIN_TOL
    details: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.worst_margin >= -self.tolerance

    def summary(self) -> str:
        status = "HOLDS" if self.holds else "FAILS"
        flags = f" flags={sorted(set(self.flags))}" if self.flags else ""
        return (
            f"proposition {self.proposition_id} ({PROPOSITIONS[self.proposition_id]}): {status} "
            f"trials={self.trials} worst_margin={self.worst_margin:.3e} "
            f"tolerance={self.tolerance:.0e} seed={self.seed}{flags}"
        )

    def records(self):
        """One JSON-serializable dict per trial."""
        for rec in self.details:
            yield {"proposition_id": self.proposition_id, "seed": self.seed, **rec}


@dataclass
class HarnessConfig:
    states: tuple = (3, 20)
    actions: tuple = (2, 6)
    gammas: tuple = (0.9, 0.95, 0.99)
    support_fractions: tuple = (0.3, 0.5, 1.0)
    r_max: float = 1.0
    delta: Optional[float] = None
    tol: float = 1e-10
    n_samples: int = 10
    tolerance: float = MARGIN_TOL
    episodes: int = 20
    horizon: int = 50


def trial_rng(seed, trial):
    return np.random.default_rng([seed, trial])


def random_policy_on_support(rng, n_states, n_actions, k):
    probs = np.zeros((n_states, n_actions))
    for s in range(n_states):
        probs[s, rng.choice(n_actions, size=k, replace=False)] = 1.0 / k
    return TabularPolicy(probs)


def random_mdp(rng, n_states, n_actions, support_fraction, gamma=0.9, r_max=1.0):
    """Random instance and a behavior policy uniform over a random support
    of ``ceil(support_fraction * n_actions)`` actions per state."""
    k = support_size(support_fraction, n_actions)
    mdp = _random_tables(rng, n_states, n_actions, gamma, r_max)
    return mdp, random_policy_on_support(rng, n_states, n_actions, k)


def _draw_instance(rng, config: HarnessConfig):
    n_s = int(rng.integers(config.states[0], config.states[1] + 1))
    n_a = int(rng.integers(config.actions[0], config.actions[1] + 1))
    gamma = float(rng.choice(config.gammas))
    frac = float(rng.choice(config.support_fractions))
    mdp, mu = random_mdp(rng, n_s, n_a, frac, gamma, config.r_max)
    return mdp, mu, frac


def reweight_within_support(mu: TabularPolicy, rng) -> TabularPolicy:
    """Random policy with the same support as ``mu`` (Dirichlet weights)."""
    probs = np.zeros_like(mu.probs)
    for s, row in enumerate(mu.support):
        probs[s, row] = rng.dirichlet(np.ones(row.sum()))
    return TabularPolicy(probs)


def check_contraction(seed, trials, config: Optional[HarnessConfig] = None, operator="mcb",
                      region="all") -> PropositionCertificate:
    """Per trial: ``gamma * |Q1 - Q2| - |T Q1 - T Q2|`` in sup norm.

    ``operator="practical"`` uses a behavior estimate reweighted inside the
    true support (and certificate id 4). ``region="support"`` restricts the
    output distance to in-support entries.
    """
    config = config or HarnessConfig()
    details = []
    for i in range(trials):
        rng = trial_rng(seed, i)
        mdp, mu, frac = _draw_instance(rng, config)
        bound = mdp.value_bound
        q1 = rng.uniform(-bound, bound, size=(mdp.n_states, mdp.n_actions))
        if i % 2:
            # constant shift: the contraction ratio is exactly gamma here
            q2 = q1 + rng.uniform(-bound, bound) + rng.uniform(-1e-9, 1e-9, size=q1.shape)
        else:
            q2 = rng.uniform(-bound, bound, size=q1.shape)
        if operator == "mcb":
            delta = default_delta(mdp) if config.delta is None else config.delta
            t1, t2 = mcb_apply(q1, mdp, mu, delta), mcb_apply(q2, mdp, mu, delta)
        elif operator == "practical":
            mu_hat = reweight_within_support(mu, rng)
            t1 = practical_mcb_apply(q1, mdp, mu, mu_hat, config.n_samples, exact=True)
            t2 = practical_mcb_apply(q2, mdp, mu, mu_hat, config.n_samples, exact=True)
        else:
            raise ValueError(operator)
        diff = np.abs(t1 - t2)
        if region == "support":
            diff = np.where(mu.support, diff, 0.0)
        margin = mdp.gamma * float(np.max(np.abs(q1 - q2))) - float(diff.max())
        details.append({"trial": i, "n_states": mdp.n_states, "n_actions": mdp.n_actions,
                        "gamma": mdp.gamma, "support_fraction": frac, "margin": margin})
    worst = min(d["margin"] for d in details) if details else float("inf")
    pid = 1 if operator == "mcb" else 4
    return PropositionCertificate(pid, trials, worst, seed, config.tolerance, details)


def solve_fixed_points(mdp: TabularMdp, mu: TabularPolicy, delta: float, tol: float):
    """``(Q_mu, Q_mu_star, Q_mcb)`` to sup-norm step ``tol``."""
    zeros = np.zeros((mdp.n_states, mdp.n_actions))
    q_mu = policy_evaluation(mdp, mu, tol)
    q_star, _ = value_iteration(lambda q: bellman_optimal(q, mdp, mu.support), zeros, tol)
    q_mcb, _ = value_iteration(lambda q: mcb_apply(q, mdp, mu, delta), zeros, tol)
    return q_mu, q_star, q_mcb


def check_sandwich(seed, trials, config: Optional[HarnessConfig] = None) -> PropositionCertificate:
    """Per trial: in-support slacks ``Q_MCB - Q_mu`` and ``Q_mu* - Q_MCB``.

    A trial whose ``delta`` exceeds the admissible bound computed on the
    converged table is flagged ``DeltaConditionViolated``; the trial still
    counts toward the margin. The flag is advisory: the lower half only
    compares in-support backups, whose next-state maximum is the in-support
    maximum for every positive delta, so it does not fail in practice.
    """
    config = config or HarnessConfig()
    details, flags = [], []
    for i in range(trials):
        rng = trial_rng(seed, i)
        mdp, mu, frac = _draw_instance(rng, config)
        delta = default_delta(mdp) if config.delta is None else config.delta
        q_mu, q_star, q_mcb = solve_fixed_points(mdp, mu, delta, config.tol)
        sup = mu.support
        lower = float(np.min((q_mcb - q_mu)[sup]))
        upper = float(np.min((q_star - q_mcb)[sup]))
        admissible = delta_upper_bound(q_mcb, mdp, mu)
        # with one supported action per state the gap is identically zero and
        # the condition says nothing, so it is not flagged
        violated = delta > admissible and bool(np.any(sup.sum(axis=1) > 1))
        if violated:
            flags.append("DeltaConditionViolated")
        details.append({"trial": i, "n_states": mdp.n_states, "n_actions": mdp.n_actions,
                        "gamma": mdp.gamma, "support_fraction": frac, "delta": delta,
                        "delta_bound": admissible, "delta_violated": bool(violated),
                        "lower_margin": lower, "upper_margin": upper, "margin": min(lower, upper)})
    worst = min(d["margin"] for d in details) if details else float("inf")
    return PropositionCertificate(2, trials, worst, seed, config.tolerance, details, flags)


def _kl(p, q):
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / q[m])))


def policy_constraint_reference(mdp, mu, q_mu, mix=0.1):
    """Reference lower bound for a KL-constrained policy.

    Uses ``pi_p = (1 - mix) * mu + mix * greedy_within_support(Q_mu)`` and
    returns ``(J(pi_p) - J(mu) lower bound, epsilon)``. Reported only.
    """
    greedy = greedy_policy(q_mu, mu.support).probs
    pi_p = (1 - mix) * mu.probs + mix * greedy
    eps = max(max(_kl(m, p), _kl(p, m)) for m, p in zip(mu.probs, pi_p))
    v_mu = np.einsum("sa,sa->s", mu.probs, q_mu)
    adv = q_mu - v_mu[:, None]
    eps_adv = float(np.max(np.abs(np.einsum("sa,sa->s", pi_p, adv))))
    g = mdp.gamma
    return -math.sqrt(2) * g * eps_adv * math.sqrt(eps) / (1 - g) ** 2, eps


def check_policy_improvement(seed, trials, config: Optional[HarnessConfig] = None) -> PropositionCertificate:
    """Per trial: ``J(greedy(Q_MCB)) - J(mu)`` weighted by dataset state frequencies."""
    config = config or HarnessConfig()
    details = []
    for i in range(trials):
        rng = trial_rng(seed, i)
        mdp, mu, frac = _draw_instance(rng, config)
        delta = default_delta(mdp) if config.delta is None else config.delta
        zeros = np.zeros((mdp.n_states, mdp.n_actions))
        q_mcb, _ = value_iteration(lambda q: mcb_apply(q, mdp, mu, delta), zeros, config.tol)
        data = collect_dataset(mdp, mu, config.episodes, config.horizon, rng)
        pi_mcb = greedy_policy(q_mcb)
        j_mcb = policy_return(mdp, pi_mcb, "dataset", data, config.tol)
        j_mu = policy_return(mdp, mu, "dataset", data, config.tol)
        q_mu = policy_evaluation(mdp, mu, config.tol)
        j_one_step = policy_return(mdp, greedy_policy(q_mu, mu.support), "dataset", data, config.tol)
        ref_bound, kl_eps = policy_constraint_reference(mdp, mu, q_mu)
        details.append({"trial": i, "n_states": mdp.n_states, "n_actions": mdp.n_actions,
                        "gamma": mdp.gamma, "support_fraction": frac,
                        "j_mcb": j_mcb, "j_mu": j_mu, "j_greedy_q_mu": j_one_step,
                        "in_support": bool(np.all(mu.support[np.arange(mdp.n_states),
                                                             pi_mcb.probs.argmax(1)])),
                        "policy_constraint_bound": ref_bound, "policy_constraint_kl": kl_eps,
                        "margin": j_mcb - j_mu})
    worst = min(d["margin"] for d in details) if details else float("inf")
    return PropositionCertificate(3, trials, worst, seed, config.tolerance, details)


def perturbable_states(mu: TabularPolicy) -> np.ndarray:
    return ~mu.support.all(axis=1)


def perturb_policy_tv(mu: TabularPolicy, epsilon: float, rng) -> TabularPolicy:
    """Move ``epsilon`` mass off the support at every state that has an
    out-of-support action, giving per-state TV distance exactly ``epsilon``.

    In-support probabilities shrink by ``1 - epsilon``; the freed mass is
    spread over the out-of-support actions with Dirichlet weights. States
    with full support are returned unchanged (see :func:`perturbable_states`).
    """
    if not 0.0 <= epsilon < 0.5:
        raise EpsilonOutOfRange(f"epsilon must lie in [0, 0.5), got {epsilon}")
    probs = mu.probs.copy()
    if epsilon == 0:
        return TabularPolicy(probs)
    for s in np.flatnonzero(perturbable_states(mu)):
        sup = mu.support[s]
        probs[s, sup] *= 1.0 - epsilon
        probs[s, ~sup] = epsilon * rng.dirichlet(np.ones((~sup).sum()))
    return TabularPolicy(probs)


def overestimation_slack(epsilon, n_samples, r_max, gamma):
    return (1.0 - (1.0 - 2.0 * epsilon) ** n_samples) * r_max / (1.0 - gamma)


def check_overestimation_bound(q, mu: TabularPolicy, epsilon, n_samples, *, r_max, gamma, rng,
                               mc_draws=256, seed=0) -> PropositionCertificate:
    """Sampled-maximum overestimation against the TV-based bound.

    Builds a perturbed behavior estimate at TV distance ``epsilon`` and
    compares, per state, ``E[max of n_samples draws]`` (exact enumeration
    up to 12 actions, Monte Carlo beyond) with
    ``max_supp q + (1 - (1 - 2 eps)^N) r_max / (1 - gamma)``.

    The bound is only guaranteed for ``0 <= q <= r_max / (1 - gamma)``;
    with negative in-support values and large out-of-support values the
    slack can be negative.
    """
    if not 0.0 <= epsilon < 0.5:
        raise EpsilonOutOfRange(f"epsilon must lie in [0, 0.5), got {epsilon}")
    q = np.asarray(q, dtype=np.float64)
    mu_hat = perturb_policy_tv(mu, epsilon, rng)
    if q.shape[1] <= EXACT_MAX_ACTIONS:
        est = expected_max_exact(q, mu_hat.probs, n_samples)
    else:
        est = expected_max_mc(q, mu_hat.probs, n_samples, mc_draws, rng)
    slack = overestimation_slack(epsilon, n_samples, r_max, gamma)
    per_state = masked_max(q, mu.support) + slack - est
    details = [{"state": int(s), "epsilon": epsilon, "n_samples": n_samples, "estimate": float(est[s]),
                "slack_term": slack, "margin": float(per_state[s])} for s in range(q.shape[0])]
    return PropositionCertificate(5, 1, float(per_state.min()), seed, 0.0, details)


def check_overestimation_grid(seed, pairs=100, epsilons=(0.0, 0.05, 0.1, 0.2), ns=(1, 5, 10, 20),
                              config: Optional[HarnessConfig] = None) -> PropositionCertificate:
    """Bound check over random ``(Q, mu)`` pairs and an ``(epsilon, N)`` grid.

    Q tables are drawn uniformly from ``[0, r_max / (1 - gamma)]``, the
    range in which the bound is guaranteed. Tolerance is zero: the estimate
    is computed by enumeration, not sampling.
    """
    config = config or HarnessConfig()
    details = []
    for i in range(pairs):
        rng = trial_rng(seed, i)
        n_s = int(rng.integers(config.states[0], config.states[1] + 1))
        n_a = int(rng.integers(config.actions[0], config.actions[1] + 1))
        gamma = float(rng.choice(config.gammas))
        frac = float(rng.choice(config.support_fractions))
        mu = random_policy_on_support(rng, n_s, n_a, support_size(frac, n_a))
        q = rng.uniform(0.0, config.r_max / (1 - gamma), size=(n_s, n_a))
        for eps in epsilons:
            for n in ns:
                cert = check_overestimation_bound(q, mu, eps, n, r_max=config.r_max, gamma=gamma,
                                                  rng=rng, seed=seed)
                details.append({"trial": i, "epsilon": eps, "n_samples": n, "gamma": gamma,
                                "n_states": n_s, "n_actions": n_a, "support_fraction": frac,
                                "margin": cert.worst_margin})
    worst = min(d["margin"] for d in details) if details else float("inf")
    return PropositionCertificate(5, pairs, worst, seed, 0.0, details)


def run_all(seed, config: Optional[HarnessConfig] = None, contraction_trials=1000, sandwich_trials=200,
            improvement_trials=200, bound_pairs=100) -> list:
    """All five certificates with the default harness sizes."""
    config = config or HarnessConfig()
    return [
        check_contraction(seed, contraction_trials, config, "mcb"),
        check_sandwich(seed, sandwich_trials, config),
        check_policy_improvement(seed, improvement_trials, config),
        check_contraction(seed, contraction_trials, config, "practical"),
        check_overestimation_grid(seed, bound_pairs, config=config),
    ]


def write_certificates(certs: Sequence[PropositionCertificate], report_path, records_path):
    """Plain-text summary plus one JSON record per trial."""
    with open(report_path, "w") as fh:
        for c in certs:
            fh.write(c.summary() + "\n")
    with open(records_path, "w") as fh:
        for c in certs:
            header = {k: v for k, v in asdict(c).items() if k != "details"}
            header["holds"] = c.holds
            header["record"] = "certificate"
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in c.records():
                fh.write(json.dumps({"record": "trial", **rec}, sort_keys=True) + "\n")


def read_certificate_records(records_path):
    with open(records_path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
