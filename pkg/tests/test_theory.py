import numpy as np
import pytest

from mcqlab.errors import EpsilonOutOfRange
from mcqlab.mdp import TabularPolicy, tv_distance
from mcqlab.tabular import expected_max_exact
from mcqlab.theory import (HarnessConfig, check_contraction, check_overestimation_bound,
                           check_overestimation_grid, check_policy_improvement, check_sandwich,
                           overestimation_slack, perturb_policy_tv, random_mdp, read_certificate_records,
                           run_all, write_certificates)

SMALL = HarnessConfig(states=(3, 8), actions=(2, 4))


def test_random_mdp_support_sizes():
    _, mu = random_mdp(np.random.default_rng(0), 5, 4, 1.0)
    assert mu.support.all()
    _, mu = random_mdp(np.random.default_rng(0), 5, 4, 0.5)
    assert np.all(mu.support.sum(1) == 2)
    a, mu_a = random_mdp(np.random.default_rng(3), 5, 4, 0.5)
    b, mu_b = random_mdp(np.random.default_rng(3), 5, 4, 0.5)
    assert np.array_equal(a.transition, b.transition) and np.array_equal(mu_a.probs, mu_b.probs)


@pytest.mark.parametrize("operator", ["mcb", "practical"])
def test_contraction_certificate(operator):
    cert = check_contraction(0, 100, SMALL, operator)
    assert cert.holds and cert.worst_margin >= -1e-9
    assert cert.proposition_id == (1 if operator == "mcb" else 4)


def test_contraction_identical_inputs_have_zero_distance():
    cfg = HarnessConfig(states=(3, 3), actions=(2, 2))
    cert = check_contraction(1, 4, cfg)
    # odd trials shift by a constant: margin is close to zero but never negative
    assert all(d["margin"] >= -1e-9 for d in cert.details)


def test_certificate_is_independent_of_trial_count():
    a = check_contraction(5, 10, SMALL)
    b = check_contraction(5, 20, SMALL)
    assert a.details == b.details[:10]


def test_sandwich_certificate():
    cert = check_sandwich(0, 20, SMALL)
    assert cert.holds
    assert "DeltaConditionViolated" not in cert.flags


def test_sandwich_degenerate_supports_collapse():
    for frac in (1.0, 0.25):
        cfg = HarnessConfig(states=(4, 4), actions=(4, 4), support_fractions=(frac,))
        cert = check_sandwich(2, 3, cfg)
        for d in cert.details:
            if frac == 0.25:
                # one action per state: Q_mu, Q_MCB and Q_mu* coincide
                assert abs(d["lower_margin"]) < 1e-6 and abs(d["upper_margin"]) < 1e-6


def test_huge_delta_is_flagged():
    cfg = HarnessConfig(states=(4, 6), actions=(3, 4), support_fractions=(0.5,), delta=5.0)
    cert = check_sandwich(0, 10, cfg)
    assert "DeltaConditionViolated" in cert.flags
    # the flag is advisory; the in-support lower half still holds
    assert cert.holds


def test_policy_improvement_certificate_and_reference_columns():
    cert = check_policy_improvement(0, 20, SMALL)
    assert cert.holds
    for d in cert.details:
        assert d["in_support"]
        assert {"j_greedy_q_mu", "policy_constraint_bound"} <= set(d)


def test_policy_improvement_degenerate_behavior():
    cfg = HarnessConfig(states=(4, 4), actions=(3, 3), support_fractions=(0.3,))
    cert = check_policy_improvement(4, 5, cfg)
    assert all(abs(d["margin"]) < 1e-6 for d in cert.details)


class TestPerturb:
    def test_zero_epsilon_identity(self):
        mu = TabularPolicy([[0.5, 0.5, 0.0]])
        assert np.array_equal(perturb_policy_tv(mu, 0.0, np.random.default_rng(0)).probs, mu.probs)

    def test_two_action_construction(self):
        out = perturb_policy_tv(TabularPolicy([[1.0, 0.0]]), 0.1, np.random.default_rng(0))
        assert np.allclose(out.probs, [[0.9, 0.1]])

    def test_exact_tv_and_simplex(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            _, mu = random_mdp(rng, 6, 5, 0.5)
            eps = rng.uniform(0, 0.49)
            out = perturb_policy_tv(mu, eps, rng)
            assert np.allclose(out.probs.sum(1), 1.0)
            for s in range(6):
                assert tv_distance(out.probs[s], mu.probs[s]) == pytest.approx(eps, abs=1e-12)

    def test_full_support_rows_unchanged(self):
        mu = TabularPolicy([[0.5, 0.5], [1.0, 0.0]])
        out = perturb_policy_tv(mu, 0.2, np.random.default_rng(0))
        assert np.array_equal(out.probs[0], [0.5, 0.5])

    def test_range(self):
        with pytest.raises(EpsilonOutOfRange):
            perturb_policy_tv(TabularPolicy([[1.0, 0.0]]), 0.5, np.random.default_rng(0))


class TestOverestimation:
    def test_zero_epsilon_no_slack(self):
        rng = np.random.default_rng(0)
        _, mu = random_mdp(rng, 5, 4, 0.5)
        q = rng.uniform(0, 10, size=(5, 4))
        cert = check_overestimation_bound(q, mu, 0.0, 10, r_max=1.0, gamma=0.9, rng=rng)
        assert cert.details[0]["slack_term"] == 0.0
        assert cert.worst_margin >= 0

    def test_slack_closed_form(self):
        assert overestimation_slack(0.1, 10, 1.0, 0.9) == pytest.approx((1 - 0.8**10) * 10, rel=1e-14)
        assert 1 - 0.8**10 == pytest.approx(0.8926258176, abs=1e-10)

    def test_pinned_out_of_support_values(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            _, mu = random_mdp(rng, 5, 5, 0.3)
            q = np.where(mu.support, rng.uniform(0, 10, size=(5, 5)), 10.0)
            for eps in (0.05, 0.1, 0.2, 0.4):
                for n in (1, 5, 10, 20):
                    cert = check_overestimation_bound(q, mu, eps, n, r_max=1.0, gamma=0.9, rng=rng)
                    assert cert.worst_margin >= 0

    def test_signed_q_counterexample(self):
        """Outside [0, r_max / (1 - gamma)] the bound can fail: negative
        in-support values with a large out-of-support value."""
        mu = TabularPolicy([[1.0, 0.0]])
        q = np.array([[-10.0, 10.0]])
        cert = check_overestimation_bound(q, mu, 0.1, 10, r_max=1.0, gamma=0.9, rng=np.random.default_rng(0))
        estimate = -10 + (1 - 0.9**10) * 20
        assert cert.details[0]["estimate"] == pytest.approx(estimate)
        assert cert.worst_margin < 0

    def test_grid_small(self):
        cert = check_overestimation_grid(0, pairs=10, config=SMALL)
        assert cert.worst_margin >= 0 and cert.tolerance == 0.0

    def test_estimate_monotone_in_n(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            _, mu = random_mdp(rng, 4, 5, 0.5)
            mu_hat = perturb_policy_tv(mu, 0.2, rng)
            q = rng.uniform(-5, 5, size=(4, 5))
            ests = [expected_max_exact(q, mu_hat.probs, n) for n in (1, 2, 5, 10, 20)]
            assert all(np.all(b >= a - 1e-12) for a, b in zip(ests, ests[1:]))


def test_run_all_and_certificate_files(tmp_path):
    certs = run_all(1, SMALL, contraction_trials=20, sandwich_trials=5, improvement_trials=5, bound_pairs=3)
    assert [c.proposition_id for c in certs] == [1, 2, 3, 4, 5]
    assert all(c.holds for c in certs)
    write_certificates(certs, tmp_path / "c.txt", tmp_path / "c.jsonl")
    lines = (tmp_path / "c.txt").read_text().splitlines()
    assert len(lines) == 5 and all("HOLDS" in line for line in lines)
    recs = read_certificate_records(tmp_path / "c.jsonl")
    heads = [r for r in recs if r["record"] == "certificate"]
    assert len(heads) == 5 and all(h["holds"] for h in heads)
    assert sum(r["record"] == "trial" for r in recs) > 0
