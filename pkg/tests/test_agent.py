import numpy as np
import pytest

from mcqlab.agent import (MCQ, Batch, McqAgent, McqHyper, actor_loss, alpha_grad, critic_loss,
                          deterministic_actor_loss, in_dist_target, ood_pseudo_target, sample_batch,
                          train_step, train_step_deterministic)
from mcqlab.envs import PointEnv, generate_dataset
from mcqlab.errors import ConfigError
from mcqlab.nn import grad_check, tanh_gaussian, tanh_gaussian_backward

F32 = np.float32
SD, AD, B = 3, 2, 16


def small(**kw):
    base = dict(hidden=(8, 8), cvae_hidden=(8, 8), batch_size=B, n_ood=3)
    base.update(kw)
    return McqHyper(**base)


def random_batch(seed=0, n=B, dtype=F32):
    rng = np.random.default_rng(seed)
    return Batch(rng.normal(size=(n, SD)).astype(dtype), rng.uniform(-0.9, 0.9, (n, AD)).astype(dtype),
                 rng.normal(size=n).astype(dtype), rng.normal(size=(n, SD)).astype(dtype),
                 (rng.random(n) < 0.2).astype(dtype))


def constant_critics(agent, c):
    for net in (agent.critic1, agent.critic2, agent.target1, agent.target2):
        net.flat[:] = 0
        net.params[-1][...] = c


@pytest.fixture(scope="module")
def point_data():
    return generate_dataset(PointEnv(dim=1), "medium", episodes=5, seed=0)


class TestHyper:
    def test_validation(self):
        for bad in (dict(lam=0.0), dict(lam=1.5), dict(n_ood=0), dict(tau=2.0), dict(ood_aggregator="max")):
            with pytest.raises(ConfigError):
                McqHyper(**bad).validate()

    def test_round_trip_and_clip(self):
        hp = McqHyper(r_max=1.0, gamma=0.9)
        assert McqHyper.from_dict(hp.to_dict()) == hp
        assert hp.pseudo_clip == pytest.approx(10.0)
        assert McqHyper(clip_pseudo_target_to=float("nan"), r_max=1.0).pseudo_clip is None
        with pytest.raises(ConfigError):
            McqHyper.from_dict({"bogus": 1})


class TestGradients:
    """Finite-difference agreement of every loss at hidden width 8."""

    def test_critic_loss_with_ood_term(self):
        agent = McqAgent(SD, AD, small(lam=0.7), seed=1).astype(np.float64)
        bt = random_batch(1, dtype=np.float64)
        rng = np.random.default_rng(2)
        s_in = np.concatenate([bt.s, bt.s2])
        a_ood = np.tanh(rng.normal(size=(2 * B, 3, AD)))
        y, y_ood = rng.normal(size=B), rng.normal(size=2 * B)
        params = agent.critic1.params + agent.critic2.params
        rep = grad_check(lambda: critic_loss(agent, bt.s, bt.a, y, s_in, a_ood, y_ood)[:2], params,
                         n_coords=300, rng=0)
        assert rep.passed(1e-4), rep

    def test_actor_loss(self):
        agent = McqAgent(SD, AD, small(init_alpha=0.3), seed=2).astype(np.float64)
        bt = random_batch(3, dtype=np.float64)
        noise = np.random.default_rng(4).normal(size=(B, AD))
        rep = grad_check(lambda: actor_loss(agent, bt.s, noise)[:2], agent.actor.params, n_coords=300, rng=0)
        assert rep.passed(1e-4), rep

    def test_deterministic_critic_loss(self):
        agent = McqAgent(SD, AD, small(lam=0.6, deterministic=True), seed=3).astype(np.float64)
        bt = random_batch(5, dtype=np.float64)
        s_in = np.concatenate([bt.s, bt.s2])
        a_ood = np.tanh(agent.actor.forward(s_in))[:, None, :]
        y = np.random.default_rng(6).normal(size=B)
        y_ood = np.random.default_rng(7).normal(size=2 * B)
        params = agent.critic1.params + agent.critic2.params
        rep = grad_check(lambda: critic_loss(agent, bt.s, bt.a, y, s_in, a_ood, y_ood)[:2], params,
                         n_coords=300, rng=0)
        assert rep.passed(1e-4), rep

    def test_deterministic_actor_loss(self):
        agent = McqAgent(SD, AD, small(deterministic=True), seed=4).astype(np.float64)
        s = random_batch(8, dtype=np.float64).s
        rep = grad_check(lambda: deterministic_actor_loss(agent, s), agent.actor.params, n_coords=300, rng=0)
        assert rep.passed(1e-4), rep

    def test_cvae_loss_inside_agent(self):
        agent = McqAgent(SD, AD, small(), seed=5).astype(np.float64)
        bt = random_batch(9, dtype=np.float64)
        z = np.random.default_rng(0).normal(size=(B, agent.cvae.latent_dim))
        rep = grad_check(lambda: agent.cvae.loss(bt.s, bt.a, z)[:2], agent.cvae.params, n_coords=300, rng=0)
        assert rep.passed(1e-4), rep


class TestTargets:
    def test_done_and_zero_discount_give_reward(self):
        agent = McqAgent(SD, AD, small(), seed=0)
        bt = random_batch(0)
        noise = np.zeros((B, AD), F32)
        y = in_dist_target(agent, bt.r, bt.s2, np.ones(B, F32), noise)
        assert np.array_equal(y, bt.r)
        agent0 = McqAgent(SD, AD, small(gamma=0.0), seed=0)
        assert np.array_equal(in_dist_target(agent0, bt.r, bt.s2, bt.d, noise), bt.r)

    def test_constant_critics_without_entropy(self):
        agent = McqAgent(SD, AD, small(gamma=0.9), seed=0)
        constant_critics(agent, 2.5)
        agent.log_alpha[0] = -np.inf
        bt = random_batch(1)
        y = in_dist_target(agent, bt.r, bt.s2, bt.d, np.ones((B, AD), F32))
        assert np.allclose(y, bt.r + 0.9 * (1 - bt.d) * 2.5, atol=1e-6)

    def test_pseudo_target_single_draw(self):
        agent = McqAgent(SD, AD, small(), seed=1)
        s = random_batch(2).s
        draws = np.tanh(np.random.default_rng(0).normal(size=(B, 1, AD))).astype(F32)
        y = ood_pseudo_target(agent, s, 1, draws=draws)
        assert np.allclose(y, agent.q_values(s, draws[:, 0]).min(axis=1), atol=1e-6)

    def test_pseudo_target_identical_critics(self):
        agent = McqAgent(SD, AD, small(), seed=2)
        agent.critic2.flat[:] = agent.critic1.flat
        s = random_batch(3).s
        draws = np.tanh(np.random.default_rng(1).normal(size=(B, 5, AD))).astype(F32)
        y = ood_pseudo_target(agent, s, 5, draws=draws)
        q = np.stack([agent.q_values(s, draws[:, k])[:, 0] for k in range(5)], axis=1)
        assert np.allclose(y, q.max(axis=1), atol=1e-6)

    def test_pseudo_target_below_max_of_max(self):
        agent = McqAgent(SD, AD, small(), seed=3)
        s = random_batch(4).s
        draws = np.tanh(np.random.default_rng(2).normal(size=(B, 4, AD))).astype(F32)
        y = ood_pseudo_target(agent, s, 4, draws=draws)
        q = np.stack([agent.q_values(s, draws[:, k]).max(axis=1) for k in range(4)], axis=1)
        assert np.all(y <= q.max(axis=1) + 1e-6)

    def test_margin_clip_and_mean_aggregator(self):
        s = random_batch(5).s
        draws = np.tanh(np.random.default_rng(3).normal(size=(B, 2, AD))).astype(F32)
        base = ood_pseudo_target(McqAgent(SD, AD, small(), seed=4), s, 2, draws=draws)
        shifted = ood_pseudo_target(McqAgent(SD, AD, small(pseudo_target_margin=0.5), seed=4), s, 2, draws=draws)
        assert np.allclose(shifted, base - 0.5, atol=1e-6)
        clipped = ood_pseudo_target(McqAgent(SD, AD, small(clip_pseudo_target_to=0.0), seed=4), s, 2, draws=draws)
        assert np.all(clipped <= 0) and np.array_equal(clipped, np.minimum(base, 0))
        mean = ood_pseudo_target(McqAgent(SD, AD, small(ood_aggregator="mean"), seed=4), s, 2, draws=draws)
        assert np.all(mean >= base - 1e-6)

    def test_pseudo_target_respects_bound_with_fitted_behavior(self):
        """Behavior actions live in [-0.2, 0.2]; frozen critics bounded in
        [0, 10]. Over 10^4 states the sampled maximum stays under the best
        in-support value plus the slack for the observed off-support rate."""
        env_r_max, gamma, n = 1.0, 0.9, 10
        hp = small(n_ood=n, gamma=gamma, r_max=env_r_max, cvae_hidden=(32, 32))
        agent = McqAgent(1, 1, hp, seed=6)
        rng = np.random.default_rng(0)
        s_train = rng.uniform(-1, 1, (4000, 1)).astype(F32)
        a_train = rng.uniform(-0.2, 0.2, (4000, 1)).astype(F32)
        for step in range(1500):
            idx = rng.integers(0, 4000, 128)
            _, g, _ = agent.cvae.loss(s_train[idx], a_train[idx], rng.standard_normal((128, 2)).astype(F32))
            agent.cvae_opt.step(agent.cvae.flat_grads(g))
        # squash critics into [0, r_max / (1 - gamma)] by rescaling a bounded feature
        for net in (agent.critic1, agent.critic2):
            net.params[-2][...] *= 0.5
            net.params[-1][...] = 5.0
        states = rng.uniform(-1, 1, (10_000, 1)).astype(F32)
        draws = agent.cvae.sample(states, n, np.random.default_rng(1))
        y = ood_pseudo_target(agent, states, n, draws=draws)
        grid = np.linspace(-0.2, 0.2, 41, dtype=F32)
        best = np.full(len(states), -np.inf)
        for g in grid:
            q = agent.q_values(states, np.full((len(states), 1), g, F32)).min(axis=1)
            best = np.maximum(best, q)
        eps = float(np.mean(np.abs(draws) > 0.2))
        slack = (1 - (1 - 2 * min(eps, 0.49)) ** n) * env_r_max / (1 - gamma)
        excess = y - best
        assert excess.mean() <= slack + 3 * excess.std() / np.sqrt(len(states))


class TestCriticLoss:
    def test_unit_lambda_ignores_ood_term(self):
        agent = McqAgent(SD, AD, small(lam=1.0), seed=0)
        bt = random_batch(0)
        y = np.zeros(B, F32)
        a_ood = np.zeros((2 * B, 3, AD), F32)
        with_ood = critic_loss(agent, bt.s, bt.a, y, np.concatenate([bt.s, bt.s2]), a_ood, np.ones(2 * B, F32))
        plain = critic_loss(agent, bt.s, bt.a, y)
        assert with_ood[0] == plain[0]
        assert all(np.array_equal(g, h) for g, h in zip(with_ood[1], plain[1]))

    def test_perfect_fit_has_zero_loss(self):
        agent = McqAgent(SD, AD, small(lam=0.5), seed=1)
        agent.critic2.flat[:] = agent.critic1.flat
        bt = random_batch(1)
        s_in = np.concatenate([bt.s, bt.s2])
        a_ood = np.tanh(np.random.default_rng(0).normal(size=(2 * B, 1, AD))).astype(F32)
        y = agent.q_values(bt.s, bt.a)[:, 0]
        y_ood = agent.q_values(s_in, a_ood[:, 0])[:, 0]
        loss, grads, _ = critic_loss(agent, bt.s, bt.a, y, s_in, a_ood, y_ood)
        assert loss == 0.0 and all(not g.any() for g in grads)


class TestActorAndAlpha:
    def test_flat_objective_gives_no_actor_signal(self):
        agent = McqAgent(SD, AD, small(), seed=0)
        constant_critics(agent, 1.0)
        agent.log_alpha[0] = -np.inf
        _, grads, _ = actor_loss(agent, random_batch(0).s, np.ones((B, AD), F32))
        assert max(np.abs(g).max() for g in grads) < 1e-12

    def test_temperature_gradient_sign(self):
        agent = McqAgent(SD, AD, small(), seed=0)
        high_entropy = np.full(B, -10.0)  # -log pi = 10 > target entropy -2
        low_entropy = np.full(B, 10.0)
        assert alpha_grad(agent, high_entropy) > 0
        assert alpha_grad(agent, low_entropy) < 0
        before = agent.alpha
        agent.alpha_opt.step([np.array([alpha_grad(agent, high_entropy)])])
        assert agent.alpha < before
        agent.alpha_opt.step([np.array([10 * alpha_grad(agent, low_entropy)])])


class TestTrainStep:
    def test_polyak_boundaries(self, point_data):
        agent = McqAgent(1, 1, small(tau=1.0), seed=0)
        train_step(agent, sample_batch(agent, point_data, B))
        assert np.array_equal(agent.target1.flat, agent.critic1.flat)
        assert np.array_equal(agent.target2.flat, agent.critic2.flat)
        frozen = McqAgent(1, 1, small(tau=0.0), seed=0)
        before = frozen.target1.flat.copy()
        for _ in range(3):
            train_step(frozen, sample_batch(frozen, point_data, B))
        assert np.array_equal(frozen.target1.flat, before)
        assert not np.array_equal(frozen.critic1.flat, before)

    def test_step_is_deterministic(self, point_data):
        def run():
            agent = McqAgent(1, 1, small(), seed=7)
            metrics = [train_step(agent, sample_batch(agent, point_data, B)) for _ in range(5)]
            return agent.named_tensors(), metrics

        (ta, ma), (tb, mb) = run(), run()
        assert ma == mb
        assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)

    def test_metrics(self, point_data):
        agent = McqAgent(1, 1, small(), seed=0)
        m = train_step(agent, sample_batch(agent, point_data, B))
        assert set(m) == {"critic_loss", "actor_loss", "alpha", "q_in_dist", "q_ood", "target_q"}
        assert all(np.isfinite(v) for v in m.values())
        assert agent.step == 1

    def test_unit_lambda_matches_reference_sac_step(self, point_data):
        agent = McqAgent(1, 1, small(lam=1.0), seed=3)
        for _ in range(2):
            train_step(agent, sample_batch(agent, point_data, B))
        ref = McqAgent(1, 1, small(lam=1.0), seed=3)
        ref.load_named(agent.named_tensors())
        cvae_before = np.concatenate(agent.cvae.flats).copy()
        batch = sample_batch(agent, point_data, B)
        train_step(agent, batch)
        reference_sac_step(ref, batch)
        got, want = agent.named_tensors(), ref.named_tensors()
        assert all(got[k].tobytes() == want[k].tobytes() for k in want)
        assert np.array_equal(np.concatenate(agent.cvae.flats), cvae_before)


def reference_sac_step(agent, bt):
    """Plain SAC update composed directly from the network kernels."""
    hp = agent.hyper
    rng = np.random.default_rng([agent.seed, 1, agent.step])
    b, da, sd = len(bt.s), agent.action_dim, agent.state_dim

    def q(net, s, a):
        return net.forward(np.concatenate([s, a], axis=1))[:, 0]

    head = tanh_gaussian(agent.actor.forward(bt.s2), rng.standard_normal((b, da)).astype(F32))
    soft = np.minimum(q(agent.target1, bt.s2, head.action), q(agent.target2, bt.s2, head.action))
    soft = soft - agent.alpha * head.log_prob
    y = (np.asarray(bt.r, F32) + hp.gamma * (1.0 - np.asarray(bt.d, F32)) * soft).astype(F32)

    x = np.concatenate([bt.s, bt.a], axis=1)
    flat_grads = []
    for net in (agent.critic1, agent.critic2):
        out, cache = net.forward(x, keep=True)
        g = np.empty_like(out)
        g[:, 0] = (2.0 / b) * (out[:, 0] - y)
        flat_grads.append(net.flatten(net.backward(cache, g)[0]))
    agent.critic_opt.step(flat_grads)

    raw, cache = agent.actor.forward(bt.s, keep=True)
    head = tanh_gaussian(raw, rng.standard_normal((b, da)).astype(F32))
    xa = np.concatenate([bt.s, head.action], axis=1)
    o1, c1 = agent.critic1.forward(xa, keep=True)
    o2, c2 = agent.critic2.forward(xa, keep=True)
    pick = (o1 <= o2).astype(xa.dtype)
    _, g1 = agent.critic1.backward(c1, (-1.0 / b) * pick)
    _, g2 = agent.critic2.backward(c2, (-1.0 / b) * (1 - pick))
    g_raw = tanh_gaussian_backward(head, (g1 + g2)[:, sd:], np.full(b, agent.alpha / b, dtype=raw.dtype))
    agent.actor_opt.step([agent.actor.flatten(agent.actor.backward(cache, g_raw)[0])])
    te = -float(da)
    agent.alpha_opt.step([np.array([-agent.alpha * float(np.mean(head.log_prob.astype(np.float64) + te))])])

    for tgt, src in ((agent.target1, agent.critic1), (agent.target2, agent.critic2)):
        tgt.soft_update(src, hp.tau)
    agent.step += 1


class TestDeterministicVariant:
    def test_requires_deterministic_agent(self):
        agent = McqAgent(SD, AD, small(), seed=0)
        with pytest.raises(ConfigError):
            train_step_deterministic(agent, random_batch(0))

    def test_copy_case_keeps_target_chain(self, point_data):
        agent = McqAgent(1, 1, small(deterministic=True, tau=1.0), seed=0)
        assert np.array_equal(agent.target_actor.flat, agent.actor.flat)
        m = train_step(agent, sample_batch(agent, point_data, B))
        assert m["alpha"] == 0.0
        assert np.array_equal(agent.target_actor.flat, agent.actor.flat)
        assert np.array_equal(agent.target1.flat, agent.critic1.flat)

    def test_target_uses_target_actor_without_noise(self):
        agent = McqAgent(SD, AD, small(deterministic=True, gamma=0.5), seed=1)
        bt = random_batch(2)
        a2 = np.tanh(agent.target_actor.forward(bt.s2))
        q = np.minimum(agent.target1.forward(np.concatenate([bt.s2, a2], 1))[:, 0],
                       agent.target2.forward(np.concatenate([bt.s2, a2], 1))[:, 0])
        assert np.allclose(in_dist_target(agent, bt.r, bt.s2, bt.d), bt.r + 0.5 * (1 - bt.d) * q, atol=1e-6)

    def test_actor_output_in_box(self):
        agent = McqAgent(SD, AD, small(deterministic=True), seed=2)
        assert np.all(np.abs(agent.act(random_batch(0).s)) <= 1)


class TestEstimator:
    def test_fit_predict_and_history(self, point_data):
        est = MCQ(n_steps=20, log_every=10, hidden=(8, 8), cvae_hidden=(8, 8), batch_size=B, random_state=0)
        est.fit(point_data)
        assert [r["step"] for r in est.history_] == [10, 20]
        assert est.predict(point_data.observations[:4]).shape == (4, 1)
        assert est.q_values(point_data.observations[:4], point_data.actions[:4]).shape == (4, 2)
        est.partial_fit(point_data, n_steps=10)
        assert est.agent_.step == 30

    def test_fit_is_reproducible(self, point_data):
        kw = dict(n_steps=10, log_every=5, hidden=(8, 8), cvae_hidden=(8, 8), batch_size=B, random_state=4)
        a, b = MCQ(**kw).fit(point_data), MCQ(**kw).fit(point_data)
        assert a.history_ == b.history_
