import numpy as np
import pytest

from mcqlab.cvae import CVAEBehaviorModel, CvaeModel, cvae_train_step
from mcqlab.errors import ShapeMismatch
from mcqlab.mdp import tv_distance
from mcqlab.nn import Adam, grad_check


@pytest.fixture(scope="module")
def uniform_fit():
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, (4000, 2))
    a = rng.uniform(-0.2, 0.2, (4000, 1))
    return CVAEBehaviorModel(n_steps=2000, random_state=0).fit(s, a), s, a


def batch(seed, n=32, sd=3, ad=2):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, sd)), rng.uniform(-0.9, 0.9, (n, ad)), rng.normal(size=(n, 2 * ad))


def test_prior_matching_encoder_has_zero_kl():
    m = CvaeModel(3, 2, (8, 8), rng=0)
    m.encoder.params[-2][...] = 0
    m.encoder.params[-1][...] = 0
    s, a, z = batch(0)
    _, _, parts = m.loss(s, a, z)
    assert parts["kl"] == 0.0


def test_exact_decoder_has_zero_reconstruction():
    m = CvaeModel(3, 2, (8, 8), rng=0, dtype=np.float64)
    s, _, z = batch(1)
    mu, log_std = m.encode(s, np.zeros((32, 2)))
    # make the encoder ignore the action so z is known before choosing a
    m.encoder.params[0][3:] = 0
    mu, log_std = m.encode(s, np.zeros((32, 2)))
    a = m.decode(s, mu + np.exp(log_std) * z)
    _, _, parts = m.loss(s, a, z)
    assert parts["reconstruction"] == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("kl_weight", [1.0, 0.5])
def test_loss_gradients(kl_weight):
    m = CvaeModel(3, 2, (8, 8), rng=1, dtype=np.float64, kl_weight=kl_weight)
    s, a, z = batch(2)
    rep = grad_check(lambda: m.loss(s, a, z)[:2], m.params, n_coords=300, rng=0)
    assert rep.passed(1e-4), rep


def test_kl_nonnegative():
    m = CvaeModel(3, 2, (8, 8), rng=3)
    for seed in range(20):
        s, a, z = batch(seed)
        assert m.loss(s, a, z)[2]["kl"] >= -1e-6


def test_shape_checks():
    m = CvaeModel(3, 2, (8, 8), rng=0)
    s, a, z = batch(0)
    with pytest.raises(ShapeMismatch):
        m.loss(s, a[:, :1], z)
    with pytest.raises(ShapeMismatch):
        m.loss(s, a, z[:, :1])


def test_small_steps_descend():
    wins = 0
    for trial in range(100):
        m = CvaeModel(3, 2, (16, 16), rng=trial)
        s, a, z = batch(100 + trial)
        before = m.loss(s, a, z)[0]
        opt = Adam(m.flats, lr=1e-5)
        opt.step(m.flat_grads(m.loss(s, a, z)[1]))
        wins += m.loss(s, a, z)[0] <= before
    assert wins >= 95


def test_training_is_deterministic():
    def run():
        m = CvaeModel(3, 2, (8, 8), rng=4)
        opt = Adam(m.flats, lr=1e-3)
        rng = np.random.default_rng(5)
        s, a, _ = batch(6)
        for _ in range(20):
            cvae_train_step(m, opt, s, a, rng)
        return np.concatenate(m.flats)

    assert run().tobytes() == run().tobytes()


def test_learns_linear_behavior():
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, (4000, 1))
    model = CVAEBehaviorModel(n_steps=2000, random_state=0).fit(s, 0.5 * s)
    held = rng.uniform(-1, 1, (500, 1))
    err = np.mean(np.abs(model.reconstruct(held, 0.5 * held, random_state=1) - 0.5 * held))
    assert err < 0.05


def test_samples_stay_near_narrow_support(uniform_fit):
    model, s, _ = uniform_fit
    draws = model.sample(s[:500], 20, random_state=1)
    assert draws.shape == (500, 20, 1)
    assert np.mean(np.abs(draws) <= 0.3) >= 0.95


def _histogram_tv(kl_weight):
    rng = np.random.default_rng(0)
    s = rng.uniform(-1, 1, (4000, 2))
    a = rng.uniform(-0.9, 0.9, (4000, 1))
    model = CVAEBehaviorModel(n_steps=2000, kl_weight=kl_weight, random_state=0).fit(s, a)
    draws = model.sample(s[:1000], 10, random_state=2).ravel()
    bins = np.linspace(-1, 1, 21)
    return tv_distance(np.histogram(a, bins)[0] / a.size, np.histogram(draws, bins)[0] / draws.size)


def test_sample_histogram_tv_with_reduced_kl_weight():
    assert _histogram_tv(0.02) < 0.15


@pytest.mark.xfail(strict=True, reason="unit KL weight collapses the posterior when the action "
                   "variance is below the implied decoder variance of 1/2")
def test_sample_histogram_tv_with_unit_kl_weight():
    assert _histogram_tv(1.0) < 0.15


def test_sampling_has_no_side_effects(uniform_fit):
    model = uniform_fit[0]
    before = [f.copy() for f in model.model_.flats]
    one = model.sample(np.zeros((2, 2)), 1, random_state=9)
    assert np.array_equal(one, model.sample(np.zeros((2, 2)), 1, random_state=9))
    assert all(np.array_equal(x, y) for x, y in zip(before, model.model_.flats))


def test_latent_clip_option():
    m = CvaeModel(2, 1, (8, 8), rng=0, latent_clip=0.5)
    out = m.sample(np.zeros((3, 2)), 4, np.random.default_rng(0))
    assert out.shape == (3, 4, 1) and np.all(np.abs(out) < 1)
