"""Conditional VAE over actions given states, used as the empirical
behavior policy when building pseudo targets."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import NonFiniteLoss, ShapeMismatch
from .nn import Adam, DenseNet
from .validation import check_states_actions

ENC_LOG_STD_MIN = -4.0
ENC_LOG_STD_MAX = 15.0


class CvaeModel:
    """Encoder ``(s, a) -> (mu_z, log_std_z)`` and decoder ``(s, z) -> a``.

    The decoder output is squashed by tanh so decoded actions stay inside
    the ``[-1, 1]`` action box, both in the reconstruction loss and when
    sampling.
    """

    def __init__(self, state_dim, action_dim, hidden=(64, 64), latent_dim=None, activation="relu",
                 rng=None, dtype=np.float32, kl_weight=1.0, latent_clip=None):
        rng = np.random.default_rng(rng)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.latent_dim = int(latent_dim or 2 * action_dim)
        self.kl_weight = kl_weight
        self.latent_clip = latent_clip
        self.encoder = DenseNet([state_dim + action_dim, *hidden, 2 * self.latent_dim], activation, rng, dtype)
        self.decoder = DenseNet([state_dim + self.latent_dim, *hidden, action_dim], activation, rng, dtype)

    @property
    def params(self):
        return self.encoder.params + self.decoder.params

    @property
    def flats(self):
        return [self.encoder.flat, self.decoder.flat]

    def flat_grads(self, grads):
        k = len(self.encoder.params)
        return [self.encoder.flatten(grads[:k]), self.decoder.flatten(grads[k:])]

    @property
    def dtype(self):
        return self.encoder.dtype

    def astype(self, dtype):
        other = CvaeModel.__new__(CvaeModel)
        other.__dict__.update(self.__dict__)
        other.encoder = self.encoder.copy(dtype)
        other.decoder = self.decoder.copy(dtype)
        return other

    def encode(self, states, actions):
        raw = self.encoder.forward(np.concatenate([states, actions], axis=1))
        mu, raw_ls = raw[:, : self.latent_dim], raw[:, self.latent_dim:]
        return mu, np.clip(raw_ls, ENC_LOG_STD_MIN, ENC_LOG_STD_MAX)

    def decode(self, states, z):
        return np.tanh(self.decoder.forward(np.concatenate([states, z], axis=1)))

    def loss(self, states, actions, noise):
        """Batch mean of ``|a - D(s, z)|^2 + kl_weight * KL(q(z|s,a) || N(0, I))``.

        ``noise`` is the standard normal draw of the reparameterized latent.
        Returns ``(loss, grads, parts)`` where ``grads`` aligns with
        :attr:`params` and ``parts`` holds the reconstruction and KL means.
        """
        states, actions = check_states_actions(states, actions, self.state_dim, self.action_dim)
        if noise.shape != (states.shape[0], self.latent_dim):
            raise ShapeMismatch(f"latent noise must be {(states.shape[0], self.latent_dim)}")
        b = states.shape[0]
        dt = self.dtype
        raw, enc_cache = self.encoder.forward(np.concatenate([states, actions], axis=1).astype(dt), keep=True)
        k = self.latent_dim
        mu, raw_ls = raw[:, :k], raw[:, k:]
        log_std = np.clip(raw_ls, ENC_LOG_STD_MIN, ENC_LOG_STD_MAX)
        std = np.exp(log_std)
        z = mu + std * noise
        out, dec_cache = self.decoder.forward(np.concatenate([states, z], axis=1).astype(dt), keep=True)
        recon = np.tanh(out)
        err = recon - actions
        rec_terms = np.sum(err * err, axis=1, dtype=np.float64)
        kl_terms = 0.5 * np.sum(mu * mu + std * std - 1.0 - 2.0 * log_std, axis=1, dtype=np.float64)
        loss = float(np.mean(rec_terms + self.kl_weight * kl_terms))
        if not np.isfinite(loss):
            raise NonFiniteLoss("CVAE loss is not finite")

        g_out = (2.0 / b) * err * (1.0 - recon * recon)
        dec_grads, g_in = self.decoder.backward(dec_cache, g_out)
        g_z = g_in[:, self.state_dim:]
        w = self.kl_weight / b
        g_mu = g_z + w * mu
        g_ls = g_z * std * noise + w * (std * std - 1.0)
        g_ls = np.where((raw_ls < ENC_LOG_STD_MIN) | (raw_ls > ENC_LOG_STD_MAX), 0.0, g_ls)
        enc_grads, _ = self.encoder.backward(enc_cache, np.concatenate([g_mu, g_ls], axis=1).astype(dt))
        parts = {"reconstruction": float(rec_terms.mean()), "kl": float(kl_terms.mean())}
        return loss, enc_grads + dec_grads, parts

    def sample(self, states, n, rng):
        """``n`` decoded actions per state from the latent prior, shaped
        ``(len(states), n, action_dim)``. Does not touch the parameters."""
        if n < 1:
            raise ValueError("n must be >= 1")
        states = np.asarray(states, dtype=self.dtype)
        rep = np.repeat(states, n, axis=0)
        z = rng.standard_normal((rep.shape[0], self.latent_dim)).astype(self.dtype)
        if self.latent_clip is not None:
            z = np.clip(z, -self.latent_clip, self.latent_clip)
        return self.decode(rep, z).reshape(states.shape[0], n, self.action_dim)

    def named_tensors(self, prefix="cvae"):
        return {**self.encoder.named_tensors(f"{prefix}/encoder"), **self.decoder.named_tensors(f"{prefix}/decoder")}

    def load_named(self, tensors, prefix="cvae"):
        self.encoder.load_named(tensors, f"{prefix}/encoder")
        self.decoder.load_named(tensors, f"{prefix}/decoder")


def cvae_train_step(model: CvaeModel, optimizer: Adam, states, actions, rng):
    """One Adam step on the CVAE loss; returns the pre-step loss parts.

    ``optimizer`` must be bound to ``model.flats``.
    """
    noise = rng.standard_normal((len(states), model.latent_dim)).astype(model.dtype)
    loss, grads, parts = model.loss(states, actions, noise)
    optimizer.step(model.flat_grads(grads))
    parts["loss"] = loss
    return parts


class CVAEBehaviorModel(BaseEstimator):
    """Estimator interface: ``fit(states, actions)`` then ``sample(states, n)``.

    Examples
    --------
    >>> import numpy as np
    >>> s = np.random.default_rng(0).uniform(-1, 1, (256, 1))
    >>> m = CVAEBehaviorModel(n_steps=10, random_state=0).fit(s, 0.5 * s)
    >>> m.sample(s[:3], 4).shape
    (3, 4, 1)
    """

    def __init__(self, hidden=(64, 64), latent_dim=None, lr=1e-3, batch_size=256, n_steps=2000,
                 kl_weight=1.0, latent_clip=None, activation="relu", random_state=None):
        self.hidden = hidden
        self.latent_dim = latent_dim
        self.lr = lr
        self.batch_size = batch_size
        self.n_steps = n_steps
        self.kl_weight = kl_weight
        self.latent_clip = latent_clip
        self.activation = activation
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_states_actions(X, y)
        rng = np.random.default_rng(self.random_state)
        self.model_ = CvaeModel(X.shape[1], y.shape[1], self.hidden, self.latent_dim, self.activation,
                                rng, kl_weight=self.kl_weight, latent_clip=self.latent_clip)
        self.optimizer_ = Adam(self.model_.flats, lr=self.lr)
        self.history_ = []
        return self.partial_fit(X, y, rng=rng)

    def partial_fit(self, X, y, n_steps=None, rng=None):
        check_is_fitted(self, "model_")
        X, y = check_states_actions(X, y, self.model_.state_dim, self.model_.action_dim)
        rng = np.random.default_rng(self.random_state) if rng is None else rng
        for _ in range(self.n_steps if n_steps is None else n_steps):
            idx = rng.integers(0, len(X), size=min(self.batch_size, len(X)))
            self.history_.append(cvae_train_step(self.model_, self.optimizer_, X[idx], y[idx], rng))
        return self

    def sample(self, X, n=1, random_state=None):
        check_is_fitted(self, "model_")
        return self.model_.sample(np.asarray(X, dtype=np.float32), n, np.random.default_rng(random_state))

    def reconstruct(self, X, y, random_state=None):
        check_is_fitted(self, "model_")
        mu, log_std = self.model_.encode(np.asarray(X, np.float32), np.asarray(y, np.float32))
        rng = np.random.default_rng(random_state)
        return self.model_.decode(np.asarray(X, np.float32), mu + np.exp(log_std) * rng.standard_normal(mu.shape))
