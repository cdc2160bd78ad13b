"""Dense networks with hand-written backward passes, Adam, a tanh-squashed
Gaussian policy head and a finite-difference gradient checker.

Layouts are batch-major: inputs are ``(batch, features)`` and weight
matrices are ``(fan_in, fan_out)``. Training runs in float32; gradient
checks rebuild the same networks in float64.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import NonFiniteInput, ShapeMismatch

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)
_LOG2 = math.log(2.0)

_pattern_log: Optional[list] = None


@contextlib.contextmanager
def record_activation_patterns():
    """Collect the ReLU on/off pattern of every forward pass in the block.

    Used by :func:`grad_check` to skip coordinates whose finite-difference
    probe crosses a ReLU kink.
    """
    global _pattern_log
    previous, _pattern_log = _pattern_log, []
    try:
        yield _pattern_log
    finally:
        _pattern_log = previous


class DenseNet:
    """Multilayer perceptron with a linear output layer.

    ``params`` is the list ``[W0, b0, W1, b1, ...]`` of views into the single
    buffer ``flat``, so optimizers and Polyak averaging touch one array.
    """

    def __init__(self, layer_sizes: Sequence[int], activation="relu", rng=None, dtype=np.float32):
        if len(layer_sizes) < 2 or any(int(n) < 1 for n in layer_sizes):
            raise ValueError(f"bad layer sizes {layer_sizes}")
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        self.activation = activation
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        init = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            # fan-in scaled uniform init
            bound = 1.0 / math.sqrt(fan_in)
            init.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            init.append(rng.uniform(-bound, bound, size=fan_out))
        self._bind(init)

    def _bind(self, arrays):
        """Place all parameters in one flat buffer; ``params`` are views."""
        self.flat = np.concatenate([np.ravel(a) for a in arrays]).astype(self.dtype)
        self.params: List[np.ndarray] = []
        pos = 0
        for a in arrays:
            n = int(np.size(a))
            self.params.append(self.flat[pos: pos + n].reshape(np.shape(a)))
            pos += n

    def __getstate__(self):
        state = dict(self.__dict__)
        state["params"] = [p.shape for p in self.params]
        return state

    def __setstate__(self, state):
        # deepcopy and pickle would otherwise turn the views into detached arrays
        shapes = state.pop("params")
        self.__dict__.update(state)
        self.params, pos = [], 0
        for shape in shapes:
            n = int(np.prod(shape, dtype=np.int64))
            self.params.append(self.flat[pos: pos + n].reshape(shape))
            pos += n

    def flatten(self, grads):
        """Concatenate per-parameter gradients in ``flat`` order."""
        return np.concatenate([np.ravel(g) for g in grads])

    @property
    def n_layers(self):
        return len(self.params) // 2

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def forward(self, x, keep=False):
        """Evaluate the network; with ``keep=True`` also return the cache
        needed by :meth:`backward`."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"expected (batch, {self.in_dim}) input, got {x.shape}")
        if not np.isfinite(x).all():
            raise NonFiniteInput("network input contains NaN or inf")
        cache = [x] if keep else None
        h = x
        last = self.n_layers - 1
        for i in range(self.n_layers):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            if i < last:
                if self.activation == "relu":
                    h = np.maximum(z, 0)
                    if _pattern_log is not None:
                        _pattern_log.append(np.packbits(z > 0).tobytes())
                else:
                    h = np.tanh(z)
                if keep:
                    cache.append(h)
            else:
                h = z
        return (h, cache) if keep else h

    def backward(self, cache, grad_out):
        """Reverse pass. Returns ``(param_grads, input_grad)``."""
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        if grad_out.shape != (cache[0].shape[0], self.out_dim):
            raise ShapeMismatch(f"upstream gradient {grad_out.shape} does not match output")
        grads = [None] * len(self.params)
        g = grad_out
        for i in range(self.n_layers - 1, -1, -1):
            h_in = cache[i]
            grads[2 * i] = h_in.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
            if i > 0:
                if self.activation == "relu":
                    g = g * (h_in > 0)
                else:
                    g = g * (1 - h_in * h_in)
        return grads, g

    def __call__(self, x):
        return self.forward(x)

    def copy(self, dtype=None):
        other = DenseNet.__new__(DenseNet)
        other.layer_sizes = self.layer_sizes
        other.activation = self.activation
        other.dtype = np.dtype(dtype or self.dtype)
        other._bind(self.params)
        return other

    def load_params(self, params):
        if len(params) != len(self.params):
            raise ShapeMismatch("parameter count mismatch")
        for dst, src in zip(self.params, params):
            if dst.shape != np.shape(src):
                raise ShapeMismatch(f"{np.shape(src)} vs {dst.shape}")
            dst[...] = src

    def soft_update(self, source: "DenseNet", tau: float):
        """Polyak averaging ``self <- tau * source + (1 - tau) * self``."""
        if tau == 1.0:
            self.flat[...] = source.flat
            return
        self.flat *= 1.0 - tau
        self.flat += tau * source.flat

    def named_tensors(self, prefix):
        out = {}
        for i in range(self.n_layers):
            out[f"{prefix}/layer{i}/weight"] = self.params[2 * i]
            out[f"{prefix}/layer{i}/bias"] = self.params[2 * i + 1]
        return out

    def load_named(self, tensors, prefix):
        self.load_params([tensors[k] for k in self.named_tensors(prefix)])


def check_finite(x, what="input"):
    if not np.all(np.isfinite(x)):
        raise NonFiniteInput(f"{what} contains NaN or inf")
    return x


class Adam:
    """Adam with bias correction; updates the bound parameters in place."""

    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ShapeMismatch("gradient list does not match parameters")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        step = self.lr / c1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.shape != np.shape(g):
                raise ShapeMismatch(f"gradient {np.shape(g)} vs parameter {p.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p -= (step * m / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def named_tensors(self, prefix):
        out = {f"{prefix}/t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}/m{i}"] = m
            out[f"{prefix}/v{i}"] = v
        return out

    def load_named(self, tensors, prefix):
        self.t = int(np.asarray(tensors[f"{prefix}/t"]).reshape(-1)[0])
        for i in range(len(self.m)):
            self.m[i][...] = tensors[f"{prefix}/m{i}"]
            self.v[i][...] = tensors[f"{prefix}/v{i}"]


def log1m_tanh_sq(u):
    """Stable ``log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))``."""
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


@dataclass
class GaussianHeadOutput:
    mean: np.ndarray
    log_std: np.ndarray
    noise: np.ndarray
    pre_tanh: np.ndarray
    action: np.ndarray
    log_prob: np.ndarray
    clamped: np.ndarray


def tanh_gaussian(raw, noise) -> GaussianHeadOutput:
    """Squashed Gaussian from a raw head output ``[mean | log_std]``.

    ``action = tanh(mean + exp(log_std) * noise)``; ``log_prob`` includes the
    tanh change-of-variables term, summed over action dimensions.
    """
    d = raw.shape[1] // 2
    mean = raw[:, :d]
    raw_ls = raw[:, d:]
    log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    clamped = (raw_ls < LOG_STD_MIN) | (raw_ls > LOG_STD_MAX)
    std = np.exp(log_std)
    u = mean + std * noise
    action = np.tanh(u)
    gauss = -0.5 * noise * noise - log_std - 0.5 * _LOG_2PI
    log_prob = np.sum(gauss - log1m_tanh_sq(u), axis=1)
    return GaussianHeadOutput(mean, log_std, noise, u, action, log_prob, clamped)


def tanh_gaussian_backward(head: GaussianHeadOutput, grad_action, grad_log_prob):
    """Gradient w.r.t. the raw head output, given dL/daction ``(B, d)`` and
    dL/dlog_prob ``(B,)``, under the reparameterization with fixed noise."""
    a = head.action
    std = np.exp(head.log_std)
    dadu = 1.0 - a * a
    gl = grad_log_prob[:, None]
    # d log_prob / d u = 2 tanh(u); d u / d log_std = std * noise
    gu = grad_action * dadu + gl * 2.0 * a
    g_mean = gu
    g_ls = gu * std * head.noise - gl
    g_ls = np.where(head.clamped, 0.0, g_ls)
    return np.concatenate([g_mean, g_ls], axis=1).astype(a.dtype, copy=False)


def sample_tanh_gaussian(net: DenseNet, states, rng) -> GaussianHeadOutput:
    raw = net.forward(states)
    d = raw.shape[1] // 2
    noise = rng.standard_normal((raw.shape[0], d)).astype(raw.dtype)
    return tanh_gaussian(raw, noise)


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int

    def passed(self, tolerance):
        return self.checked > 0 and self.max_rel_error < tolerance


def grad_check(loss_fn: Callable[[], tuple], params: Sequence[np.ndarray], tolerance=1e-4,
               n_coords=200, h=1e-5, rng=None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``loss_fn()`` must return ``(loss, grads)`` with ``grads`` aligned to
    ``params`` and must read the parameters in place. Up to ``n_coords``
    coordinates are sampled across all parameter arrays. Coordinates whose
    probe flips a ReLU activation are skipped and counted.
    """
    rng = np.random.default_rng(rng)
    _, grads = loss_fn()
    grads = [np.array(g, dtype=np.float64) for g in grads]
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    checked = skipped = 0
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[k], params[k].shape)
        p = params[k]
        orig = p[idx]
        with record_activation_patterns() as plus_log:
            p[idx] = orig + h
            f_plus = float(loss_fn()[0])
        with record_activation_patterns() as minus_log:
            p[idx] = orig - h
            f_minus = float(loss_fn()[0])
        p[idx] = orig
        if plus_log != minus_log:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = grads[k][idx]
        rel = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, rel)
        checked += 1
    return GradCheckReport(worst, checked, skipped)
