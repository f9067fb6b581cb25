"""Small numpy neural-network stack with hand-written derivatives.

Only what the trust-region methods need: tanh MLPs with reverse- and
forward-mode products, a diagonal Gaussian policy with a state-independent
log-std, scalar value functions and Adam.  Everything is float64.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from scpo_lab.errors import DomainError, NumericError

LOG_2PI = math.log(2.0 * math.pi)


class Mlp:
    """Fully connected network: tanh on hidden layers, identity output.

    Parameters live in one flat vector laid out layer by layer as
    ``W`` (fan_in x fan_out, row-major) followed by ``b``.
    """

    def __init__(self, layer_sizes, rng: np.random.Generator | None = None, out_scale: float = 1.0):
        self.layer_sizes = [int(n) for n in layer_sizes]
        if len(self.layer_sizes) < 2:
            raise DomainError("an MLP needs at least input and output sizes")
        self._shapes = list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))
        self.n_params = sum(i * o + o for i, o in self._shapes)
        self.theta = np.zeros(self.n_params)
        if rng is not None:
            self._init(rng, out_scale)

    def _init(self, rng, out_scale):
        chunks = []
        last = len(self._shapes) - 1
        for k, (fan_in, fan_out) in enumerate(self._shapes):
            w = rng.standard_normal((fan_in, fan_out)) / math.sqrt(fan_in)
            if k == last:
                w *= out_scale
            chunks += [w.ravel(), np.zeros(fan_out)]
        self.theta = np.concatenate(chunks)

    def get_flat(self) -> np.ndarray:
        return self.theta.copy()

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise DomainError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.theta = flat.copy()

    def layers(self, theta=None):
        theta = self.theta if theta is None else theta
        out, i = [], 0
        for fan_in, fan_out in self._shapes:
            w = theta[i : i + fan_in * fan_out].reshape(fan_in, fan_out)
            i += fan_in * fan_out
            b = theta[i : i + fan_out]
            i += fan_out
            out.append((w, b))
        return out

    def forward(self, x, theta=None) -> np.ndarray:
        return self.forward_cache(x, theta)[0]

    def forward_cache(self, x, theta=None):
        """Return the output and the list of layer inputs (for products)."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        a = x.reshape(1, -1) if single else x
        if a.shape[1] != self.layer_sizes[0]:
            raise DomainError(f"input has {a.shape[1]} features, network expects {self.layer_sizes[0]}")
        acts = [a]
        layers = self.layers(theta)
        for k, (w, b) in enumerate(layers):
            z = a @ w + b
            a = z if k == len(layers) - 1 else np.tanh(z)
            acts.append(a)
        out = acts[-1]
        return (out[0] if single else out), acts

    def vjp(self, acts, dout, theta=None) -> np.ndarray:
        """Gradient of ``sum(dout * output)`` with respect to the flat parameters."""
        layers = self.layers(theta)
        grads = []
        dz = np.asarray(dout, dtype=float).reshape(acts[-1].shape)
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            a_in = acts[k]
            grads.append(dz.sum(axis=0))
            grads.append((a_in.T @ dz).ravel())
            if k > 0:
                dz = (dz @ w.T) * (1.0 - a_in * a_in)
        return np.concatenate(grads[::-1])

    def jvp(self, acts, v, theta=None) -> np.ndarray:
        """Directional derivative of the output along parameter direction ``v``."""
        layers = self.layers(theta)
        dlayers = self.layers(np.asarray(v, dtype=float))
        da = np.zeros_like(acts[0])
        for k, ((w, _), (dw, db)) in enumerate(zip(layers, dlayers)):
            dz = da @ w + acts[k] @ dw + db
            if k == len(layers) - 1:
                return dz
            a_out = acts[k + 1]
            da = (1.0 - a_out * a_out) * dz
        raise AssertionError("unreachable")


class GaussianPolicy:
    """Diagonal Gaussian over actions; mean from an MLP, log-std a free vector."""

    def __init__(self, obs_dim: int, act_dim: int, hidden=(64, 64), rng=None, log_std_init=-0.5):
        self.mean_net = Mlp([obs_dim, *hidden, act_dim], rng, out_scale=0.01)
        self.log_std = np.full(act_dim, float(log_std_init))

    @property
    def act_dim(self) -> int:
        return len(self.log_std)

    @property
    def n_params(self) -> int:
        return self.mean_net.n_params + self.act_dim

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.mean_net.theta, self.log_std])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.n_params,):
            raise DomainError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.mean_net.set_flat(flat[: self.mean_net.n_params])
        self.log_std = flat[self.mean_net.n_params :].copy()

    def split(self, flat):
        n = self.mean_net.n_params
        return flat[:n], flat[n:]

    def mean(self, obs, flat=None):
        theta = None if flat is None else self.split(flat)[0]
        return self.mean_net.forward(obs, theta)

    def sample(self, obs, rng: np.random.Generator):
        """Draw an action for one observation; returns ``(action, log_prob)``."""
        mu = self.mean_net.forward(obs)
        std = np.exp(self.log_std)
        eps = rng.standard_normal(self.act_dim)
        act = mu + std * eps
        logp = -0.5 * float(eps @ eps) - float(np.sum(self.log_std)) - 0.5 * self.act_dim * LOG_2PI
        return act, logp

    def log_prob(self, obs, act, flat=None) -> np.ndarray:
        flat = self.get_flat() if flat is None else flat
        theta, log_std = self.split(flat)
        mu = self.mean_net.forward(obs, theta)
        z = (np.asarray(act) - mu) / np.exp(log_std)
        return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * self.act_dim * LOG_2PI

    def grad_log_prob(self, obs, act) -> np.ndarray:
        """Score function for a single (observation, action) pair."""
        obs = np.asarray(obs, dtype=float).reshape(1, -1)
        act = np.asarray(act, dtype=float).reshape(1, -1)
        return self.grad_weighted_log_prob(obs, act, np.ones(1))

    def grad_weighted_log_prob(self, obs, act, weights) -> np.ndarray:
        """``sum_n weights[n] * grad log pi(act[n] | obs[n])`` at the current parameters."""
        mu, acts = self.mean_net.forward_cache(obs)
        var = np.exp(2.0 * self.log_std)
        diff = np.asarray(act) - mu
        w = np.asarray(weights, dtype=float)[:, None]
        g_mean = self.mean_net.vjp(acts, w * diff / var)
        g_log_std = np.sum(w * (diff * diff / var - 1.0), axis=0)
        out = np.concatenate([g_mean, g_log_std])
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite log-prob gradient")
        return out

    def kl_from(self, obs, old_mu, old_log_std, flat=None) -> float:
        """Mean over ``obs`` of KL(current || old)."""
        flat = self.get_flat() if flat is None else flat
        theta, log_std = self.split(flat)
        mu = self.mean_net.forward(obs, theta)
        return float(np.mean(diag_gaussian_kl(mu, log_std, old_mu, old_log_std)))

    def grad_kl_from(self, obs, old_mu, old_log_std) -> np.ndarray:
        mu, acts = self.mean_net.forward_cache(obs)
        n = len(mu)
        old_var = np.exp(2.0 * np.asarray(old_log_std))
        g_mean = self.mean_net.vjp(acts, (mu - old_mu) / old_var / n)
        ratio = np.exp(2.0 * self.log_std) / old_var
        g_log_std = np.mean(np.broadcast_to(ratio - 1.0, mu.shape), axis=0)
        return np.concatenate([g_mean, g_log_std])

    def fisher_vector_product(self, obs, v, damping: float = 0.0) -> np.ndarray:
        """Hessian of the mean KL to a frozen copy of the current policy, times ``v``.

        At coincident parameters the KL Hessian is exactly
        ``J_mu^T diag(1/sigma^2) J_mu / N`` on the mean weights and ``2 I`` on
        the log-std block, with no cross terms.
        """
        return self.fisher_operator(obs, damping)(v)

    def fisher_operator(self, obs, damping: float = 0.0):
        """Same product as :meth:`fisher_vector_product`, with the forward pass cached."""
        mu, acts = self.mean_net.forward_cache(obs)
        theta = self.mean_net.theta.copy()
        inv_var = np.exp(-2.0 * self.log_std) / len(mu)
        n = self.n_params

        def hvp(v):
            v = np.asarray(v, dtype=float)
            if v.shape != (n,):
                raise DomainError(f"direction has shape {v.shape}, policy has {n} parameters")
            v_mean, v_log_std = self.split(v)
            jv = self.mean_net.jvp(acts, v_mean, theta)
            hv_mean = self.mean_net.vjp(acts, jv * inv_var, theta)
            out = np.concatenate([hv_mean, 2.0 * v_log_std]) + damping * v
            if not np.all(np.isfinite(out)):
                raise NumericError("non-finite Fisher-vector product")
            return out

        return hvp


def diag_gaussian_kl(mu_p, log_std_p, mu_q, log_std_q) -> np.ndarray:
    """Per-row KL(p || q) between diagonal Gaussians."""
    var_p = np.exp(2.0 * np.asarray(log_std_p))
    var_q = np.exp(2.0 * np.asarray(log_std_q))
    d = np.asarray(mu_p) - np.asarray(mu_q)
    per_dim = log_std_q - log_std_p + (var_p + d * d) / (2.0 * var_q) - 0.5
    return np.sum(per_dim, axis=-1)


def kl_diag_gaussian(new: GaussianPolicy, old: GaussianPolicy, obs) -> float:
    """Mean KL(new || old) over a batch of observations."""
    if new.act_dim != old.act_dim:
        raise DomainError("policies have different action dimensions")
    return new.kl_from(obs, old.mean(obs), old.log_std)


class ValueFunction:
    def __init__(self, obs_dim: int, hidden=(64, 64), rng=None, out_scale: float = 1.0):
        self.net = Mlp([obs_dim, *hidden, 1], rng, out_scale=out_scale)
        self.optimizer = Adam()

    def __call__(self, obs) -> np.ndarray:
        return self.net.forward(obs)[..., 0]

    def mse(self, obs, targets, theta=None) -> float:
        pred = self.net.forward(obs, theta)[:, 0]
        return float(np.mean((pred - targets) ** 2))

    def mse_grad(self, obs, targets):
        """Return ``(loss, gradient)`` of the mean squared error."""
        pred, acts = self.net.forward_cache(obs)
        err = pred[:, 0] - np.asarray(targets, dtype=float)
        loss = float(np.mean(err * err))
        grad = self.net.vjp(acts, (2.0 / len(err)) * err[:, None])
        return loss, grad


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_fit(value: ValueFunction, inputs, targets, iterations: int = 80, lr: float = 1e-3) -> list[float]:
    """Full-batch Adam regression; returns the loss before every step.

    The optimizer state on ``value`` persists across calls.
    """
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if len(inputs) == 0:
        raise DomainError("cannot fit a value function on an empty batch")
    if len(inputs) != len(targets):
        raise DomainError(f"{len(inputs)} inputs but {len(targets)} targets")
    opt = value.optimizer
    opt.lr = lr
    trace = []
    for _ in range(iterations):
        loss, grad = value.mse_grad(inputs, targets)
        trace.append(loss)
        value.net.theta = opt.step(value.net.theta, grad)
    if not np.all(np.isfinite(value.net.theta)):
        raise NumericError("value parameters diverged")
    return trace


# -- snapshots -----------------------------------------------------------------

_MAGIC = b"SCPO"


def save_snapshot(path, header: dict, flat) -> None:
    """Binary layout: magic, uint32 header length, JSON header, float64 LE params."""
    blob = json.dumps(header, sort_keys=True).encode()
    flat = np.asarray(flat, dtype="<f8")
    with open(Path(path), "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())


def load_snapshot(path) -> tuple[dict, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DomainError(f"{path} is not a parameter snapshot")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n])
    return header, np.frombuffer(data[8 + n :], dtype="<f8").copy()


def policy_snapshot(policy: GaussianPolicy, path) -> None:
    header = {
        "kind": "gaussian_policy",
        "layer_sizes": policy.mean_net.layer_sizes,
        "log_std": [float(x) for x in policy.log_std],
    }
    save_snapshot(path, header, policy.get_flat())


def value_snapshot(value: ValueFunction, path, kind="value") -> None:
    save_snapshot(path, {"kind": kind, "layer_sizes": value.net.layer_sizes}, value.net.theta)


def load_policy(path) -> GaussianPolicy:
    header, flat = load_snapshot(path)
    sizes = header["layer_sizes"]
    pol = GaussianPolicy(sizes[0], sizes[-1], hidden=tuple(sizes[1:-1]))
    pol.set_flat(flat)
    return pol
