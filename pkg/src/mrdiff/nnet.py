"""Small time-conditioned residual MLP with hand-rolled backprop and Adam.

The denoiser maps a flattened noisy trajectory plus a sinusoidal embedding of
the diffusion step to a prediction of the clean trajectory. Everything is
float64 numpy; training is deterministic given the RNG.
"""

import numpy as np


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _silu(z):
    s = _sigmoid(z)
    return z * s, s


def _dsilu(z, s):
    return s * (1.0 + z * (1.0 - s))


def time_features(k: np.ndarray, k_max: int, dim: int = 32) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step, (B, dim)."""
    half = dim // 2
    freqs = np.exp(np.linspace(np.log(1.0), np.log(4.0 * k_max), half))
    ang = np.asarray(k, float)[:, None] / k_max * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class DenoiserNet:
    """Two residual hidden blocks with additive step conditioning."""

    def __init__(self, dim: int, width: int = 256, emb: int = 32,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.dim, self.width, self.emb = dim, width, emb

        def init(n_in, n_out, scale=1.0):
            return rng.standard_normal((n_in, n_out)) * scale * np.sqrt(2.0 / n_in)

        self.params = {
            "Wt": init(emb, width), "bt": np.zeros(width),
            "W1": init(dim, width), "b1": np.zeros(width),
            "W2": init(width, width), "b2": np.zeros(width),
            "W3": init(width, width), "b3": np.zeros(width),
            "W4": init(width, dim, scale=0.01), "b4": np.zeros(dim),
        }

    def forward(self, x, tf):
        """x: (B, dim), tf: (B, emb). Returns (out, cache)."""
        p = self.params
        zt = tf @ p["Wt"] + p["bt"]
        t_emb, st = _silu(zt)
        z1 = x @ p["W1"] + p["b1"] + t_emb
        h1, s1 = _silu(z1)
        z2 = h1 @ p["W2"] + p["b2"] + t_emb
        a2, s2 = _silu(z2)
        h2 = h1 + a2
        z3 = h2 @ p["W3"] + p["b3"] + t_emb
        a3, s3 = _silu(z3)
        h3 = h2 + a3
        out = h3 @ p["W4"] + p["b4"]
        cache = (x, tf, zt, st, z1, s1, h1, z2, s2, h2, z3, s3, h3)
        return out, cache

    def backward(self, cache, dout):
        p = self.params
        x, tf, zt, st, z1, s1, h1, z2, s2, h2, z3, s3, h3 = cache
        g = {}
        g["W4"] = h3.T @ dout
        g["b4"] = dout.sum(axis=0)
        dh3 = dout @ p["W4"].T
        dz3 = dh3 * _dsilu(z3, s3)
        g["W3"] = h2.T @ dz3
        g["b3"] = dz3.sum(axis=0)
        dh2 = dh3 + dz3 @ p["W3"].T
        dz2 = dh2 * _dsilu(z2, s2)
        g["W2"] = h1.T @ dz2
        g["b2"] = dz2.sum(axis=0)
        dh1 = dh2 + dz2 @ p["W2"].T
        dz1 = dh1 * _dsilu(z1, s1)
        g["W1"] = x.T @ dz1
        g["b1"] = dz1.sum(axis=0)
        dt_emb = dz1 + dz2 + dz3
        dzt = dt_emb * _dsilu(zt, st)
        g["Wt"] = tf.T @ dzt
        g["bt"] = dzt.sum(axis=0)
        return g


class Adam:
    def __init__(self, params: dict, lr: float = 2e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for k, gk in grads.items():
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * gk
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * gk ** 2
            params[k] -= self.lr * (self.m[k] / b1c) / (
                np.sqrt(self.v[k] / b2c) + self.eps)
