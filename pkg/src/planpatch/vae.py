"""Small dense variational autoencoder over 16x16 rasters.

Encoder 256 -> 64 -> (mu, log-variance) heads of width 5; decoder 5 -> 64 -> 256.
Trained by full-batch gradient descent with hand-rolled backprop so the
gradients can be checked against finite differences.  Inference-time features
are the 5-d posterior mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import config as cfg

INPUT_DIM = cfg.RASTER_SIZE * cfg.RASTER_SIZE
HIDDEN = 64
LATENT = 5
INPUT_NOISE_SIGMA = 0.001

_LAYERS = (
    ("W1", (HIDDEN, INPUT_DIM)), ("b1", (HIDDEN,)),
    ("Wm", (LATENT, HIDDEN)), ("bm", (LATENT,)),
    ("Wv", (LATENT, HIDDEN)), ("bv", (LATENT,)),
    ("W2", (HIDDEN, LATENT)), ("b2", (HIDDEN,)),
    ("W3", (INPUT_DIM, HIDDEN)), ("b3", (INPUT_DIM,)),
)


@dataclass
class VaeParams:
    """Weight dict plus loss options; latent dimension fixed at 5."""

    weights: dict
    kl_weight: float = 0.0
    noise_sigma: float = INPUT_NOISE_SIGMA
    latent_dim: int = LATENT

    @classmethod
    def init(cls, seed: int = 0, scale: float = 1.0, **kw) -> "VaeParams":
        rng = cfg.rng_from(seed, "vae-init")
        w = {}
        for name, shape in _LAYERS:
            if len(shape) == 2:
                w[name] = rng.standard_normal(shape) * scale / math.sqrt(shape[1])
            else:
                w[name] = np.zeros(shape)
        # start the posterior narrow so the latent mean carries the signal
        w["bv"] = w["bv"] - 6.0
        return cls(weights=w, **kw)

    @classmethod
    def zeros(cls, **kw) -> "VaeParams":
        return cls(weights={n: np.zeros(s) for n, s in _LAYERS}, **kw)

    def copy(self) -> "VaeParams":
        return VaeParams(weights={k: v.copy() for k, v in self.weights.items()},
                         kl_weight=self.kl_weight, noise_sigma=self.noise_sigma)

    def to_json(self) -> str:
        return json.dumps({
            "shapes": {n: list(s) for n, s in _LAYERS},
            "weights": {k: v.reshape(-1).tolist() for k, v in self.weights.items()},
            "kl_weight": self.kl_weight,
            "noise_sigma": self.noise_sigma,
            "latent_dim": self.latent_dim,
        })

    @classmethod
    def from_json(cls, doc: str | dict) -> "VaeParams":
        if isinstance(doc, str):
            doc = json.loads(doc)
        shapes = {n: tuple(s) for n, s in doc["shapes"].items()}
        w = {k: np.array(v).reshape(shapes[k]) for k, v in doc["weights"].items()}
        return cls(weights=w, kl_weight=doc["kl_weight"],
                   noise_sigma=doc["noise_sigma"])


@dataclass
class TrainSpec:
    learning_rate: float = 0.01
    epochs: int = 120
    augmentation_factor: int = 50
    kl_weight: float = 0.0
    warm_start_output_bias: bool = True  # start recon at the data mean


def _as_batch(rasters) -> np.ndarray:
    X = np.asarray(rasters, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    return X.reshape(X.shape[0], -1)


def encode(vae: VaeParams, raster) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and (strictly positive) variance for one flattened raster."""
    x = _as_batch([raster])[0]
    w = vae.weights
    h1 = np.tanh(w["W1"] @ x + w["b1"])
    mu = w["Wm"] @ h1 + w["bm"]
    logvar = w["Wv"] @ h1 + w["bv"]
    return mu, np.exp(logvar)


def reparameterize(mu, sigma, eps) -> np.ndarray:
    """z = mu + eps * sqrt(sigma); sigma is the variance vector."""
    return np.asarray(mu) + np.asarray(eps) * np.sqrt(np.asarray(sigma))


def decode(vae: VaeParams, z) -> np.ndarray:
    w = vae.weights
    h2 = np.tanh(w["W2"] @ np.asarray(z) + w["b2"])
    return w["W3"] @ h2 + w["b3"]


def _forward(w: dict, x: np.ndarray, x_target: np.ndarray, eps: np.ndarray,
             kl_weight: float) -> tuple[float, dict]:
    """Batched forward pass; returns mean loss and the cache for backprop."""
    h1 = np.tanh(x @ w["W1"].T + w["b1"])
    mu = h1 @ w["Wm"].T + w["bm"]
    logvar = h1 @ w["Wv"].T + w["bv"]
    std = np.exp(0.5 * logvar)
    z = mu + eps * std
    h2 = np.tanh(z @ w["W2"].T + w["b2"])
    xr = h2 @ w["W3"].T + w["b3"]
    err = xr - x_target
    mse = float(np.mean(err ** 2))
    kl = 0.0
    if kl_weight:
        kl = float(np.mean(0.5 * np.sum(
            np.exp(logvar) + mu ** 2 - 1.0 - logvar, axis=1)))
    cache = {"x": x, "h1": h1, "mu": mu, "logvar": logvar, "std": std,
             "z": z, "h2": h2, "err": err}
    return mse + kl_weight * kl, cache


def _backward(w: dict, cache: dict, eps: np.ndarray, kl_weight: float) -> dict:
    """Analytic gradients of the mean loss w.r.t. every weight."""
    x, h1 = cache["x"], cache["h1"]
    mu, logvar, std = cache["mu"], cache["logvar"], cache["std"]
    z, h2, err = cache["z"], cache["h2"], cache["err"]
    B = x.shape[0]
    npix = x.shape[1]

    dxr = 2.0 * err / (npix * B)
    g = {}
    g["W3"] = dxr.T @ h2
    g["b3"] = dxr.sum(axis=0)
    dh2 = dxr @ w["W3"]
    da2 = dh2 * (1.0 - h2 ** 2)
    g["W2"] = da2.T @ z
    g["b2"] = da2.sum(axis=0)
    dz = da2 @ w["W2"]

    dmu = dz.copy()
    dlogvar = dz * eps * 0.5 * std
    if kl_weight:
        dmu = dmu + kl_weight * mu / B
        dlogvar = dlogvar + kl_weight * 0.5 * (np.exp(logvar) - 1.0) / B

    g["Wm"] = dmu.T @ h1
    g["bm"] = dmu.sum(axis=0)
    g["Wv"] = dlogvar.T @ h1
    g["bv"] = dlogvar.sum(axis=0)
    dh1 = dmu @ w["Wm"] + dlogvar @ w["Wv"]
    da1 = dh1 * (1.0 - h1 ** 2)
    g["W1"] = da1.T @ x
    g["b1"] = da1.sum(axis=0)
    return g


def loss(vae: VaeParams, raster, eps, input_noise: np.ndarray | None = None) -> float:
    """Reconstruction MSE (plus optional KL); input noise is training-only."""
    x_clean = _as_batch([raster])
    x_in = x_clean if input_noise is None else x_clean + input_noise
    eps = np.asarray(eps, dtype=float).reshape(1, LATENT)
    val, _ = _forward(vae.weights, x_in, x_clean, eps, vae.kl_weight)
    return val


def loss_and_grads(vae: VaeParams, raster, eps,
                   input_noise: np.ndarray | None = None) -> tuple[float, dict]:
    x_clean = _as_batch([raster])
    x_in = x_clean if input_noise is None else x_clean + input_noise
    eps = np.asarray(eps, dtype=float).reshape(1, LATENT)
    val, cache = _forward(vae.weights, x_in, x_clean, eps, vae.kl_weight)
    if input_noise is not None:
        cache["x"] = x_in  # gradient flows through the noisy input
    grads = _backward(vae.weights, cache, eps, vae.kl_weight)
    return val, grads


def augment(raster: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One augmentation variant: 90-degree rotation, +-1-cell shear, jitter, noise."""
    img = np.asarray(raster, dtype=float).reshape(cfg.RASTER_SIZE, cfg.RASTER_SIZE)
    img = np.rot90(img, k=int(rng.integers(0, 4)))
    shear = int(rng.integers(-1, 2))
    if shear:
        n = img.shape[0]
        out = np.zeros_like(img)
        for r in range(n):
            s = shear if r >= n // 2 else -shear
            out[r] = np.roll(img[r], s)
        img = out
    img = img + rng.uniform(-0.05, 0.05)
    img = img + rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).reshape(-1)


def build_augmented(rasters, factor: int, seed: int) -> np.ndarray:
    rng = cfg.rng_from(seed, "vae-augment")
    X = _as_batch(rasters)
    out = [X]
    if factor > 1:
        aug = np.empty((X.shape[0] * (factor - 1), X.shape[1]))
        i = 0
        for row in X:
            for _ in range(factor - 1):
                aug[i] = augment(row, rng)
                i += 1
        out.append(aug)
    return np.vstack(out)


def train(vae: VaeParams, rasters, spec: TrainSpec | None = None,
          seed: int = 0) -> VaeParams:
    """Fixed-step full-batch Adam on the augmented raster set.

    Deterministic given the seed.  Plain first-order descent proved brittle on
    the sparse rasters (oscillation at useful rates, dead latents at safe
    ones); Adam with a fixed step converges reliably.  For small enough steps
    the per-epoch loss sequence is non-increasing.
    """
    spec = spec or TrainSpec()
    out = vae.copy()
    out.kl_weight = spec.kl_weight
    if spec.epochs <= 0:
        return out
    X = build_augmented(rasters, spec.augmentation_factor, seed)
    rng = cfg.rng_from(seed, "vae-train")
    w = out.weights
    if spec.warm_start_output_bias and not np.any(w["b3"]):
        w["b3"] = X.mean(axis=0)
    m = {k: np.zeros_like(a) for k, a in w.items()}
    s = {k: np.zeros_like(a) for k, a in w.items()}
    b1, b2, tiny = 0.9, 0.999, 1e-8
    lr = spec.learning_rate
    for t in range(1, spec.epochs + 1):
        noise = rng.normal(0.0, out.noise_sigma, size=X.shape)
        eps = rng.standard_normal((X.shape[0], LATENT))
        x_in = X + noise
        _, cache = _forward(w, x_in, X, eps, out.kl_weight)
        cache["x"] = x_in
        grads = _backward(w, cache, eps, out.kl_weight)
        for k in w:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            s[k] = b2 * s[k] + (1 - b2) * grads[k] * grads[k]
            mh = m[k] / (1 - b1 ** t)
            sh = s[k] / (1 - b2 ** t)
            w[k] -= lr * mh / (np.sqrt(sh) + tiny)
    return out


def gradient_check(vae: VaeParams, raster, eps, n_weights: int = 100,
                   seed: int = 0, h: float = 1e-5,
                   grads_override: dict | None = None) -> float:
    """Max relative error of backprop vs. central differences on a weight subset."""
    _, grads = loss_and_grads(vae, raster, eps)
    if grads_override is not None:
        grads = grads_override
    rng = cfg.rng_from(seed, "gradcheck")
    names = [n for n, _ in _LAYERS]
    sizes = np.array([vae.weights[n].size for n in names])
    total = int(sizes.sum())
    n_weights = min(n_weights, total)
    picks = rng.choice(total, size=n_weights, replace=False)
    offsets = np.cumsum(sizes) - sizes

    worst = 0.0
    for flat_idx in picks:
        li = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        name = names[li]
        local = int(flat_idx - offsets[li])
        idx = np.unravel_index(local, vae.weights[name].shape)
        probe = vae.copy()
        probe.weights[name][idx] += h
        up = loss(probe, raster, eps)
        probe.weights[name][idx] -= 2.0 * h
        dn = loss(probe, raster, eps)
        numeric = (up - dn) / (2.0 * h)
        analytic = float(grads[name][idx])
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
