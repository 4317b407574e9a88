"""Fully connected VAE used as a speech spectral prior.

The encoder maps a power-spectrum frame to the mean and log-variance of a
Gaussian posterior over a latent vector ``z``; the decoder maps ``z`` to the
log of the speech variance in every frequency bin. Both networks use tanh
hidden layers and linear output heads. Gradients are computed by hand.
"""
import copy
from dataclasses import dataclass, field
import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import NumericalError, check_finite, check_power, check_random_state

logger = logging.getLogger(__name__)

POWER_FLOOR = 1e-10


@dataclass
class VaeModel:
    """Parameter container; ``params`` maps names to float64 arrays.

    Encoder layers are ``enc_W{i}``/``enc_b{i}`` followed by the heads
    ``mu_W``/``mu_b`` and ``lv_W``/``lv_b``; the decoder is
    ``dec_W{i}``/``dec_b{i}`` followed by ``out_W``/``out_b``.
    ``input_mean`` and ``input_scale`` standardise the log-power input and
    are not trained.
    """

    params: dict
    enc_hidden: tuple = (512, 128)
    dec_hidden: tuple = (128, 512)

    @property
    def n_freqs(self):
        return self.params["out_b"].shape[0]

    @property
    def latent_dim(self):
        return self.params["mu_b"].shape[0]

    def trainable(self):
        return [k for k in self.params if not k.startswith("input_")]

    def copy(self):
        return copy.deepcopy(self)


@dataclass
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    validation_fraction: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class TrainingHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_losses: list = field(default_factory=list)


def init_model(n_freqs, latent_dim=16, enc_hidden=(512, 128), dec_hidden=(128, 512), seed=0):
    """Uniform fan-in scaled initialisation; the decoder output bias starts at 0."""
    if latent_dim < 1 or n_freqs < 1:
        raise ValueError("latent_dim and n_freqs must be >= 1")
    rng = check_random_state(seed)

    def dense(n_in, n_out):
        lim = 1.0 / np.sqrt(n_in)
        return rng.uniform(-lim, lim, (n_in, n_out)), np.zeros(n_out)

    p = {}
    sizes = [n_freqs, *enc_hidden]
    for i in range(len(enc_hidden)):
        p[f"enc_W{i}"], p[f"enc_b{i}"] = dense(sizes[i], sizes[i + 1])
    p["mu_W"], p["mu_b"] = dense(sizes[-1], latent_dim)
    p["lv_W"], p["lv_b"] = dense(sizes[-1], latent_dim)
    sizes = [latent_dim, *dec_hidden]
    for i in range(len(dec_hidden)):
        p[f"dec_W{i}"], p[f"dec_b{i}"] = dense(sizes[i], sizes[i + 1])
    p["out_W"], p["out_b"] = dense(sizes[-1], n_freqs)
    p["input_mean"] = np.zeros(n_freqs)
    p["input_scale"] = np.ones(n_freqs)
    return VaeModel(p, tuple(enc_hidden), tuple(dec_hidden))


def _encoder_input(model, power):
    p = model.params
    return (np.log(np.maximum(power, POWER_FLOOR)) - p["input_mean"]) / p["input_scale"]


def _encode(model, power):
    p = model.params
    acts = [_encoder_input(model, power)]
    for i in range(len(model.enc_hidden)):
        acts.append(np.tanh(acts[-1] @ p[f"enc_W{i}"] + p[f"enc_b{i}"]))
    mu = acts[-1] @ p["mu_W"] + p["mu_b"]
    logvar = acts[-1] @ p["lv_W"] + p["lv_b"]
    return mu, logvar, acts


def _decode(model, z):
    p = model.params
    acts = [z]
    for i in range(len(model.dec_hidden)):
        acts.append(np.tanh(acts[-1] @ p[f"dec_W{i}"] + p[f"dec_b{i}"]))
    return acts[-1] @ p["out_W"] + p["out_b"], acts


def encode(model, power_spectrum):
    """Posterior mean and variance of ``z`` for one frame or a batch of frames."""
    power = check_power(power_spectrum)
    mu, logvar, _ = _encode(model, power)
    return mu, np.exp(logvar)


def decode_log(model, z):
    return _decode(model, np.asarray(z, dtype=float))[0]


def decode(model, z):
    """Speech variance spectrum, strictly positive, for one or many latents."""
    z = check_finite(np.asarray(z, dtype=float), "latent z")
    return np.exp(decode_log(model, z))


def kl_divergence(mu, var):
    """KL(N(mu, diag var) || N(0, I)) summed over the last axis."""
    return 0.5 * np.sum(mu ** 2 + var - np.log(var) - 1.0, axis=-1)


def reconstruction_loglik(power, log_var):
    """Complex-Gaussian log-likelihood of spectra, constants dropped."""
    return -np.sum(log_var + power * np.exp(-log_var), axis=-1)


def elbo(model, power_spectrum, eps=None, rng=None):
    """One-sample reparameterised ELBO, averaged over frames if 2-D.

    ``eps`` fixes the standard-normal draw (shape matching the latent means).
    """
    power = check_power(power_spectrum)
    mu, logvar, _ = _encode(model, power)
    if eps is None:
        eps = check_random_state(rng).standard_normal(mu.shape)
    z = mu + np.exp(0.5 * logvar) * eps
    out = decode_log(model, z)
    value = reconstruction_loglik(power, out) - kl_divergence(mu, np.exp(logvar))
    return float(np.mean(value))


def loss_and_grad(model, power, eps):
    """Mean negative ELBO over the batch and its gradient w.r.t. every trainable array."""
    p = model.params
    B = power.shape[0]
    mu, logvar, enc_acts = _encode(model, power)
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    out, dec_acts = _decode(model, z)
    inv = power * np.exp(-out)
    var = std ** 2
    loss = np.sum(out + inv) + 0.5 * np.sum(mu ** 2 + var - logvar - 1.0)

    g = {}
    d = (1.0 - inv) / B
    g["out_W"] = dec_acts[-1].T @ d
    g["out_b"] = d.sum(0)
    d = d @ p["out_W"].T
    for i in reversed(range(len(model.dec_hidden))):
        d = d * (1.0 - dec_acts[i + 1] ** 2)
        g[f"dec_W{i}"] = dec_acts[i].T @ d
        g[f"dec_b{i}"] = d.sum(0)
        d = d @ p[f"dec_W{i}"].T
    d_mu = d + mu / B
    d_lv = d * eps * 0.5 * std + 0.5 * (var - 1.0) / B
    h = enc_acts[-1]
    g["mu_W"], g["mu_b"] = h.T @ d_mu, d_mu.sum(0)
    g["lv_W"], g["lv_b"] = h.T @ d_lv, d_lv.sum(0)
    d = d_mu @ p["mu_W"].T + d_lv @ p["lv_W"].T
    for i in reversed(range(len(model.enc_hidden))):
        d = d * (1.0 - enc_acts[i + 1] ** 2)
        g[f"enc_W{i}"] = enc_acts[i].T @ d
        g[f"enc_b{i}"] = d.sum(0)
        if i:
            d = d @ p[f"enc_W{i}"].T
    return loss / B, g


def numeric_gradient(model, power, eps, step=1e-5):
    """Central finite differences of :func:`loss_and_grad`'s loss."""
    grads = {}
    for name in model.trainable():
        arr = model.params[name]
        gnum = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            lp = loss_and_grad(model, power, eps)[0]
            arr[idx] = orig - step
            lm = loss_and_grad(model, power, eps)[0]
            arr[idx] = orig
            gnum[idx] = (lp - lm) / (2 * step)
        grads[name] = gnum
    return grads


def grad_check(model, power, eps=None, step=1e-5, rng=None):
    """Max over parameter arrays of ``|g_a - g_n| / max(|g_a|, |g_n|)`` (2-norms).

    The sampling noise ``eps`` is frozen so the loss is deterministic.
    """
    power = np.atleast_2d(check_power(power))
    if eps is None:
        eps = check_random_state(rng).standard_normal((power.shape[0], model.latent_dim))
    _, ga = loss_and_grad(model, power, eps)
    gn = numeric_gradient(model, power, eps, step)
    worst = 0.0
    for name in ga:
        denom = max(np.linalg.norm(ga[name]), np.linalg.norm(gn[name]))
        if denom > 0:
            worst = max(worst, np.linalg.norm(ga[name] - gn[name]) / denom)
    return worst


class _Adam:
    def __init__(self, params, names, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(params[k]) for k in names}
        self.v = {k: np.zeros_like(params[k]) for k in names}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(model, dataset, cfg=None):
    """Adam training on power-spectrum frames with early stopping.

    Returns the model with the best validation loss (a copy) and a
    :class:`TrainingHistory`. The input standardisation is set from the
    training frames before the first epoch.
    """
    cfg = cfg or TrainingConfig()
    data = np.atleast_2d(check_power(dataset, "training set"))
    if data.shape[0] == 0:
        raise ValueError("training set is empty")
    if data.shape[1] != model.n_freqs:
        raise ValueError(f"expected {model.n_freqs} frequency bins, got {data.shape[1]}")
    rng = np.random.default_rng(cfg.rng_seed)
    model = model.copy()
    n = data.shape[0]
    order = rng.permutation(n)
    n_val = int(round(cfg.validation_fraction * n)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
    val, tr = data[order[:n_val]], data[order[n_val:]]
    if n_val == 0:
        val = tr

    logp = np.log(np.maximum(tr, POWER_FLOOR))
    model.params["input_mean"] = logp.mean(0)
    model.params["input_scale"] = np.maximum(logp.std(0), 1e-3)

    names = model.trainable()
    opt = _Adam(model.params, names, cfg.learning_rate)
    val_eps = rng.standard_normal((val.shape[0], model.latent_dim))
    hist = TrainingHistory()
    best, best_val, stale = model.copy(), np.inf, 0
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(tr.shape[0])
        total = 0.0
        for start in range(0, tr.shape[0], cfg.batch_size):
            batch = tr[perm[start:start + cfg.batch_size]]
            eps = rng.standard_normal((batch.shape[0], model.latent_dim))
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                loss, grads = loss_and_grad(model, batch, eps)
            if not np.isfinite(loss):
                raise NumericalError(f"VAE loss diverged at epoch {epoch + 1} (loss={loss})")
            opt.step(model.params, grads)
            total += loss * batch.shape[0]
        hist.train_loss.append(total / tr.shape[0])
        with np.errstate(over="ignore", invalid="ignore"):
            vloss = loss_and_grad(model, val, val_eps)[0]
        if not np.isfinite(vloss):
            raise NumericalError(f"VAE validation loss diverged at epoch {epoch + 1}")
        hist.val_loss.append(vloss)
        logger.info("epoch %d train %.4f val %.4f", epoch + 1, hist.train_loss[-1], vloss)
        if vloss < best_val:
            best, best_val, stale = model.copy(), vloss, 0
            hist.best_epoch = epoch + 1
            hist.best_val_losses.append(vloss)
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, hist


def save_model(path, model, history=None):
    meta = {"enc_hidden": list(model.enc_hidden), "dec_hidden": list(model.dec_hidden),
            "latent_dim": model.latent_dim, "n_freqs": model.n_freqs}
    if history is not None:
        meta["train_loss"] = [float(v) for v in history.train_loss]
        meta["val_loss"] = [float(v) for v in history.val_loss]
        meta["best_epoch"] = history.best_epoch
    checkpoint.save(path, "vae", model.params, meta)


def load_model(path):
    meta, arrays = checkpoint.load(path, kind="vae")
    return VaeModel({k: v.astype(float) for k, v in arrays.items()},
                    tuple(meta["enc_hidden"]), tuple(meta["dec_hidden"]))


class SpeechVAE(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``fit`` on power-spectrum frames (n_frames, n_freqs),
    ``transform`` returns posterior latent means, ``inverse_transform`` the
    decoded speech variance."""

    def __init__(self, latent_dim=16, enc_hidden=(512, 128), dec_hidden=(128, 512),
                 learning_rate=1e-3, batch_size=128, max_epochs=100, patience=5,
                 random_state=0):
        self.latent_dim = latent_dim
        self.enc_hidden = enc_hidden
        self.dec_hidden = dec_hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.random_state = random_state

    def fit(self, X, y=None):
        X = np.atleast_2d(check_power(X))
        init = init_model(X.shape[1], self.latent_dim, self.enc_hidden, self.dec_hidden,
                          seed=self.random_state)
        cfg = TrainingConfig(self.learning_rate, self.batch_size, self.max_epochs,
                             self.patience, rng_seed=self.random_state)
        self.model_, self.history_ = train(init, X, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return encode(self.model_, X)[0]

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return decode(self.model_, Z)

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        return elbo(self.model_, X, rng=self.random_state)
