"""Multichannel NMF noise model and ego-noise pre-training.

A noise component has covariance ``R_f * [W H]_ft`` in every time-frequency
bin. Pre-training minimises the multichannel Itakura-Saito style negative
log-likelihood with majorisation-minimisation updates: square-root
multiplicative updates for ``W`` and ``H`` and a Riccati solve for ``R_f``.
"""
from dataclasses import dataclass, replace
import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import NumericalError, check_finite, check_hermitian, check_random_state, hermitize
from .dsp import Spectrogram

logger = logging.getLogger(__name__)

EPS_FLOOR = 1e-12
PD_LOADING = 1e-10


@dataclass
class NmfFactor:
    W: np.ndarray  # (F, K)
    H: np.ndarray  # (K, T)

    @property
    def n_components(self):
        return self.W.shape[1]

    def variance(self):
        return self.W @ self.H


@dataclass
class SpatialCovSet:
    R: np.ndarray  # (F, M, M) Hermitian PD

    @classmethod
    def identity(cls, n_freqs, n_channels):
        return cls(np.tile(np.eye(n_channels, dtype=complex), (n_freqs, 1, 1)))

    @property
    def n_channels(self):
        return self.R.shape[-1]


@dataclass
class NoiseComponentModel:
    factor: NmfFactor
    spatial: SpatialCovSet
    adapt_W: bool = True
    adapt_H: bool = True
    adapt_R: bool = True

    def covariance(self):
        """Dense (F, T, M, M) covariance ``R_f [W H]_ft``."""
        return self.spatial.R[:, None] * self.factor.variance()[..., None, None]


def as_ftm(spec):
    """Spectrogram or (M, F, T) array -> (F, T, M) array."""
    coeffs = spec.coeffs if isinstance(spec, Spectrogram) else np.asarray(spec, dtype=complex)
    return np.ascontiguousarray(coeffs.transpose(1, 2, 0))


def loaded(A, rel=PD_LOADING):
    """Add ``rel * trace/M`` to the diagonal of every matrix in ``A``."""
    M = A.shape[-1]
    tr = np.real(np.trace(A, axis1=-2, axis2=-1))
    return A + (rel * np.maximum(tr, 0) / M + np.finfo(float).tiny)[..., None, None] * np.eye(M)


def complex_gaussian_nll(X, Sigma):
    """Sum over bins of ``x^H Sigma^-1 x + ln det Sigma`` by dense linear algebra.

    ``X`` is (..., M), ``Sigma`` is (..., M, M).
    """
    sign, logdet = np.linalg.slogdet(Sigma)
    if np.any(np.real(sign) <= 0):
        bad = np.argwhere(np.real(sign) <= 0)[0]
        raise np.linalg.LinAlgError(f"covariance not positive definite at bin {tuple(bad)}")
    y = np.linalg.solve(Sigma, X[..., None])[..., 0]
    quad = np.real(np.sum(np.conj(X) * y, axis=-1))
    return float(np.sum(quad) + np.sum(logdet))


def _quad_forms(X, R):
    """``x_ft^H R_f^-1 x_ft`` and ``ln det R_f``."""
    Rl = loaded(R)
    Rinv = np.linalg.inv(Rl)
    q = np.real(np.einsum("ftm,fmn,ftn->ft", np.conj(X), Rinv, X))
    logdet = np.linalg.slogdet(Rl)[1]
    return q, logdet, Rinv


def mnmf_loss(spec, model):
    """Negative log-likelihood (constants dropped) of ego-noise under ``model``."""
    X = as_ftm(spec)
    v = model.factor.variance()
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        f, t = np.argwhere(~(v > 0))[0]
        raise np.linalg.LinAlgError(f"singular covariance at (f={f}, t={t})")
    eig = np.linalg.eigvalsh(model.spatial.R)
    if np.any(eig[:, 0] <= 0):
        f = int(np.argmax(eig[:, 0] <= 0))
        raise np.linalg.LinAlgError(f"singular spatial covariance at f={f}")
    # exact evaluation; loading is only applied inside the updates
    R = hermitize(model.spatial.R)
    q = np.real(np.einsum("ftm,fmn,ftn->ft", np.conj(X), np.linalg.inv(R), X))
    logdet = np.sum(np.log(eig), axis=-1)
    M = X.shape[-1]
    return float(np.sum(q / v) + M * np.sum(np.log(v)) + v.shape[1] * np.sum(logdet))


def psd_sqrt(A):
    w, U = np.linalg.eigh(hermitize(A))
    w = np.sqrt(np.maximum(w, 0.0))
    return (U * w[..., None, :]) @ np.conj(np.swapaxes(U, -1, -2))


def solve_riccati(A, B, tol=1e-8):
    """Hermitian PSD solution of ``R A R = B`` (batched over leading axes).

    ``R = A^-1/2 (A^1/2 B A^1/2)^1/2 A^-1/2``. Eigenvalues of ``A`` are floored
    at ``PD_LOADING * trace(A) / M``; unlike additive loading this leaves the
    solution exact whenever ``A`` is better conditioned than the floor.
    The result is Hermitian-symmetrised.
    """
    A = hermitize(check_hermitian(A, tol, "A"))
    B = hermitize(check_hermitian(B, tol, "B"))
    w, U = np.linalg.eigh(A)
    M = A.shape[-1]
    floor = PD_LOADING * np.maximum(np.real(np.trace(A, axis1=-2, axis2=-1)), 0) / M
    w = np.maximum(w, floor[..., None])
    if np.any(w <= 0):
        raise np.linalg.LinAlgError("A is singular")
    Uh = np.conj(np.swapaxes(U, -1, -2))
    a_half = (U * np.sqrt(w)[..., None, :]) @ Uh
    a_ihalf = (U / np.sqrt(w)[..., None, :]) @ Uh
    R = a_ihalf @ psd_sqrt(a_half @ B @ a_half) @ a_ihalf
    return hermitize(R)


def normalize(model):
    """Resolve scale ambiguities without changing any ``R_f [W H]_ft``.

    Each ``R_f`` is scaled to trace ``M`` (scale moved into row ``f`` of ``W``),
    then each column of ``W`` to unit sum (scale moved into ``H``).
    """
    R = model.spatial.R.copy()
    W = model.factor.W.copy()
    H = model.factor.H.copy()
    M = R.shape[-1]
    scale = np.real(np.trace(R, axis1=-2, axis2=-1)) / M
    scale = np.maximum(scale, EPS_FLOOR)
    R /= scale[:, None, None]
    W *= scale[:, None]
    col = np.maximum(W.sum(0), EPS_FLOOR)
    W /= col
    H *= col[:, None]
    return replace(model, factor=NmfFactor(W, H), spatial=SpatialCovSet(R))


def init_component(n_freqs, n_frames, n_channels, K, rng, power=None):
    """Uniform(0.1, 1) factors, identity spatial covariances.

    If ``power`` (mean bin power per channel) is given, ``H`` is rescaled so
    the initial variance matches it on average.
    """
    W = rng.uniform(0.1, 1.0, (n_freqs, K))
    H = rng.uniform(0.1, 1.0, (K, n_frames))
    if power is not None:
        H *= power / np.mean(W @ H)
    return NoiseComponentModel(NmfFactor(W, H), SpatialCovSet.identity(n_freqs, n_channels))


def mnmf_sweep(X, model):
    """One W -> H -> R majorisation sweep of single-component MNMF.

    With ``Sigma = R_f v_ft`` the traces reduce to ``tr(M_ft R_f) = q / v^2`` and
    ``tr(Sigma^-1 R_f) = M / v`` where ``q = x^H R_f^-1 x``.
    """
    M = X.shape[-1]
    W, H, R = model.factor.W, model.factor.H, model.spatial.R
    q, _, _ = _quad_forms(X, R)
    if model.adapt_W:
        v = W @ H
        W = np.maximum(W * np.sqrt(((q / v ** 2) @ H.T) / ((M / v) @ H.T)), EPS_FLOOR)
    if model.adapt_H:
        v = W @ H
        H = np.maximum(H * np.sqrt((W.T @ (q / v ** 2)) / (W.T @ (M / v))), EPS_FLOOR)
    if model.adapt_R:
        v = W @ H
        A = X.shape[1] * np.linalg.inv(loaded(R))
        B = np.einsum("ftm,ftn->fmn", X / v[..., None], np.conj(X))
        R = solve_riccati(A, B)
    out = replace(model, factor=NmfFactor(W, H), spatial=SpatialCovSet(R))
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(H)) and np.all(np.isfinite(R))):
        raise NumericalError("non-finite parameters in MNMF sweep")
    return normalize(out)


def train_ego(spec, n_components, iters=200, seed=0, tol=1e-5, callback=None):
    """Fit ``{W_E, H_E, R_E}`` on ego-noise-only material.

    Stops after ``iters`` sweeps or when the loss change per time-frequency
    bin drops below ``tol`` (``tol=0`` runs every sweep). Returns the model and the loss after
    initialisation followed by the loss after every sweep.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if n_components < 1:
        raise ValueError("n_components must be >= 1")
    X = check_finite(as_ftm(spec), "ego-noise spectrogram")
    power = np.mean(np.abs(X) ** 2)
    if power == 0:
        raise ValueError("ego-noise input is all zeros")
    F, T, M = X.shape
    rng = check_random_state(seed)
    model = normalize(init_component(F, T, M, n_components, rng, power))
    history = [mnmf_loss(X.transpose(2, 0, 1), model)]
    for it in range(iters):
        model = mnmf_sweep(X, model)
        history.append(mnmf_loss(X.transpose(2, 0, 1), model))
        if callback is not None:
            callback(it, model, history[-1])
        logger.debug("ego sweep %d loss %.6f", it + 1, history[-1])
        if tol > 0 and abs(history[-2] - history[-1]) <= tol * F * T:
            break
    return model, history


def save_ego(path, model, history=None):
    meta = {"n_freqs": model.factor.W.shape[0], "n_components": model.factor.n_components,
            "n_channels": model.spatial.n_channels,
            "normalization": "trace(R_f)=M; sum_f W[f,k]=1"}
    if history is not None:
        meta["loss_history"] = [float(v) for v in history]
    checkpoint.save(path, "ego", {"W": model.factor.W, "R": model.spatial.R}, meta)


def load_ego(path):
    """Return ``(W_E, R_E)`` from an ego checkpoint."""
    _, arrays = checkpoint.load(path, kind="ego")
    return arrays["W"].astype(float), arrays["R"].astype(complex)


class EgoNoiseMNMF(BaseEstimator):
    """Pre-trains the ego-noise dictionary and spatial covariances.

    ``fit`` takes a :class:`Spectrogram` or an (M, F, T) complex array.
    """

    def __init__(self, n_components=64, max_iter=200, tol=1e-5, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        self.model_, self.loss_history_ = train_ego(
            X, self.n_components, self.max_iter, self.random_state, self.tol)
        self.components_ = self.model_.factor.W
        self.spatial_covariances_ = self.model_.spatial.R
        return self

    def score(self, X, y=None):
        """Negative MNMF loss of ``X`` with activations re-fitted, W and R frozen."""
        check_is_fitted(self, "model_")
        Xf = as_ftm(X)
        F, T, M = Xf.shape
        rng = check_random_state(self.random_state)
        model = init_component(F, T, M, self.n_components, rng, np.mean(np.abs(Xf) ** 2))
        model = NoiseComponentModel(NmfFactor(self.components_, model.factor.H),
                                    SpatialCovSet(self.spatial_covariances_),
                                    adapt_W=False, adapt_R=False)
        for _ in range(self.max_iter):
            model = mnmf_sweep(Xf, model)
        return -mnmf_loss(Xf.transpose(2, 0, 1), model)
