"""Monte Carlo EM inference for the joint speech / ego-noise / environment model.

The mixture covariance in bin (f, t) is

    Sigma_X = g_t sigma2_f(z_t) R_S,f + [W_E H_E]_ft R_E,f + [W_B H_B]_ft R_B,f + delta I

where ``sigma2`` is the VAE decoder output. The E-step draws latent vectors
``z_t`` with a random-walk Metropolis-Hastings sampler; the M-step applies
majorisation-minimisation updates to the gains, the adaptive NMF factors
and the adaptive spatial covariances.

Everything is evaluated in a per-bin basis ``V_ft`` that whitens the noise
covariance and diagonalises ``R_S,f``: ``V^H N V = I`` and
``V^H R_S V = diag(lam)``. In that basis

    Sigma_X^-1 = V diag(1 / (1 + c lam)) V^H,   c = g_t sigma2_f(z),

so changing ``z`` or ``g`` never requires another matrix factorisation.
"""
from dataclasses import dataclass, field, replace
from functools import cached_property
import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import vae as vae_mod
from ._kernels import whiten_bins
from ._validation import NumericalError, check_random_state, hermitize
from .dsp import Spectrogram
from .mnmf import (EPS_FLOOR, NmfFactor, NoiseComponentModel, SpatialCovSet, as_ftm,
                   init_component, normalize, solve_riccati)

logger = logging.getLogger(__name__)

SCHEMES = ("fixed", "adaptive", "partial")

# total dictionary size -> (K_B, K_E) for the partially adaptive scheme
DICTIONARY_SPLITS = {16: (8, 8), 32: (16, 16), 64: (32, 32), 96: (32, 64),
                     128: (32, 96), 160: (32, 128), 192: (32, 160)}


class ConfigError(ValueError):
    pass


class MissingCheckpointError(ConfigError):
    pass


def partial_split(K):
    """(K_B, K_E) for a total dictionary size ``K``.

    Sizes outside the table keep at most 32 adaptive atoms and at least half
    of the dictionary pre-trained.
    """
    if K in DICTIONARY_SPLITS:
        return DICTIONARY_SPLITS[K]
    if K < 2:
        raise ConfigError("partial scheme needs K >= 2")
    kb = min(32, K // 2)
    return kb, K - kb


@dataclass
class SchemeConfig:
    scheme: str = "partial"
    K: int = 96
    K_E: int = None
    K_B: int = None
    em_iters: int = 100
    R_samples: int = 10
    burn_in: int = 30
    mh_proposal_std: float = None  # None -> 0.01 * sqrt(L)
    rng_seed: int = 0
    tol: float = 1e-4
    tol_window: int = 5
    loading: float = 1e-6  # relative to the mean mixture bin power

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        expected = {"fixed": (0, self.K), "adaptive": (self.K, 0)}.get(self.scheme)
        if expected is None:
            expected = partial_split(self.K)
        kb, ke = expected
        if self.K_B is None:
            self.K_B = kb
        if self.K_E is None:
            self.K_E = ke
        if self.K_B + self.K_E != self.K:
            raise ConfigError(f"K_B + K_E = {self.K_B + self.K_E} != K = {self.K}")
        if self.scheme == "fixed" and self.K_B != 0:
            raise ConfigError("fixed scheme requires K_B = 0")
        if self.scheme == "adaptive" and self.K_E != 0:
            raise ConfigError("adaptive scheme requires K_E = 0")
        if self.scheme == "partial" and (self.K_B < 1 or self.K_E < 1):
            raise ConfigError("partial scheme requires K_B >= 1 and K_E >= 1")
        if self.R_samples < 1 or self.burn_in < 0 or self.em_iters < 0:
            raise ConfigError("need R_samples >= 1, burn_in >= 0, em_iters >= 0")
        if self.mh_proposal_std is not None and self.mh_proposal_std < 0:
            raise ConfigError("mh_proposal_std must be >= 0")

    @property
    def needs_ego(self):
        return self.K_E > 0


@dataclass
class JointModel:
    vae: vae_mod.VaeModel
    speech_spatial: SpatialCovSet
    ego: NoiseComponentModel = None
    env: NoiseComponentModel = None

    def noise_components(self):
        return [c for c in (self.ego, self.env) if c is not None]


@dataclass
class McemState:
    g: np.ndarray  # (T,)
    z: np.ndarray  # (T, L) current chain state
    z_samples: np.ndarray = None  # (R, T, L)
    loading: float = 0.0
    scale: float = 1.0  # mixture was divided by this before inference
    loss_history: list = field(default_factory=list)
    acceptance: list = field(default_factory=list)
    m_step_log: list = field(default_factory=list)  # (neg_q before, neg_q after)
    rng: np.random.Generator = None


# ------------------------------------------------------------------ basis

@dataclass
class Whitened:
    """Per-bin basis for the current noise covariance and ``R_S``."""

    V: np.ndarray  # (F, T, M, M)
    lam: np.ndarray  # (F, T, M)
    u: np.ndarray  # (F, T, M) = V^H x
    logdet_noise: np.ndarray  # (F, T)

    @cached_property
    def u2(self):
        return np.abs(self.u) ** 2

    def project(self, R):
        """Per-bin ``V^H R_f V`` for a spatial covariance set ``R`` (F, M, M)."""
        return np.conj(np.swapaxes(self.V, -1, -2)) @ R[:, None] @ self.V


def noise_covariance(model, loading, n_frames):
    F = model.speech_spatial.R.shape[0]
    M = model.speech_spatial.n_channels
    N = np.zeros((F, n_frames, M, M), dtype=complex)
    for c in model.noise_components():
        N += c.covariance()
    N += loading * np.eye(M)
    return N


def whiten(X, model, loading):
    """Per-bin whitening basis (compiled kernel)."""
    N = noise_covariance(model, loading, X.shape[1])
    R = np.ascontiguousarray(model.speech_spatial.R, dtype=complex)
    V, lam, u, logdet, pd = whiten_bins(N, R, np.ascontiguousarray(X, dtype=complex))
    if not pd.all():
        f, t = np.argwhere(~pd)[0]
        raise np.linalg.LinAlgError(f"noise covariance is not positive definite at f={f}, t={t}")
    return Whitened(V, lam, u, logdet)


def whiten_reference(X, model, loading):
    """Same basis as :func:`whiten` via batched LAPACK calls."""
    N = noise_covariance(model, loading, X.shape[1])
    L = np.linalg.cholesky(N)
    Linv = np.linalg.inv(L)
    LinvH = np.conj(np.swapaxes(Linv, -1, -2))
    C = hermitize(Linv @ model.speech_spatial.R[:, None] @ LinvH)
    lam, U = np.linalg.eigh(C)
    V = LinvH @ U
    u = (np.conj(np.swapaxes(V, -1, -2)) @ X[..., None])[..., 0]
    logdet = 2 * np.sum(np.log(np.real(np.diagonal(L, axis1=-2, axis2=-1))), axis=-1)
    return Whitened(V, np.maximum(lam, 0.0), u, logdet)


def _speech_scale(g, S2):
    """``c[r, f, t] = g_t * sigma2_f(z_t^(r))``; S2 is (R, F, T)."""
    return g[None, None, :] * S2


def neg_q(basis, g, S2):
    """Monte Carlo estimate of ``-Q``: sample mean over r of the mixture NLL."""
    c = _speech_scale(g, S2)[..., None] * basis.lam
    per_r = np.sum(basis.u2 / (1 + c) + np.log1p(c), axis=(1, 2, 3))
    return float(np.mean(per_r) + np.sum(basis.logdet_noise))


def decoded_variances(model, z_samples):
    """(R, F, T) speech variances for latent samples (R, T, L)."""
    return np.exp(vae_mod.decode_log(model.vae, z_samples)).transpose(0, 2, 1)


def mixture_cov(model, state, z_t, f, t):
    """Dense mixture covariance for one bin, including the state's loading."""
    sigma2 = vae_mod.decode(model.vae, z_t)[f]
    M = model.speech_spatial.n_channels
    S = state.g[t] * sigma2 * model.speech_spatial.R[f]
    for c in model.noise_components():
        S = S + c.spatial.R[f] * (c.factor.W[f] @ c.factor.H[:, t])
    return S + state.loading * np.eye(M)


# ----------------------------------------------------------------- E-step

def _frame_log_target(basis, g, log_s2, z, data_weight):
    """Unnormalised log p(z_t | X_t) for every frame; log_s2 is (T, F)."""
    c = (g[:, None] * np.exp(log_s2)).T[..., None] * basis.lam  # (F, T, M)
    data = -np.sum(basis.u2 / (1 + c) + np.log1p(c), axis=(0, 2))
    return data_weight * data - 0.5 * np.sum(z ** 2, axis=-1)


def e_step_sample(model, state, spec=None, cfg=None, basis=None, data_weight=1.0):
    """Run ``burn_in + R_samples`` random-walk MH steps per frame.

    Chains continue from ``state.z``. The last ``R_samples`` states are stored
    in ``state.z_samples``; returns the acceptance rate. ``data_weight=0``
    drops the likelihood so the chains target the standard-normal prior.
    """
    cfg = cfg or SchemeConfig(scheme="adaptive", K=1)
    if basis is None:
        basis = whiten(as_ftm(spec) / state.scale, model, state.loading)
    rng = state.rng
    L = state.z.shape[1]
    std = cfg.mh_proposal_std if cfg.mh_proposal_std is not None else 0.01 * np.sqrt(L)
    z = state.z.copy()
    cur = _frame_log_target(basis, state.g, vae_mod.decode_log(model.vae, z), z, data_weight)
    samples = np.empty((cfg.R_samples,) + z.shape)
    accepted = 0
    n_steps = cfg.burn_in + cfg.R_samples
    for step in range(n_steps):
        prop = z + std * rng.standard_normal(z.shape)
        new = _frame_log_target(basis, state.g, vae_mod.decode_log(model.vae, prop), prop,
                                data_weight)
        ok = np.log(rng.uniform(size=z.shape[0])) < new - cur
        z[ok] = prop[ok]
        cur[ok] = new[ok]
        accepted += int(ok.sum())
        if step >= cfg.burn_in:
            samples[step - cfg.burn_in] = z
    rate = accepted / (n_steps * z.shape[0]) if n_steps else 0.0
    if n_steps and accepted == 0:
        logger.warning("Metropolis-Hastings accepted no proposals this iteration")
    state.z = z
    state.z_samples = samples
    state.acceptance.append(rate)
    return rate


# ----------------------------------------------------------------- M-step

def _sample_stats(basis, g, S2):
    """c[r] = g sigma2(z_r) and d[r] = 1 / (1 + c_r lam)."""
    c = _speech_scale(g, S2)
    d = 1.0 / (1.0 + c[..., None] * basis.lam)  # (R, F, T, M)
    return c, d


def _outer_sum(d, weight=None):
    """sum_r w_r d_r d_r^T for d (R, F, T, M) -> (F, T, M, M)."""
    dw = d if weight is None else d * weight[..., None]
    return dw.transpose(1, 2, 3, 0) @ d.transpose(1, 2, 0, 3)


def _component_traces(basis, G, dsum, P):
    """Per-bin ``sum_r tr(M^(r) R)`` and ``sum_r tr(Sigma^(r)-1 R)`` with P = V^H R V."""
    uu = np.conj(basis.u)[..., :, None] * basis.u[..., None, :]
    num = np.real(np.sum(uu * P * G, axis=(-1, -2)))
    den = np.sum(dsum * np.real(np.diagonal(P, axis1=-2, axis2=-1)), axis=-1)
    return num, den


def _mu(x, num, den):
    return np.maximum(x * np.sqrt(num / den), EPS_FLOOR)


def _riccati_terms(basis, d, weight_a, weight_b):
    """A_f = sum_{r,t} w_a Sigma^-1 and S_f = sum_{r,t} w_b M^(r); weights (R, F, T)."""
    V = basis.V
    Vh = np.conj(np.swapaxes(V, -1, -2))
    a = np.sum(weight_a[..., None] * d, axis=0)
    A = ((V * a[..., None, :]) @ Vh).sum(axis=1)
    Gw = _outer_sum(d, weight_b)
    inner = basis.u[..., :, None] * np.conj(basis.u)[..., None, :] * Gw
    S = (V @ inner @ Vh).sum(axis=1)
    return hermitize(A), hermitize(S)


def _riccati_update(basis, d, R, v_old, v_new):
    """Minimiser over R of the bound ``sum v_old^2 / v_new tr(R^-1 R' M R') + v_new tr(Sigma^-1 R)``."""
    A, S = _riccati_terms(basis, d, v_new, v_old ** 2 / v_new)
    return solve_riccati(A, R @ S @ R)


def _renormalize(model, g):
    """Unit-trace noise covariances; speech covariances to mean trace M with the
    global scale moved into the gains. All mixture covariances are preserved."""
    R = model.speech_spatial.R
    M = R.shape[-1]
    s = np.mean(np.real(np.trace(R, axis1=-2, axis2=-1))) / M
    out = replace(model, speech_spatial=SpatialCovSet(R / s))
    if model.env is not None:
        out = replace(out, env=normalize(model.env))
    return out, g * s


def _check_finite(model, g):
    arrays = [g, model.speech_spatial.R]
    for c in model.noise_components():
        arrays += [c.factor.W, c.factor.H, c.spatial.R]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise NumericalError("non-finite parameters after M-step")


def m_step(model, state, spec=None, basis=None, X=None):
    """One M-step with the current ``state.z_samples`` held fixed.

    All updates minimise one auxiliary function built at the current
    parameters, block by block in the order ``g``, ``W_B``, ``H_B``, ``H_E``,
    ``R_S``, ``R_B``, followed by renormalisation. Each block is minimised
    with the earlier blocks at their new values, so the objective cannot
    increase. ``W_E`` and ``R_E`` are never touched.
    Returns ``(model, basis)`` where ``basis`` matches the new parameters;
    ``state.g`` and ``state.m_step_log`` are updated.
    """
    if X is None:
        X = as_ftm(spec) / state.scale
    if basis is None:
        basis = whiten(X, model, state.loading)
    S2 = decoded_variances(model, state.z_samples)
    before = neg_q(basis, state.g, S2)

    c_old, d = _sample_stats(basis, state.g, S2)
    G = _outer_sum(d)
    dsum = d.sum(axis=0)
    u2lam = basis.u2 * basis.lam
    num_g = np.sum(np.sum(S2[..., None] * d ** 2, axis=0) * u2lam, axis=(0, 2))
    den_g = np.sum(np.sum(S2[..., None] * d, axis=0) * basis.lam, axis=(0, 2))
    g = _mu(state.g, num_g, den_g)

    updates = {}
    for name in ("env", "ego"):
        comp = getattr(model, name)
        if comp is None:
            continue
        W, H = comp.factor.W, comp.factor.H
        v_old = W @ H
        num, den = _component_traces(basis, G, dsum, basis.project(comp.spatial.R))
        W_new, H_new = W, H
        if comp.adapt_W:
            W_new = _mu(W, num @ H.T, den @ H.T)
        if comp.adapt_H:
            H_new = _mu(H, (W ** 2 / W_new).T @ num, W_new.T @ den)
        R = comp.spatial.R
        if comp.adapt_R:
            R = _riccati_update(basis, d, R, np.broadcast_to(v_old, c_old.shape),
                                np.broadcast_to(W_new @ H_new, c_old.shape))
        updates[name] = (W_new, H_new, R)
    c_new = g[None, None, :] * S2
    R_S = _riccati_update(basis, d, model.speech_spatial.R, c_old, c_new)
    model = replace(model, speech_spatial=SpatialCovSet(R_S),
                    **{name: replace(getattr(model, name), factor=NmfFactor(W, H),
                                     spatial=SpatialCovSet(R))
                       for name, (W, H, R) in updates.items()})
    model, state.g = _renormalize(model, g)
    _check_finite(model, state.g)
    basis = whiten(X, model, state.loading)
    after = neg_q(basis, state.g, S2)
    state.m_step_log.append((before, after))
    return model, basis


# ------------------------------------------------------------------ driver

def build_joint_model(vae_model, spec, cfg, ego=None):
    """Initial joint model for ``cfg.scheme``.

    ``ego`` is a pre-trained ``(W_E, R_E)`` pair, required when ``K_E > 0``.
    Adaptive factors start Uniform(0.1, 1), rescaled so each noise part
    initially carries half the mean mixture power; spatial covariances of
    adaptive parts start at identity.
    """
    X = as_ftm(spec)
    F, T, M = X.shape
    if vae_model.n_freqs != F:
        raise ConfigError(f"VAE expects {vae_model.n_freqs} frequency bins, mixture has {F}")
    rng = check_random_state(cfg.rng_seed)
    ego_model = env_model = None
    if cfg.needs_ego:
        if ego is None:
            raise MissingCheckpointError(f"the {cfg.scheme} scheme requires a pre-trained ego-noise model")
        W_E, R_E = ego
        if W_E.shape != (F, cfg.K_E) or R_E.shape != (F, M, M):
            raise ConfigError(f"ego model shapes {W_E.shape}/{R_E.shape} do not match "
                              f"(F={F}, K_E={cfg.K_E}, M={M})")
        H_E = rng.uniform(0.1, 1.0, (cfg.K_E, T))
        H_E *= 0.5 / np.mean(W_E @ H_E)
        ego_model = NoiseComponentModel(NmfFactor(W_E, H_E), SpatialCovSet(R_E),
                                        adapt_W=False, adapt_H=True, adapt_R=False)
    if cfg.K_B > 0:
        env_model = normalize(init_component(F, T, M, cfg.K_B, rng, power=0.5))
    return JointModel(vae_model, SpatialCovSet.identity(F, M), ego_model, env_model)


def init_state(X, model, cfg):
    """Gains at 1, chains at the encoder mean of the reference-channel power."""
    T = X.shape[1]
    z0, _ = vae_mod.encode(model.vae, np.abs(X[:, :, 0].T) ** 2)
    rng = np.random.default_rng([cfg.rng_seed, 1])
    return McemState(g=np.ones(T), z=z0, loading=cfg.loading, rng=rng)


def run_mcem(spec, model, cfg):
    """Alternate E- and M-steps; a final E-step refreshes the samples.

    The mixture is scaled to unit mean bin power internally (``state.scale``).
    """
    if cfg.needs_ego and model.ego is None:
        raise MissingCheckpointError(f"the {cfg.scheme} scheme requires a pre-trained ego-noise model")
    frozen = None
    if model.ego is not None:
        frozen = (model.ego.factor.W.copy(), model.ego.spatial.R.copy())
    X = as_ftm(spec)
    scale = np.sqrt(np.mean(np.abs(X) ** 2))
    if scale == 0:
        raise ValueError("mixture is all zeros")
    X = X / scale
    state = init_state(X, model, cfg)
    state.scale = scale
    basis = whiten(X, model, state.loading)
    for it in range(cfg.em_iters):
        rate = e_step_sample(model, state, cfg=cfg, basis=basis)
        model, basis = m_step(model, state, basis=basis, X=X)
        state.loss_history.append(state.m_step_log[-1][1])
        logger.info("iter %d neg_q %.6f acceptance %.3f", it + 1, state.loss_history[-1], rate)
        h = state.loss_history
        w = cfg.tol_window
        if cfg.tol > 0 and len(h) > w and abs(h[-1] - h[-1 - w]) <= cfg.tol * abs(h[-1 - w]):
            break
    e_step_sample(model, state, cfg=cfg, basis=basis)
    if frozen is not None:
        if not (np.array_equal(frozen[0], model.ego.factor.W)
                and np.array_equal(frozen[1], model.ego.spatial.R)):
            raise AssertionError("pre-trained ego-noise parameters changed during inference")
    return model, state


class MCEMEnhancer(BaseEstimator, TransformerMixin):
    """Estimator wrapper around :func:`run_mcem` and the Wiener filter.

    ``fit`` adapts the model to one mixture spectrogram; ``transform``
    returns the multichannel speech image estimate for that mixture.
    """

    def __init__(self, vae_model=None, scheme="partial", n_components=96, ego_model=None,
                 em_iters=100, R_samples=10, burn_in=30, mh_proposal_std=None,
                 random_state=0):
        self.vae_model = vae_model
        self.scheme = scheme
        self.n_components = n_components
        self.ego_model = ego_model
        self.em_iters = em_iters
        self.R_samples = R_samples
        self.burn_in = burn_in
        self.mh_proposal_std = mh_proposal_std
        self.random_state = random_state

    def _config(self):
        return SchemeConfig(self.scheme, self.n_components, em_iters=self.em_iters,
                            R_samples=self.R_samples, burn_in=self.burn_in,
                            mh_proposal_std=self.mh_proposal_std, rng_seed=self.random_state)

    def fit(self, X, y=None):
        if not isinstance(X, Spectrogram):
            X = Spectrogram(X)
        cfg = self._config()
        init = build_joint_model(self.vae_model, X, cfg, self.ego_model)
        self.model_, self.state_ = run_mcem(X, init, cfg)
        self.n_frames_ = X.shape[2]
        return self

    def transform(self, X):
        from .wiener import wiener_filter

        check_is_fitted(self, "model_")
        if not isinstance(X, Spectrogram):
            X = Spectrogram(X)
        if X.shape[2] != self.n_frames_:
            raise ValueError("transform expects the spectrogram the enhancer was fitted on")
        return wiener_filter(X, self.model_, self.state_).speech_spec
