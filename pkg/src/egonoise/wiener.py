"""Multichannel Wiener filtering of the mixture given fitted MCEM parameters."""
from dataclasses import dataclass

import numpy as np

from .dsp import AudioClip, Spectrogram, istft
from .mcem import decoded_variances, whiten
from .mnmf import as_ftm


@dataclass
class EnhancementResult:
    speech_spec: Spectrogram
    speech_clip: AudioClip
    diagnostics: dict

    @property
    def mono(self):
        """Channel 0 of the speech estimate."""
        return self.speech_clip.channel(0)


def wiener_filter(spec, model, state):
    """Speech image estimate averaged over the retained latent samples.

    For each sample ``r`` the filter is ``g_t Sigma_S(z^(r)) Sigma_X(z^(r))^-1``;
    the filters are averaged and applied to the mixture.
    """
    if state.z_samples is None:
        raise ValueError("state holds no latent samples; run the E-step first")
    X = as_ftm(spec) / state.scale
    basis = whiten(X, model, state.loading)
    S2 = decoded_variances(model, state.z_samples)
    c = state.g[None, None, :] * S2  # (R, F, T)
    d = 1.0 / (1.0 + c[..., None] * basis.lam)
    # Sigma_X^-1 x = V (u * d); average c * that over samples, then apply R_S
    w = np.mean(c[..., None] * d, axis=0) * basis.u
    y = basis.V @ w[..., None]
    S = (model.speech_spatial.R[:, None] @ y)[..., 0] * state.scale
    if not np.all(np.isfinite(S)):
        raise np.linalg.LinAlgError("non-finite Wiener filter output")
    out = Spectrogram(S.transpose(2, 0, 1), spec.frame_len, spec.hop, spec.sample_rate,
                      spec.length)
    speech_var = np.mean(c, axis=0)
    noise_var = np.zeros_like(speech_var)
    for comp in model.noise_components():
        noise_var = noise_var + comp.factor.variance()
    diagnostics = {
        "speech_var_per_frame": speech_var.mean(axis=0) * state.scale ** 2,
        "noise_var_per_frame": noise_var.mean(axis=0) * state.scale ** 2,
    }
    return EnhancementResult(out, istft(out), diagnostics)


def wiener_filter_dense(X, speech_covs, noise_covs):
    """Reference filter by explicit inversion: mean_r S_r (S_r + N)^-1 x.

    ``X`` (..., M), ``speech_covs`` (R, ..., M, M), ``noise_covs`` (..., M, M).
    """
    gains = speech_covs @ np.linalg.inv(speech_covs + noise_covs[None])
    return np.einsum("...mn,...n->...m", gains.mean(axis=0), X)
