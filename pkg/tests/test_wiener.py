import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egonoise import mcem, vae, wiener
from egonoise.dsp import AudioClip, Spectrogram, istft, stft
from egonoise.mcem import JointModel, McemState
from egonoise.mnmf import NmfFactor, NoiseComponentModel, SpatialCovSet

FL, HOP = 16, 4  # tiny frames keep the dense oracle cheap
F = FL // 2 + 1


def random_pd(rng, shape, M, load=0.1):
    a = rng.standard_normal(shape + (M, M)) + 1j * rng.standard_normal(shape + (M, M))
    return a @ np.conj(np.swapaxes(a, -1, -2)) + load * np.eye(M)


def flat_vae(log_var=0.0, L=2):
    m = vae.init_model(F, L, (4,), (4,), seed=0)
    m.params["out_W"][:] = 0
    m.params["out_b"][:] = log_var
    return m


def random_problem(seed, M=3, T=6, R=3):
    rng = np.random.default_rng(seed)
    m = vae.init_model(F, 2, (5,), (5,), seed=seed)
    env = NoiseComponentModel(NmfFactor(rng.uniform(0.1, 1, (F, 2)), rng.uniform(0.1, 1, (2, T))),
                              SpatialCovSet(random_pd(rng, (F,), M)))
    ego = NoiseComponentModel(NmfFactor(rng.uniform(0.1, 1, (F, 2)), rng.uniform(0.1, 1, (2, T))),
                              SpatialCovSet(random_pd(rng, (F,), M)))
    model = JointModel(m, SpatialCovSet(random_pd(rng, (F,), M)), ego, env)
    state = McemState(g=rng.uniform(0.5, 2, T), z=np.zeros((T, 2)),
                      z_samples=rng.standard_normal((R, T, 2)), loading=1e-3, scale=1.7)
    X = rng.standard_normal((M, F, T)) + 1j * rng.standard_normal((M, F, T))
    X[:, 0].imag = 0
    X[:, -1].imag = 0
    return Spectrogram(X, FL, HOP), model, state


def dense_filter(spec, model, state):
    """Independent per-bin evaluation with explicit inverses."""
    Xf = np.transpose(spec.coeffs, (1, 2, 0)) / state.scale
    S2 = np.exp(vae.decode_log(model.vae, state.z_samples)).transpose(0, 2, 1)  # (R, F, T)
    Fn, T, M = Xf.shape
    speech = state.g[None, None, :, None, None] * S2[..., None, None] * model.speech_spatial.R[None, :, None]
    noise = sum(c.covariance() for c in model.noise_components()) + state.loading * np.eye(M)
    out = wiener.wiener_filter_dense(Xf, speech, noise)
    return out.transpose(2, 0, 1) * state.scale


def test_matches_dense_oracle():
    for seed in range(3):
        spec, model, state = random_problem(seed)
        got = wiener.wiener_filter(spec, model, state).speech_spec.coeffs
        ref = dense_filter(spec, model, state)
        assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))


def test_dense_reference_against_loop():
    rng = np.random.default_rng(5)
    S = random_pd(rng, (2,), 2)
    N = random_pd(rng, (), 2)
    x = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    expected = 0.5 * (S[0] @ np.linalg.inv(S[0] + N) + S[1] @ np.linalg.inv(S[1] + N)) @ x
    np.testing.assert_allclose(wiener.wiener_filter_dense(x, S, N), expected, rtol=1e-12)


def test_zero_noise_gives_identity():
    rng = np.random.default_rng(1)
    T, M = 5, 3
    model = JointModel(flat_vae(), SpatialCovSet(random_pd(rng, (F,), M, load=1.0)))
    state = McemState(g=np.ones(T), z=np.zeros((T, 2)), z_samples=np.zeros((2, T, 2)),
                      loading=1e-14)
    X = rng.standard_normal((M, F, T)) + 1j * rng.standard_normal((M, F, T))
    got = wiener.wiener_filter(Spectrogram(X, FL, HOP), model, state).speech_spec.coeffs
    np.testing.assert_allclose(got, X, rtol=0, atol=1e-10 * np.abs(X).max())


def test_scalar_equal_variances_halve_the_mixture():
    T = 4
    env = NoiseComponentModel(NmfFactor(np.ones((F, 1)), np.ones((1, T))), SpatialCovSet.identity(F, 1))
    model = JointModel(flat_vae(), SpatialCovSet.identity(F, 1), env=env)
    state = McemState(g=np.ones(T), z=np.zeros((T, 2)), z_samples=np.zeros((3, T, 2)), loading=0.0)
    X = np.random.default_rng(2).standard_normal((1, F, T)) + 0j
    got = wiener.wiener_filter(Spectrogram(X, FL, HOP), model, state).speech_spec.coeffs
    np.testing.assert_allclose(got, X / 2, rtol=1e-14, atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), a=st.floats(-3, 3), b=st.floats(-3, 3))
def test_linear_in_mixture(seed, a, b):
    spec, model, state = random_problem(seed % 1000)
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal(spec.shape) + 1j * rng.standard_normal(spec.shape)
    Y[:, 0].imag = 0
    Y[:, -1].imag = 0
    f = lambda C: wiener.wiener_filter(Spectrogram(C, FL, HOP), model, state).speech_spec.coeffs
    lhs = f(a * spec.coeffs + b * Y)
    rhs = a * f(spec.coeffs) + b * f(Y)
    assert np.max(np.abs(lhs - rhs)) <= 1e-10 * max(1.0, np.max(np.abs(rhs)))


def test_scalar_gain_is_a_contraction():
    rng = np.random.default_rng(3)
    T = 8
    env = NoiseComponentModel(NmfFactor(rng.uniform(0.01, 3, (F, 1)), rng.uniform(0.01, 3, (1, T))),
                              SpatialCovSet.identity(F, 1))
    model = JointModel(vae.init_model(F, 2, (5,), (5,), seed=3), SpatialCovSet.identity(F, 1), env=env)
    state = McemState(g=rng.uniform(0.1, 5, T), z=np.zeros((T, 2)),
                      z_samples=3 * rng.standard_normal((4, T, 2)), loading=0.0)
    X = rng.standard_normal((1, F, T)) + 1j * rng.standard_normal((1, F, T))
    X[:, 0].imag = 0
    X[:, -1].imag = 0
    S = wiener.wiener_filter(Spectrogram(X, FL, HOP), model, state).speech_spec.coeffs
    assert np.all(np.abs(S) ** 2 <= np.abs(X) ** 2 * (1 + 1e-12))


def test_output_clip_and_diagnostics():
    spec, model, state = random_problem(4)
    spec = Spectrogram(spec.coeffs, FL, HOP, length=25)
    res = wiener.wiener_filter(spec, model, state)
    assert res.speech_spec.shape == spec.shape
    assert res.speech_clip.samples.shape == (3, 25)
    np.testing.assert_allclose(res.speech_clip.samples, istft(res.speech_spec).samples)
    assert res.mono.samples.shape == (1, 25)
    T = spec.shape[2]
    assert res.diagnostics["speech_var_per_frame"].shape == (T,)
    assert np.all(res.diagnostics["noise_var_per_frame"] > 0)


def test_requires_samples():
    spec, model, state = random_problem(0)
    state.z_samples = None
    with pytest.raises(ValueError):
        wiener.wiener_filter(spec, model, state)


def test_full_size_spectrogram_round_trip():
    # default STFT size: zero noise gives back the mixture waveform in the interior
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 8000))
    spec = stft(AudioClip(x))
    Fd, T = spec.shape[1], spec.shape[2]
    m = vae.init_model(Fd, 2, (4,), (4,), seed=0)
    m.params["out_W"][:] = 0
    model = JointModel(m, SpatialCovSet.identity(Fd, 2))
    state = McemState(g=np.ones(T), z=np.zeros((T, 2)), z_samples=np.zeros((1, T, 2)), loading=1e-14)
    y = wiener.wiener_filter(spec, model, state).speech_clip.samples
    sl = slice(768, 8000 - 768)
    assert np.linalg.norm(y[:, sl] - x[:, sl]) < 1e-9 * np.linalg.norm(x[:, sl])


def test_flat_decoder_matches_mcem_variances():
    model = JointModel(flat_vae(np.log(2.0)), SpatialCovSet.identity(F, 1))
    v = mcem.decoded_variances(model, np.zeros((2, 3, 2)))
    np.testing.assert_allclose(v, 2.0)
