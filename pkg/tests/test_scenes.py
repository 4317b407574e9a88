from dataclasses import replace

import numpy as np
import pytest

from egonoise import scenes
from egonoise.dsp import AudioClip, stft
from egonoise.scenes import SceneSpec


def spatial_covs(clip):
    X = stft(clip).coeffs  # (M, F, T)
    return np.einsum("mft,nft->fmn", X, np.conj(X)) / X.shape[2]


def cmd(A, B):
    """Correlation-matrix distance."""
    return 1 - np.real(np.trace(A @ B)) / (np.linalg.norm(A) * np.linalg.norm(B))


def coherence(C):
    d = np.sqrt(np.real(np.diagonal(C, axis1=1, axis2=2)))
    return np.abs(C) / (d[:, :, None] * d[:, None, :])


def spatial_entropy(C):
    lam = np.clip(np.linalg.eigvalsh(C), 1e-300, None)
    p = lam / lam.sum(axis=1, keepdims=True)
    return -np.sum(p * np.log(p), axis=1)


def test_ego_spatial_covariance_matches_generator():
    spec = SceneSpec(duration=60.0, rng_seed=1)
    R_hat = spatial_covs(scenes.gen_ego_noise(spec))
    R = scenes.robot_model(spec).R
    dist = np.array([cmd(R_hat[f], R[f]) for f in range(1, spec.n_freqs - 1)])
    assert dist.mean() < 0.1
    assert np.median(dist) < 0.1


def test_zero_gating_gives_stationary_ego_noise():
    spec = SceneSpec(duration=5.0, rng_seed=2)
    P = stft(scenes.gen_ego_noise(spec, gating_rate=0.0)).power().sum(axis=(0, 1))
    P = P[4:-4]  # frames that only partly overlap the clip
    assert P.std() / P.mean() < 0.2


def test_gating_makes_ego_noise_bursty():
    spec = SceneSpec(duration=5.0, rng_seed=2)
    P = stft(scenes.gen_ego_noise(spec, gating_rate=1.5)).power().sum(axis=(0, 1))[4:-4]
    assert P.std() / P.mean() > 0.5


def test_robot_identity_depends_on_ego_seed():
    a = scenes.robot_model(SceneSpec())
    b = scenes.robot_model(SceneSpec(ego_seed=1))
    assert not np.array_equal(a.W, b.W)
    assert np.array_equal(a.W, scenes.robot_model(SceneSpec()).W)
    np.testing.assert_allclose(a.W.sum(0), 1)
    np.testing.assert_allclose(np.trace(a.R, axis1=1, axis2=2).real, 4)


def test_env_noise_is_diffuse():
    spec = SceneSpec(duration=10.0, rng_seed=3)
    coh = coherence(spatial_covs(scenes.gen_env_noise(spec)))
    M = spec.n_channels
    off = coh[:, ~np.eye(M, dtype=bool)]
    assert off.mean() < 0.3


def test_ego_noise_is_more_structured_than_env_noise():
    spec = SceneSpec(duration=10.0, rng_seed=4)
    ego = spatial_entropy(spatial_covs(scenes.gen_ego_noise(spec))[1:-1])
    env = spatial_entropy(spatial_covs(scenes.gen_env_noise(spec))[1:-1])
    assert ego.mean() < env.mean() - 0.5


def test_speech_has_harmonics_at_commanded_pitch():
    f0 = 150.0
    spec = SceneSpec(duration=1.0, voiced_only=True, pitch_range=(f0, f0), n_channels=1)
    P = stft(AudioClip(scenes.dry_speech(spec))).power()[0].mean(axis=1)
    bin_hz = spec.sample_rate / spec.frame_len
    for k in range(1, 8):
        target = k * f0 / bin_hz
        lo, hi = int(np.floor(target)) - 3, int(np.ceil(target)) + 4
        peak = lo + np.argmax(P[lo:hi])
        assert abs(peak - target) <= 1
        assert P[peak] > 10 * np.median(P[lo - 6:hi + 6])


def test_speech_is_rendered_through_a_fixed_steering_vector():
    spec = SceneSpec(duration=2.0, rng_seed=5)
    clip = scenes.gen_speech(spec)
    assert clip.samples.shape == (4, spec.n_samples)
    C = spatial_covs(clip)[5:300]
    lam = np.linalg.eigvalsh(C)
    assert np.median(lam[:, -1] / lam.sum(axis=1)) > 0.99


def test_zero_duration_rejected():
    with pytest.raises(ValueError):
        SceneSpec(duration=0.0)
    with pytest.raises(ValueError):
        SceneSpec(snr_ego_db=float("inf"))


def test_mix_at_snr():
    rng = np.random.default_rng(0)
    s, n = AudioClip(rng.standard_normal((2, 4000))), AudioClip(3 * rng.standard_normal((2, 4000)))
    for snr in (-5.0, 0.0, 3.3):
        mix, scaled = scenes.mix_at_snr(s, n, snr)
        measured = 10 * np.log10(np.sum(s.samples ** 2) / np.sum(scaled.samples ** 2))
        assert abs(measured - snr) < 0.01
        assert np.array_equal(mix.samples, s.samples + scaled.samples)
    mix, _ = scenes.mix_at_snr(s, n, 300.0)
    np.testing.assert_allclose(mix.samples, s.samples, atol=1e-12)


def test_mix_at_snr_errors():
    s = AudioClip(np.ones((1, 10)))
    with pytest.raises(ValueError):
        scenes.mix_at_snr(s, AudioClip(np.zeros((1, 10))), 0.0)
    with pytest.raises(ValueError):
        scenes.mix_at_snr(AudioClip(np.zeros((1, 10))), s, 0.0)
    with pytest.raises(ValueError):
        scenes.mix_at_snr(s, AudioClip(np.ones((1, 11))), 0.0)


def test_testset_size_and_stems():
    base = SceneSpec(duration=0.25)
    sc = scenes.build_testset(128, "EgoEnv", seed=0, base=base)
    assert len(sc) == 128
    for s in sc:
        assert s.mixture.samples.shape == s.speech.samples.shape == s.ego.samples.shape \
            == s.env.samples.shape == (4, base.n_samples)
        assert np.max(np.abs(s.mixture.samples - s.speech.samples - s.ego.samples - s.env.samples)) <= 1e-12
        assert s.meta["snr_ego_db"] in scenes.SNR_CHOICES
        assert abs(scenes.snr_db(s.speech, s.ego) - s.meta["snr_ego_db"]) < 0.01
        assert abs(scenes.snr_db(s.speech, s.env)) < 0.01
    assert len({s.meta["scene_id"] for s in sc}) == 128


def test_testset_is_deterministic():
    base = SceneSpec(duration=0.5)
    a = scenes.build_testset(3, "EgoEnv", seed=7, base=base)
    b = scenes.build_testset(3, "EgoEnv", seed=7, base=base)
    for x, y in zip(a, b):
        for stem in ("mixture", "speech", "ego", "env"):
            assert np.array_equal(getattr(x, stem).samples, getattr(y, stem).samples)
    c = scenes.build_testset(3, "EgoEnv", seed=8, base=base)
    assert not np.array_equal(a[0].mixture.samples, c[0].mixture.samples)


def test_ego_scenario_has_silent_env_stem():
    for s in scenes.build_testset(3, "Ego", seed=1, base=SceneSpec(duration=0.5)):
        assert np.all(s.env.samples == 0)
        assert s.meta["snr_env_db"] is None


def test_testset_errors():
    with pytest.raises(ValueError):
        scenes.build_testset(0, "Ego", seed=0)
    with pytest.raises(ValueError):
        scenes.build_testset(1, "Street", seed=0)


def test_manifest_round_trip(tmp_path):
    sc = scenes.build_testset(2, "EgoEnv", seed=3, base=SceneSpec(duration=0.5))
    path = scenes.save_testset(sc, tmp_path)
    rows = scenes.read_manifest(path)
    assert [r["scene_id"] for r in rows] == ["EgoEnv_0000", "EgoEnv_0001"]
    loaded = scenes.load_scene(rows[1])
    # float32 stems
    np.testing.assert_allclose(loaded.speech.samples, sc[1].speech.samples, rtol=1e-6, atol=1e-6)
    assert float(rows[1]["snr_env_db"]) == 0.0
    with open(path) as fh:
        assert fh.readline().startswith("# egonoise scene manifest v1")


def test_manifest_rejects_other_files(tmp_path):
    p = tmp_path / "m.tsv"
    p.write_text("scene_id\tscenario\n")
    with pytest.raises(ValueError):
        scenes.read_manifest(p)
    p.write_text("# egonoise scene manifest v9\n")
    with pytest.raises(ValueError, match="version"):
        scenes.read_manifest(p)


def test_ego_training_clip_differs_from_test_gating():
    clip = scenes.ego_training_clip(duration=2.0)
    assert clip.samples.shape == (4, 32000)
    base = replace(SceneSpec(), duration=2.0, rng_seed=99)
    assert not np.array_equal(clip.samples, scenes.gen_ego_noise(base).samples)
