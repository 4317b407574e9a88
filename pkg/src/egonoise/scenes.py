"""Seeded synthetic multichannel scenes: speech surrogate, ego-noise, diffuse noise.

Ego-noise follows a multichannel NMF model: a fixed per-frequency spatial
covariance ``a_f a_f^H + 0.05 I`` from a body-mounted source, a dictionary of
narrowband (motor harmonics) and broadband atoms, and on/off gated
activations that mimic movement bursts. The robot identity (dictionary and
steering) is fixed by ``SceneSpec.ego_seed``; the gating and noise
realisations depend on the scene seed.
"""
from dataclasses import dataclass, field, replace
import logging
import os

import numpy as np

from .dsp import AudioClip, Spectrogram, istft, n_frames, read_wav, write_wav

logger = logging.getLogger(__name__)

SNR_CHOICES = tuple(range(-5, 6))
MANIFEST_VERSION = 1


@dataclass
class SceneSpec:
    n_channels: int = 4
    duration: float = 3.0
    sample_rate: int = 16000
    frame_len: int = 1024
    hop: int = 256
    # ego-noise (robot identity + movement)
    ego_seed: int = 2023
    ego_atoms: int = 8
    ego_gating_rate: float = 1.5  # on/off switches per second
    ego_loading: float = 0.05
    # environmental noise
    env_cutoff_hz: tuple = (400.0, 1500.0)
    env_modulation: float = 0.3
    # speech surrogate
    pitch_range: tuple = (100.0, 220.0)
    voiced_only: bool = False
    pitch_drift: float = 0.15
    snr_ego_db: float = 0.0
    snr_env_db: float = None  # None -> no environmental noise
    rng_seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if self.n_channels < 1 or self.sample_rate <= 0:
            raise ValueError("need n_channels >= 1 and a positive sample rate")
        if self.ego_atoms < 1:
            raise ValueError("ego_atoms must be >= 1")
        for snr in (self.snr_ego_db, self.snr_env_db):
            if snr is not None and not np.isfinite(snr):
                raise ValueError("SNRs must be finite")

    @property
    def n_samples(self):
        return int(round(self.duration * self.sample_rate))

    @property
    def n_freqs(self):
        return self.frame_len // 2 + 1

    def freqs_hz(self):
        return np.arange(self.n_freqs) * self.sample_rate / self.frame_len


@dataclass
class Scene:
    mixture: AudioClip
    speech: AudioClip
    ego: AudioClip
    env: AudioClip
    meta: dict = field(default_factory=dict)


def _steering(freqs, n_channels, rng, max_delay=4e-4, gain_spread=0.2):
    """Delay-and-gain steering vectors (F, M), smooth across frequency."""
    delays = rng.uniform(-max_delay, max_delay, n_channels)
    delays -= delays[0]
    gains = rng.uniform(1 - gain_spread, 1 + gain_spread, n_channels)
    return gains * np.exp(-2j * np.pi * freqs[:, None] * delays[None, :])


@dataclass
class RobotModel:
    W: np.ndarray  # (F, K) unit-sum columns
    R: np.ndarray  # (F, M, M) trace M


def robot_model(spec):
    """Ego-noise dictionary and spatial covariances for ``spec.ego_seed``."""
    rng = np.random.default_rng([spec.ego_seed, 17])
    freqs = spec.freqs_hz()
    a = _steering(freqs, spec.n_channels, rng, gain_spread=0.5)
    R = a[:, :, None] * np.conj(a[:, None, :]) + spec.ego_loading * np.eye(spec.n_channels)
    R *= spec.n_channels / np.real(np.trace(R, axis1=1, axis2=2))[:, None, None]
    bin_hz = freqs[1]
    W = np.empty((spec.n_freqs, spec.ego_atoms))
    for k in range(spec.ego_atoms):
        if k % 2 == 0:
            f0 = rng.uniform(250.0, 1200.0)
            harmonics = np.arange(1, int(freqs[-1] // f0) + 1) * f0
            decay = rng.uniform(0.5, 1.5)
            amps = np.arange(1, len(harmonics) + 1, dtype=float) ** -decay
            w = np.sum(amps * np.exp(-0.5 * ((freqs[:, None] - harmonics) / (0.8 * bin_hz)) ** 2), axis=1)
            w += 1e-3 * amps[0]
        else:
            centre = np.exp(rng.uniform(np.log(800.0), np.log(6000.0)))
            width = rng.uniform(0.4, 1.0)  # octaves
            logf = np.log2(np.maximum(freqs, 20.0) / centre)
            w = np.exp(-0.5 * (logf / width) ** 2) + 1e-3
        W[:, k] = w / w.sum()
    return RobotModel(W, R)


def _gating(n_frames_, frame_rate, rate, rng, off_level=0.03):
    """On/off movement envelope with exponential state durations."""
    if rate <= 0:
        return np.ones(n_frames_)
    env = np.empty(n_frames_)
    t, on = 0, True
    while t < n_frames_:
        dur = max(1, int(round(rng.exponential(1.0 / rate) * frame_rate)))
        env[t:t + dur] = 1.0 if on else off_level
        t += dur
        on = not on
    # short fades at movement onsets/offsets
    kernel = np.hanning(5)
    return np.convolve(np.pad(env, 2, mode="edge"), kernel / kernel.sum(), mode="valid")


def _complex_normal(rng, shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _synth_frames(spec):
    """Frame count for noise synthesised in the STFT domain.

    The clip is rendered with ``frame_len / hop`` extra frames on each side and
    cropped, so the samples kept never fall where the overlap-add envelope is
    nearly zero (an arbitrary STFT is not consistent, and dividing by that
    envelope would blow up the edges).
    """
    pad = spec.frame_len // spec.hop
    return n_frames(spec.n_samples, spec.frame_len, spec.hop) + 2 * pad


def _render_stft(coeffs, spec):
    """(M, F, T) STFT coefficients from :func:`_synth_frames` -> clip of the scene length."""
    start = (spec.frame_len // spec.hop) * spec.hop
    s = Spectrogram(coeffs, spec.frame_len, spec.hop, spec.sample_rate)
    out = istft(s).samples[:, start:start + spec.n_samples]
    return AudioClip(np.ascontiguousarray(out), spec.sample_rate)


def ego_activations(spec, rng, gating_rate=None):
    rate = spec.ego_gating_rate if gating_rate is None else gating_rate
    T = _synth_frames(spec)
    frame_rate = spec.sample_rate / spec.hop
    gate = _gating(T, frame_rate, rate, rng)
    if rate <= 0:
        levels = np.ones((spec.ego_atoms, 1))
        return levels * gate
    levels = rng.uniform(0.3, 1.0, (spec.ego_atoms, 1))
    wobble = 1 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.2, 1.0, (spec.ego_atoms, 1))
                              * np.arange(T) / frame_rate + rng.uniform(0, 2 * np.pi, (spec.ego_atoms, 1)))
    return levels * wobble * gate


def gen_ego_noise(spec, gating_rate=None, seed=None):
    """Ego-noise clip whose STFT follows ``R_f [W H]_ft`` for the robot model."""
    robot = robot_model(spec)
    rng = np.random.default_rng([spec.rng_seed if seed is None else seed, 1])
    H = ego_activations(spec, rng, gating_rate)
    v = robot.W @ H
    chol = np.linalg.cholesky(robot.R)
    n = _complex_normal(rng, (spec.n_freqs, H.shape[1], spec.n_channels))
    E = np.einsum("fmn,ftn->mft", chol, n) * np.sqrt(v)[None]
    return _render_stft(E, spec)


def env_profile(spec, rng):
    freqs = spec.freqs_hz()
    fc = rng.uniform(*spec.env_cutoff_hz)
    p = 1.0 / (1.0 + (freqs / fc) ** 2) + 0.02
    return p / p.sum()


def gen_env_noise(spec, seed=None):
    """Spatially diffuse (independent per channel) low-pass noise with slow
    amplitude modulation."""
    rng = np.random.default_rng([spec.rng_seed if seed is None else seed, 2])
    T = _synth_frames(spec)
    p = env_profile(spec, rng)
    t = np.arange(T) * spec.hop / spec.sample_rate
    mod = 1 + spec.env_modulation * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t
                                           + rng.uniform(0, 2 * np.pi))
    B = _complex_normal(rng, (spec.n_channels, spec.n_freqs, T)) * np.sqrt(p[:, None] * mod[None])[None]
    return _render_stft(B, spec)


# ------------------------------------------------------------------ speech

def _formant_envelope(freqs, formants, bandwidths, tilt_db_oct=-9.0):
    """Magnitude envelope (F,) from formant centres/bandwidths and a spectral tilt."""
    env = np.zeros_like(freqs)
    for fc, bw, gain in zip(formants, bandwidths, (1.0, 0.6, 0.35)):
        env += gain * np.exp(-0.5 * ((freqs - fc) / bw) ** 2)
    tilt = 10 ** (tilt_db_oct * np.log2(np.maximum(freqs, 100.0) / 100.0) / 20)
    return (env + 0.02) * tilt


def _draw_formants(rng):
    return (rng.uniform(300, 850), rng.uniform(900, 2300), rng.uniform(2400, 3400)), \
           (rng.uniform(60, 120), rng.uniform(80, 160), rng.uniform(120, 220))


def _segments(n_samples, sr, rng, voiced_only):
    """List of (kind, start, stop) covering the clip."""
    segs, pos = [], int(rng.uniform(0.0, 0.15) * sr)
    if voiced_only:
        return [("voiced", 0, n_samples)]
    while pos < n_samples:
        kind = rng.choice(["voiced", "voiced", "unvoiced", "pause"])
        dur = {"voiced": rng.uniform(0.15, 0.4), "unvoiced": rng.uniform(0.05, 0.15),
               "pause": rng.uniform(0.05, 0.25)}[kind]
        stop = min(n_samples, pos + int(dur * sr))
        segs.append((kind, pos, stop))
        pos = stop
    if all(kind == "pause" for kind, _, _ in segs):
        # a very short clip may draw only pauses; keep it audible
        return [("voiced", 0, n_samples)]
    return segs


def _ramp(n, sr, fade=0.01):
    r = np.ones(n)
    k = min(n // 2, int(fade * sr))
    if k > 0:
        w = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        r[:k] = w
        r[n - k:] = w[::-1]
    return r


def dry_speech(spec, seed=None):
    """Mono harmonic speech surrogate (1-D array)."""
    rng = np.random.default_rng([spec.rng_seed if seed is None else seed, 3])
    sr, n = spec.sample_rate, spec.n_samples
    x = np.zeros(n)
    lo, hi = spec.pitch_range
    for kind, a, b in _segments(n, sr, rng, spec.voiced_only):
        m = b - a
        if m <= 1 or kind == "pause":
            continue
        formants0, bws = _draw_formants(rng)
        formants1, _ = _draw_formants(rng)
        if kind == "voiced":
            f_start = rng.uniform(lo, hi)
            drift = 0.0 if spec.voiced_only else rng.uniform(-spec.pitch_drift, spec.pitch_drift)
            f0 = f_start * (1 + drift * np.linspace(0, 1, m))
            phase = 2 * np.pi * np.cumsum(f0) / sr
            n_harm = int(0.5 * sr / max(f0.max(), 1.0))
            # envelope on a coarse grid of 8 points along the segment
            grid = np.linspace(0, 1, 8)
            seg = np.zeros(m)
            pos = np.linspace(0, 1, m)
            for k in range(1, n_harm + 1):
                amps = []
                for gpt in grid:
                    fm = [(1 - gpt) * p0 + gpt * p1 for p0, p1 in zip(formants0, formants1)]
                    fk = k * f_start * (1 + drift * gpt)
                    amps.append(_formant_envelope(np.array([fk]), fm, bws)[0])
                seg += np.interp(pos, grid, amps) * np.sin(k * phase)
            seg *= 1 + 0.2 * np.sin(np.pi * pos)
        else:
            noise = rng.standard_normal(m + spec.frame_len)
            spec_n = np.fft.rfft(noise)
            f = np.fft.rfftfreq(len(noise), 1 / sr)
            centre = rng.uniform(3000, 6000)
            shape = np.exp(-0.5 * ((f - centre) / rng.uniform(800, 2000)) ** 2) + 0.05
            seg = np.fft.irfft(spec_n * shape, n=len(noise))[:m] * 0.3
        x[a:b] += seg * _ramp(m, sr)
    x += 1e-4 * np.std(x) * rng.standard_normal(n)
    return x / np.sqrt(np.mean(x ** 2))


def _fractional_delay(x, freqs_fn, steer_fn, pad):
    X = np.fft.rfft(np.pad(x, (0, pad)))
    f = freqs_fn(len(x) + pad)
    return np.fft.irfft(X[None, :] * steer_fn(f).T, n=len(x) + pad)[:, :len(x)]


def gen_speech(spec, seed=None):
    """Speech surrogate rendered to M channels through a per-scene steering vector."""
    if spec.duration <= 0:
        raise ValueError("duration must be positive")
    x = dry_speech(spec, seed)
    rng = np.random.default_rng([spec.rng_seed if seed is None else seed, 4])
    delays = rng.uniform(-4e-4, 4e-4, spec.n_channels)
    delays -= delays[0]
    gains = rng.uniform(0.8, 1.2, spec.n_channels)
    gains /= gains[0]
    pad = spec.frame_len
    out = _fractional_delay(
        x, lambda n: np.fft.rfftfreq(n, 1 / spec.sample_rate),
        lambda f: gains * np.exp(-2j * np.pi * f[:, None] * delays[None, :]), pad)
    return AudioClip(out, spec.sample_rate)


# ------------------------------------------------------------------ mixing

def power(x):
    x = np.asarray(x.samples if isinstance(x, AudioClip) else x)
    return float(np.mean(x ** 2))


def snr_db(signal, noise):
    return 10 * np.log10(power(signal) / power(noise))


def mix_at_snr(speech, noise, snr):
    """Scale ``noise`` so that ``10 log10(P_speech / P_noise) = snr``."""
    s = speech.samples if isinstance(speech, AudioClip) else np.asarray(speech, float)
    nz = noise.samples if isinstance(noise, AudioClip) else np.asarray(noise, float)
    if s.shape != nz.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {nz.shape}")
    ps, pn = power(s), power(nz)
    if ps == 0 or pn == 0:
        raise ValueError("speech and noise stems must be non-silent")
    scaled = nz * np.sqrt(ps / (pn * 10 ** (snr / 10)))
    sr = speech.sample_rate if isinstance(speech, AudioClip) else 16000
    return AudioClip(s + scaled, sr), AudioClip(scaled, sr)


def make_scene(spec):
    """One scene from ``spec``; ``spec.snr_env_db=None`` gives the Ego scenario."""
    speech = gen_speech(spec)
    _, ego = mix_at_snr(speech, gen_ego_noise(spec), spec.snr_ego_db)
    if spec.snr_env_db is None:
        env = AudioClip(np.zeros_like(speech.samples), spec.sample_rate)
    else:
        _, env = mix_at_snr(speech, gen_env_noise(spec), spec.snr_env_db)
    mixture = AudioClip(speech.samples + ego.samples + env.samples, spec.sample_rate)
    meta = {"seed": spec.rng_seed, "snr_ego_db": spec.snr_ego_db,
            "snr_env_db": spec.snr_env_db,
            "input_snr_db": snr_db(speech, AudioClip(ego.samples + env.samples))}
    return Scene(mixture, speech, ego, env, meta)


SCENARIOS = ("Ego", "EgoEnv")


def build_testset(n_scenes, scenario, seed, base=None, snr_ego_db=None):
    """``n_scenes`` scenes; ego SNR drawn from -5..5 dB unless ``snr_ego_db`` is
    given, environmental noise at 0 dB for the EgoEnv scenario."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    base = base or SceneSpec()
    rng = np.random.default_rng([seed, 5])
    scenes = []
    for i in range(n_scenes):
        scene_seed = int(rng.integers(2 ** 31))
        snr = float(rng.choice(SNR_CHOICES)) if snr_ego_db is None else float(snr_ego_db)
        spec = replace(base, rng_seed=scene_seed, snr_ego_db=snr,
                       snr_env_db=0.0 if scenario == "EgoEnv" else None)
        scene = make_scene(spec)
        scene.meta.update(scene_id=f"{scenario}_{i:04d}", scenario=scenario)
        scenes.append(scene)
    avg = np.mean([s.meta["input_snr_db"] for s in scenes])
    logger.info("%s test set: %d scenes, average input SNR %.2f dB", scenario, n_scenes, avg)
    return scenes


def ego_training_clip(base=None, duration=30.0, gating_rate=0.5, seed=99):
    """Ego-noise-only recording for pre-training (slower movements than test)."""
    base = base or SceneSpec()
    spec = replace(base, duration=duration, rng_seed=seed)
    return gen_ego_noise(spec, gating_rate=gating_rate)


def speech_corpus(n_utterances, seed, base=None):
    """Mono dry speech surrogates for VAE training."""
    base = base or SceneSpec()
    rng = np.random.default_rng([seed, 6])
    return [AudioClip(dry_speech(replace(base, rng_seed=int(rng.integers(2 ** 31)))),
                      base.sample_rate) for _ in range(n_utterances)]


# ------------------------------------------------------------- persistence

MANIFEST_COLUMNS = ("scene_id", "scenario", "seed", "snr_ego_db", "snr_env_db",
                    "mixture", "speech", "ego", "env")


def _fmt(v):
    return "none" if v is None else (f"{v:g}" if isinstance(v, float) else str(v))


def save_testset(scenes, out_dir, manifest_name="manifest.tsv"):
    """Write float32 WAV stems and a tab-separated manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for sc in scenes:
        sid = sc.meta["scene_id"]
        names = {}
        for stem in ("mixture", "speech", "ego", "env"):
            names[stem] = f"{sid}_{stem}.wav"
            write_wav(os.path.join(out_dir, names[stem]), getattr(sc, stem))
        rows.append([sid, sc.meta["scenario"], sc.meta["seed"], sc.meta["snr_ego_db"],
                     sc.meta["snr_env_db"]] + [names[s] for s in ("mixture", "speech", "ego", "env")])
    path = os.path.join(out_dir, manifest_name)
    avg = np.mean([sc.meta["input_snr_db"] for sc in scenes])
    with open(path, "w") as fh:
        fh.write(f"# egonoise scene manifest v{MANIFEST_VERSION}\n")
        fh.write(f"# average_input_snr_db={avg:.2f}\n")
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for r in rows:
            fh.write("\t".join(_fmt(v) for v in r) + "\n")
    return path


def read_manifest(path):
    """Rows of the manifest as dicts; stem paths are made absolute."""
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("# egonoise scene manifest v"):
        raise ValueError(f"{path}: not a scene manifest")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != MANIFEST_VERSION:
        raise ValueError(f"{path}: unsupported manifest version {version}")
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    header = body[0].split("\t")
    rows = []
    for ln in body[1:]:
        row = dict(zip(header, ln.split("\t")))
        for stem in ("mixture", "speech", "ego", "env"):
            row[stem] = os.path.join(base, row[stem])
        rows.append(row)
    return rows


def load_scene(row):
    clips = {stem: read_wav(row[stem]) for stem in ("mixture", "speech", "ego", "env")}
    return Scene(**clips, meta=dict(row))
