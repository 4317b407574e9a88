"""STFT analysis/synthesis and multichannel WAV I/O.

The analysis window is a periodic Hann window; synthesis is weighted
overlap-add normalised by the summed squared window, which gives perfect
reconstruction wherever the squared-window envelope is nonzero.
"""
from dataclasses import dataclass
import struct

import numpy as np

from ._validation import check_finite

DEFAULT_SR = 16000
DEFAULT_FRAME_LEN = 1024  # 64 ms at 16 kHz
DEFAULT_HOP = 256  # 25 % of the frame
ENVELOPE_FLOOR = 1e-2  # relative to the full-overlap envelope


@dataclass
class AudioClip:
    """Multichannel audio, ``samples`` has shape (channels, n_samples)."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SR

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"samples must be (channels, n), got {x.shape}")
        check_finite(x, "audio samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = x

    @property
    def n_channels(self):
        return self.samples.shape[0]

    def __len__(self):
        return self.samples.shape[1]

    def channel(self, m):
        return AudioClip(self.samples[m:m + 1], self.sample_rate)


@dataclass
class Spectrogram:
    """Complex one-sided STFT, ``coeffs`` has shape (channels, freqs, frames).

    ``length`` is the original signal length in samples, used by
    :func:`istft` to trim the zero-padded tail.
    """

    coeffs: np.ndarray
    frame_len: int = DEFAULT_FRAME_LEN
    hop: int = DEFAULT_HOP
    sample_rate: int = DEFAULT_SR
    length: int = None

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim == 2:
            c = c[None]
        if c.ndim != 3:
            raise ValueError(f"coeffs must be (channels, freqs, frames), got {c.shape}")
        if c.shape[1] != self.frame_len // 2 + 1:
            raise ValueError(
                f"{c.shape[1]} frequency bins inconsistent with frame_len={self.frame_len}")
        if self.hop <= 0 or self.hop > self.frame_len or self.frame_len % self.hop:
            raise ValueError(f"hop={self.hop} must divide frame_len={self.frame_len}")
        check_finite(c, "spectrogram")
        self.coeffs = c

    @property
    def shape(self):
        return self.coeffs.shape

    def power(self):
        return np.abs(self.coeffs) ** 2


def hann(n):
    """Periodic Hann window of length ``n``."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def n_frames(n_samples, frame_len, hop):
    return int(np.ceil(max(n_samples - frame_len, 0) / hop)) + 1


def _frame_index(T, frame_len, hop):
    return np.arange(T)[:, None] * hop + np.arange(frame_len)[None, :]


def stft(clip, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """Hann-windowed one-sided STFT of every channel of ``clip``.

    The tail is zero-padded to complete the final frame.
    """
    if not isinstance(clip, AudioClip):
        clip = AudioClip(clip)
    if hop > frame_len or hop <= 0:
        raise ValueError(f"hop={hop} must be in (0, frame_len={frame_len}]")
    x = clip.samples
    n = x.shape[1]
    if n == 0:
        raise ValueError("cannot transform an empty clip")
    T = n_frames(n, frame_len, hop)
    padded = np.zeros((x.shape[0], (T - 1) * hop + frame_len))
    padded[:, :n] = x
    frames = padded[:, _frame_index(T, frame_len, hop)] * hann(frame_len)
    coeffs = np.fft.rfft(frames, axis=-1).transpose(0, 2, 1)
    return Spectrogram(coeffs, frame_len, hop, clip.sample_rate, n)


def wola_envelope(T, frame_len, hop):
    win = hann(frame_len)
    env = np.zeros((T - 1) * hop + frame_len)
    np.add.at(env, _frame_index(T, frame_len, hop), np.broadcast_to(win ** 2, (T, frame_len)))
    return env


def istft(spec):
    """Weighted overlap-add inverse of :func:`stft`."""
    M, F, T = spec.coeffs.shape
    L, hop = spec.frame_len, spec.hop
    if F != L // 2 + 1:
        raise ValueError("inconsistent frame metadata")
    frames = np.fft.irfft(spec.coeffs.transpose(0, 2, 1), n=L, axis=-1) * hann(L)
    out = np.zeros((M, (T - 1) * hop + L))
    idx = _frame_index(T, L, hop)
    for m in range(M):
        np.add.at(out[m], idx, frames[m])
    # Outside the fully overlapped interior the envelope falls towards zero.
    # Flooring it keeps a consistent STFT exact wherever the envelope is above
    # the floor and stops filtered (inconsistent) STFTs blowing up at the edges.
    env = wola_envelope(T, L, hop)
    out /= np.maximum(env, ENVELOPE_FLOOR * env.max())
    if spec.length is not None:
        out = out[:, :spec.length]
    return AudioClip(out, spec.sample_rate)


def interior(n_samples, frame_len=DEFAULT_FRAME_LEN, hop=DEFAULT_HOP):
    """Slice of samples covered by the full number of overlapping frames."""
    edge = frame_len - hop
    return slice(edge, max(edge, n_samples - edge))


# --------------------------------------------------------------------- WAV

class WavFormatError(ValueError):
    """Malformed or unsupported RIFF/WAVE data."""


_PCM, _FLOAT, _EXTENSIBLE = 1, 3, 0xFFFE


def read_wav(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise WavFormatError(f"{path}: missing RIFF header")
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos, fmt, payload = 12, None, None
    while pos + 8 <= len(data):
        cid, size = struct.unpack("<4sI", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavFormatError(f"{path}: truncated 'fmt ' chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == _EXTENSIBLE:
                if len(body) < 26:
                    raise WavFormatError(f"{path}: truncated extensible 'fmt ' chunk")
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise WavFormatError(
                    f"{path}: truncated 'data' chunk ({len(body)} of {size} bytes)")
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavFormatError(f"{path}: missing 'fmt ' chunk")
    if payload is None:
        raise WavFormatError(f"{path}: missing 'data' chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag == _PCM and bits == 16:
        x = np.frombuffer(payload[:len(payload) // 2 * 2], dtype="<i2") / 32768.0
    elif tag == _FLOAT and bits == 32:
        x = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<f4").astype(float)
    else:
        raise WavFormatError(f"{path}: unsupported encoding (format {tag}, {bits} bit)")
    x = x[:len(x) // channels * channels]
    return AudioClip(x.reshape(-1, channels).T.copy(), rate)


def write_wav(path, clip, subtype="float"):
    """Write ``clip`` as interleaved PCM16 (``subtype="pcm16"``) or float32."""
    x = clip.samples.T
    M = clip.n_channels
    if subtype == "pcm16":
        raw = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits, fmt_extra, extra = _PCM, 16, b"", b""
    elif subtype == "float":
        raw = x.astype("<f4").tobytes()
        tag, bits, fmt_extra = _FLOAT, 32, struct.pack("<H", 0)
        extra = b"fact" + struct.pack("<II", 4, x.shape[0])
    else:
        raise ValueError(f"unknown subtype {subtype!r}")
    block = M * bits // 8
    fmt = struct.pack("<HHIIHH", tag, M, int(clip.sample_rate),
                      int(clip.sample_rate) * block, block, bits) + fmt_extra
    chunks = (b"fmt " + struct.pack("<I", len(fmt)) + fmt + extra
              + b"data" + struct.pack("<I", len(raw)) + raw + b"\0" * (len(raw) & 1))
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
