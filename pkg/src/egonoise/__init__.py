"""Multichannel speech enhancement against robot ego-noise and ambient noise.

A VAE speech prior and a partially pre-trained multichannel NMF noise model
are fitted to a mixture with Monte Carlo EM; speech is then extracted with a
multichannel Wiener filter.
"""
from .dsp import AudioClip, Spectrogram, istft, read_wav, stft, write_wav
from .mcem import MCEMEnhancer, SchemeConfig, build_joint_model, run_mcem
from .metrics import MetricReport, aggregate, si_sdr
from .mnmf import EgoNoiseMNMF, train_ego
from .vae import SpeechVAE
from .wiener import wiener_filter

__all__ = ["AudioClip", "Spectrogram", "stft", "istft", "read_wav", "write_wav",
           "SpeechVAE", "EgoNoiseMNMF", "train_ego", "SchemeConfig", "build_joint_model",
           "run_mcem", "MCEMEnhancer", "wiener_filter", "si_sdr", "aggregate", "MetricReport"]
