"""Run configuration: INI file with sections, overridable from the command line.

Example::

    [run]
    seed = 0
    workers = 1

    [scenes]
    scenario = EgoEnv
    n_scenes = 10

    [mcem]
    scheme = partial
    dict_size = 96
    em_iters = 30

Unknown sections or keys are rejected so that typos fail loudly.
"""
import configparser
import math
import os
from dataclasses import dataclass, field, fields, replace

from .mcem import ConfigError, SchemeConfig
from .scenes import SCENARIOS, SceneSpec
from .vae import TrainingConfig


@dataclass
class Paths:
    out: str = "out"
    vae: str = None  # default: <out>/vae.ckpt
    ego_dir: str = None  # default: <out>
    manifest: str = None  # default: <out>/scenes/manifest.tsv
    enhanced: str = None  # default: <out>/enhanced


@dataclass
class DataConfig:
    scenario: str = "EgoEnv"
    n_scenes: int = 10
    duration: float = 3.0
    snr_ego_db: float = None  # None -> drawn per scene from -5..5 dB
    speech_utterances: int = 60  # VAE training corpus
    ego_duration: float = 20.0  # ego-only training clip
    ego_gating_rate: float = 0.5
    ego_sweeps: int = 200
    vae_latent_dim: int = 16


@dataclass
class McemOptions:
    schemes: tuple = ("fixed", "adaptive", "partial")
    dict_sizes: tuple = (96,)
    em_iters: int = 30
    R_samples: int = 10
    burn_in: int = 30
    mh_proposal_std: float = None
    tol: float = 1e-4
    tol_window: int = 5


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    paths: Paths = field(default_factory=Paths)
    data: DataConfig = field(default_factory=DataConfig)
    mcem: McemOptions = field(default_factory=McemOptions)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def scheme_config(self, scheme, K):
        m = self.mcem
        return SchemeConfig(scheme, K, em_iters=m.em_iters, R_samples=m.R_samples,
                            burn_in=m.burn_in, mh_proposal_std=m.mh_proposal_std,
                            rng_seed=self.seed, tol=m.tol, tol_window=m.tol_window)

    def scene_spec(self):
        return SceneSpec(duration=self.data.duration)

    def path(self, name):
        p = getattr(self.paths, name)
        if p is not None:
            return p
        out = self.paths.out
        return {"vae": os.path.join(out, "vae.ckpt"), "ego_dir": out,
                "manifest": os.path.join(out, "scenes", "manifest.tsv"),
                "enhanced": os.path.join(out, "enhanced")}.get(name, out)

    def validate(self):
        """Reject inconsistent settings before any compute starts."""
        if self.data.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.data.scenario!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.data.n_scenes < 1:
            raise ConfigError("n_scenes must be >= 1")
        if self.data.snr_ego_db is not None and not math.isfinite(self.data.snr_ego_db):
            raise ConfigError("snr_ego_db must be finite")
        for scheme in self.mcem.schemes:
            for K in self.mcem.dict_sizes:
                self.scheme_config(scheme, K)
        try:
            self.scene_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _split_list(text, conv):
    return tuple(conv(v) for v in text.replace(",", " ").split())


def _none_or(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


_SECTIONS = {
    "run": (None, {"seed": int, "workers": int}),
    "paths": ("paths", {f.name: _none_or(str) for f in fields(Paths)}),
    "scenes": ("data", {"scenario": str, "n_scenes": int, "duration": float,
                        "snr_ego_db": _none_or(float)}),
    "train": ("data", {"speech_utterances": int, "ego_duration": float,
                       "ego_gating_rate": float, "ego_sweeps": int, "vae_latent_dim": int}),
    "vae": ("training", {"learning_rate": float, "batch_size": int, "max_epochs": int,
                         "patience": int, "validation_fraction": float}),
    "mcem": ("mcem", {"schemes": lambda s: _split_list(s, str), "scheme": lambda s: _split_list(s, str),
                      "dict_sizes": lambda s: _split_list(s, int),
                      "dict_size": lambda s: _split_list(s, int),
                      "em_iters": int, "R_samples": int, "burn_in": int,
                      "mh_proposal_std": _none_or(float), "tol": float, "tol_window": int}),
}
_ALIASES = {"scheme": "schemes", "dict_size": "dict_sizes"}


def load_config(path=None, overrides=None):
    """Build a :class:`RunConfig` from an INI file and a dict of overrides.

    ``overrides`` maps ``"section.key"`` to already-parsed values (the CLI
    flags). Raises :class:`ConfigError` for unknown keys or bad values.
    """
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            target, keys = _SECTIONS[section]
            for key, raw in parser.items(section):
                if key not in keys:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                try:
                    value = keys[key](raw)
                except ValueError as exc:
                    raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
                cfg = _set(cfg, target, _ALIASES.get(key, key), value)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split(".")
        target = _SECTIONS[section][0]
        cfg = _set(cfg, target, _ALIASES.get(key, key), value)
    return cfg.validate()


def _set(cfg, target, key, value):
    if target is None:
        return replace(cfg, **{key: value})
    try:
        sub = replace(getattr(cfg, target), **{key: value})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return replace(cfg, **{target: sub})
