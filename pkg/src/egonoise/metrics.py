"""Scale-invariant SDR and confidence-interval aggregation."""
from dataclasses import dataclass, field

import numpy as np

from .dsp import AudioClip

SI_SDR_CAP = 100.0


def _mono(x):
    if isinstance(x, AudioClip):
        return x.samples[0]
    x = np.asarray(x, dtype=float)
    return x[0] if x.ndim == 2 else x


def si_sdr(reference, estimate):
    """SI-SDR in dB; capped at +100 dB when the residual vanishes.

    Multichannel inputs are reduced to channel 0.
    """
    r, e = _mono(reference), _mono(estimate)
    if r.shape != e.shape:
        raise ValueError(f"length mismatch: {r.shape} vs {e.shape}")
    rr = np.dot(r, r)
    if rr == 0:
        raise ValueError("reference signal is all zeros")
    target = (np.dot(e, r) / rr) * r
    resid = e - target
    num, den = np.dot(target, target), np.dot(resid, resid)
    if den <= num * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * np.log10(num / den))


@dataclass
class MetricReport:
    label: str
    input_sdr: list = field(default_factory=list)
    output_sdr: list = field(default_factory=list)
    scene_ids: list = field(default_factory=list)

    @property
    def deltas(self):
        return np.asarray(self.output_sdr) - np.asarray(self.input_sdr)

    @property
    def n(self):
        return len(self.deltas)

    def add(self, scene_id, input_db, output_db):
        self.scene_ids.append(scene_id)
        self.input_sdr.append(float(input_db))
        self.output_sdr.append(float(output_db))

    def summary(self):
        """Mean and 95 % half-width for input, output and improvement."""
        return {name: aggregate(vals) for name, vals in
                (("input", self.input_sdr), ("output", self.output_sdr),
                 ("delta", self.deltas))}


def aggregate(values):
    """Mean and 95 % half-width ``1.96 sd / sqrt(n)`` (population sd)."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        raise ValueError("need at least two values to aggregate")
    return float(v.mean()), float(1.96 * v.std() / np.sqrt(v.size))
