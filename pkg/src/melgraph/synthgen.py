"""Deterministic synthetic ship-noise generator for desk-scale experiments.

A sample is a sum of tonal lines with random phases plus AR(2)-shaped
Gaussian broadband noise, scaled to a tonal-to-broadband SNR, multiplied by
a propeller-style envelope ``1 + depth * sin(2 pi rate t)`` and peak
normalised to 0.9.
"""

import csv
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.signal import lfilter

from .audio_io import SAMPLE_RATE, SPLIT_COLUMNS, AudioSegment, write_wav

log = logging.getLogger(__name__)

PEAK = 0.9


@dataclass
class ClassSpec:
    name: str
    tonal_hz: list = field(default_factory=list)
    tonal_amp: list = field(default_factory=list)
    mod_rate_hz: float = 0.0
    mod_depth: float = 0.0
    ar_radius: float = 0.0      # AR(2) pole radius, 0 gives white noise
    ar_angle_hz: float = 0.0    # AR(2) pole angle expressed in Hz
    snr_db: float = 10.0        # tonal / broadband power; inf disables the noise
    freq_jitter: float = 0.0    # relative per-sample jitter of the tonal lines

    def validate(self, sr=SAMPLE_RATE):
        if len(self.tonal_hz) != len(self.tonal_amp):
            raise ValueError(f"{self.name}: tonal_hz and tonal_amp differ in length")
        if any(not 0 < f < sr / 2 for f in self.tonal_hz):
            raise ValueError(f"{self.name}: tonal lines must lie in (0, Nyquist)")
        if not 0.0 <= self.mod_depth <= 1.0:
            raise ValueError(f"{self.name}: mod_depth must lie in [0, 1]")
        if not 0.0 <= self.ar_radius < 1.0:
            raise ValueError(f"{self.name}: ar_radius must lie in [0, 1)")
        if not self.tonal_hz and np.isinf(self.snr_db):
            raise ValueError(f"{self.name}: no tonals and no noise")


DEFAULT_PRESET = [
    ClassSpec("A", [60.0, 120.0, 180.0], [1.0, 0.6, 0.4], 4.0, 0.5, 0.95, 300.0, 10.0, 0.01),
    ClassSpec("B", [100.0, 300.0], [1.0, 0.7], 7.0, 0.5, 0.90, 1500.0, 10.0, 0.01),
    ClassSpec("C", [250.0, 500.0, 750.0], [1.0, 0.8, 0.5], 10.0, 0.5, 0.90, 3000.0, 10.0, 0.01),
    ClassSpec("D", [400.0], [1.0], 13.0, 0.5, 0.85, 5000.0, 10.0, 0.01),
]

PRESETS = {"default": DEFAULT_PRESET}


def gen_sample(spec, seconds=5.0, sr=SAMPLE_RATE, seed=0, label=0, source_id=""):
    spec.validate(sr)
    rng = np.random.default_rng(seed)
    n = int(round(seconds * sr))
    t = np.arange(n) / sr
    tonal = np.zeros(n)
    for f, a in zip(spec.tonal_hz, spec.tonal_amp):
        f = f * (1.0 + spec.freq_jitter * rng.uniform(-1.0, 1.0))
        tonal += a * np.cos(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    x = tonal
    if not np.isinf(spec.snr_db):
        theta = 2 * np.pi * spec.ar_angle_hz / sr
        r = spec.ar_radius
        noise = lfilter([1.0], [1.0, -2 * r * np.cos(theta), r * r], rng.standard_normal(n))
        if spec.tonal_hz:
            target = np.mean(tonal ** 2) / 10 ** (spec.snr_db / 10)
            noise *= np.sqrt(target / np.mean(noise ** 2))
        x = tonal + noise
    if spec.mod_depth > 0:
        phase = rng.uniform(0, 2 * np.pi)
        x = x * (1.0 + spec.mod_depth * np.sin(2 * np.pi * spec.mod_rate_hz * t + phase))
    peak = np.max(np.abs(x))
    if peak > 0:
        x = x * (PEAK / peak)
    return AudioSegment(samples=x, sample_rate=sr, origin=(source_id, 0.0),
                        class_label=label, duration=seconds)


def sample_seed(master_seed, label, index):
    return np.random.SeedSequence([int(master_seed), int(label), int(index)])


def generate(specs, n_per_class, seed=0, seconds=5.0):
    """In-memory dataset: list of AudioSegment ordered by class then index."""
    out = []
    for label, spec in enumerate(specs):
        for i in range(n_per_class):
            sid = f"{spec.name}_{i:04d}"
            out.append(gen_sample(spec, seconds, seed=sample_seed(seed, label, i),
                                  label=label, source_id=sid))
    return out


def class_separation(segments, n_classes):
    """Smallest between-class-mean distance vs largest within-class spread of time-averaged log-Mel vectors."""
    from .features import mel_spectrogram

    vecs = {c: [] for c in range(n_classes)}
    for seg in segments:
        spec = mel_spectrogram(seg.samples)
        n_frames = 1 + (seg.samples.size - 400) // 160
        vecs[seg.class_label].append(spec[:n_frames].mean(axis=0))
    means = {c: np.mean(v, axis=0) for c, v in vecs.items() if v}
    spread = max(np.sqrt(np.mean(np.sum((np.array(v) - means[c]) ** 2, axis=1)))
                 for c, v in vecs.items() if v)
    labels = sorted(means)
    between = min(np.linalg.norm(means[a] - means[b])
                  for i, a in enumerate(labels) for b in labels[i + 1:])
    return {"min_between": float(between), "max_within": float(spread),
            "separated": bool(between > spread)}


def gen_dataset(specs, n_per_class, seed, out_dir, splits=None, seconds=5.0):
    """Write WAV files and a manifest; returns the manifest path.

    Without ``splits`` the manifest has columns ``path,label,class_name``.
    With ``splits=(n_train, n_val, n_test)`` (summing to n_per_class) each
    row also carries ``split,start_offset_s`` so the split is fixed.
    """
    if splits is not None and sum(splits) != n_per_class:
        raise ValueError("splits must sum to n_per_class")
    os.makedirs(out_dir, exist_ok=True)
    segments = generate(specs, n_per_class, seed, seconds)
    rows = []
    for seg in segments:
        fname = f"{seg.source_id}.wav"
        write_wav(os.path.join(out_dir, fname), seg.samples, seg.sample_rate)
        i = int(seg.source_id.rsplit("_", 1)[1])
        split = ""
        if splits is not None:
            split = "train" if i < splits[0] else "val" if i < splits[0] + splits[1] else "test"
        rows.append([fname, seg.class_label, specs[seg.class_label].name, split, "0.0"])
    manifest = os.path.join(out_dir, "manifest.csv")
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        if splits is None:
            w.writerow(SPLIT_COLUMNS[:3])
            w.writerows(r[:3] for r in rows)
        else:
            w.writerow(SPLIT_COLUMNS)
            w.writerows(rows)
    sep = class_separation(segments, len(specs))
    if not sep["separated"]:
        log.warning("class means are not separated beyond within-class spread: %s", sep)
    with open(os.path.join(out_dir, "dataset.json"), "w", encoding="utf-8") as fh:
        json.dump({"seed": seed, "n_per_class": n_per_class, "splits": splits,
                   "classes": [asdict(s) for s in specs], "separation": sep}, fh, indent=2)
    return manifest


def file_checksum(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()
