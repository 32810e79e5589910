"""Audio loading, resampling, segmentation and leakage-free dataset splits."""

import csv
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
SEGMENT_SECONDS = 5.0
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
TAPS_PER_PHASE = 64
KAISER_BETA = 8.0

MANIFEST_COLUMNS = ["path", "label", "class_name"]
SPLIT_COLUMNS = MANIFEST_COLUMNS + ["split", "start_offset_s"]


class AudioFormatError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""
    class_label: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("samples must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class AudioSegment:
    samples: np.ndarray
    sample_rate: int
    origin: tuple          # (source_id, start_offset seconds)
    class_label: int = 0
    duration: float = SEGMENT_SECONDS

    @property
    def source_id(self):
        return self.origin[0]

    @property
    def start_offset(self):
        return self.origin[1]


def load_wav(path, class_label=0):
    """Read a PCM-16 or float-32 RIFF/WAVE file as mono samples in [-1, 1]."""
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError, struct.error) as exc:
        raise AudioFormatError(f"unsupported encoding: {path} ({exc})") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"unsupported encoding: {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise AudioFormatError(f"zero-length payload: {path}")
    return AudioBuffer(samples, int(rate), source_id=str(path), class_label=class_label)


def write_wav(path, samples, sample_rate, pcm16=False):
    samples = np.asarray(samples)
    if pcm16:
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    else:
        data = samples.astype(np.float32)
    wavfile.write(path, sample_rate, data)


@lru_cache(maxsize=16)
def _polyphase_filter(up, down):
    # Kaiser-windowed sinc, TAPS_PER_PHASE taps in every polyphase branch
    numtaps = TAPS_PER_PHASE * up + 1
    return firwin(numtaps, 1.0 / max(up, down), window=("kaiser", KAISER_BETA))


def resample(buf, target_rate=SAMPLE_RATE):
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), buf.sample_rate, buf.source_id, buf.class_label)
    ratio = Fraction(int(target_rate), int(buf.sample_rate))
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(buf.samples.size * target_rate / buf.sample_rate))
    if n_out == 0:
        raise ValueError("resampled signal would be empty")
    y = resample_poly(buf.samples, up, down, window=_polyphase_filter(up, down))
    y = y[:n_out]
    if y.size < n_out:
        y = np.pad(y, (0, n_out - y.size))
    return AudioBuffer(y, int(target_rate), buf.source_id, buf.class_label)


def segment(buf, seconds=SEGMENT_SECONDS):
    """Cut into consecutive non-overlapping segments; the short tail is dropped."""
    if buf.sample_rate != SAMPLE_RATE:
        raise ValueError(f"segment expects {SAMPLE_RATE} Hz audio, got {buf.sample_rate}")
    width = int(round(seconds * buf.sample_rate))
    count = buf.samples.size // width
    return [
        AudioSegment(
            samples=buf.samples[i * width:(i + 1) * width].copy(),
            sample_rate=buf.sample_rate,
            origin=(buf.source_id, i * width / buf.sample_rate),
            class_label=buf.class_label,
            duration=seconds,
        )
        for i in range(count)
    ]


@dataclass
class SplitEntry:
    source_id: str
    start_offset_s: float
    label: int
    class_name: str
    split: str


@dataclass
class SplitManifest:
    entries: list
    warnings: list = field(default_factory=list)
    fractions: tuple = SPLIT_FRACTIONS

    def select(self, split):
        return [e for e in self.entries if e.split == split]


def split_counts(n, fractions=SPLIT_FRACTIONS):
    """(train, val, test) counts for one source: floor for train/val, remainder to test."""
    if n < 3:
        return n, 0, 0
    n_train = math.floor(n * fractions[0])
    n_val = math.floor(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def split_by_time(segments, class_names=None):
    """Split each source recording along its own timeline (train, then val, then test)."""
    by_source = {}
    for seg in segments:
        by_source.setdefault(seg.source_id, []).append(seg)
    entries, warnings = [], []
    for source, segs in by_source.items():
        segs = sorted(segs, key=lambda s: s.start_offset)
        n_train, n_val, _ = split_counts(len(segs))
        if len(segs) < 3:
            msg = f"{source}: only {len(segs)} segment(s); all assigned to train"
            log.warning(msg)
            warnings.append(msg)
        for i, seg in enumerate(segs):
            split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
            name = class_names.get(seg.class_label, "") if class_names else ""
            entries.append(SplitEntry(source, seg.start_offset, seg.class_label, name, split))
    return SplitManifest(entries, warnings)


@dataclass
class ManifestRow:
    path: str
    label: int
    class_name: str
    split: str = ""
    start_offset_s: float = 0.0


def read_manifest(path):
    """Read a `path,label,class_name` manifest; split columns are optional.

    Relative paths are resolved against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"manifest {path} lacks columns {missing}")
        for r in reader:
            p = r["path"]
            if not os.path.isabs(p):
                p = os.path.join(base, p)
            rows.append(ManifestRow(
                path=p,
                label=int(r["label"]),
                class_name=r["class_name"],
                split=(r.get("split") or "").strip(),
                start_offset_s=float(r.get("start_offset_s") or 0.0),
            ))
    return rows


def write_split_manifest(path, manifest, paths=None, relative_to=None):
    """Write a SplitManifest as CSV with `split,start_offset_s` appended to the base columns.

    `paths` maps source_id to the file path to record (defaults to the source id).
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SPLIT_COLUMNS)
        for e in manifest.entries:
            p = (paths or {}).get(e.source_id, e.source_id)
            if relative_to:
                p = os.path.relpath(p, relative_to)
            w.writerow([p, e.label, e.class_name, e.split, repr(float(e.start_offset_s))])


def load_segments(row, seconds=SEGMENT_SECONDS):
    """Load one manifest row, resample to 16 kHz and segment it.

    A row that carries a split column refers to a single segment at its
    start offset; a plain row expands to every segment of the recording.
    """
    buf = load_wav(row.path, class_label=row.label)
    buf = resample(buf, SAMPLE_RATE)
    segs = segment(buf, seconds)
    if row.split:
        segs = [s for s in segs if abs(s.start_offset - row.start_offset_s) < 1e-9]
    return segs
