"""Log-Mel spectrogram front end, normalisation, SpecAugment and feature caches.

Pipeline for a 5 s, 16 kHz segment: pre-emphasis (0.97) -> 400-sample frames
every 160 samples -> periodic Hann window -> 512-point power spectrum ->
128-band triangular Mel filterbank -> natural log with a 1e-10 floor ->
pad in time to 512 frames.
"""

import struct
from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
FRAME_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_MELS = 128
N_FRAMES = 512
LOG_FLOOR = 1e-10
LOG_FLOOR_VALUE = float(np.log(LOG_FLOOR))


def preemphasis(x, alpha=0.97):
    x = np.asarray(x, dtype=np.float64)
    if x.size < 1:
        raise ValueError("empty signal")
    y = x.copy()
    y[1:] = x[1:] - alpha * x[:-1]
    return y


def hann_periodic(n):
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_and_window(y, frame=FRAME_LENGTH, hop=HOP_LENGTH):
    y = np.asarray(y, dtype=np.float64)
    if y.size < frame:
        raise ValueError(f"signal shorter than one frame ({y.size} < {frame})")
    n_frames = 1 + (y.size - frame) // hop
    frames = np.lib.stride_tricks.sliding_window_view(y, frame)[::hop][:n_frames]
    return frames * hann_periodic(frame)


def power_spectrum(frames, n_fft=N_FFT):
    """|FFT|^2 on the non-negative frequencies, frames zero-padded to n_fft."""
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=-1)) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    weights: np.ndarray   # (n_mels, n_fft // 2 + 1)
    centers: np.ndarray   # (n_mels + 2,) fractional FFT-bin positions, incl. both edges
    n_fft: int
    sample_rate: int

    @property
    def n_mels(self):
        return self.weights.shape[0]

    def center_hz(self):
        return self.centers[1:-1] * self.sample_rate / self.n_fft


def triangle(k, lo, mid, hi):
    """One triangular filter evaluated at (possibly fractional) bin positions k."""
    k = np.asarray(k, dtype=np.float64)
    out = np.zeros_like(k)
    rise = (k >= lo) & (k < mid)
    fall = (k >= mid) & (k < hi)
    out[rise] = (k[rise] - lo) / (mid - lo)
    out[fall] = (hi - k[fall]) / (hi - mid)
    return out


def build_mel_filterbank(n_mels=N_MELS, n_fft=N_FFT, sr=SAMPLE_RATE):
    """Triangular filters with centres equally spaced in HTK mel between 0 Hz and sr/2.

    Centres are kept as fractional FFT-bin positions.  Rounding them to
    integer bins would make adjacent low-frequency centres coincide at
    128 bands / 512 points, so the triangles are evaluated on the integer
    bin grid instead; a band narrower than one bin can then be empty.
    """
    n_bins = n_fft // 2 + 1
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if n_mels > n_bins - 1:
        raise ValueError(f"n_mels={n_mels} too large for n_fft={n_fft}: adjacent centres collide")
    mel_points = np.linspace(0.0, hz_to_mel(sr / 2.0), n_mels + 2)
    centers = mel_to_hz(mel_points) * n_fft / sr
    k = np.arange(n_bins)
    weights = np.stack([triangle(k, centers[m - 1], centers[m], centers[m + 1])
                        for m in range(1, n_mels + 1)])
    return MelFilterbank(weights, centers, n_fft, sr)


_DEFAULT_FB = None


def default_filterbank():
    global _DEFAULT_FB
    if _DEFAULT_FB is None:
        _DEFAULT_FB = build_mel_filterbank()
    return _DEFAULT_FB


def log_mel(power, fb):
    power = np.asarray(power, dtype=np.float64)
    if power.shape[-1] != fb.weights.shape[1]:
        raise ValueError("power spectrum width does not match the filterbank")
    return np.log(np.maximum(power @ fb.weights.T, LOG_FLOOR))


def pad_time(spec, target=N_FRAMES):
    spec = np.asarray(spec)
    if spec.shape[0] > target:
        raise ValueError(f"spectrogram has {spec.shape[0]} frames, more than {target}")
    if spec.shape[0] == target:
        return spec
    pad = np.full((target - spec.shape[0],) + spec.shape[1:], LOG_FLOOR_VALUE, dtype=spec.dtype)
    return np.concatenate([spec, pad], axis=0)


def mel_spectrogram(samples, fb=None, alpha=0.97):
    """Full front end: samples -> (512, 128) log-Mel grid."""
    fb = fb if fb is not None else default_filterbank()
    frames = frame_and_window(preemphasis(samples, alpha))
    return pad_time(log_mel(power_spectrum(frames, fb.n_fft), fb))


def stft_spectrogram(samples, alpha=0.97, n_fft=N_FFT):
    """Log power spectrogram (512, n_fft/2 + 1), padded like the Mel variant."""
    frames = frame_and_window(preemphasis(samples, alpha))
    return pad_time(np.log(np.maximum(power_spectrum(frames, n_fft), LOG_FLOOR)))


@dataclass(frozen=True)
class FeatureStats:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("std must be positive")

    @classmethod
    def from_arrays(cls, arrays):
        """Global scalar mean/std, accumulated in one pass over (training) spectrograms."""
        n = 0
        total = 0.0
        total_sq = 0.0
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            n += a.size
            total += a.sum()
            total_sq += np.square(a).sum()
        if n == 0:
            raise ValueError("no data")
        mean = total / n
        var = max(total_sq / n - mean * mean, 0.0)
        return cls(float(mean), float(np.sqrt(var)))


def normalize(spec, stats):
    if not stats.std > 0:
        raise ValueError("std must be positive")
    return (np.asarray(spec) - stats.mean) / stats.std


def spec_augment(spec, rng, f_mask=24, t_mask=96):
    """Mask one frequency band and one time band with the spectrogram mean.

    Widths are uniform on [0, f_mask] and [0, t_mask]; positions uniform
    over the valid range.  Returns (augmented, (f0, f_width, t0, t_width)).
    """
    spec = np.asarray(spec)
    n_t, n_f = spec.shape
    out = spec.copy()
    fill = spec.mean()
    fw = int(rng.integers(0, min(f_mask, n_f) + 1))
    f0 = int(rng.integers(0, n_f - fw + 1))
    tw = int(rng.integers(0, min(t_mask, n_t) + 1))
    t0 = int(rng.integers(0, n_t - tw + 1))
    out[:, f0:f0 + fw] = fill
    out[t0:t0 + tw, :] = fill
    return out, (f0, fw, t0, tw)


def dct_matrix(n):
    """Orthonormal DCT-II basis, rows are coefficients."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


def mfcc(spec, n_coeff=20):
    spec = np.asarray(spec, dtype=np.float64)
    n = spec.shape[-1]
    if not 1 <= n_coeff <= n:
        raise ValueError(f"n_coeff must be in 1..{n}")
    return spec @ dct_matrix(n)[:n_coeff].T


# feature cache: b"MELF" | u16 version | u32 rows | u32 cols | u8 dtype tag | f32 LE data
CACHE_MAGIC = b"MELF"
CACHE_VERSION = 1
_DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHIIB")


def save_feature_cache(path, spec):
    spec = np.ascontiguousarray(spec, dtype="<f4")
    if spec.ndim != 2:
        raise ValueError("feature cache holds 2-D grids")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, spec.shape[0], spec.shape[1], _DTYPE_F32))
        fh.write(spec.tobytes())


def load_feature_cache(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        magic, version, rows, cols, tag = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache")
        if version != CACHE_VERSION or tag != _DTYPE_F32:
            raise ValueError(f"{path}: unsupported version {version} / dtype {tag}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != rows * cols:
        raise ValueError(f"{path}: payload size mismatch")
    return data.reshape(rows, cols).astype(np.float32)
