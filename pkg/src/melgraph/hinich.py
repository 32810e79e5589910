"""Higher-order-statistics tests for Gaussianity and linearity.

The bispectrum is estimated directly: the series is cut into non-overlapping
demeaned records, each record is Fourier transformed, and the triple product
``X(j) X(k) conj(X(j+k))`` is averaged over records.  Squared bicoherence is
the bispectrum magnitude normalised by the power spectra at the three
frequencies; under a Gaussian null, twice the squared bicoherence at each
interior point of the principal domain is approximately chi-square with two
degrees of freedom, and the points are approximately independent.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import special

SIGNIFICANCE = 0.05
DEFAULT_RECORD_LEN = 128
MIN_RECORDS = 8


class DegenerateInputError(ValueError):
    pass


@dataclass
class CumulantSet:
    moments: tuple
    cumulants: tuple
    degenerate: bool = False


def sample_cumulants(x, order=4):
    """Sample raw moments m_1..m_order and the matching cumulants."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 16:
        raise ValueError("need at least 16 samples")
    if not 1 <= order <= 4:
        raise ValueError("order must be in 1..4")
    m = [float(np.mean(x ** k)) for k in range(1, order + 1)]
    m += [0.0] * (4 - order)
    m1, m2, m3, m4 = m
    c = [
        m1,
        m2 - m1 ** 2,
        m3 - 3 * m1 * m2 + 2 * m1 ** 3,
        m4 - 4 * m3 * m1 - 3 * m2 ** 2 + 12 * m2 * m1 ** 2 - 6 * m1 ** 4,
    ]
    # central second moment computed directly avoids cancellation in m2 - m1^2
    var = float(np.mean((x - m1) ** 2))
    degenerate = var <= 1e-300 or np.ptp(x) == 0
    if degenerate:
        c[1] = 0.0
    return CumulantSet(tuple(m[:order]), tuple(c[:order]), degenerate)


def principal_domain(record_len):
    """Interior points (j, k) with 1 <= k <= j and j + k < record_len / 2.

    DC is excluded because records are demeaned, and points touching the
    Nyquist bin are excluded because that bin is real-valued and would not
    follow the complex-Gaussian null distribution.
    """
    half = record_len // 2
    pts = [(j, k) for j in range(1, half) for k in range(1, j + 1) if j + k < half]
    return np.array(pts, dtype=np.int64).reshape(-1, 2)


def _records(x, record_len):
    x = np.asarray(x, dtype=np.float64)
    n_records = x.size // record_len
    if n_records < MIN_RECORDS:
        raise ValueError(
            f"need at least {MIN_RECORDS} records of {record_len} samples, got {n_records}")
    rec = x[: n_records * record_len].reshape(n_records, record_len)
    rec = rec - rec.mean(axis=1, keepdims=True)
    if not np.any(rec):
        raise DegenerateInputError("degenerate input")
    return np.fft.fft(rec, axis=1)


def bispectrum_grid(x, record_len=DEFAULT_RECORD_LEN):
    """Full (half x half) bispectrum grid; B[j, k] for 0 <= j, k < record_len/2."""
    spec = _records(x, record_len)
    half = record_len // 2
    idx = np.arange(half)
    jj, kk = np.meshgrid(idx, idx, indexing="ij")
    acc = np.zeros((half, half), dtype=np.complex128)
    for X in spec:
        acc += X[jj] * X[kk] * np.conj(X[jj + kk])
    # the triple product is symmetric in (j, k); averaging with the transpose
    # makes that exact despite fused multiply-adds in the complex product
    acc = (acc + acc.T) / 2
    return acc / (spec.shape[0] * record_len)


@dataclass
class BispectrumEstimate:
    points: np.ndarray            # (P, 2) integer (j, k) pairs
    values: np.ndarray            # (P,) complex bispectrum
    power_spectrum: np.ndarray    # (record_len,) averaged |X|^2 / record_len
    n_records: int
    record_length: int

    def squared_bicoherence(self):
        """Return (s, mask): normalised squared bicoherence and the usable-point mask.

        Normalisation: s = |B|^2 / (P(j) P(k) P(j+k) * record_length / n_records),
        doubled on the diagonal j == k where the triple product variance doubles.
        """
        j, k = self.points[:, 0], self.points[:, 1]
        P = self.power_spectrum
        denom = P[j] * P[k] * P[j + k] * (self.record_length / self.n_records)
        denom = denom * np.where(j == k, 2.0, 1.0)
        mask = denom > 0
        s = np.zeros(len(self.points))
        s[mask] = np.abs(self.values[mask]) ** 2 / denom[mask]
        return s, mask


def estimate_bispectrum(x, record_len=DEFAULT_RECORD_LEN, overlap=0):
    if overlap != 0:
        raise NotImplementedError("only non-overlapping records are supported")
    spec = _records(x, record_len)
    n_records = spec.shape[0]
    pts = principal_domain(record_len)
    j, k = pts[:, 0], pts[:, 1]
    triple = spec[:, j] * spec[:, k] * np.conj(spec[:, j + k])
    values = triple.mean(axis=0) / record_len
    power = (np.abs(spec) ** 2).mean(axis=0) / record_len
    return BispectrumEstimate(pts, values, power, n_records, record_len)


@dataclass
class HinichResult:
    pfa: float = math.nan
    test_statistic: float = math.nan
    dof: int = 0
    est_iqr: float = math.nan
    theo_iqr: float = math.nan
    noncentrality: float = math.nan
    extras: dict = field(default_factory=dict)

    @property
    def decision(self):
        if math.isnan(self.pfa):
            return None
        return "accept_H0" if self.pfa >= SIGNIFICANCE else "accept_H1"

    @property
    def iqr_ratio(self):
        if not self.theo_iqr:
            return math.nan
        return self.est_iqr / self.theo_iqr

    def linear_decision(self, band=0.5):
        """'linear' when |est - theo| / theo < band.  The band is a caller choice."""
        if math.isnan(self.iqr_ratio):
            return None
        return "linear" if abs(self.iqr_ratio - 1.0) < band else "nonlinear"


def pfa_from_statistic(statistic, dof):
    return special.chi2_sf(statistic, dof)


def gaussianity_pfa(b, result=None):
    s, mask = b.squared_bicoherence()
    n_points = int(mask.sum())
    if n_points == 0:
        raise DegenerateInputError("degenerate input")
    stat = float(2.0 * s[mask].sum())
    dof = 2 * n_points
    res = result if result is not None else HinichResult()
    res.test_statistic = stat
    res.dof = dof
    res.pfa = pfa_from_statistic(stat, dof)
    return res


def chi2_2_iqr(noncentrality):
    """Interquartile range of the noncentral chi-square with two degrees of freedom."""
    if noncentrality <= 0:
        # central chi2(2) is Exp(mean 2): quartiles -2 ln(3/4) and -2 ln(1/4)
        return special.ncx2_ppf(0.75, 2, 0.0) - special.ncx2_ppf(0.25, 2, 0.0)
    return special.ncx2_ppf(0.75, 2, noncentrality) - special.ncx2_ppf(0.25, 2, noncentrality)


def linearity_iqr(b, result=None):
    s, mask = b.squared_bicoherence()
    if not mask.any():
        raise DegenerateInputError("degenerate input")
    v = 2.0 * s[mask]
    lam = max(0.0, float(v.mean()) - 2.0)
    q75, q25 = np.percentile(v, [75, 25])
    res = result if result is not None else HinichResult()
    res.noncentrality = lam
    res.est_iqr = float(q75 - q25)
    res.theo_iqr = chi2_2_iqr(lam)
    return res


def hinich_test(x, record_len=DEFAULT_RECORD_LEN):
    """Both tests on one series."""
    b = estimate_bispectrum(x, record_len)
    res = gaussianity_pfa(b)
    linearity_iqr(b, res)
    return res


def batch_test(buf, window=0.5, record_len=DEFAULT_RECORD_LEN):
    """Test consecutive non-overlapping windows of an AudioBuffer (or (samples, rate) pair)."""
    samples, rate = _unpack(buf)
    width = int(round(window * rate))
    if width <= 0:
        raise ValueError("window must be positive")
    results = []
    for start in range(0, samples.size - width + 1, width):
        results.append(hinich_test(samples[start:start + width], record_len))
    return results


def _unpack(buf):
    if hasattr(buf, "samples"):
        return np.asarray(buf.samples, dtype=np.float64), buf.sample_rate
    samples, rate = buf
    return np.asarray(samples, dtype=np.float64), rate


CSV_COLUMNS = ["window_index", "pfa", "statistic", "dof", "est_iqr", "theo_iqr",
               "gaussian_decision", "linear_decision"]


def write_results_csv(results, path, linear_band=0.5):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for i, r in enumerate(results):
            w.writerow([i, repr(r.pfa), repr(r.test_statistic), r.dof, repr(r.est_iqr),
                        repr(r.theo_iqr), r.decision, r.linear_decision(linear_band)])
