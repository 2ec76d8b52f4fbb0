"""Signal-processing primitives: FFT, cosine windows, sinc band-pass design,
frequency responses, mel filterbanks and MFCC features.

Everything here is a pure function of its arguments.
"""

import csv
from dataclasses import dataclass

import numpy as np

DB_FLOOR = -120.0

_WINDOW_COEFFS = {
    "hann": (0.5, 0.5),
    "hamming": (0.54, 0.46),
    "blackman": (0.42, 0.5, 0.08),
}


# --------------------------------------------------------------------------
# FFT
# --------------------------------------------------------------------------

def _check_pow2(n):
    if not isinstance(n, (int, np.integer)) or n < 1 or (n & (n - 1)) != 0:
        raise ValueError(f"FFT length must be a positive power of two, got {n!r}")


def _fit_length(x, n):
    m = x.shape[-1]
    if m == n:
        return x
    if m > n:
        return x[..., :n]
    pad = [(0, 0)] * (x.ndim - 1) + [(0, n - m)]
    return np.pad(x, pad)


def _bit_reverse_indices(n):
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def _radix2(x, sign):
    n = x.shape[-1]
    lead = x.shape[:-1]
    a = x[..., _bit_reverse_indices(n)]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(sign * 2j * np.pi * np.arange(half) / size)
        a = a.reshape(*lead, n // size, size)
        even = a[..., :half]
        odd = a[..., half:] * twiddle
        a = np.concatenate([even + odd, even - odd], axis=-1)
        size *= 2
    return a.reshape(*lead, n)


def fft_forward(x, n=None):
    """Discrete Fourier transform along the last axis.

    ``x`` is zero-padded or truncated to ``n`` (a power of two) first;
    leading axes are transformed independently.
    """
    x = np.asarray(x, dtype=np.complex128)
    if n is None:
        n = x.shape[-1]
    _check_pow2(n)
    return _radix2(_fit_length(x, n), -1.0)


def fft_inverse(X, n=None):
    X = np.asarray(X, dtype=np.complex128)
    if n is None:
        n = X.shape[-1]
    _check_pow2(n)
    return _radix2(_fit_length(X, n), 1.0) / n


# --------------------------------------------------------------------------
# Windows and filter design
# --------------------------------------------------------------------------

def cosine_window(kind, length):
    """Symmetric generalized cosine window.

    ``kind`` is ``"hann"``, ``"hamming"``, ``"blackman"`` or an explicit
    coefficient sequence ``(a0, a1, ...)`` giving
    ``w[n] = sum_j (-1)**j * a_j * cos(2*pi*j*n / (length - 1))``.
    A length-1 window is ``[1.0]``.
    """
    if isinstance(kind, str):
        try:
            coeffs = _WINDOW_COEFFS[kind.lower()]
        except KeyError:
            raise ValueError(f"unknown window kind {kind!r}") from None
    else:
        coeffs = tuple(float(c) for c in kind)
        if not coeffs:
            raise ValueError("generalized cosine window needs at least one coefficient")
    if length < 1:
        raise ValueError("window length must be >= 1")
    if length == 1:
        return np.ones(1)
    # evaluate the first half and mirror it so the window is bit-exactly symmetric
    half = (length + 1) // 2
    phase = 2.0 * np.pi * np.arange(half) / (length - 1)
    w = np.zeros(half)
    for j, a in enumerate(coeffs):
        w += (-1) ** j * a * np.cos(j * phase)
    return np.concatenate([w, w[: length - half][::-1]])


def sinc_bandpass(f_low_hz, f_high_hz, length, sample_rate_hz):
    """Truncated ideal band-pass impulse response (linear phase, unwindowed)."""
    nyquist = sample_rate_hz / 2.0
    if not 0.0 <= f_low_hz < f_high_hz <= nyquist:
        raise ValueError(
            f"need 0 <= f_low < f_high <= {nyquist:g} Hz, got ({f_low_hz}, {f_high_hz})"
        )
    if length < 1:
        raise ValueError("filter length must be >= 1")
    f1 = f_low_hz / sample_rate_hz
    f2 = f_high_hz / sample_rate_hz
    # evaluating at |n - c| makes the taps bit-exactly symmetric
    m = np.abs(np.arange(length) - (length - 1) / 2.0)
    return 2.0 * f2 * np.sinc(2.0 * f2 * m) - 2.0 * f1 * np.sinc(2.0 * f1 * m)


# --------------------------------------------------------------------------
# Frequency response
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FrequencyResponseCurve:
    freqs_hz: np.ndarray
    magnitude_db: np.ndarray

    def __post_init__(self):
        if len(self.freqs_hz) != len(self.magnitude_db):
            raise ValueError("freqs_hz and magnitude_db lengths differ")

    def __len__(self):
        return len(self.freqs_hz)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["freq_hz", "magnitude_db"])
            for f, m in zip(self.freqs_hz, self.magnitude_db):
                writer.writerow([repr(float(f)), repr(float(m))])

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1])


def frequency_response_db(coeffs, n_fft, sample_rate_hz, normalize_peak=False):
    """Magnitude response in dB at ``n_fft // 2 + 1`` bins from DC to Nyquist.

    Values are floored at ``DB_FLOOR``. With ``normalize_peak`` the curve is
    shifted so its maximum is 0 dB (an all-floor curve is left unshifted).
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if n_fft < coeffs.shape[-1]:
        raise ValueError("n_fft must be >= number of coefficients")
    spectrum = fft_forward(coeffs, n_fft)[..., : n_fft // 2 + 1]
    mag = np.abs(spectrum)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(mag)
    db = np.maximum(db, DB_FLOOR)
    if normalize_peak:
        peak = db.max()
        if peak > DB_FLOOR:
            db = np.maximum(db - peak, DB_FLOOR)
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate_hz / n_fft)
    return FrequencyResponseCurve(freqs, db)


# --------------------------------------------------------------------------
# Mel scale and MFCC
# --------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_bands, f_min_hz, f_max_hz):
    """``n_bands + 2`` frequencies (Hz) uniformly spaced on the mel scale."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min_hz), hz_to_mel(f_max_hz), n_bands + 2))


def mel_filterbank(n_bands, n_fft, sample_rate_hz, f_min_hz, f_max_hz):
    """Triangular mel filterbank, shape ``(n_bands, n_fft // 2 + 1)``.

    Raises ValueError (with ``.collapsed`` listing band indices) when some
    triangle contains no FFT bin.
    """
    if not 0.0 <= f_min_hz < f_max_hz <= sample_rate_hz / 2.0:
        raise ValueError("need 0 <= f_min < f_max <= Nyquist")
    edges = mel_band_edges(n_bands, f_min_hz, f_max_hz)
    bin_freqs = np.arange(n_fft // 2 + 1) * (sample_rate_hz / n_fft)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_freqs[None, :] - lo) / (mid - lo)
    falling = (hi - bin_freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    collapsed = [int(i) for i in np.flatnonzero(fb.sum(axis=1) <= 0.0)]
    if collapsed:
        err = ValueError(
            f"{len(collapsed)} mel bands contain no FFT bin at n_fft={n_fft}: {collapsed}"
        )
        err.collapsed = collapsed
        raise err
    return fb


def dct_matrix(n):
    """Orthonormal DCT-II matrix ``G`` with ``G @ x`` the transform of ``x``."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    g = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * np.sqrt(2.0 / n)
    g[0] /= np.sqrt(2.0)
    return g


@dataclass(frozen=True)
class MfccConfig:
    frame_len_samples: int = 400
    hop_samples: int = 160
    n_fft: int = 512
    n_mel_bands: int = 40
    n_coefficients: int = 40
    sample_rate_hz: int = 16000
    pre_emphasis: float = 0.97
    floor_db: float = -80.0
    f_min_hz: float = 25.0
    f_max_hz: float = 8000.0

    def __post_init__(self):
        if self.n_coefficients > self.n_mel_bands:
            raise ValueError("n_coefficients must not exceed n_mel_bands")
        if self.n_fft < self.frame_len_samples:
            raise ValueError("n_fft must be >= frame_len_samples")
        _check_pow2(self.n_fft)
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise ValueError("pre_emphasis must lie in [0, 1)")
        if self.hop_samples < 1 or self.frame_len_samples < 1:
            raise ValueError("frame and hop lengths must be positive")


def frame_signal(x, frame_len, hop):
    """Frames as rows; a signal shorter than one frame gives one zero-padded frame."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < frame_len:
        x = np.pad(x, (0, frame_len - len(x)))
    n_frames = 1 + (len(x) - frame_len) // hop
    view = np.lib.stride_tricks.sliding_window_view(x, frame_len)
    return view[: n_frames * hop : hop]


def log_mel_energies(samples, config):
    """Pre-DCT log mel energies in dB, shape ``(n_frames, n_mel_bands)``."""
    x = np.asarray(samples, dtype=np.float64)
    if config.pre_emphasis > 0.0 and len(x) > 1:
        x = np.concatenate([x[:1], x[1:] - config.pre_emphasis * x[:-1]])
    frames = frame_signal(x, config.frame_len_samples, config.hop_samples)
    frames = frames * cosine_window("hann", config.frame_len_samples)
    spec = fft_forward(frames, config.n_fft)[:, : config.n_fft // 2 + 1]
    power = spec.real**2 + spec.imag**2
    fb = mel_filterbank(
        config.n_mel_bands, config.n_fft, config.sample_rate_hz,
        config.f_min_hz, config.f_max_hz,
    )
    energies = power @ fb.T
    floor = 10.0 ** (config.floor_db / 10.0)
    return 10.0 * np.log10(np.maximum(energies, floor))


def mfcc(waveform, config=MfccConfig()):
    """MFCC matrix ``(n_frames, n_coefficients)`` for a Waveform."""
    if waveform.sample_rate_hz != config.sample_rate_hz:
        raise ValueError(
            f"waveform is at {waveform.sample_rate_hz} Hz, config expects {config.sample_rate_hz} Hz"
        )
    logmel = log_mel_energies(waveform.samples, config)
    g = dct_matrix(config.n_mel_bands)[: config.n_coefficients]
    return logmel @ g.T


def summarize_mfcc(coeffs):
    """Per-coefficient mean followed by population std (length ``2 * n_coefficients``)."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return np.concatenate([coeffs.mean(axis=0), coeffs.std(axis=0)])
