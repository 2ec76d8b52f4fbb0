"""Frequency-response analysis of learned FIRConv kernels.

Each kernel's peak-normalized magnitude response is classified into a
filter shape against two levels: the -3 dB passband level and the -20 dB
level below which a component is treated as negligible.
"""

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import FrequencyResponseCurve, frequency_response_db, mel_to_hz, hz_to_mel
from .errors import ConfigurationError

THRESHOLD_DB = -20.0
PASSBAND_DB = -3.0
ANALYSIS_NFFT = 4096
INACTIVE_RATIO = 1e-8


class Shape(str, enum.Enum):
    BAND_PASS = "BandPass"
    BAND_STOP = "BandStop"
    LOW_PASS = "LowPass"
    HIGH_PASS = "HighPass"
    ALL_PASS = "AllPass"
    INACTIVE = "Inactive"


_HAS_PASSBAND = (Shape.BAND_PASS, Shape.LOW_PASS, Shape.HIGH_PASS)


@dataclass(frozen=True, eq=False)
class FilterReport:
    block: int
    kernel_id: int
    response: FrequencyResponseCurve
    shape: Shape
    passband_center_hz: float
    passband_edges_hz: tuple
    design_band_hz: tuple

    def __post_init__(self):
        has = self.passband_center_hz is not None and self.passband_edges_hz is not None
        if has != (self.shape in _HAS_PASSBAND):
            raise ValueError(f"{self.shape.value} report must {'' if not has else 'not '}carry passband fields")

    @property
    def design_center_hz(self):
        return 0.5 * (self.design_band_hz[0] + self.design_band_hz[1])


def _runs(mask):
    """Half-open ``(start, stop)`` index runs where ``mask`` is true."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def classify_response(curve, design_band_hz=None, inactive=False):
    """Shape of a peak-normalized response, plus passband centre and edges.

    Returns ``(shape, center_hz, edges_hz)``; centre and edges are None
    unless the shape has a passband.
    """
    if inactive:
        return Shape.INACTIVE, None, None
    f, r = curve.freqs_hz, curve.magnitude_db
    stop = r <= THRESHOLD_DB
    if not stop.any():
        return Shape.ALL_PASS, None, None
    passing = r >= PASSBAND_DB
    peak = int(np.argmax(r))
    if design_band_hz is not None:
        lo, hi = design_band_hz
        in_band = (f >= lo) & (f <= hi)
        if in_band.any() and np.all(stop[in_band]) and not (lo <= f[peak] <= hi):
            return Shape.BAND_STOP, None, None
    pass_runs = _runs(passing)
    for s0, s1 in _runs(stop):
        if any(p1 <= s0 for _, p1 in pass_runs) and any(p0 >= s1 for p0, _ in pass_runs):
            return Shape.BAND_STOP, None, None
    start, stop_idx = next((a, b) for a, b in pass_runs if a <= peak < b)
    below = stop[:start].any()
    above = stop[stop_idx:].any()
    if below and above:
        shape = Shape.BAND_PASS
    elif above:
        shape = Shape.LOW_PASS
    else:
        shape = Shape.HIGH_PASS
    amp = 10.0 ** (r[passing] / 20.0)
    center = float(np.sum(f[passing] * amp) / np.sum(amp))
    edges = (float(f[start]), float(f[stop_idx - 1]))
    return shape, center, edges


def analyze_kernels(kernels, design_bands, sample_rate_hz, block=1, n_fft=ANALYSIS_NFFT):
    kernels = np.asarray(kernels, dtype=np.float64)
    energy = np.sum(kernels**2, axis=1)
    median = np.median(energy)
    reports = []
    for k, (h, band) in enumerate(zip(kernels, design_bands)):
        inactive = energy[k] == 0.0 or energy[k] < INACTIVE_RATIO * median
        curve = frequency_response_db(h, n_fft, sample_rate_hz, normalize_peak=True)
        shape, center, edges = classify_response(curve, band, inactive)
        reports.append(FilterReport(block, k, curve, shape, center, edges, tuple(band)))
    return reports


def analyze_filters(model, n_fft=ANALYSIS_NFFT):
    """Reports for every effective kernel of both front-end blocks."""
    reports = []
    for block, layer in ((1, model.block1), (2, model.block2)):
        reports.extend(analyze_kernels(layer.effective_kernels(), layer.cutoffs_hz,
                                       layer.sample_rate_hz, block, n_fft))
    return reports


@dataclass(frozen=True, eq=False)
class BandSummary:
    block: int
    band_range_hz: tuple
    member_kernel_ids: tuple
    mean_response: FrequencyResponseCurve


def default_bands(sample_rate_hz, n_bands=8, f_min_hz=30.0):
    """Contiguous bands with mel-uniform edges, the first extended down to 0 Hz."""
    nyquist = sample_rate_hz / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min_hz), hz_to_mel(nyquist), n_bands + 1))
    edges[0], edges[-1] = 0.0, nyquist
    return [(float(a), float(b)) for a, b in zip(edges[:-1], edges[1:])]


def band_summary(reports, bands):
    """Group reports by design-band centre and average their dB responses."""
    bands = [(float(a), float(b)) for a, b in bands]
    for (a0, b0), (a1, b1) in zip(bands[:-1], bands[1:]):
        if b0 != a1:
            raise ConfigurationError("bands must be contiguous and non-overlapping")
    members = [[] for _ in bands]
    for r in reports:
        c = r.design_center_hz
        for i, (a, b) in enumerate(bands):
            if a <= c < b or (i == len(bands) - 1 and c == b):
                members[i].append(r)
                break
        else:
            raise ConfigurationError(f"kernel {r.kernel_id} (centre {c:.1f} Hz) falls in no band")
    out = []
    for (a, b), group in zip(bands, members):
        if group:
            freqs = group[0].response.freqs_hz
            mean = np.mean([g.response.magnitude_db for g in group], axis=0)
            curve = FrequencyResponseCurve(freqs, mean)
        else:
            curve = None
        block = group[0].block if group else (reports[0].block if reports else 1)
        out.append(BandSummary(block, (a, b), tuple(g.kernel_id for g in group), curve))
    return out


@dataclass(frozen=True)
class PassbandStats:
    mean_hz: float
    std_hz: float
    count: int


def passband_statistics(reports, block=1, shape=Shape.BAND_PASS):
    """Mean and population std of passband centres over one block's kernels of ``shape``."""
    centers = [r.passband_center_hz for r in reports if r.block == block and r.shape is shape]
    if not centers:
        return PassbandStats(None, None, 0)
    c = np.asarray(centers)
    return PassbandStats(float(c.mean()), float(c.std()), len(c))


@dataclass(frozen=True)
class SuppressionResult:
    fraction: float
    count: int


def high_band_suppression(reports, cutoff_hz, block=1):
    """Fraction of kernels designed wholly above ``cutoff_hz`` that no longer pass their band."""
    in_block = [r for r in reports if r.block == block]
    if in_block and cutoff_hz >= in_block[0].response.freqs_hz[-1]:
        raise ValueError("cutoff must lie below Nyquist")
    considered = [r for r in in_block if r.design_band_hz[0] >= cutoff_hz]
    if not considered:
        return SuppressionResult(None, 0)
    suppressed = 0
    for r in considered:
        if r.shape in (Shape.BAND_STOP, Shape.INACTIVE):
            suppressed += 1
            continue
        f, db = r.response.freqs_hz, r.response.magnitude_db
        lo, hi = r.design_band_hz
        band = db[(f >= lo) & (f <= hi)]
        if band.size and band.max() <= THRESHOLD_DB:
            suppressed += 1
    return SuppressionResult(suppressed / len(considered), len(considered))


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

KERNEL_HEADER = ["block", "kernel_id", "shape", "center_hz", "design_low", "design_high", "threshold_db"]


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def export_report(reports, summaries, path, extra_lines=()):
    """Write ``kernels.csv``, one response CSV per band and ``summary.txt`` into ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "kernels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KERNEL_HEADER)
        for r in reports:
            w.writerow([r.block, r.kernel_id, r.shape.value, _fmt(r.passband_center_hz),
                        _fmt(r.design_band_hz[0]), _fmt(r.design_band_hz[1]), THRESHOLD_DB])
    by_key = {(r.block, r.kernel_id): r for r in reports}
    band_files = []
    for i, s in enumerate(summaries):
        if s.mean_response is None:
            continue
        name = f"band_b{s.block}_{i:02d}_{s.band_range_hz[0]:.0f}-{s.band_range_hz[1]:.0f}Hz.csv"
        band_files.append(name)
        cols = [by_key[(s.block, k)].response.magnitude_db for k in s.member_kernel_ids]
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", *[f"kernel_{k}" for k in s.member_kernel_ids], "mean_db", "threshold_db"])
            for j, f in enumerate(s.mean_response.freqs_hz):
                w.writerow([f"{f:.4f}", *[f"{c[j]:.4f}" for c in cols],
                            f"{s.mean_response.magnitude_db[j]:.4f}", THRESHOLD_DB])
    with open(out / "summary.txt", "w") as fh:
        fh.write(summary_text(reports, summaries, extra_lines))
    return band_files


def summary_text(reports, summaries, extra_lines=()):
    lines = [f"reference threshold: {THRESHOLD_DB:.1f} dB (component treated as negligible below it)",
             f"passband level: {PASSBAND_DB:.1f} dB below peak"]
    for block in sorted({r.block for r in reports}):
        rs = [r for r in reports if r.block == block]
        counts = {s.value: sum(r.shape is s for r in rs) for s in Shape}
        lines.append(f"block {block}: {len(rs)} kernels; "
                     + ", ".join(f"{k}={v}" for k, v in counts.items()))
        st = passband_statistics(reports, block)
        if st.count:
            lines.append(f"block {block} BandPass passband centres: {st.mean_hz:.1f} +/- {st.std_hz:.1f} Hz "
                         f"(n={st.count}; mean and population std)")
        else:
            lines.append(f"block {block} BandPass passband centres: none")
    for s in summaries:
        lines.append(f"block {s.block} band {s.band_range_hz[0]:.0f}-{s.band_range_hz[1]:.0f} Hz: "
                     f"{len(s.member_kernel_ids)} kernels")
    lines.extend(extra_lines)
    return "\n".join(lines) + "\n"


def read_kernel_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
