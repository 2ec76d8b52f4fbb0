"""WAV I/O, resampling, fixed-length segmentation and corpus ingestion."""

import csv
import enum
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import IngestionError, ReferenceFormatError, UnsupportedCodecError, WavFormatError

MODEL_RATE_HZ = 16000
SOURCE_RATE_HZ = 2000

_FORMAT_NAMES = {
    0x0001: "PCM",
    0x0002: "MS-ADPCM",
    0x0003: "IEEE-float",
    0x0006: "A-law",
    0x0007: "mu-law",
    0x0011: "IMA-ADPCM",
    0x0055: "MP3",
    0xFFFE: "extensible",
}


class Label(enum.IntEnum):
    NORMAL = 0
    ABNORMAL = 1

    @property
    def title(self):
        return self.name.capitalize()

    @classmethod
    def parse(cls, value):
        if isinstance(value, Label):
            return value
        text = str(value).strip().upper()
        if text in cls.__members__:
            return cls[text]
        raise ValueError(f"unknown label {value!r}")


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1:
            raise ValueError("waveform samples must be one-dimensional")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return (
            self.sample_rate_hz == other.sample_rate_hz
            and self.samples.dtype == other.samples.dtype
            and np.array_equal(self.samples, other.samples)
        )

    @property
    def duration_s(self):
        return len(self.samples) / self.sample_rate_hz


# --------------------------------------------------------------------------
# WAV
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WavInfo:
    format_tag: int
    n_channels: int
    sample_rate_hz: int
    bits_per_sample: int
    data_offset: int
    data_size: int

    @property
    def encoding(self):
        name = _FORMAT_NAMES.get(self.format_tag, f"format tag 0x{self.format_tag:04x}")
        return f"{name} {self.bits_per_sample}-bit"

    @property
    def n_frames(self):
        return self.data_size // (self.n_channels * self.bits_per_sample // 8)


def read_wav_info(path):
    """Parse the RIFF header without loading sample data."""
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12 or head[:4] != b"RIFF" or head[8:12] != b"WAVE":
            raise WavFormatError(f"{path}: not a RIFF/WAVE file")
        fmt = None
        while True:
            chunk = fh.read(8)
            if len(chunk) < 8:
                break
            cid, size = struct.unpack("<4sI", chunk)
            if cid == b"fmt ":
                body = fh.read(size)
                if len(body) < 16:
                    raise WavFormatError(f"{path}: truncated fmt chunk")
                tag, ch, rate, _, _, bits = struct.unpack("<HHIIHH", body[:16])
                if tag == 0xFFFE and len(body) >= 26:
                    tag = struct.unpack("<H", body[24:26])[0]
                fmt = (tag, ch, rate, bits)
            elif cid == b"data":
                if fmt is None:
                    raise WavFormatError(f"{path}: data chunk before fmt chunk")
                tag, ch, rate, bits = fmt
                if ch < 1 or rate < 1 or bits < 1:
                    raise WavFormatError(f"{path}: invalid fmt fields")
                offset = fh.tell()
                fh.seek(0, 2)
                size = min(size, fh.tell() - offset)
                return WavInfo(tag, ch, rate, bits, offset, size)
            else:
                fh.seek(size + (size & 1), 1)
    raise WavFormatError(f"{path}: missing {'data' if fmt else 'fmt'} chunk")


def read_wav(path):
    """Read a PCM16 or float32 WAV file as a mono float64 Waveform.

    Channels are averaged. PCM16 is scaled by 1/32768.
    """
    info = read_wav_info(path)
    if (info.format_tag, info.bits_per_sample) == (1, 16):
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif (info.format_tag, info.bits_per_sample) == (3, 32):
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"{path}: unsupported encoding {info.encoding}")
    n = info.n_frames * info.n_channels
    with open(path, "rb") as fh:
        fh.seek(info.data_offset)
        raw = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
    data = raw.reshape(-1, info.n_channels).astype(np.float64)
    if dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise WavFormatError(f"{path}: non-finite float samples")
    samples = data.mean(axis=1) if info.n_channels > 1 else data[:, 0]
    return Waveform(samples * scale, info.sample_rate_hz)


def write_wav(waveform, path, encoding="pcm16"):
    """Write a mono WAV file; ``encoding`` is ``"pcm16"`` or ``"float32"``."""
    samples = np.asarray(waveform.samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise ValueError("cannot write non-finite samples")
    enc = encoding.lower()
    if enc == "pcm16":
        clipped = np.clip(samples, -1.0, 1.0 - 2.0**-15)
        data = np.rint(clipped * 32768.0).astype("<i2")
    elif enc == "float32":
        data = samples.astype("<f4")
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    scipy.io.wavfile.write(path, waveform.sample_rate_hz, data)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def polyphase_prototype(up, down, taps_per_phase=64, beta=8.6):
    """Kaiser-windowed sinc low-pass for rational resampling by ``up/down``.

    Each of the ``up`` polyphase branches is normalized to sum ``1/up``, so
    constant input maps to constant output exactly after the ``up`` gain.
    """
    rate = max(up, down)
    length = taps_per_phase * rate + 1
    m = np.arange(length) - (length - 1) / 2.0
    h = np.sinc(m / rate) * np.kaiser(length, beta)
    for p in range(up):
        h[p::up] /= h[p::up].sum() * up
    return h


def resample(waveform, target_rate_hz):
    """Polyphase resampling to ``target_rate_hz``.

    Output length is ``ceil(len * target / source)``.
    """
    if target_rate_hz <= 0:
        raise ValueError("target rate must be positive")
    source = waveform.sample_rate_hz
    x = np.asarray(waveform.samples, dtype=np.float64)
    if target_rate_hz == source:
        return Waveform(x.copy(), source)
    g = math.gcd(int(target_rate_hz), source)
    up, down = int(target_rate_hz) // g, source // g
    if len(x) == 0:
        return Waveform(np.zeros(0), target_rate_hz)
    h = polyphase_prototype(up, down)
    y = scipy.signal.resample_poly(x, up, down, window=h)
    return Waveform(y, target_rate_hz)


def peak_normalize(samples):
    samples = np.asarray(samples, dtype=np.float64)
    peak = np.max(np.abs(samples)) if len(samples) else 0.0
    return samples / peak if peak > 0 else samples.copy()


# --------------------------------------------------------------------------
# Segmentation
# --------------------------------------------------------------------------

class PadPolicy(enum.Enum):
    PAD_LAST_WITH_ZEROS = "pad"
    DROP_LAST = "drop"


@dataclass(frozen=True, eq=False)
class Segment:
    parent_id: str
    offset_samples: int
    samples: np.ndarray


def segment_offsets(n_samples, window_len, hop, pad_policy=PadPolicy.PAD_LAST_WITH_ZEROS):
    if window_len < 1 or hop < 1:
        raise ValueError("window length and hop must be >= 1")
    pad_policy = PadPolicy(pad_policy)
    if n_samples >= window_len:
        n_full = (n_samples - window_len) // hop + 1
        offsets = [i * hop for i in range(n_full)]
        tail = offsets[-1] + window_len < n_samples
        if tail and pad_policy is PadPolicy.PAD_LAST_WITH_ZEROS:
            offsets.append(n_full * hop)
        return offsets
    return [0] if pad_policy is PadPolicy.PAD_LAST_WITH_ZEROS else []


def segment(waveform, window_len_samples, hop_samples,
            pad_policy=PadPolicy.PAD_LAST_WITH_ZEROS, parent_id=""):
    """Cut a waveform into equal-length windows starting at multiples of the hop."""
    x = np.asarray(waveform.samples)
    out = []
    for off in segment_offsets(len(x), window_len_samples, hop_samples, pad_policy):
        chunk = x[off : off + window_len_samples]
        if len(chunk) < window_len_samples:
            chunk = np.concatenate([chunk, np.zeros(window_len_samples - len(chunk), x.dtype)])
        out.append(Segment(parent_id, off, chunk))
    return out


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

class DatasetSource(enum.Enum):
    PHYSIONET2016 = "PhysioNet2016"
    SYNTHETIC = "Synthetic"


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: Label
    duration_s: float
    sample_rate: int
    waveform: Waveform = field(default=None, compare=False, repr=False)

    def load(self):
        if self.waveform is not None:
            return self.waveform
        return read_wav(self.path)


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    source: DatasetSource

    def __post_init__(self):
        entries = tuple(sorted(self.entries, key=lambda e: e.id))
        ids = [e.id for e in entries]
        if len(set(ids)) != len(ids):
            raise IngestionError("duplicate recording ids in manifest")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "source", DatasetSource(self.source))

    @property
    def counts(self):
        counts = {label: 0 for label in Label}
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def by_id(self):
        return {e.id: e for e in self.entries}

    def labels(self):
        return np.array([int(e.label) for e in self.entries])

    def subset(self, ids):
        keep = set(ids)
        return DatasetManifest(tuple(e for e in self.entries if e.id in keep), self.source)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "path", "label", "duration_s", "sample_rate"])
            for e in self.entries:
                writer.writerow([e.id, e.path, e.label.title, f"{e.duration_s:.6f}", e.sample_rate])

    @classmethod
    def from_csv(cls, path, source=DatasetSource.PHYSIONET2016):
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["id", "path", "label", "duration_s", "sample_rate"]:
                raise IngestionError(f"{path}: unexpected manifest header {reader.fieldnames}")
            for row in reader:
                entries.append(ManifestEntry(
                    row["id"], row["path"], Label.parse(row["label"]),
                    float(row["duration_s"]), int(row["sample_rate"]),
                ))
        return cls(tuple(entries), source)


_REFERENCE_LABELS = {-1: Label.NORMAL, 1: Label.ABNORMAL}


def load_physionet(root):
    """Index ``<root>/training-*/`` with their REFERENCE.csv label files.

    Labels map -1 to Normal and 1 to Abnormal.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root}: dataset root is not a directory")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("training-"))
    if not subdirs:
        raise IngestionError(f"{root}: no training-* directories found")
    entries = []
    missing = []
    for sub in subdirs:
        ref = sub / "REFERENCE.csv"
        if not ref.is_file():
            raise IngestionError(f"{sub}: missing REFERENCE.csv")
        with open(ref, newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh), 1):
                if not row or not row[0].strip():
                    continue
                if len(row) < 2:
                    raise ReferenceFormatError(f"{ref}:{lineno}: expected 'id,label'")
                rec_id = row[0].strip()
                try:
                    label = _REFERENCE_LABELS[int(row[1])]
                except (ValueError, KeyError):
                    raise ReferenceFormatError(f"{ref}:{lineno}: unknown label value {row[1]!r}") from None
                wav = sub / f"{rec_id}.wav"
                if not wav.is_file():
                    missing.append(rec_id)
                    continue
                info = read_wav_info(wav)
                entries.append(ManifestEntry(
                    rec_id, str(wav), label, info.n_frames / info.sample_rate_hz, info.sample_rate_hz,
                ))
    if missing:
        raise IngestionError(f"{len(missing)} referenced recordings are missing: {', '.join(missing)}")
    return DatasetManifest(tuple(entries), DatasetSource.PHYSIONET2016)


# --------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------

def _pink_noise(rng, n):
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    pink = np.fft.irfft(spec / np.sqrt(f), n)
    return pink / (np.std(pink) + 1e-12)


def _click(rng, rate, freq_hz, dur_s):
    t = np.arange(int(dur_s * rate)) / rate
    env = np.exp(-0.5 * ((t - dur_s / 2) / (dur_s / 6)) ** 2)
    return env * np.sin(2 * np.pi * freq_hz * t + rng.uniform(0, 2 * np.pi))


def synthetic_recording(seed, abnormal, rate=SOURCE_RATE_HZ):
    """One synthetic phonocardiogram as ``(samples, murmur_component)``.

    The heart-sound template (S1/S2 click train plus pink noise) depends only
    on ``seed``; an abnormal recording adds a narrowband systolic murmur
    centred in 300-700 Hz, returned separately so callers can isolate it.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.uniform(5.0, 10.0) * rate)
    beat_s = 60.0 / rng.uniform(60.0, 100.0)
    systole_s = 0.3 * beat_s + 0.05
    s1_hz, s2_hz = rng.uniform(30.0, 80.0), rng.uniform(60.0, 150.0)
    x = 0.05 * _pink_noise(rng, n)
    starts = np.arange(rng.uniform(0.0, beat_s), n / rate, beat_s)
    for t0 in starts:
        for offset, f0, amp in ((0.0, s1_hz, 1.0), (systole_s, s2_hz, 0.7)):
            i = int((t0 + offset) * rate)
            c = amp * rng.uniform(0.8, 1.2) * _click(rng, rate, f0, 0.08)
            j = min(n, i + len(c))
            if i < n:
                x[i:j] += c[: j - i]
    murmur = np.zeros(n)
    # murmur draws come from a separate stream so the template is unchanged
    mrng = np.random.default_rng([seed, 1])
    fc = mrng.uniform(300.0, 700.0)
    amp = mrng.uniform(0.25, 0.4)
    band = scipy.signal.firwin(129, [fc - 100.0, fc + 100.0], pass_zero=False, fs=rate)
    for t0 in starts:
        i0 = int((t0 + 0.06) * rate)
        i1 = min(n, int((t0 + systole_s - 0.02) * rate))
        if i1 - i0 < 16:
            continue
        burst = scipy.signal.lfilter(band, 1.0, mrng.standard_normal(i1 - i0 + 128))[128:]
        burst /= np.std(burst) + 1e-12
        murmur[i0:i1] += amp * np.hanning(i1 - i0) * burst
    if abnormal:
        x = x + murmur
    return x, murmur


def generate_synthetic(seed, n_per_class):
    """Balanced in-memory corpus of ``2 * n_per_class`` recordings at 2000 Hz."""
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    entries = []
    for label in (Label.NORMAL, Label.ABNORMAL):
        for i in range(n_per_class):
            rec_seed = [seed, int(label), i]
            samples, _ = synthetic_recording(rec_seed, label is Label.ABNORMAL)
            wf = Waveform(samples, SOURCE_RATE_HZ)
            rec_id = f"syn-{label.name[0].lower()}{i:04d}"
            entries.append(ManifestEntry(
                rec_id, f"{rec_id}.wav", label, wf.duration_s, SOURCE_RATE_HZ, waveform=wf,
            ))
    return DatasetManifest(tuple(entries), DatasetSource.SYNTHETIC)


def write_synthetic(manifest, directory):
    """Materialize an in-memory manifest as float32 WAVs plus ``manifest.csv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest:
        path = directory / f"{e.id}.wav"
        write_wav(e.load(), path, encoding="float32")
        entries.append(ManifestEntry(e.id, str(path), e.label, e.duration_s, e.sample_rate))
    written = DatasetManifest(tuple(entries), manifest.source)
    written.to_csv(directory / "manifest.csv")
    return written


def prepare_recording(waveform, target_rate_hz=MODEL_RATE_HZ):
    """Resample to the model rate and peak-normalize to max |x| = 1."""
    if waveform.sample_rate_hz != target_rate_hz:
        waveform = resample(waveform, target_rate_hz)
    return Waveform(peak_normalize(waveform.samples), target_rate_hz)
