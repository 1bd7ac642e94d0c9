"""Raw EMG recording ingestion.

Loads labeled recordings from a manifest, cuts them into fixed-length
windows, resamples each window to the 2000-sample segment the classifier
expects, and builds subject-disjoint train/val/test splits. A synthetic
generator provides desk-scale datasets whose three classes occupy disjoint
spectral bands, so the full pipeline can be exercised without clinical data.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, InputError

CLASS_NAMES = ("myopathy", "normal", "als")
LABEL_BY_NAME = {name: i for i, name in enumerate(CLASS_NAMES)}

SPLIT_TAGS = ("train", "val", "test", "auto")

DEFAULT_WINDOW_LEN = 23437
DEFAULT_SEGMENT_LEN = 2000
DEFAULT_SAMPLE_RATE = 24000

_SIGNAL_MAGIC = b"SEMG"
_SIGNAL_VERSION = 1


@dataclass
class Recording:
    """One raw EMG trace plus the metadata the pipeline needs."""

    samples: np.ndarray
    sample_rate_hz: float
    label: int
    subject_id: str
    recording_id: str

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.size == 0:
            raise InputError(f"recording {self.recording_id!r} has length zero")
        if self.sample_rate_hz <= 0:
            raise InputError(f"recording {self.recording_id!r} has non-positive sample rate")
        if self.label not in (0, 1, 2):
            raise InputError(f"recording {self.recording_id!r} has invalid label {self.label}")


@dataclass
class RawWindow:
    """A fixed-length slice of a recording, before resampling."""

    samples: np.ndarray
    label: int
    subject_id: str
    source: tuple[str, int]  # (recording_id, window_index)


@dataclass
class Segment:
    """A 2000-sample model-input window with provenance."""

    samples: np.ndarray
    label: int
    subject_id: str
    source: tuple[str, int]


@dataclass
class ManifestEntry:
    path: str
    format_tag: str
    label: int
    subject_id: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)


# ---------------------------------------------------------------------------
# signal files
# ---------------------------------------------------------------------------

def write_recording(path: str, samples: np.ndarray, sample_rate_hz: int) -> None:
    """Write the binary signal format: 16-byte header + little-endian float32."""
    data = np.asarray(samples, dtype="<f4")
    header = _SIGNAL_MAGIC + struct.pack("<III", _SIGNAL_VERSION, data.size, int(sample_rate_hz))
    _atomic_write_bytes(path, header + data.tobytes())


def load_recording(path: str, format_tag: str = "semg", *, label: int = 0,
                   subject_id: str = "", recording_id: str | None = None) -> Recording:
    """Decode one signal file into a Recording.

    ``format_tag`` is either ``"semg"`` (binary: magic "SEMG", version u32,
    sample count u32, sample rate u32, float32 LE payload) or ``"txt"``
    (headerless single-column decimal text, assumed 24 kHz).
    """
    if not os.path.exists(path):
        raise InputError(f"signal file not found: {path}")
    rec_id = recording_id if recording_id is not None else os.path.basename(path)
    if format_tag == "semg":
        with open(path, "rb") as fh:
            blob = fh.read()
        if len(blob) < 16 or blob[:4] != _SIGNAL_MAGIC:
            raise InputError(f"malformed header in {path}")
        version, count, rate = struct.unpack("<III", blob[4:16])
        if version != _SIGNAL_VERSION:
            raise InputError(f"malformed header in {path}: unsupported version {version}")
        payload = blob[16:]
        if len(payload) != 4 * count:
            raise InputError(f"malformed header in {path}: declared length != payload length")
        if count == 0:
            raise InputError(f"recording {path} has length zero")
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        return Recording(samples, float(rate), label, subject_id, rec_id)
    if format_tag == "txt":
        try:
            samples = np.loadtxt(path, dtype=np.float64, ndmin=1)
        except ValueError as exc:
            raise InputError(f"malformed text signal {path}: {exc}") from exc
        if samples.ndim != 1:
            raise InputError(f"malformed text signal {path}: expected one column")
        if samples.size == 0:
            raise InputError(f"recording {path} has length zero")
        return Recording(samples, float(DEFAULT_SAMPLE_RATE), label, subject_id, rec_id)
    raise InputError(f"unknown signal format tag {format_tag!r}")


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def read_manifest(path: str) -> DatasetManifest:
    """Read the CSV manifest: header ``path,format,label,subject,split``."""
    if not os.path.exists(path):
        raise InputError(f"manifest not found: {path}")
    entries = []
    seen_paths = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"path", "format", "label", "subject", "split"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise InputError(f"manifest {path} missing header columns {sorted(required)}")
        for i, row in enumerate(reader):
            label_name = row["label"].strip().lower()
            if label_name not in LABEL_BY_NAME:
                raise InputError(f"manifest {path} row {i}: unknown label {row['label']!r}")
            split = row["split"].strip().lower()
            if split not in SPLIT_TAGS:
                raise InputError(f"manifest {path} row {i}: unknown split {row['split']!r}")
            entry_path = row["path"].strip()
            if entry_path in seen_paths:
                raise InputError(f"manifest {path} row {i}: duplicate path {entry_path!r}")
            seen_paths.add(entry_path)
            entries.append(ManifestEntry(entry_path, row["format"].strip().lower(),
                                         LABEL_BY_NAME[label_name], row["subject"].strip(), split))
    return DatasetManifest(entries)


def write_manifest(path: str, manifest: DatasetManifest) -> None:
    lines = ["path,format,label,subject,split"]
    for e in manifest.entries:
        lines.append(f"{e.path},{e.format_tag},{CLASS_NAMES[e.label]},{e.subject_id},{e.split}")
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


# ---------------------------------------------------------------------------
# windowing / resampling
# ---------------------------------------------------------------------------

def window_recording(rec: Recording, window_len: int = DEFAULT_WINDOW_LEN) -> list[RawWindow]:
    """Cut a recording into consecutive non-overlapping windows.

    Starts at sample 0; the trailing remainder shorter than ``window_len``
    is discarded rather than zero-padded.
    """
    if window_len <= 0:
        raise ValueError("window_len must be positive")
    count = rec.samples.size // window_len
    return [
        RawWindow(rec.samples[i * window_len:(i + 1) * window_len],
                  rec.label, rec.subject_id, (rec.recording_id, i))
        for i in range(count)
    ]


def resample_signal(x: np.ndarray, out_len: int, *, taps: int = 64,
                    kaiser_beta: float = 8.6, cutoff_scale: float = 0.95) -> np.ndarray:
    """Band-limited resampling of a 1-D signal to exactly ``out_len`` samples.

    Each output sample is a windowed-sinc interpolation of the input at the
    fractional position ``m * len(x) / out_len``: ``taps`` neighbouring input
    samples are weighted by a Kaiser-windowed sinc whose cutoff sits at
    ``cutoff_scale`` times the narrower of the two Nyquist frequencies (so the
    same filter anti-aliases when decimating). Tap sets are renormalized to
    unit sum, which keeps DC exact, and the input is edge-replicated at the
    boundaries.
    """
    x = np.asarray(x, dtype=np.float64)
    n_in = x.size
    if n_in == 0:
        raise InputError("cannot resample an empty signal")
    if out_len <= 0:
        raise ValueError("out_len must be positive")
    if out_len > 4 * n_in:
        raise InputError(f"upsampling {n_in} -> {out_len} exceeds the supported 4x range")

    ratio = out_len / n_in
    fc = cutoff_scale * min(1.0, ratio)  # as a fraction of the input Nyquist
    half = taps // 2

    pos = np.arange(out_len) * (n_in / out_len)
    base = np.floor(pos).astype(np.int64)
    frac = pos - base

    offsets = np.arange(-half + 1, half + 1)
    arg = offsets[None, :] - frac[:, None]  # tap position minus target, in samples
    h = fc * np.sinc(fc * arg)
    h *= np.i0(kaiser_beta * np.sqrt(np.maximum(0.0, 1.0 - (arg / half) ** 2))) / np.i0(kaiser_beta)
    h /= h.sum(axis=1, keepdims=True)

    idx = np.clip(base[:, None] + offsets[None, :], 0, n_in - 1)
    return np.einsum("mt,mt->m", x[idx], h)


def resample_window(w: RawWindow, out_len: int = DEFAULT_SEGMENT_LEN) -> Segment:
    """Resample one raw window to the fixed segment length."""
    return Segment(resample_signal(w.samples, out_len), w.label, w.subject_id, w.source)


def segments_from_recording(rec: Recording, window_len: int = DEFAULT_WINDOW_LEN,
                            segment_len: int = DEFAULT_SEGMENT_LEN) -> list[Segment]:
    return [resample_window(w, segment_len) for w in window_recording(rec, window_len)]


# ---------------------------------------------------------------------------
# subject-disjoint splitting
# ---------------------------------------------------------------------------

def _split_counts(n: int, ratios: tuple[float, float, float]) -> list[int]:
    # every split gets at least one subject; the rest follow the ratios
    counts = [1, 1, 1]
    targets = [r * n for r in ratios]
    for _ in range(n - 3):
        deficits = [targets[i] - counts[i] for i in range(3)]
        counts[deficits.index(max(deficits))] += 1
    return counts


def split_by_subject(segments: list[Segment], ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
                     seed: int = 0) -> tuple[list[Segment], list[Segment], list[Segment]]:
    """Partition segments into train/val/test with no subject shared.

    Subjects are grouped per class and shuffled deterministically from
    ``seed``; each class contributes at least one subject to every split.
    """
    ratios = tuple(float(r) for r in ratios)
    if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be positive and sum to 1, got {ratios}")

    subject_label: dict[str, int] = {}
    for seg in segments:
        subject_label.setdefault(seg.subject_id, seg.label)

    by_class: dict[int, list[str]] = {c: [] for c in range(len(CLASS_NAMES))}
    for subject in sorted(subject_label):
        by_class[subject_label[subject]].append(subject)

    assignment: dict[str, int] = {}
    rng = np.random.default_rng(seed)
    for c in range(len(CLASS_NAMES)):
        subjects = by_class[c]
        if not subjects:
            continue
        if len(subjects) < 3:
            raise DatasetError(
                f"cannot build subject-disjoint split: class {CLASS_NAMES[c]!r} has "
                f"{len(subjects)} subject(s), need at least 3"
            )
        order = rng.permutation(len(subjects))
        counts = _split_counts(len(subjects), ratios)
        cursor = 0
        for split_idx, cnt in enumerate(counts):
            for j in order[cursor:cursor + cnt]:
                assignment[subjects[j]] = split_idx
            cursor += cnt

    splits: tuple[list[Segment], ...] = ([], [], [])
    for seg in segments:
        splits[assignment[seg.subject_id]].append(seg)
    return splits


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def _band_noise(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    """Gaussian noise confined to [lo, hi] Hz via spectral masking."""
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    band = (freqs >= lo) & (freqs <= hi)
    spectrum = np.zeros(freqs.size, dtype=np.complex128)
    k = int(band.sum())
    spectrum[band] = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    x = np.fft.irfft(spectrum, n)
    return x / max(np.sqrt(np.mean(x ** 2)), 1e-12)


def _am_bursts(rng: np.random.Generator, n: int, fs: float,
               carrier_hz: float = 200.0, gate_hz: float = 5.0) -> np.ndarray:
    """A gated sinusoid: carrier switched fully on/off at ``gate_hz``."""
    t = np.arange(n) / fs
    gate = (np.floor(t * gate_hz * 2.0) % 2 == 0).astype(np.float64)
    x = np.sin(2 * np.pi * carrier_hz * t + rng.uniform(0, 2 * np.pi)) * gate
    x += 0.01 * rng.standard_normal(n)
    return x / max(np.sqrt(np.mean(x ** 2)), 1e-12)


def synth_signal(label: int, rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    if label == 0:
        return _band_noise(rng, n, fs, 50.0, 150.0)
    if label == 1:
        return _band_noise(rng, n, fs, 300.0, 500.0)
    return _am_bursts(rng, n, fs)


def _subject_gain(seed: int, label: int, subject_idx: int) -> float:
    rng = np.random.default_rng([seed, label, subject_idx, 0xA11])
    return float(2.0 ** rng.uniform(-1.0, 1.0))


def synth_dataset(seed: int, n_segments_per_class: int,
                  n_subjects_per_class: int) -> list[Segment]:
    """Generate labeled 2000-sample segments with disjoint spectral bands.

    Class 0 is 50-150 Hz noise, class 1 is 300-500 Hz noise, class 2 is a
    200 Hz carrier gated at 5 Hz (all at a nominal 2 kHz segment rate). Each
    subject carries a deterministic gain so splits stay subject-sensitive.
    """
    if n_segments_per_class < 1 or n_subjects_per_class < 1:
        raise ValueError("counts must be >= 1")
    fs = 2000.0
    segments = []
    for label in range(len(CLASS_NAMES)):
        for subj in range(n_subjects_per_class):
            subject_id = f"{CLASS_NAMES[label]}-subj{subj}"
            gain = _subject_gain(seed, label, subj)
            n_here = n_segments_per_class // n_subjects_per_class
            if subj < n_segments_per_class % n_subjects_per_class:
                n_here += 1
            for i in range(n_here):
                rng = np.random.default_rng([seed, label, subj, i])
                x = gain * synth_signal(label, rng, DEFAULT_SEGMENT_LEN, fs)
                segments.append(Segment(x, label, subject_id, (subject_id, i)))
    return segments


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _atomic_write_bytes(path: str, blob: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise InputError(f"cannot write {path}: {exc}") from exc
