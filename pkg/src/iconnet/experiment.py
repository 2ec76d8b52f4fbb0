"""Stratified k-fold cross-validation with recording-level evaluation."""

import csv
import hashlib
import json
import logging
import math
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import grad as G
from .audio_io import (
    MODEL_RATE_HZ, Label, PadPolicy, prepare_recording, segment_offsets,
)
from .errors import ConfigurationError, FoldError
from .estimator import make_estimator
from .metrics import MetricsReport, RecordingPrediction, aggregate_by_group

log = logging.getLogger(__name__)

MEMMAP_THRESHOLD_BYTES = 1 << 30

PUBLISHED_RESULTS = {
    "mfcc-ffn": {"ua": 82.98, "f1": 88.68},
    "crnn-reference": {"ua": 85.67, "f1": 90.60},
    "iconnet": {"ua": 87.48, "f1": 92.05},
}


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_ids: tuple
    validation_ids: tuple
    test_ids: tuple


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 60
    batch_size: int = 32
    micro_batch_size: int = 4
    learning_rate: float = 1e-3
    class_weights: str = "inverse"
    patience: int = 7
    seed: int = 0
    segment_s: float = 5.0
    train_hop_s: float = 2.5
    sample_rate_hz: int = MODEL_RATE_HZ
    validation_fraction: float = 0.1

    def __post_init__(self):
        for name in ("max_epochs", "batch_size", "micro_batch_size", "patience", "sample_rate_hz"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be non-negative")
        if self.segment_s <= 0 or self.train_hop_s <= 0:
            raise ConfigurationError("segment and hop durations must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError("validation_fraction must lie in [0, 1)")

    @property
    def window_samples(self):
        return int(round(self.segment_s * self.sample_rate_hz))

    @property
    def train_hop_samples(self):
        return int(round(self.train_hop_s * self.sample_rate_hz))

    def to_dict(self):
        return asdict(self)


def stratified_kfold(manifest, k=4, seed=0, validation_fraction=0.1):
    """Per-class seeded shuffle, then round-robin assignment to ``k`` test folds.

    A stratified ``validation_fraction`` of each training side is held out
    for early stopping.
    """
    if k < 2:
        raise ConfigurationError("k must be >= 2")
    by_class = {label: [e.id for e in manifest if e.label is label] for label in Label}
    for label, ids in by_class.items():
        if len(ids) < k:
            raise ConfigurationError(f"class {label.title} has {len(ids)} recordings, fewer than k={k}")
    fold_of = {}
    for label, ids in by_class.items():
        perm = np.random.default_rng([seed, int(label)]).permutation(len(ids))
        for rank, i in enumerate(perm):
            fold_of[ids[i]] = rank % k
    folds = []
    for f in range(k):
        test = tuple(sorted(i for i, fold in fold_of.items() if fold == f))
        train, val = [], []
        for label, ids in by_class.items():
            side = [i for i in ids if fold_of[i] != f]
            n_val = int(round(validation_fraction * len(side)))
            if validation_fraction > 0 and len(side) > 1:
                n_val = max(1, n_val)
            order = np.random.default_rng([seed, f, int(label), 1]).permutation(len(side))
            val.extend(side[j] for j in order[:n_val])
            train.extend(side[j] for j in order[n_val:])
        folds.append(FoldSplit(f, tuple(sorted(train)), tuple(sorted(val)), test))
    return folds


# --------------------------------------------------------------------------
# Segment matrices
# --------------------------------------------------------------------------

def _resampled_length(entry, rate):
    n = int(round(entry.duration_s * entry.sample_rate))
    return math.ceil(n * rate / entry.sample_rate)


def segment_matrix(manifest, ids, window, hop, pad_policy=PadPolicy.PAD_LAST_WITH_ZEROS,
                   sample_rate_hz=MODEL_RATE_HZ, workdir=None, dtype=np.float32):
    """Stack the segments of recordings ``ids`` into ``(X, y, groups)``.

    Recordings are resampled and peak-normalized first. Large matrices are
    backed by a memory-mapped file in ``workdir``.
    """
    entries = manifest.by_id()
    plan = []
    for rec_id in ids:
        e = entries[rec_id]
        offsets = segment_offsets(_resampled_length(e, sample_rate_hz), window, hop, pad_policy)
        plan.append((e, len(offsets)))
    n_rows = sum(n for _, n in plan)
    nbytes = n_rows * window * np.dtype(dtype).itemsize
    if nbytes > MEMMAP_THRESHOLD_BYTES:
        fh = tempfile.NamedTemporaryFile(dir=workdir, suffix=".segments", delete=False)
        X = np.memmap(fh.name, dtype=dtype, mode="w+", shape=(n_rows, window))
    else:
        X = np.zeros((n_rows, window), dtype=dtype)
    y = np.zeros(n_rows, dtype=np.int64)
    groups = np.empty(n_rows, dtype=object)
    row = 0
    for e, expected in plan:
        x = prepare_recording(e.load(), sample_rate_hz).samples
        offsets = segment_offsets(len(x), window, hop, pad_policy)
        if len(offsets) != expected:
            raise ConfigurationError(f"{e.id}: duration in manifest does not match audio")
        for off in offsets:
            chunk = x[off : off + window]
            X[row, : len(chunk)] = chunk
            X[row, len(chunk):] = 0.0
            y[row] = int(e.label)
            groups[row] = e.id
            row += 1
    return X, y, groups


# --------------------------------------------------------------------------
# Training and evaluation
# --------------------------------------------------------------------------

# Reduced front end and schedule for the synthetic CI corpus, sized so a
# 4-fold run finishes in minutes on one core.
SYNTHETIC_TRAIN = {"max_epochs": 15, "batch_size": 8, "learning_rate": 2e-3, "patience": 4}
SYNTHETIC_MODEL = {"block1_kernels": 32, "block1_kernel_len": 256, "block2_kernels": 16,
                   "block2_kernel_len": 128, "ffn_hidden": (64, 64)}
SYNTHETIC_PER_CLASS = 16


def estimator_params(model_kind, cfg, overrides=None):
    params = {
        "max_epochs": cfg.max_epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "patience": cfg.patience,
        "class_weight": cfg.class_weights,
        "random_state": cfg.seed,
    }
    if model_kind == "iconnet":
        params["micro_batch_size"] = cfg.micro_batch_size
        params["sample_rate"] = cfg.sample_rate_hz
    params.update(overrides or {})
    return params


def train_fold(model_kind, fold, cfg, manifest, model_params=None, workdir=None):
    """Fit one model on a fold's training side, early-stopping on its validation side.

    Returns the fitted estimator; ``estimator.history_`` holds per-epoch loss
    and validation UA.
    """
    if not fold.train_ids:
        raise ConfigurationError(f"fold {fold.fold_index} has no training recordings")
    X, y, _ = segment_matrix(manifest, fold.train_ids, cfg.window_samples, cfg.train_hop_samples,
                             sample_rate_hz=cfg.sample_rate_hz, workdir=workdir)
    eval_set = eval_groups = None
    if fold.validation_ids:
        Xv, yv, gv = segment_matrix(manifest, fold.validation_ids, cfg.window_samples,
                                    cfg.window_samples, sample_rate_hz=cfg.sample_rate_hz,
                                    workdir=workdir)
        eval_set, eval_groups = (Xv, yv), gv
    est = make_estimator(model_kind, **estimator_params(model_kind, cfg, model_params))
    est.fit(X, y, eval_set=eval_set, eval_groups=eval_groups)
    return est


def predict_recordings(estimator, manifest, ids, cfg, workdir=None):
    """Recording-level predictions from mean segment probabilities."""
    X, y, groups = segment_matrix(manifest, ids, cfg.window_samples, cfg.window_samples,
                                  sample_rate_hz=cfg.sample_rate_hz, workdir=workdir)
    proba = estimator.predict_proba(X)
    keys, mean_proba = aggregate_by_group(proba, groups)
    truth = {g: lab for g, lab in zip(groups, y)}
    return [
        RecordingPrediction(str(k), int(truth[k]), int(np.argmax(p)), tuple(float(v) for v in p))
        for k, p in zip(keys, mean_proba)
    ]


def evaluate_fold(estimator, fold, cfg, manifest, workdir=None):
    if not fold.test_ids:
        raise ConfigurationError(f"fold {fold.fold_index} has an empty test set")
    return MetricsReport.from_predictions(predict_recordings(estimator, manifest, fold.test_ids, cfg, workdir))


@dataclass
class FoldResult:
    fold_index: int
    report: MetricsReport
    history: list
    best_epoch: int
    estimator: object = field(default=None, repr=False)


@dataclass
class CrossValidationResult:
    model_kind: str
    folds: list

    def _values(self, key):
        return np.array([getattr(f.report, key) for f in self.folds])

    def summary(self):
        out = {}
        for key in ("ua", "f1_abnormal", "f1_macro", "f1_weighted"):
            v = self._values(key)
            out[key] = {"mean": float(v.mean()), "std": float(v.std())}
        return out

    def rows(self):
        rows = [[self.model_kind, f.fold_index, f.report.ua, f.report.f1_abnormal,
                 f.report.f1_macro, f.report.f1_weighted, f.report.n_evaluated] for f in self.folds]
        s = self.summary()
        n_total = sum(f.report.n_evaluated for f in self.folds)
        for stat in ("mean", "std"):
            rows.append([self.model_kind, stat, s["ua"][stat], s["f1_abnormal"][stat],
                         s["f1_macro"][stat], s["f1_weighted"][stat], n_total])
        return rows

    def table(self):
        """Summary line: mean UA and F1 (weighted) in percent, next to the published values."""
        s = self.summary()
        published = PUBLISHED_RESULTS.get(self.model_kind, {})
        return {
            "model": self.model_kind,
            "ua": 100 * s["ua"]["mean"],
            "f1": 100 * s["f1_weighted"]["mean"],
            "published_ua": published.get("ua"),
            "published_f1": published.get("f1"),
        }


RESULTS_HEADER = ["model", "fold", "ua", "f1_abnormal", "f1_macro", "f1_weighted", "n_test"]


def write_results_csv(results, path):
    """Per-fold rows plus mean and std rows; ``path`` may be an open text file."""
    if hasattr(path, "write"):
        _write_results(results, path)
        return
    with open(path, "w", newline="") as fh:
        _write_results(results, fh)


def _write_results(results, fh):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for res in results:
        for row in res.rows():
            writer.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row])


def manifest_checksum(manifest):
    """SHA-256 over ids, labels and the raw audio of every recording."""
    h = hashlib.sha256()
    for e in manifest:
        h.update(f"{e.id},{e.label.title}\n".encode())
        if e.waveform is not None:
            h.update(np.ascontiguousarray(e.waveform.samples).tobytes())
        else:
            with open(e.path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
    return h.hexdigest()


def write_run_manifest(path, cfg, manifest, model_kinds, k, extra=None):
    doc = {
        "train_config": cfg.to_dict(),
        "seed": cfg.seed,
        "folds": k,
        "models": list(model_kinds),
        "dataset": {
            "source": manifest.source.value,
            "n_recordings": len(manifest),
            "counts": {label.title: n for label, n in manifest.counts.items()},
            "sha256": manifest_checksum(manifest),
        },
        **(extra or {}),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    return doc


def _run_fold(args):
    model_kind, fold, cfg, manifest, model_params, workdir, keep, fft_workers = args
    G.set_fft_workers(fft_workers)
    est = train_fold(model_kind, fold, cfg, manifest, model_params, workdir)
    report = evaluate_fold(est, fold, cfg, manifest, workdir)
    log.info("%s fold %d: UA %.4f F1w %.4f", model_kind, fold.fold_index, report.ua, report.f1_weighted)
    return FoldResult(fold.fold_index, report, est.history_, est.best_epoch_, est if keep else None)


def cross_validate(model_kind, manifest, cfg, k=4, jobs=1, model_params=None, folds=None,
                   keep_models=False, workdir=None, fft_workers=1):
    """Train and evaluate ``model_kind`` on every fold; folds may run in parallel processes."""
    if folds is None:
        folds = stratified_kfold(manifest, k, cfg.seed, cfg.validation_fraction)
    tasks = [(model_kind, f, cfg, manifest, model_params, workdir, keep_models, fft_workers)
             for f in folds]
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            pending = [(t[1].fold_index, pool.submit(_run_fold, t)) for t in tasks]
            for fold_index, fut in pending:
                try:
                    results.append(fut.result())
                except Exception as exc:
                    raise FoldError(fold_index, exc) from exc
    else:
        for t in tasks:
            try:
                results.append(_run_fold(t))
            except Exception as exc:
                raise FoldError(t[1].fold_index, exc) from exc
    return CrossValidationResult(model_kind, sorted(results, key=lambda r: r.fold_index))
