"""scikit-learn compatible estimators wrapping the models and training loop.

``IConNetClassifier`` consumes fixed-length raw waveform segments (one row
per segment). ``MfccFfnClassifier`` consumes the same rows and computes MFCC
summary features internally via ``MfccFeatures``.
"""

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import grad as G
from .audio_io import MODEL_RATE_HZ, Waveform
from .dsp import MfccConfig, mfcc, summarize_mfcc
from .errors import NonFiniteError, TrainingError
from .metrics import aggregate_by_group, group_labels, unweighted_average_recall
from .model import BlockConfig, IConNet, IConNetConfig, MfccFfn, MfccFfnConfig

log = logging.getLogger(__name__)


def class_weights(y, policy, n_classes=2):
    """Per-class loss weights; ``"inverse"`` gives ``max_count / count``."""
    if policy in (None, "none"):
        return np.ones(n_classes)
    if policy == "inverse":
        counts = np.bincount(np.asarray(y, dtype=int), minlength=n_classes).astype(np.float64)
        if np.any(counts == 0):
            raise ValueError("every class needs at least one training example")
        return counts.max() / counts
    weights = np.asarray(policy, dtype=np.float64)
    if weights.shape != (n_classes,):
        raise ValueError(f"class_weight must be 'inverse', 'none' or {n_classes} numbers")
    return weights


class _NetClassifier(ClassifierMixin, BaseEstimator):
    """Shared mini-batch Adam loop with early stopping on validation UA."""

    # subclasses: _build_model(n_features), _inputs(X) -> array, _batch(arr, idx)

    def fit(self, X, y, eval_set=None, eval_groups=None):
        """Train on segments ``X`` with labels ``y`` (0 Normal, 1 Abnormal).

        With ``eval_set=(X_val, y_val)`` the epoch with the best validation
        UA is kept and training stops after ``patience`` epochs without
        improvement. ``eval_groups`` assigns validation rows to recordings so
        UA is measured per recording on mean segment probabilities.
        """
        X, y = check_X_y(X, y, dtype=(np.float32, np.float64), copy=False, ensure_min_samples=1)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"expected two classes, got {self.classes_}")
        targets = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        self.model_ = self._build_model(X.shape[1])
        inputs = self._inputs(X, fitting=True)
        weights = class_weights(targets, self.class_weight)
        self.class_weights_ = weights

        val = None
        if eval_set is not None:
            Xv, yv = check_X_y(*eval_set, dtype=(np.float32, np.float64), copy=False)
            val = (self._inputs(Xv), np.searchsorted(self.classes_, yv), eval_groups)

        params = self.model_.parameters()
        state = G.AdamState(lr=self.learning_rate)
        rng = np.random.default_rng(self.random_state)
        n = len(targets)
        history = []
        best_score, best_params, best_epoch, wait = None, None, 0, 0
        for epoch in range(1, self.max_epochs + 1):
            order = rng.permutation(n)
            weighted_sum = weight_total = 0.0
            for b, start in enumerate(range(0, n, self.batch_size)):
                idx = order[start : start + self.batch_size]
                denom = float(weights[targets[idx]].sum())
                batch_loss = self._accumulate(inputs, targets, idx, weights, denom, epoch, b)
                if not np.isfinite(batch_loss):
                    self._abort(epoch, b, "non-finite loss")
                G.adam_step(params, [p.grad for p in params], state)
                weighted_sum += batch_loss * denom
                weight_total += denom
            record = {"epoch": epoch, "loss": weighted_sum / weight_total}
            if val is not None:
                record["val_ua"], record["val_loss"] = self._validation_scores(*val)
                # ties in UA (common on small validation sets) go to lower loss
                score = (record["val_ua"], -record["val_loss"])
            else:
                score = (-record["loss"],)
            history.append(record)
            if self.verbose:
                log.info("epoch %d %s", epoch, record)
            if best_score is None or score > best_score:
                best_score, best_epoch, wait = score, epoch, 0
                best_params = [p.data.copy() for p in params]
            else:
                wait += 1
                if val is not None and wait >= self.patience:
                    break
        if best_params is not None:
            for p, data in zip(params, best_params):
                p.data = data
        self.history_ = history
        self.best_epoch_ = best_epoch
        return self

    def _accumulate(self, inputs, targets, idx, weights, denom, epoch, batch):
        params = self.model_.parameters()
        for p in params:
            p.grad = None
        total = 0.0
        step = self.micro_batch_size
        for m in range(0, len(idx), step):
            sub = idx[m : m + step]
            try:
                with G.Tape() as tape:
                    logits = self.model_(self._batch(inputs, sub))
                    loss = G.weighted_cross_entropy(logits, targets[sub], weights, normalizer=denom)
                G.backward(tape, loss)
            except NonFiniteError as exc:
                self._abort(epoch, batch, str(exc))
            total += float(loss.data)
        return total

    def _abort(self, epoch, batch, reason):
        norms = {name: float(np.linalg.norm(p.data)) for name, p in self.model_.named_parameters()}
        raise TrainingError(f"{reason} at epoch {epoch}, batch {batch}; parameter norms {norms}")

    def _validation_scores(self, inputs, targets, groups):
        """Validation UA (per recording when ``groups`` is given) and mean segment cross-entropy."""
        proba = self._predict_proba_inputs(inputs)
        loss = float(-np.mean(np.log(np.maximum(proba[np.arange(len(targets)), targets], 1e-300))))
        if groups is None:
            return unweighted_average_recall(targets, proba.argmax(axis=1)), loss
        _, mean_proba = aggregate_by_group(proba, groups)
        ua = unweighted_average_recall(group_labels(targets, groups), mean_proba.argmax(axis=1))
        return ua, loss

    def _predict_proba_inputs(self, inputs):
        n = len(inputs)
        out = []
        step = max(1, self.micro_batch_size)
        for start in range(0, n, step):
            idx = np.arange(start, min(n, start + step))
            out.append(G.softmax(self.model_(self._batch(inputs, idx)).data))
        return np.concatenate(out) if out else np.zeros((0, 2))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=(np.float32, np.float64), copy=False)
        return self._predict_proba_inputs(self._inputs(X))

    def decision_function(self, X):
        p = self.predict_proba(X)
        return np.log(p[:, 1] + 1e-300) - np.log(p[:, 0] + 1e-300)

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def _more_tags(self):
        return {"binary_only": True}


class IConNetClassifier(_NetClassifier):
    """IConNet on raw waveform segments sampled at ``sample_rate`` Hz."""

    def __init__(self, *, sample_rate=MODEL_RATE_HZ, block1_kernels=128, block1_kernel_len=256,
                 block1_pool=4, block2_kernels=32, block2_kernel_len=400, block2_pool=4,
                 ffn_hidden=(256, 256), nonlinearity="abs", window="hann", spacing="mel",
                 max_epochs=60, batch_size=32, micro_batch_size=4, learning_rate=1e-3,
                 patience=7, class_weight="inverse", random_state=0, dtype="float32", verbose=0):
        self.sample_rate = sample_rate
        self.block1_kernels = block1_kernels
        self.block1_kernel_len = block1_kernel_len
        self.block1_pool = block1_pool
        self.block2_kernels = block2_kernels
        self.block2_kernel_len = block2_kernel_len
        self.block2_pool = block2_pool
        self.ffn_hidden = ffn_hidden
        self.nonlinearity = nonlinearity
        self.window = window
        self.spacing = spacing
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.micro_batch_size = micro_batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.class_weight = class_weight
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    def model_config(self, segment_len):
        return IConNetConfig(
            sample_rate_hz=self.sample_rate,
            segment_len=segment_len,
            block1=BlockConfig(self.block1_kernels, self.block1_kernel_len, 1, self.block1_pool),
            block2=BlockConfig(self.block2_kernels, self.block2_kernel_len, 1, self.block2_pool),
            nonlinearity=self.nonlinearity,
            ffn_hidden=tuple(self.ffn_hidden),
            window=self.window,
            spacing=self.spacing,
            seed=self.random_state,
            dtype=self.dtype,
        )

    def _build_model(self, n_features):
        return IConNet(self.model_config(n_features))

    def _inputs(self, X, fitting=False):
        return X

    def _batch(self, inputs, idx):
        return np.asarray(inputs[idx], dtype=self.dtype)[:, None, :]

    @classmethod
    def from_model(cls, model):
        """Wrap an already trained :class:`IConNet` (e.g. from ``load_model``)."""
        c = model.config
        est = cls(sample_rate=c.sample_rate_hz, block1_kernels=c.block1.n_kernels,
                  block1_kernel_len=c.block1.kernel_len, block1_pool=c.block1.pool,
                  block2_kernels=c.block2.n_kernels, block2_kernel_len=c.block2.kernel_len,
                  block2_pool=c.block2.pool, ffn_hidden=c.ffn_hidden, nonlinearity=c.nonlinearity,
                  window=c.window, spacing=c.spacing, random_state=c.seed, dtype=c.dtype)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = c.segment_len
        return est


class MfccFeatures(TransformerMixin, BaseEstimator):
    """Waveform segments -> per-coefficient MFCC mean and std."""

    def __init__(self, config=None):
        self.config = config

    def fit(self, X, y=None):
        check_array(X, dtype=(np.float32, np.float64), copy=False)
        return self

    def transform(self, X):
        X = check_array(X, dtype=(np.float32, np.float64), copy=False)
        cfg = self.config or MfccConfig()
        return np.stack([
            summarize_mfcc(mfcc(Waveform(np.asarray(row, dtype=np.float64), cfg.sample_rate_hz), cfg))
            for row in X
        ])


class MfccFfnClassifier(_NetClassifier):
    """MFCC summary features, standardized, into an FFN."""

    def __init__(self, *, mfcc_config=None, ffn_hidden=(256, 256), max_epochs=60, batch_size=32,
                 micro_batch_size=32, learning_rate=1e-3, patience=7, class_weight="inverse",
                 random_state=0, dtype="float32", verbose=0):
        self.mfcc_config = mfcc_config
        self.ffn_hidden = ffn_hidden
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.micro_batch_size = micro_batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.class_weight = class_weight
        self.random_state = random_state
        self.dtype = dtype
        self.verbose = verbose

    def _features(self, X):
        return MfccFeatures(self.mfcc_config).transform(X)

    def _build_model(self, n_features):
        cfg = self.mfcc_config or MfccConfig()
        return MfccFfn(MfccFfnConfig(2 * cfg.n_coefficients, tuple(self.ffn_hidden), 2,
                                     self.random_state, self.dtype))

    def _inputs(self, X, fitting=False):
        feats = self._features(X)
        if fitting:
            mean = feats.mean(axis=0)
            std = feats.std(axis=0)
            std[std == 0] = 1.0
            self.model_.feature_mean.data = mean.astype(self.model_.dtype)
            self.model_.feature_scale.data = std.astype(self.model_.dtype)
        return feats

    def _batch(self, inputs, idx):
        return inputs[idx]

    @classmethod
    def from_model(cls, model):
        c = model.config
        est = cls(ffn_hidden=c.ffn_hidden, random_state=c.seed, dtype=c.dtype)
        est.model_ = model
        est.classes_ = np.array([0, 1])
        return est


def make_estimator(kind, **params):
    kind = kind.lower().replace("_", "-")
    if kind == "iconnet":
        return IConNetClassifier(**params)
    if kind in ("mfcc-ffn", "mfccffn"):
        return MfccFfnClassifier(**params)
    raise ValueError(f"unknown model kind {kind!r}")


def estimator_from_model(model):
    if isinstance(model, IConNet):
        return IConNetClassifier.from_model(model)
    if isinstance(model, MfccFfn):
        return MfccFfnClassifier.from_model(model)
    raise TypeError(f"unsupported model {type(model).__name__}")

