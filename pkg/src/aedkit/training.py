"""Losses, optimizer, schedule, metrics, and the fold / ablation harness.

Fine-tuning runs a fixed number of epochs and reports the final epoch.
Pretraining (``epochs=None``) is open-ended: it stops once the evaluation loss
has not reached a new minimum for ``patience`` epochs *and* the learning rate
has dropped below ``lr_floor``; the weights of the epoch with the lowest
evaluation loss are kept.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import WeightArchive
from .audio import FeatureConfig
from .augment import MULTI_LABEL, SINGLE_LABEL, AugmentSpec, LabeledExample
from .datasets import N_FOLDS, FoldedCorpus, MultiLabelCorpus, batch_iter, featurize
from .model import ModelConfig, Network, build, load_weights, save_weights
from .rng import derive_rng
from .surgery import STEM, average_input_channels, replace_head

log = logging.getLogger(__name__)

CE = "single-label-CE"
BCE = "multi-label-BCE"
LOSS_MODES = (CE, BCE)


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 0.001
    lr_decay_per_epoch: float = 0.8
    epochs: int | None = 25
    loss_mode: str = CE
    class_weights: tuple[float, ...] | None = None
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_floor: float = 1e-6
    patience: int = 5
    max_epochs: int = 200

    def __post_init__(self):
        if not 0 < self.lr_decay_per_epoch < 1:
            raise ValueError("lr_decay_per_epoch must be in (0, 1)")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.class_weights is not None and self.loss_mode != BCE:
            raise ValueError("class_weights are only used with multi-label-BCE")
        if self.epochs is not None and self.epochs < 1:
            raise ValueError("epochs must be >= 1 (or None for open-ended pretraining)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def label_mode(self) -> str:
        return SINGLE_LABEL if self.loss_mode == CE else MULTI_LABEL


# --------------------------------------------------------------------------
# Schedule

def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.initial_lr * cfg.lr_decay_per_epoch ** epoch


def first_epoch_below(floor: float, cfg: TrainConfig) -> int:
    """Smallest epoch whose learning rate is strictly below ``floor``."""
    epoch = max(0, math.floor(math.log(floor / cfg.initial_lr) / math.log(cfg.lr_decay_per_epoch)))
    while lr_at(epoch, cfg) >= floor:
        epoch += 1
    while epoch > 0 and lr_at(epoch - 1, cfg) < floor:
        epoch -= 1
    return epoch


# --------------------------------------------------------------------------
# Losses

def _log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, class_index):
    """``-log softmax(logits)[class]``; batched when ``logits`` is 2-D."""
    logits = np.asarray(logits, dtype=np.float64)
    idx = np.asarray(class_index)
    k = logits.shape[-1]
    if np.any(idx < 0) or np.any(idx >= k):
        raise IndexError(f"class index outside [0, {k})")
    logp = _log_softmax(logits)
    if logits.ndim == 1:
        return float(-logp[int(idx)])
    return -logp[np.arange(len(logp)), idx]


def cross_entropy_grad(logits, class_index):
    """Mean batch cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    b = logits.shape[0]
    logp = _log_softmax(logits)
    rows = np.arange(b)
    grad = np.exp(logp)
    grad[rows, class_index] -= 1.0
    return float(-logp[rows, class_index].mean()), grad / b


def _bce_terms(logits, targets):
    # max(z, 0) - z t + log(1 + exp(-|z|))
    return np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))


def weighted_bce(logits, targets, weights=None):
    """Class-mean of weighted binary cross-entropy; batched when 2-D."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    k = logits.shape[-1]
    if targets.shape != logits.shape:
        raise ValueError(f"targets shape {targets.shape} != logits shape {logits.shape}")
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (k,):
        raise ValueError(f"need {k} class weights, got {w.shape}")
    per_class = w * _bce_terms(logits, targets)
    out = per_class.mean(axis=-1)
    return float(out) if logits.ndim == 1 else out


def weighted_bce_grad(logits, targets, weights=None):
    logits = np.asarray(logits, dtype=np.float64)
    b, k = logits.shape
    w = np.ones(k) if weights is None else np.asarray(weights, dtype=np.float64)
    loss = float(weighted_bce(logits, targets, w).mean())
    sig = 0.5 * (1.0 + np.tanh(0.5 * logits))
    return loss, w * (sig - targets) / (b * k)


def class_weights(labels) -> np.ndarray:
    """Inverse-frequency weights ``N / (K * count_c)``; a balanced set gives all ones.

    ``labels`` is an (N, K) multi-hot matrix, or a sequence of per-class counts
    when 1-D. ``N`` is the total number of positive labels.
    """
    labels = np.asarray(labels, dtype=np.float64)
    counts = labels if labels.ndim == 1 else labels.sum(axis=0)
    if np.any(counts <= 0):
        raise ValueError(f"classes {np.flatnonzero(counts <= 0).tolist()} have no examples")
    return counts.sum() / (len(counts) * counts)


# --------------------------------------------------------------------------
# Metrics

def accuracy(predictions, labels) -> float:
    """Fraction of rows whose argmax matches the label (index or one-hot)."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) == 0:
        raise ValueError("empty evaluation set")
    pred = predictions.argmax(axis=1) if predictions.ndim == 2 else predictions
    true = labels.argmax(axis=1) if labels.ndim == 2 else labels
    return float(np.mean(pred == true))


def average_precision(scores, labels) -> float:
    """Precision averaged over positive hits in descending-score order.

    Ties keep the original index order.
    """
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    hits = np.asarray(labels)[order] > 0
    if not hits.any():
        raise ValueError("average precision undefined without positives")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, len(ranks) + 1) / ranks))


def mean_average_precision(scores, label_matrix) -> float:
    """Mean AP over classes; classes with no positives are left out of the mean."""
    scores = np.asarray(scores)
    label_matrix = np.asarray(label_matrix)
    if len(scores) == 0:
        raise ValueError("empty evaluation set")
    aps = [average_precision(scores[:, c], label_matrix[:, c])
           for c in range(label_matrix.shape[1]) if label_matrix[:, c].any()]
    if not aps:
        raise ValueError("no class has a positive example")
    return float(np.mean(aps))


# --------------------------------------------------------------------------
# Optimizer

class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        """In-place update of every array in ``params``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# Training loop

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    eval_loss: float
    eval_metric: float


@dataclass
class RunHistory:
    metric: str
    records: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = -1
    stopped_early: bool = False

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def selected(self) -> EpochRecord:
        return self.records[self.selected_epoch]

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "lr", "train_loss", "eval_loss", f"eval_{self.metric}", "selected"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.lr), repr(r.train_loss), repr(r.eval_loss),
                            repr(r.eval_metric), int(r.epoch == self.selected_epoch)])


def _loss_and_grad(logits, batch_targets, cfg, weights):
    if cfg.loss_mode == CE:
        return cross_entropy_grad(logits, batch_targets.argmax(axis=1))
    return weighted_bce_grad(logits, batch_targets, weights)


def _eval_features(split, features, clip_seconds):
    feats = [featurize(ex, features, clip_seconds) for ex in split]
    x = np.stack([f.payload.values for f in feats])[:, None].astype(np.float32)
    return x, np.stack([ex.labels for ex in split])


def evaluate(net: Network, x, targets, cfg: TrainConfig, weights=None, batch_size=64):
    """(loss, metric) in inference mode; metric is accuracy (CE) or mAP (BCE)."""
    logits = np.concatenate([net.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)])
    logits = logits.astype(np.float64)
    if cfg.loss_mode == CE:
        idx = targets.argmax(axis=1)
        return float(cross_entropy(logits, idx).mean()), accuracy(logits, idx)
    return float(weighted_bce(logits, targets, weights).mean()), mean_average_precision(logits, targets)


def train(
    net: Network,
    train_split: Sequence[LabeledExample],
    eval_split: Sequence[LabeledExample],
    cfg: TrainConfig,
    augment_spec: AugmentSpec | None = None,
    seed: int = 0,
    features: FeatureConfig | None = None,
    clip_seconds: float | None = None,
    workers: int = 1,
) -> RunHistory:
    """Adam with per-epoch exponential decay. Mutates ``net``.

    Data order and augmentation are seeded from ``seed``; network init is the
    caller's responsibility, so identical inputs give identical histories.
    """
    features = features or FeatureConfig()
    if not train_split or not eval_split:
        raise TrainingError("train and eval splits must be nonempty")
    weights = None if cfg.class_weights is None else np.asarray(cfg.class_weights, dtype=np.float64)
    x_eval, y_eval = _eval_features(eval_split, features, clip_seconds)
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps)
    history = RunHistory("accuracy" if cfg.loss_mode == CE else "mAP")
    pretrain = cfg.epochs is None
    limit = cfg.max_epochs if pretrain else cfg.epochs
    best_loss, best_state, stale = math.inf, None, 0

    for epoch in range(limit):
        lr = lr_at(epoch, cfg)
        total, count = 0.0, 0
        for batch in batch_iter(train_split, augment_spec, cfg.batch_size, epoch, seed,
                                cfg.label_mode, features, clip_seconds, workers):
            logits = net.forward(batch.features, training=True)
            loss, grad = _loss_and_grad(logits.astype(np.float64), batch.targets, cfg, weights)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite training loss at epoch {epoch} (lr={lr:.3g})")
            grads = net.backward(grad)
            opt.step(net.params, grads, lr)
            total += loss * len(batch.targets)
            count += len(batch.targets)
        eval_loss, metric = evaluate(net, x_eval, y_eval, cfg, weights)
        if not math.isfinite(eval_loss):
            raise TrainingDiverged(f"non-finite eval loss at epoch {epoch} (lr={lr:.3g})")
        history.records.append(EpochRecord(epoch, lr, total / count, eval_loss, metric))
        log.info("epoch %d lr=%.3g train=%.4f eval=%.4f %s=%.4f",
                 epoch, lr, total / count, eval_loss, history.metric, metric)

        if eval_loss < best_loss:
            best_loss, stale = eval_loss, 0
            if pretrain:
                best_state = save_weights(net)
        else:
            stale += 1
        if pretrain and stale >= cfg.patience and lr < cfg.lr_floor:
            history.stopped_early = True
            break

    if pretrain:
        history.selected_epoch = int(np.argmin(history.column("eval_loss")))
        load_weights(net, best_state)
    else:
        history.selected_epoch = len(history.records) - 1
    return history


# --------------------------------------------------------------------------
# Fold rotation

@dataclass
class FoldResult:
    per_fold: dict[int, float]
    histories: dict[int, RunHistory]

    @property
    def accuracies(self) -> list[float]:
        return [self.per_fold[f] for f in sorted(self.per_fold)]

    @property
    def mean(self) -> float:
        return sum(self.accuracies) / len(self.accuracies)

    def mean_curve(self, column: str) -> np.ndarray:
        """Per-epoch average over folds (shortest history wins)."""
        cols = [h.column(column) for h in self.histories.values()]
        n = min(len(c) for c in cols)
        return np.mean([c[:n] for c in cols], axis=0)


def _derived_seed(seed, *keys) -> int:
    return int(derive_rng(seed, *keys).integers(2 ** 62))


def prepare_donor(archive: WeightArchive, cfg: ModelConfig, rng=0) -> WeightArchive:
    """Adapt a donor archive to ``cfg``: RGB stem averaging and head replacement as needed."""
    if STEM in archive and archive[STEM].shape[1] == 3 and cfg.input_channels == 1:
        archive = average_input_channels(archive, STEM)
    return replace_head(archive, cfg.n_classes, rng)


def run_folds(
    corpus: FoldedCorpus,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    augment_spec: AugmentSpec | None = None,
    base_weights: WeightArchive | None = None,
    seed: int = 0,
    features: FeatureConfig | None = None,
    folds: Sequence[int] | None = None,
    workers: int = 1,
) -> FoldResult:
    """Train on four folds and evaluate on the fifth, for every rotation.

    With ``base_weights`` the donor head is replaced and all parameters are
    fine-tuned. Every fold derives its own seeds from ``(seed, fold)``, so
    folds are independent of the order they run in.
    """
    folds = list(folds) if folds is not None else list(range(1, N_FOLDS + 1))
    present = set(corpus.folds.tolist())
    missing = [f for f in folds if f not in present]
    if missing:
        raise TrainingError(f"corpus lacks fold(s) {missing}")
    model_cfg = replace(model_cfg, n_classes=corpus.n_classes)
    result = FoldResult({}, {})
    for fold in folds:
        train_split, eval_split = corpus.split(fold)
        net = build(model_cfg, derive_rng(seed, "init", fold))
        if base_weights is not None:
            load_weights(net, prepare_donor(base_weights, model_cfg, derive_rng(seed, "head", fold)))
        history = train(net, train_split, eval_split, cfg, augment_spec,
                        _derived_seed(seed, "train", fold), features, corpus.clip_seconds, workers)
        result.per_fold[fold] = history.selected.eval_metric
        result.histories[fold] = history
    return result


def pretrain(
    corpus: MultiLabelCorpus,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    augment_spec: AugmentSpec | None = None,
    init: WeightArchive | None = None,
    seed: int = 0,
    features: FeatureConfig | None = None,
    workers: int = 1,
) -> tuple[Network, RunHistory]:
    """Multi-label (BCE) training with class weights, as used to build donors."""
    model_cfg = replace(model_cfg, n_classes=corpus.n_classes)
    if cfg.loss_mode != BCE:
        cfg = replace(cfg, loss_mode=BCE)
    if cfg.class_weights is None:
        cfg = replace(cfg, class_weights=tuple(class_weights(corpus.label_matrix("train")).tolist()))
    net = build(model_cfg, derive_rng(seed, "pretrain-init"))
    if init is not None:
        load_weights(net, prepare_donor(init, model_cfg, derive_rng(seed, "pretrain-head")))
    history = train(net, corpus.train, corpus.eval, cfg, augment_spec,
                    _derived_seed(seed, "pretrain"), features, corpus.clip_seconds, workers)
    return net, history


# --------------------------------------------------------------------------
# Ablation grid

@dataclass(frozen=True)
class AblationEntry:
    """One row of the ablation table.

    ``init`` is ``"scratch"`` or a donor archive (path or in-memory), e.g.
    ImageNet weights. ``pretrain`` names a multi-label dataset to pretrain on
    before fine-tuning; ``pretrain_augment`` and ``augment`` apply during
    pretraining and fine-tuning respectively.
    """

    name: str
    model: ModelConfig = ModelConfig()
    init: str | WeightArchive = "scratch"
    pretrain: str | None = None
    pretrain_augment: AugmentSpec | None = None
    augment: AugmentSpec | None = None
    dataset: str = "esc50"

    @property
    def pretrain_label(self) -> str:
        parts = [] if self.init == "scratch" else ["IN"]
        if self.pretrain:
            parts.append("AS")
        return " + ".join(parts) or "-"

    @property
    def augment_label(self) -> str:
        parts = []
        if self.pretrain and self.pretrain_augment is not None and not self.pretrain_augment.is_identity():
            parts.append("AS")
        if self.augment is not None and not self.augment.is_identity():
            parts.append("ESC")
        return " + ".join(parts) or "-"


@dataclass
class AblationGrid:
    entries: list[AblationEntry]
    train: TrainConfig = TrainConfig()
    pretrain_train: TrainConfig = TrainConfig(epochs=None, loss_mode=BCE)
    features: FeatureConfig = FeatureConfig()
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        names = [e.name for e in self.entries]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate grid entry names: {dupes}")


RESULT_COLUMNS = ["model", "pretrain", "augment"] + [f"fold_{k}" for k in range(1, N_FOLDS + 1)] + \
    ["mean_accuracy", "status", "error"]
CURVE_COLUMNS = ["model", "epoch", "mean_eval_accuracy", "mean_eval_loss", "mean_train_loss"]


def epochs_to_fraction(curve, fraction: float = 0.9) -> int:
    """1-based number of epochs until ``curve`` first reaches ``fraction`` of its final value."""
    curve = np.asarray(curve)
    return int(np.argmax(curve >= fraction * curve[-1])) + 1


def _resolve_init(init):
    if isinstance(init, WeightArchive) or init == "scratch":
        return None if init == "scratch" else init
    return WeightArchive.load(init)


def ablate(grid: AblationGrid, datasets: dict, out_path=None) -> list[dict]:
    """Run every grid entry through :func:`run_folds` and tabulate.

    Writes ``results.csv`` (one row per entry) and ``curves.csv`` (fold-mean
    accuracy/loss per epoch) under ``out_path`` when given. A failing entry is
    recorded with ``status=error`` and the grid continues.
    """
    rows, curves = [], []
    donors: dict = {}
    for entry in grid.entries:
        row = {"model": entry.name, "pretrain": entry.pretrain_label, "augment": entry.augment_label}
        try:
            base = _resolve_init(entry.init)
            if entry.pretrain:
                key = (id(entry.init) if isinstance(entry.init, WeightArchive) else entry.init,
                       entry.pretrain, repr(entry.pretrain_augment), repr(entry.model))
                if key not in donors:
                    net, _ = pretrain(datasets[entry.pretrain], entry.model, grid.pretrain_train,
                                      entry.pretrain_augment, base, grid.seed, grid.features, grid.workers)
                    donors[key] = save_weights(net, {"pretrained_on": entry.pretrain})
                base = donors[key]
            result = run_folds(datasets[entry.dataset], entry.model, grid.train, entry.augment, base,
                               grid.seed, grid.features, workers=grid.workers)
            for k, acc in zip(sorted(result.per_fold), result.accuracies):
                row[f"fold_{k}"] = acc
            row.update(mean_accuracy=result.mean, status="ok", error="")
            acc_curve = result.mean_curve("eval_metric")
            loss_curve = result.mean_curve("eval_loss")
            train_curve = result.mean_curve("train_loss")
            for e in range(len(acc_curve)):
                curves.append({"model": entry.name, "epoch": e, "mean_eval_accuracy": acc_curve[e],
                               "mean_eval_loss": loss_curve[e], "mean_train_loss": train_curve[e]})
        except Exception as exc:  # grid keeps going; failure is recorded in the table
            log.error("grid entry %s failed: %s", entry.name, exc)
            log.debug("%s", traceback.format_exc())
            row.update(mean_accuracy="", status="error", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)

    if out_path is not None:
        out = Path(out_path)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "results.csv", RESULT_COLUMNS, rows)
        _write_rows(out / "curves.csv", CURVE_COLUMNS, curves)
    return rows


def _write_rows(path, columns, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, restval="", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def config_echo(**parts) -> str:
    """JSON rendering of dataclass configs, for the output-directory echo."""
    def enc(v):
        if hasattr(v, "__dataclass_fields__"):
            return asdict(v)
        raise TypeError(type(v).__name__)
    return json.dumps(parts, default=enc, indent=2, sort_keys=True)
