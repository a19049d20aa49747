"""Manifests, fold splits, toy corpora and the augmenting batch iterator.

Two on-disk manifest formats are read:

* ESC-50 style folded single-label CSV with columns ``filename, fold, target``
  (extra columns are ignored).
* Multi-label CSV. The first line declares the class count as
  ``#n_classes=<K>``, followed by a header ``path,labels,split`` where
  ``labels`` is a semicolon-joined list of class indices and ``split`` is
  ``train`` or ``eval``.

A toy corpus directory holds ``audio/*.wav`` plus ``meta.csv`` (folded) or
``labels.csv`` (multi-label) in the formats above.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .audio import AudioClip, FeatureConfig, fix_length, hz_to_mel, load_wav, log_mel, mel_to_hz, resample, save_wav
from .augment import MULTI_LABEL, SINGLE_LABEL, AugmentSpec, LabeledExample, augment_pipeline
from .rng import derive_rng

N_FOLDS = 5
ESC50_CLASSES = 50
ESC50_PER_CLASS_PER_FOLD = 8


class ManifestError(ValueError):
    pass


# --------------------------------------------------------------------------
# ESC-50 style folded manifests

@dataclass(frozen=True)
class Esc50Row:
    filename: str
    fold: int
    target: int


@dataclass
class Esc50Manifest:
    rows: list[Esc50Row]
    audio_dir: Path
    n_classes: int
    clip_seconds: float = 5.0

    def __len__(self):
        return len(self.rows)

    def path(self, row: Esc50Row) -> Path:
        return self.audio_dir / row.filename


def _validate_structure(rows, n_classes, strict):
    folds = {r.fold for r in rows}
    missing = sorted(set(range(1, N_FOLDS + 1)) - folds)
    if missing:
        raise ManifestError(f"missing fold(s) {missing}")
    if not strict:
        return
    if len(rows) != N_FOLDS * ESC50_CLASSES * ESC50_PER_CLASS_PER_FOLD:
        raise ManifestError(f"strict ESC-50 check: expected 2000 rows, found {len(rows)}")
    if n_classes != ESC50_CLASSES:
        raise ManifestError(f"strict ESC-50 check: expected 50 classes, found {n_classes}")
    counts = np.zeros((N_FOLDS, ESC50_CLASSES), dtype=int)
    for r in rows:
        counts[r.fold - 1, r.target] += 1
    bad = np.argwhere(counts != ESC50_PER_CLASS_PER_FOLD)
    if bad.size:
        fold, target = bad[0]
        raise ManifestError(
            f"strict ESC-50 check: class {target} has {counts[fold, target]} files in fold {fold + 1}, expected 8"
        )


def load_esc50(meta_csv, audio_dir=None, strict: bool = False, clip_seconds: float = 5.0) -> Esc50Manifest:
    """Read and validate an ESC-50 style ``meta.csv``.

    ``strict`` enforces the real corpus layout (2000 rows, every class 8 times
    per fold); otherwise only fold completeness is required.
    """
    meta_csv = Path(meta_csv)
    with meta_csv.open(newline="") as fh:
        reader = csv.DictReader(fh)
        columns = set(reader.fieldnames or [])
        need = {"filename", "fold", "target"}
        if not need <= columns:
            raise ManifestError(f"{meta_csv}: missing columns {sorted(need - columns)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            try:
                fold, target = int(rec["fold"]), int(rec["target"])
            except ValueError as exc:
                raise ManifestError(f"{meta_csv}:{line}: {exc}") from exc
            if fold not in range(1, N_FOLDS + 1):
                raise ManifestError(f"{meta_csv}:{line}: fold {fold} not in 1..{N_FOLDS}")
            if target < 0:
                raise ManifestError(f"{meta_csv}:{line}: negative target {target}")
            rows.append(Esc50Row(rec["filename"], fold, target))
    seen = set()
    for r in rows:
        if r.filename in seen:
            raise ManifestError(f"duplicate path {r.filename!r}")
        seen.add(r.filename)
    n_classes = max((r.target for r in rows), default=-1) + 1
    _validate_structure(rows, n_classes, strict)
    audio_dir = Path(audio_dir) if audio_dir is not None else meta_csv.parent / "audio"
    return Esc50Manifest(rows, audio_dir, n_classes, clip_seconds)


def write_esc50(path, rows: Sequence[Esc50Row]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "fold", "target"])
        for r in rows:
            w.writerow([r.filename, r.fold, r.target])


@dataclass(frozen=True)
class FoldSplit:
    train: list
    eval: list


def folds_split(m: Esc50Manifest, eval_fold: int) -> FoldSplit:
    """Withhold ``eval_fold`` for evaluation, train on the other four."""
    if eval_fold not in range(1, N_FOLDS + 1):
        raise ManifestError(f"eval_fold must be in 1..{N_FOLDS}, got {eval_fold}")
    return FoldSplit(
        [r for r in m.rows if r.fold != eval_fold],
        [r for r in m.rows if r.fold == eval_fold],
    )


# --------------------------------------------------------------------------
# Multi-label manifests

@dataclass(frozen=True)
class MultiLabelRow:
    path: str
    labels: frozenset
    split: str


@dataclass
class MultiLabelManifest:
    rows: list[MultiLabelRow]
    n_classes: int
    audio_dir: Path
    clip_seconds: float = 10.0

    def split(self, name: str) -> list[MultiLabelRow]:
        return [r for r in self.rows if r.split == name]


def load_multilabel(path, audio_dir=None, clip_seconds: float = 10.0) -> MultiLabelManifest:
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline().strip()
        if not first.startswith("#n_classes="):
            raise ManifestError(f"{path}: first line must declare '#n_classes=<K>'")
        n_classes = int(first.split("=", 1)[1])
        reader = csv.DictReader(fh)
        if not {"path", "labels", "split"} <= set(reader.fieldnames or []):
            raise ManifestError(f"{path}: header must contain path,labels,split")
        rows = []
        for line, rec in enumerate(reader, start=3):
            labels = frozenset(int(x) for x in rec["labels"].split(";") if x.strip())
            if not labels:
                raise ManifestError(f"{path}:{line}: empty label set")
            if min(labels) < 0 or max(labels) >= n_classes:
                raise ManifestError(f"{path}:{line}: label outside [0, {n_classes})")
            if rec["split"] not in ("train", "eval"):
                raise ManifestError(f"{path}:{line}: split must be train or eval")
            rows.append(MultiLabelRow(rec["path"], labels, rec["split"]))
    audio_dir = Path(audio_dir) if audio_dir is not None else path.parent / "audio"
    return MultiLabelManifest(rows, n_classes, audio_dir, clip_seconds)


def write_multilabel(path, rows: Sequence[MultiLabelRow], n_classes: int) -> None:
    with Path(path).open("w", newline="") as fh:
        fh.write(f"#n_classes={n_classes}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "labels", "split"])
        for r in rows:
            w.writerow([r.path, ";".join(str(i) for i in sorted(r.labels)), r.split])


# --------------------------------------------------------------------------
# In-memory corpora

@dataclass
class FoldedCorpus:
    """Single-label examples tagged with their fold (1-based)."""

    examples: list[LabeledExample]
    folds: np.ndarray
    n_classes: int
    clip_seconds: float

    def split(self, eval_fold: int) -> tuple[list[LabeledExample], list[LabeledExample]]:
        if eval_fold not in set(self.folds.tolist()):
            raise ManifestError(f"fold {eval_fold} not present in corpus")
        train = [ex for ex, f in zip(self.examples, self.folds) if f != eval_fold]
        held = [ex for ex, f in zip(self.examples, self.folds) if f == eval_fold]
        return train, held


@dataclass
class MultiLabelCorpus:
    train: list[LabeledExample]
    eval: list[LabeledExample]
    n_classes: int
    clip_seconds: float

    def label_matrix(self, split: str = "train") -> np.ndarray:
        return np.stack([ex.labels for ex in getattr(self, split)])


def load_folded(m: Esc50Manifest) -> FoldedCorpus:
    examples = [LabeledExample.one_hot(load_wav(m.path(r)), r.target, m.n_classes) for r in m.rows]
    return FoldedCorpus(examples, np.array([r.fold for r in m.rows]), m.n_classes, m.clip_seconds)


def load_multilabel_corpus(m: MultiLabelManifest) -> MultiLabelCorpus:
    def load(rows):
        out = []
        for r in rows:
            labels = np.zeros(m.n_classes)
            labels[list(r.labels)] = 1.0
            out.append(LabeledExample(load_wav(m.audio_dir / r.path), labels))
        return out

    return MultiLabelCorpus(load(m.split("train")), load(m.split("eval")), m.n_classes, m.clip_seconds)


# --------------------------------------------------------------------------
# Toy corpora

@dataclass(frozen=True)
class ToyDatasetSpec:
    """Sine-signature corpus: class ``c`` is a tone at ``frequencies[c]`` over a noise floor.

    Frequencies default to points evenly spaced in mel between ``fmin`` and
    ``fmax``. Multi-label clips superimpose 1..``max_signatures`` distinct
    class tones.
    """

    n_classes: int = 4
    examples_per_class: int = 40
    clip_seconds: float = 1.0
    sample_rate: int = 16000
    noise_floor: float = 0.02
    multi_label: bool = False
    max_signatures: int = 3
    eval_fraction: float = 0.2
    fmin: float = 300.0
    fmax: float = 4000.0
    frequencies: tuple[float, ...] | None = None
    seed: int = 0

    def class_frequencies(self) -> np.ndarray:
        if self.frequencies is not None:
            return np.asarray(self.frequencies, dtype=np.float64)
        if self.n_classes == 1:
            return np.array([self.fmin])
        return mel_to_hz(np.linspace(hz_to_mel(self.fmin), hz_to_mel(self.fmax), self.n_classes))

    def validate(self, features: FeatureConfig | None = None) -> None:
        features = features or FeatureConfig(sample_rate=self.sample_rate)
        freqs = self.class_frequencies()
        if len(freqs) != self.n_classes:
            raise ValueError("need one frequency per class")
        if self.multi_label and not 1 <= self.max_signatures <= self.n_classes:
            raise ValueError("max_signatures must be in [1, n_classes]")
        if not self.multi_label and self.examples_per_class % N_FOLDS:
            raise ValueError(f"examples_per_class must be a multiple of {N_FOLDS} for folded corpora")
        bins = np.array([dominant_mel_bin(f, features) for f in freqs])
        gaps = np.abs(np.diff(np.sort(bins)))
        if gaps.size and gaps.min() < 2:
            raise ValueError("class frequencies must be separated by at least 2 mel bins")


def dominant_mel_bin(freq: float, features: FeatureConfig) -> int:
    """Index of the mel filter whose center is closest to ``freq``."""
    edges = mel_to_hz(np.linspace(hz_to_mel(features.fmin), hz_to_mel(features.f_high), features.n_mels + 2))
    return int(np.argmin(np.abs(edges[1:-1] - freq)))


@dataclass
class ToyCorpus:
    root: Path
    spec: ToyDatasetSpec
    manifest: Esc50Manifest | MultiLabelManifest = field(repr=False)

    def load(self) -> FoldedCorpus | MultiLabelCorpus:
        if isinstance(self.manifest, Esc50Manifest):
            return load_folded(self.manifest)
        return load_multilabel_corpus(self.manifest)


def _tone(rng, freq, n, sr):
    t = np.arange(n) / sr
    jitter = 1.0 + rng.uniform(-0.01, 0.01)
    return np.sin(2 * np.pi * freq * jitter * t + rng.uniform(0, 2 * np.pi))


def toy_clip(spec: ToyDatasetSpec, classes: Sequence[int], rng) -> AudioClip:
    n = int(round(spec.clip_seconds * spec.sample_rate))
    freqs = spec.class_frequencies()
    x = rng.normal(0.0, spec.noise_floor, n)
    amps = rng.uniform(0.2, 0.5, len(classes))
    amps *= min(1.0, 0.8 / amps.sum())
    for amp, c in zip(amps, classes):
        x += amp * _tone(rng, freqs[c], n, spec.sample_rate)
    return AudioClip(np.clip(x, -1.0, 1.0), spec.sample_rate)


def generate_toy(spec: ToyDatasetSpec, out_dir) -> ToyCorpus:
    """Write a deterministic toy corpus (PCM16 WAVs plus manifest) to ``out_dir``."""
    spec.validate()
    root = Path(out_dir)
    (root / "audio").mkdir(parents=True, exist_ok=True)
    rng = derive_rng(spec.seed, "toy")
    total = spec.n_classes * spec.examples_per_class

    if not spec.multi_label:
        rows = []
        per_fold = spec.examples_per_class // N_FOLDS
        for c in range(spec.n_classes):
            for k in range(spec.examples_per_class):
                fold = k // per_fold + 1
                name = f"{fold}-{c:03d}-{k:04d}.wav"
                save_wav(root / "audio" / name, toy_clip(spec, [c], rng))
                rows.append(Esc50Row(name, fold, c))
        write_esc50(root / "meta.csv", rows)
        manifest = load_esc50(root / "meta.csv", root / "audio", clip_seconds=spec.clip_seconds)
        return ToyCorpus(root, spec, manifest)

    rows = []
    n_eval = int(round(spec.eval_fraction * total))
    for i in range(total):
        k = int(rng.integers(1, spec.max_signatures + 1))
        classes = sorted(int(c) for c in rng.choice(spec.n_classes, size=k, replace=False))
        name = f"clip-{i:05d}.wav"
        save_wav(root / "audio" / name, toy_clip(spec, classes, rng))
        rows.append(MultiLabelRow(name, frozenset(classes), "eval" if i >= total - n_eval else "train"))
    write_multilabel(root / "labels.csv", rows, spec.n_classes)
    manifest = load_multilabel(root / "labels.csv", root / "audio", clip_seconds=spec.clip_seconds)
    return ToyCorpus(root, spec, manifest)


# --------------------------------------------------------------------------
# Batching

@dataclass
class Batch:
    features: np.ndarray  # (B, 1, n_mels, T) float32
    targets: np.ndarray  # (B, n_classes) multi-hot
    negative: np.ndarray  # (B,) bool
    indices: np.ndarray  # positions in the split


def featurize(ex: LabeledExample, features: FeatureConfig, clip_seconds: float | None) -> LabeledExample:
    """Deterministic, unaugmented path: resample, fix length, log-mel."""
    clip = ex.payload
    if clip.sample_rate != features.sample_rate:
        clip = resample(clip, features.sample_rate)
    if clip_seconds is not None:
        clip = fix_length(clip, clip_seconds)
    return LabeledExample(log_mel(clip, features), ex.labels)


def _stack(examples, indices):
    feats = np.stack([ex.payload.values for ex in examples])[:, None].astype(np.float32)
    return Batch(
        feats,
        np.stack([ex.labels for ex in examples]),
        np.array([ex.is_negative for ex in examples]),
        np.asarray(indices),
    )


def batch_iter(
    split: Sequence[LabeledExample],
    augment_spec: AugmentSpec | None,
    batch_size: int,
    epoch: int,
    seed: int,
    mode: str = SINGLE_LABEL,
    features: FeatureConfig | None = None,
    clip_seconds: float | None = None,
    workers: int = 1,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield augmented, featurized batches for one epoch.

    The order is a permutation seeded by ``(seed, epoch)``. Example ``i`` of
    the split is augmented with a stream derived from ``(seed, epoch, i)``,
    and its mixup partner comes from the same shuffled epoch, so the output is
    independent of ``workers``. The last short batch is kept.
    """
    if not split:
        raise ValueError("cannot iterate an empty split")
    features = features or FeatureConfig()
    n = len(split)
    order = derive_rng(seed, "shuffle", epoch).permutation(n) if shuffle else np.arange(n)
    if augment_spec is not None:
        augment_spec.validate(mode)

    def one(i):
        ex = split[i]
        if augment_spec is None:
            return featurize(ex, features, clip_seconds)
        partner = None
        if mode == MULTI_LABEL and augment_spec.mixup.probability > 0:
            partner = split[order[derive_rng(seed, "partner", epoch, i).integers(n)]]
        return augment_pipeline(
            ex, augment_spec, derive_rng(seed, "augment", epoch, i), mode,
            mix_partner=partner, features=features, clip_seconds=clip_seconds,
        )

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            done = list(pool.map(one, idx)) if pool else [one(i) for i in idx]
            yield _stack(done, idx)
    finally:
        if pool:
            pool.shutdown(wait=True)


def n_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)
