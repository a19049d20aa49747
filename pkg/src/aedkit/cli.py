"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every command writes its artifacts under ``--out`` (or the config's
``output_dir``) together with an echo of the resolved configuration.
``AEDKIT_SEED`` overrides the seed from config files; an explicit ``--seed``
flag overrides both.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as C
from .archive import ArchiveError, WeightArchive
from .audio import AudioError, FeatureConfig, load_wav, log_mel, resample, save_wav
from .augment import (
    MULTI_LABEL,
    SINGLE_LABEL,
    AugmentConfigError,
    LabeledExample,
    augment_spectrogram,
    augment_waveform,
)
from .datasets import (
    ManifestError,
    ToyDatasetSpec,
    generate_toy,
    load_esc50,
    load_folded,
    load_multilabel,
    load_multilabel_corpus,
)
from .model import ModelConfig, ModelConfigError, save_weights
from .rng import derive_rng
from .surgery import (
    STEM,
    SurgeryError,
    average_input_channels,
    compatibility_check,
    delete_middle_flow,
    replace_head,
)
from .training import AblationEntry, AblationGrid, ablate, pretrain, run_folds

log = logging.getLogger("aedkit")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_matrix(path, values):
    np.savetxt(path, values, delimiter=",", fmt="%.17g")


def _features_from(path) -> FeatureConfig:
    if path is None:
        return FeatureConfig()
    data = C.read_json(path)
    feature_keys = set(FeatureConfig.__dataclass_fields__)
    if set(data) <= feature_keys:
        return C.from_dict(FeatureConfig, data, "features")
    return C.from_dict(C.ExperimentConfig, data, "experiment").features


def _seed(explicit, fallback=0):
    if explicit is not None:
        return explicit
    env = os.environ.get(C.SEED_ENV)
    return int(env) if env is not None else fallback


# --------------------------------------------------------------------------

def cmd_featurize(args):
    cfg = _features_from(args.config)
    clip = load_wav(args.inp)
    if clip.sample_rate != cfg.sample_rate:
        clip = resample(clip, cfg.sample_rate)
    spec = log_mel(clip, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_matrix(out, spec.values)
    log.info("wrote %dx%d log-mel matrix to %s", *spec.shape, out)


def cmd_augment_preview(args):
    from .augment import AugmentSpec

    spec = C.from_dict(AugmentSpec, C.read_json(args.spec), "augment") if args.spec else AugmentSpec()
    spec.validate(args.mode)
    features = _features_from(args.config)
    seed = _seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    clip = load_wav(args.inp)
    ex = LabeledExample(clip, np.ones(1))
    partner = LabeledExample(load_wav(args.partner), np.ones(1)) if args.partner else None
    rng = derive_rng(seed, "augment-preview")
    fired: list = []
    wave = augment_waveform(ex, spec, rng, args.mode, partner, features, args.clip_seconds, fired)
    before_wave = augment_waveform(ex, C.from_dict(AugmentSpec, {}), 0, args.mode, None, features, args.clip_seconds)
    mel = LabeledExample(log_mel(wave.payload, features), wave.labels)
    after = augment_spectrogram(mel, spec, rng, args.mode, fired)

    save_wav(out / "before.wav", before_wave.payload, "float32")
    save_wav(out / "after.wav", wave.payload, "float32")
    _write_matrix(out / "before.csv", log_mel(before_wave.payload, features).values)
    _write_matrix(out / "after.csv", after.payload.values)
    report = {"seed": seed, "mode": args.mode, "is_negative": after.is_negative, "transforms": fired}
    (out / "log.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out / "config.json").write_text(json.dumps(
        {"augment": asdict(spec), "features": asdict(features), "seed": seed,
         "clip_seconds": args.clip_seconds, "mode": args.mode}, indent=2, sort_keys=True) + "\n")
    print(f"{len(fired)} transform(s) fired")


def _model_cfg(args) -> ModelConfig:
    if args.config:
        data = C.read_json(args.config)
        if set(data) <= set(ModelConfig.__dataclass_fields__):
            return C.from_dict(ModelConfig, data, "model")
        return C.from_dict(C.ExperimentConfig, data, "experiment").model
    return ModelConfig(middle_repeats=args.middle_repeats, width_multiplier=args.width, n_classes=args.classes)


def cmd_surgery(args):
    if args.op == "check":
        report = compatibility_check(WeightArchive.load(args.inp), _model_cfg(args))
        for line in report.lines():
            print(line)
        if not report.loadable:
            print(f"archive incompatible: {len(report.missing)} missing, "
                  f"{len(report.mismatched)} mismatched", file=sys.stderr)
            return EXIT_RUNTIME
        print("compatible")
        return EXIT_OK

    archive = WeightArchive.load(args.inp)
    if args.op == "avg-channels":
        result = average_input_channels(archive, args.layer)
    elif args.op == "replace-head":
        result = replace_head(archive, args.classes, derive_rng(_seed(args.seed), "replace-head"))
    else:
        result = delete_middle_flow(archive, args.keep)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    result.save(args.out)
    print(result.audit_trail()[-1])
    return EXIT_OK


def _load_dataset(dc: C.DatasetConfig, root: Path, seed: int):
    if dc.kind == "toy":
        toy = dc.toy
        if C.SEED_ENV in os.environ:
            toy = replace(toy, seed=seed)
        return generate_toy(toy, root).load()
    if dc.kind == "esc50":
        m = load_esc50(dc.meta_csv, dc.audio_dir, strict=dc.strict, clip_seconds=dc.clip_seconds or 5.0)
        return load_folded(m)
    m = load_multilabel(dc.meta_csv, dc.audio_dir, clip_seconds=dc.clip_seconds or 10.0)
    return load_multilabel_corpus(m)


def cmd_train(args):
    cfg = C.load_experiment(args.config)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    multi = cfg.dataset.kind == "multilabel" or (cfg.dataset.kind == "toy" and cfg.dataset.toy.multi_label)
    if cfg.augment is not None:
        cfg.augment.validate(MULTI_LABEL if multi else SINGLE_LABEL)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(C.echo(cfg) + "\n")
    corpus = _load_dataset(cfg.dataset, out / "data", cfg.seed)
    init = WeightArchive.load(cfg.init_weights) if cfg.init_weights else None

    if multi:
        net, history = pretrain(corpus, cfg.model, cfg.train, cfg.augment, init, cfg.seed, cfg.features, cfg.workers)
        history.to_csv(out / "history.csv")
        save_weights(net, {"pretrained_on": cfg.dataset.meta_csv or "toy"}).save(out / "weights.wtar")
        print(f"selected epoch {history.selected_epoch}, eval {history.metric} {history.selected.eval_metric:.4f}")
        return EXIT_OK

    result = run_folds(corpus, cfg.model, cfg.train, cfg.augment, init, cfg.seed, cfg.features,
                       cfg.eval_folds, cfg.workers)
    for fold, history in result.histories.items():
        history.to_csv(out / f"history_fold{fold}.csv")
    with (out / "results.csv").open("w") as fh:
        fh.write("fold,accuracy\n")
        for fold in sorted(result.per_fold):
            fh.write(f"{fold},{result.per_fold[fold]!r}\n")
        fh.write(f"mean,{result.mean!r}\n")
    print(f"mean accuracy {result.mean:.4f} over folds {sorted(result.per_fold)}")
    return EXIT_OK


def cmd_ablate(args):
    cfg = C.load_grid(args.grid)
    if args.workers is not None:
        cfg = replace(cfg, workers=args.workers)
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(C.echo(cfg) + "\n")
    used = {e.dataset for e in cfg.entries} | {e.pretrain for e in cfg.entries if e.pretrain}
    unknown = sorted(used - set(cfg.datasets))
    if unknown:
        raise UsageError(f"grid references unknown dataset(s) {unknown}")
    datasets = {name: _load_dataset(dc, out / "data" / name, cfg.seed)
                for name, dc in cfg.datasets.items() if name in used}
    grid = AblationGrid(
        [AblationEntry(e.name, e.model, e.init, e.pretrain, e.pretrain_augment, e.augment, e.dataset)
         for e in cfg.entries],
        cfg.train, cfg.pretrain_train, cfg.features, cfg.seed, cfg.workers,
    )
    rows = ablate(grid, datasets, out)
    for r in rows:
        mean = r["mean_accuracy"]
        print(f"{r['model']:<24} {r['pretrain']:<8} {r['augment']:<8} "
              f"{mean if mean == '' else format(mean, '.4f')} {r['status']}")
    return EXIT_RUNTIME if any(r["status"] != "ok" for r in rows) else EXIT_OK


def cmd_generate_toy(args):
    spec = C.from_dict(ToyDatasetSpec, C.read_json(args.spec), "toy") if args.spec else ToyDatasetSpec()
    if args.seed is not None or C.SEED_ENV in os.environ:
        spec = replace(spec, seed=_seed(args.seed))
    toy = generate_toy(spec, args.out)
    print(f"wrote {len(toy.manifest.rows)} clips to {toy.root}")


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="aedkit", description="Audio event detection ablation kit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("featurize", help="write the log-mel matrix of a WAV file as CSV")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--config", help="FeatureConfig JSON or experiment config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_featurize)

    a = sub.add_parser("augment-preview", help="augment one file and write before/after artifacts")
    a.add_argument("--in", dest="inp", required=True)
    a.add_argument("--spec", help="AugmentSpec JSON")
    a.add_argument("--seed", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--mode", choices=["single-label", "multi-label"], default="single-label")
    a.add_argument("--partner", help="second WAV used as the mixup partner")
    a.add_argument("--clip-seconds", type=float)
    a.add_argument("--config", help="FeatureConfig JSON or experiment config")
    a.set_defaults(func=cmd_augment_preview)

    s = sub.add_parser("surgery", help="weight-archive conversions")
    s.add_argument("op", choices=["avg-channels", "replace-head", "delete-middle", "check"])
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out")
    s.add_argument("--layer", default=STEM)
    s.add_argument("--classes", type=int, default=50)
    s.add_argument("--keep", type=int, default=0)
    s.add_argument("--seed", type=int)
    s.add_argument("--middle-repeats", type=int, default=8)
    s.add_argument("--width", type=float, default=1.0)
    s.add_argument("--config", help="ModelConfig JSON or experiment config (check only)")
    s.set_defaults(func=cmd_surgery)

    t = sub.add_parser("train", help="fold-rotated training or multi-label pretraining")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("ablate", help="run an ablation grid")
    g.add_argument("--grid", required=True)
    g.add_argument("--out")
    g.add_argument("--workers", type=int)
    g.set_defaults(func=cmd_ablate)

    y = sub.add_parser("generate-toy", help="write a synthetic toy corpus")
    y.add_argument("--spec", help="ToyDatasetSpec JSON")
    y.add_argument("--seed", type=int)
    y.add_argument("--out", required=True)
    y.set_defaults(func=cmd_generate_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "surgery" and args.op != "check" and not args.out:
        parser.error("surgery needs --out")
    try:
        code = args.func(args)
    except (C.ConfigError, UsageError, AugmentConfigError, ModelConfigError) as exc:
        print(f"aedkit: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AudioError, ArchiveError, SurgeryError, ManifestError, OSError, ValueError, RuntimeError) as exc:
        print(f"aedkit: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
