import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from aedkit.archive import WeightArchive
from aedkit.audio import AudioClip, save_wav
from aedkit.cli import main
from aedkit.model import ModelConfig, build, save_weights
from aedkit.training import lr_at, TrainConfig

SR = 16000
TINY = {"middle_repeats": 0, "width_multiplier": 0.0625, "n_classes": 2}


@pytest.fixture
def wavs(tmp_path):
    t = np.arange(5 * SR) / SR
    save_wav(tmp_path / "tone.wav", AudioClip(0.4 * np.sin(2 * np.pi * 440 * t), SR))
    save_wav(tmp_path / "other.wav", AudioClip(0.4 * np.sin(2 * np.pi * 1200 * t), SR))
    save_wav(tmp_path / "silence.wav", AudioClip(np.zeros(SR), SR))
    return tmp_path


def read_matrix(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def write_json(path, data):
    path.write_text(json.dumps(data))
    return str(path)


# ---------------------------------------------------------------- featurize

def test_featurize_five_seconds(wavs):
    assert main(["featurize", "--in", str(wavs / "tone.wav"), "--out", str(wavs / "f.csv")]) == 0
    assert read_matrix(wavs / "f.csv").shape == (80, 498)


def test_featurize_silence_is_floor(wavs):
    main(["featurize", "--in", str(wavs / "silence.wav"), "--out", str(wavs / "s.csv")])
    assert np.all(read_matrix(wavs / "s.csv") == np.log(1e-10))


def test_featurize_resamples_and_reads_config(wavs):
    save_wav(wavs / "hi.wav", AudioClip(np.zeros(44100), 44100))
    cfg = write_json(wavs / "feat.json", {"n_mels": 40})
    assert main(["featurize", "--in", str(wavs / "hi.wav"), "--config", cfg, "--out", str(wavs / "h.csv")]) == 0
    assert read_matrix(wavs / "h.csv").shape == (40, 98)


def test_featurize_missing_file(wavs, capsys):
    assert main(["featurize", "--in", str(wavs / "nope.wav"), "--out", str(wavs / "x.csv")]) == 2
    assert "nope.wav" in capsys.readouterr().err


# ---------------------------------------------------------- augment-preview

def preview(wavs, spec, out, seed="3", extra=()):
    spec_path = write_json(wavs / "spec.json", spec)
    return main(["augment-preview", "--in", str(wavs / "tone.wav"), "--spec", spec_path,
                 "--seed", seed, "--out", str(wavs / out), *extra])


def test_preview_identity_spec_fires_nothing(wavs):
    assert preview(wavs, {}, "p") == 0
    log = json.loads((wavs / "p" / "log.json").read_text())
    assert log["transforms"] == []
    np.testing.assert_array_equal(read_matrix(wavs / "p" / "before.csv"), read_matrix(wavs / "p" / "after.csv"))
    assert {p.name for p in (wavs / "p").iterdir()} == {
        "before.wav", "after.wav", "before.csv", "after.csv", "log.json", "config.json"}


def test_preview_certain_gain(wavs):
    preview(wavs, {"gain_db": {"probability": 1.0}}, "g")
    log = json.loads((wavs / "g" / "log.json").read_text())["transforms"]
    assert len(log) == 1 and log[0]["transform"] == "gain" and -6 <= log[0]["db"] <= 6


def test_preview_is_deterministic(wavs):
    spec = {"gain_db": {"probability": 0.5}, "noise_snr_db": {"probability": 1.0}, "mixup": {"probability": 1.0},
            "nda": {"probability": 0.5}}
    extra = ["--mode", "multi-label", "--partner", str(wavs / "other.wav")]
    preview(wavs, spec, "a", extra=extra)
    preview(wavs, spec, "b", extra=extra)
    for f in (wavs / "a").iterdir():
        assert f.read_bytes() == (wavs / "b" / f.name).read_bytes()


def test_preview_rejects_mixup_in_single_label_mode(wavs):
    assert preview(wavs, {"mixup": {"probability": 0.5}}, "m") == 1
    assert not (wavs / "m").exists()


def test_preview_seed_from_environment(wavs, monkeypatch):
    monkeypatch.setenv("AEDKIT_SEED", "5")
    spec = write_json(wavs / "s.json", {"gain_db": {"probability": 1.0}})
    main(["augment-preview", "--in", str(wavs / "tone.wav"), "--spec", spec, "--out", str(wavs / "e")])
    assert json.loads((wavs / "e" / "log.json").read_text())["seed"] == 5


# ------------------------------------------------------------------ surgery

@pytest.fixture
def tiny_archive(tmp_path):
    path = tmp_path / "tiny.wtar"
    save_weights(build(ModelConfig(**dict(TINY, n_classes=4)))).save(path)
    return path


def test_surgery_replace_head_then_check(tiny_archive, tmp_path, capsys):
    out = tmp_path / "h.wtar"
    assert main(["surgery", "replace-head", "--in", str(tiny_archive), "--out", str(out), "--classes", "50"]) == 0
    assert WeightArchive.load(out)["head.bias"].shape == (50,)
    check = ["surgery", "check", "--in", str(out), "--middle-repeats", "0", "--width", "0.0625", "--classes", "50"]
    assert main(check) == 0
    assert "compatible" in capsys.readouterr().out


def test_surgery_check_reports_mismatch(tiny_archive, capsys):
    code = main(["surgery", "check", "--in", str(tiny_archive), "--middle-repeats", "0", "--width", "0.0625",
                 "--classes", "50"])
    captured = capsys.readouterr()
    assert code == 2
    assert "mismatch head.weight" in captured.out and "incompatible" in captured.err


def test_surgery_avg_channels_on_mono_archive(tiny_archive, tmp_path, capsys):
    code = main(["surgery", "avg-channels", "--in", str(tiny_archive), "--out", str(tmp_path / "x.wtar")])
    assert code == 2
    assert "input-channel dim ≠ 3" in capsys.readouterr().err


def test_surgery_delete_middle(tmp_path):
    src = tmp_path / "m.wtar"
    save_weights(build(ModelConfig(**dict(TINY, middle_repeats=2)))).save(src)
    assert main(["surgery", "delete-middle", "--in", str(src), "--out", str(tmp_path / "d.wtar"), "--keep", "1"]) == 0
    assert not any(k.startswith("middle.1.") for k in WeightArchive.load(tmp_path / "d.wtar").entries)


# ------------------------------------------------------------ train / ablate

TOY = {"kind": "toy", "toy": {"n_classes": 2, "examples_per_class": 5, "clip_seconds": 0.3}}


def test_train_writes_history_with_schedule(tmp_path):
    cfg = write_json(tmp_path / "exp.json", {
        "dataset": TOY, "output_dir": str(tmp_path / "run"), "eval_folds": [1],
        "model": TINY, "train": {"epochs": 3, "batch_size": 4},
    })
    assert main(["train", "--config", cfg]) == 0
    rows = list(csv.DictReader((tmp_path / "run" / "history_fold1.csv").open()))
    assert [float(r["lr"]) for r in rows] == [lr_at(e, TrainConfig()) for e in range(3)]
    echo = json.loads((tmp_path / "run" / "config.json").read_text())
    assert echo["train"]["epochs"] == 3 and echo["seed"] == 0


def test_train_multilabel_writes_weights(tmp_path):
    cfg = write_json(tmp_path / "exp.json", {
        "dataset": {"kind": "toy", "toy": {"n_classes": 3, "examples_per_class": 4, "clip_seconds": 0.3,
                                           "multi_label": True}},
        "output_dir": str(tmp_path / "run"), "model": TINY,
        "train": {"epochs": 2, "loss_mode": "multi-label-BCE", "batch_size": 4},
    })
    assert main(["train", "--config", cfg]) == 0
    assert WeightArchive.load(tmp_path / "run" / "weights.wtar")["head.bias"].shape == (3,)


def test_invalid_key_fails_before_any_work(tmp_path, capsys):
    out = tmp_path / "never"
    cfg = write_json(tmp_path / "bad.json", {"dataset": TOY, "output_dir": str(out), "trian": {}})
    assert main(["train", "--config", cfg]) == 1
    assert "trian" in capsys.readouterr().err
    assert not out.exists()


def test_ablate_toy_grid(tmp_path):
    grid = write_json(tmp_path / "grid.json", {
        "datasets": {"esc50": TOY},
        "entries": [{"name": "scratch", "model": TINY}, {"name": "tiny-2", "model": dict(TINY, middle_repeats=1)}],
        "output_dir": str(tmp_path / "abl"),
        "train": {"epochs": 1, "batch_size": 8},
    })
    assert main(["ablate", "--grid", grid]) == 0
    rows = list(csv.DictReader((tmp_path / "abl" / "results.csv").open()))
    assert [r["model"] for r in rows] == ["scratch", "tiny-2"]
    for r in rows:
        folds = [float(r[f"fold_{k}"]) for k in range(1, 6)]
        assert float(r["mean_accuracy"]) == pytest.approx(np.mean(folds))
    assert (tmp_path / "abl" / "config.json").exists()


def test_ablate_unknown_dataset_is_config_error(tmp_path):
    grid = write_json(tmp_path / "grid.json", {"datasets": {}, "entries": [{"name": "a"}],
                                               "output_dir": str(tmp_path / "abl")})
    assert main(["ablate", "--grid", grid]) == 1


def test_generate_toy(tmp_path):
    assert main(["generate-toy", "--out", str(tmp_path / "toy"), "--seed", "2"]) == 0
    assert (tmp_path / "toy" / "meta.csv").exists()


# ---------------------------------------------------------------- plumbing

def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as err:
        main(["featurize", "--in", "x.wav"])
    assert err.value.code == 1
    with pytest.raises(SystemExit) as err:
        main(["nonsense"])
    assert err.value.code == 1


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "aedkit", "featurize", "--in", str(tmp_path / "missing.wav"),
                           "--out", str(tmp_path / "o.csv")], capture_output=True, text=True)
    assert proc.returncode == 2 and "missing.wav" in proc.stderr


def test_train_rejects_mixup_for_single_label_before_work(tmp_path):
    out = tmp_path / "never"
    cfg = write_json(tmp_path / "m.json", {"dataset": TOY, "output_dir": str(out),
                                            "augment": {"mixup": {"probability": 0.5}}})
    assert main(["train", "--config", cfg]) == 1
    assert not out.exists()
